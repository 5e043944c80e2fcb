//! Acceptance criteria 1-9. Criteria 5-9 read the desk suite results under
//! `results/` (and `results-rerun/` for 9); run them first with
//! `hybrid-zero suite <name>`. Directories can be moved with `HZ_RESULTS`
//! and `HZ_RERUN`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use hybrid_zero::orchestrator::read_csv;
use hybrid_zero::report::{load_summary, Summary};
use hybrid_zero::suite::{Manifest, ResultRow, SuiteName, METRIC_ENTROPY};
use hybrid_zero_core::experience::{make_sample, ReplayWindow, TrainingBatch, ValueTargetMode};
use hybrid_zero_core::game::{Action, ActionSet, GameState, CELLS};
use hybrid_zero_core::hybrid::exploring_distribution;
use hybrid_zero_core::model::{Network, NetworkConfig};
use hybrid_zero_core::oracle::{count_bad_decisions, BadDecisionCount, DecisionGraph, EvalMode};
use hybrid_zero_core::planner::{
    argmax, gumbel_sample, improved_logits, improved_policy, sigma, softmax, GumbelMode, PlanConfig, PlanResult,
};
use hybrid_zero_core::selfplay::{play_episode, SelfPlayConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn results_dir(var: &str, default: &str) -> PathBuf {
    std::env::var_os(var).map(PathBuf::from).unwrap_or_else(|| workspace().join(default))
}

// ---- 1. oracle ----------------------------------------------------------

const LINES: [[usize; 3]; 8] = [[0, 1, 2], [3, 4, 5], [6, 7, 8], [0, 3, 6], [1, 4, 7], [2, 5, 8], [0, 4, 8], [2, 4, 6]];

/// Plain recursive negamax on a bare board, no shared code with the solver.
fn naive_value(board: &mut [i8; 9], mover: i8) -> i8 {
    if LINES.iter().any(|l| l.iter().all(|&c| board[c] == -mover)) {
        return -1;
    }
    if board.iter().all(|&c| c != 0) {
        return 0;
    }
    let mut best = -2;
    for c in 0..9 {
        if board[c] == 0 {
            board[c] = mover;
            best = best.max(-naive_value(board, -mover));
            board[c] = 0;
        }
    }
    best
}

fn criterion_1() -> Outcome {
    let g = DecisionGraph::solved();
    ensure(g.value(&GameState::new()) == Some(0), "root value is not 0")?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..500 {
        let mut s = GameState::new();
        let mut board = [0i8; 9];
        let mut mover = 1;
        let depth = rng.random_range(0..=9);
        for _ in 0..depth {
            if s.terminal_result().is_some() {
                break;
            }
            let legal: Vec<Action> = s.legal_actions().unwrap().iter().collect();
            let a = legal[rng.random_range(0..legal.len())];
            s = s.apply_action(a).unwrap();
            board[a.index()] = mover;
            mover = -mover;
        }
        let naive = naive_value(&mut board, mover);
        ensure(g.value(&s) == Some(naive), format!("state {i}: solver {:?}, naive {naive}", g.value(&s)))?;
    }
    let perfect = count_bad_decisions::<(), _>(&g, &EvalMode::ALL, |s, _| {
        let best = g.value(s).unwrap();
        Ok(s.legal_actions().unwrap().iter().find(|&a| g.action_value(s, a) == Some(best)).unwrap())
    })
    .unwrap();
    ensure(perfect == BadDecisionCount::default(), format!("perfect policy scored {perfect:?}"))?;
    Ok("root 0, 500 random states agree with naive minimax, perfect policy 0 in every cell".into())
}

// ---- 2. table accounting --------------------------------------------------

fn criterion_2() -> Outcome {
    let c = BadDecisionCount::from_table_row([110, 91, 104, 106], [0; 4]);
    ensure(c.headline() == 411, format!("headline {}", c.headline()))?;
    Ok("(110, 91, 104, 106) -> 411".into())
}

// ---- 3. properties ----------------------------------------------------------

fn random_logits(rng: &mut ChaCha8Rng) -> [f64; CELLS] {
    std::array::from_fn(|_| rng.random_range(-5.0..5.0))
}

fn shift_equivalence(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for i in 0..10_000 {
        let l = random_logits(rng);
        let c = rng.random_range(-50.0..50.0);
        let shifted = l.map(|v| v + c);
        ensure(argmax(&l) == argmax(&shifted), format!("argmax moved at trial {i}"))?;
        let (p, q) = (softmax(&l), softmax(&shifted));
        let err = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(err < 1e-12, format!("softmax moved by {err} at trial {i}"))?;
    }
    Ok(())
}

fn zero_temperature_limit(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let cfg = PlanConfig::default();
    for i in 0..10_000 {
        let l = random_logits(rng);
        let visits = rng.random_range(0..=20);
        let s: [f64; CELLS] = std::array::from_fn(|_| sigma(rng.random_range(0.0..1.0), visits, &cfg));
        let g = gumbel_sample(ActionSet::ALL, GumbelMode::Sampled, rng);
        let z: [f64; CELLS] = std::array::from_fn(|a| l[a] + s[a]);
        let best = argmax(&z);
        let gap = z.iter().enumerate().filter(|&(a, _)| a != best).map(|(_, &v)| z[best] - v).fold(f64::INFINITY, f64::min);
        let spread = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - g.iter().cloned().fold(f64::INFINITY, f64::min);
        // below gap / spread no Gumbel draw can reorder the top entry
        let t = 0.5 * gap / spread;
        let limit: [f64; CELLS] = std::array::from_fn(|a| g[a] + z[a] / t);
        ensure(argmax(&limit) == best, format!("T below threshold changed the choice at trial {i}"))?;
        let eager = gumbel_sample(ActionSet::ALL, GumbelMode::Zero, rng);
        ensure(eager == [0.0; CELLS], "eager mode drew non-zero noise")?;
        let eager_pick: [f64; CELLS] = std::array::from_fn(|a| eager[a] + z[a]);
        ensure(argmax(&eager_pick) == best, format!("g = 0 selection differs at trial {i}"))?;
        ensure(argmax(&improved_logits(&l, &s, 0.0)) == best, format!("T = 0 policy differs at trial {i}"))?;
    }
    Ok(())
}

fn plan_over(p: &[f64; CELLS]) -> PlanResult {
    let logits = p.map(|v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY });
    let legal = ActionSet::from_actions((0..CELLS).filter(|&c| p[c] > 0.0).map(|c| Action::new(c).unwrap()));
    let first = legal.iter().next().unwrap();
    PlanResult {
        chosen_action: first,
        improved_policy: *p,
        improved_logits: logits,
        improved_value: 0.0,
        root_value: 0.0,
        visit_counts: [0; CELLS],
        completed_q: [0.0; CELLS],
        prior_logits: logits,
        gumbel: [0.0; CELLS],
        legal,
    }
}

fn ratio_amplification(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for i in 0..10_000 {
        let support = rng.random_range(2..=CELLS);
        let mut p = [0.0; CELLS];
        for v in p.iter_mut().take(support) {
            *v = rng.random_range(0.01..1.0);
        }
        let sum: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= sum);
        let t = rng.random_range(0.01..0.99);
        let q = exploring_distribution(&plan_over(&p), t).map_err(|e| e.to_string())?;
        for a in 0..support {
            for b in 0..support {
                if p[a] > p[b] * (1.0 + 1e-6) {
                    ensure(q[a] / q[b] > p[a] / p[b], format!("ratio not amplified at trial {i}, T {t}"))?;
                }
            }
        }
    }
    Ok(())
}

/// Exhaustive: exact q from the solver, uniform and random priors.
fn improvement_over_prior(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let g = DecisionGraph::solved();
    let cfg = PlanConfig::default();
    let mut checked = 0;
    for node in g.relevant_nodes() {
        let s = node.state;
        let values = g.action_values(&s);
        let q: Vec<(usize, f64)> = values.iter().enumerate().filter_map(|(a, v)| v.map(|v| (a, v as f64))).collect();
        let (lo, hi) = q.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, v)| (lo.min(v), hi.max(v)));
        let mut sig = [0.0; CELLS];
        for &(a, v) in &q {
            sig[a] = sigma((v - lo) / (hi - lo), 1, &cfg);
        }
        let raw = random_logits(rng);
        for logits in [[0.0; CELLS], raw] {
            let masked: [f64; CELLS] = std::array::from_fn(|a| if values[a].is_some() { logits[a] } else { f64::NEG_INFINITY });
            for t in [1.0, 0.5] {
                let prior = softmax(&masked.map(|l| l / t));
                let improved = improved_policy(&masked, &sig, t);
                let expect = |p: &[f64; CELLS]| q.iter().map(|&(a, v)| p[a] * v).sum::<f64>();
                ensure(
                    expect(&improved) >= expect(&prior) - 1e-12,
                    format!("improved policy lost value at {s} (T {t})"),
                )?;
                checked += 1;
            }
        }
    }
    Ok(checked)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    shift_equivalence(&mut rng).map_err(|e| format!("shift equivalence: {e}"))?;
    zero_temperature_limit(&mut rng).map_err(|e| format!("T -> 0 limit: {e}"))?;
    ratio_amplification(&mut rng).map_err(|e| format!("ratio amplification: {e}"))?;
    let n = improvement_over_prior(&mut rng).map_err(|e| format!("policy improvement: {e}"))?;
    Ok(format!("shift, T -> 0 and ratio properties on 10^4 draws each; improvement on {n} (node, prior, T) cases"))
}

// ---- 4. gradient check ------------------------------------------------------

fn selfplay_batch(seed: u64) -> TrainingBatch {
    let net = Network::<f32>::new(NetworkConfig::micro(), seed).unwrap();
    let mut cfg = SelfPlayConfig::default();
    cfg.plan.simulations = 4;
    let mut window = ReplayWindow::new(16);
    for game in 0..4 {
        window.store(play_episode(&net, &cfg, 0, seed * 10 + game).unwrap()).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episodes: Vec<_> = window.episodes().cloned().collect();
    let samples = window
        .sample_positions(3, &mut rng)
        .into_iter()
        .map(|(g, t)| make_sample(&episodes[g], t, 2, ValueTargetMode::HybridInitial, &mut rng).unwrap())
        .collect();
    TrainingBatch { unroll_steps: 2, samples }
}

fn worst_gradient_error(seed: u64) -> f64 {
    let cfg = NetworkConfig { dynamics_grad_scale: 1.0, ..NetworkConfig::micro() };
    let mut net = Network::<f64>::new(cfg, seed).unwrap();
    // keep ReLUs off their kinks
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in net.params_mut() {
        *p += rng.random_range(-0.1..0.1);
    }
    let target = net.clone();
    let batch = selfplay_batch(seed);
    let mut grad = vec![0.0; net.params().len()];
    net.loss_and_grad_with_target(&batch, &target, &mut grad).unwrap();
    let mut scratch = grad.clone();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..grad.len() {
        let mut probe = net.clone();
        probe.params_mut()[i] += h;
        let up = probe.loss_and_grad_with_target(&batch, &target, &mut scratch).unwrap().total;
        probe.params_mut()[i] -= 2.0 * h;
        let down = probe.loss_and_grad_with_target(&batch, &target, &mut scratch).unwrap().total;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

fn criterion_4() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 1..=3 {
        worst = worst.max(worst_gradient_error(seed));
    }
    ensure(worst < 1e-3, format!("worst relative error {worst:.2e}"))?;
    Ok(format!("micro config, 3 seeds, worst relative error {worst:.2e}"))
}

// ---- 5-8. desk suites -----------------------------------------------------

fn summary(name: SuiteName) -> Result<Summary, String> {
    let dir = results_dir("HZ_RESULTS", "results").join(name.as_str());
    load_summary(&dir).map_err(|e| format!("no finished {} suite in {} ({e})", name.as_str(), dir.display()))
}

fn group<'a>(s: &'a Summary, arm: &str, eval: &str) -> Result<&'a hybrid_zero::report::GroupSummary, String> {
    s.group(arm, eval).ok_or_else(|| format!("{}: no series {arm}/{eval}", s.suite))
}

fn criterion_5() -> Outcome {
    let s = summary(SuiteName::ExplorationAb)?;
    let on = &group(&s, "on", "default")?.at_final_epoch;
    let off = &group(&s, "off", "default")?.at_final_epoch;
    let line = format!(
        "final epoch headline on {:.1} ± {:.1}, off {:.1} ± {:.1} (95%, n={})",
        on.mean, on.half_width, off.mean, off.half_width, on.n
    );
    ensure(on.n >= 3 && off.n >= 3, format!("{line}; fewer than 3 seeds"))?;
    ensure(on.mean < off.mean && on.upper() < off.lower(), line.clone())?;
    Ok(line)
}

fn criterion_6() -> Outcome {
    let s = summary(SuiteName::GumbelPlayoutAb)?;
    let d = s.difference.as_ref().ok_or("no difference in summary")?;
    let line = format!(
        "gumbel - zero over the final window {:.2} ± {:.2} (paired, n={})",
        d.final_window.mean, d.final_window.half_width, d.final_window.n
    );
    ensure(d.paired && d.final_window.mean >= 0.0, line.clone())?;
    Ok(line)
}

fn criterion_7() -> Outcome {
    let s = summary(SuiteName::DirichletAb)?;
    let noise = &group(&s, "noise", "default")?.final_window;
    let plain = &group(&s, "no_noise", "default")?.final_window;
    let mut line = format!(
        "final window headline noise {:.1} ± {:.1}, no noise {:.1} ± {:.1} (99%)",
        noise.mean, noise.half_width, plain.mean, plain.half_width
    );
    let bad_ok = noise.mean <= plain.mean;
    let e = summary(SuiteName::EntropyTrack)?;
    let (hn, hp) = (group(&e, "noise", "-")?, group(&e, "no_noise", "-")?);
    line += &format!("; mean H noise {:.3}, no noise {:.3}", hn.overall_mean, hp.overall_mean);
    let rows: Vec<ResultRow> = read_csv(&results_dir("HZ_RESULTS", "results").join("entropy_track/results.csv"))
        .map_err(|e| e.to_string())?;
    let bound = 9f64.ln();
    let in_range = rows.iter().filter(|r| r.metric == METRIC_ENTROPY).all(|r| (0.0..=bound).contains(&r.value));
    ensure(in_range, format!("{line}; entropy outside [0, ln 9]"))?;
    ensure(bad_ok && hn.overall_mean > hp.overall_mean, line.clone())?;
    Ok(line)
}

fn criterion_8() -> Outcome {
    let s = summary(SuiteName::CompoundError)?;
    let improved = group(&s, "improved", "-")?;
    let initial = group(&s, "initial", "-")?;
    let line = format!(
        "exploring-phase value error improved {:.4}, initial {:.4} (all epochs and seeds)",
        improved.overall_mean, initial.overall_mean
    );
    ensure(improved.overall_mean > initial.overall_mean, line.clone())?;
    Ok(line)
}

// ---- 9. reproducibility ---------------------------------------------------

fn files_under(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| format!("{}: {e}", dir.display()))? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "timing.csv") {
                let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    Ok(out)
}

fn criterion_9() -> Outcome {
    let suite = SuiteName::GumbelPlayoutAb;
    let (a, b) = (results_dir("HZ_RESULTS", "results"), results_dir("HZ_RERUN", "results-rerun"));
    let manifest_of = |root: &Path| -> Result<Manifest, String> {
        let path = root.join(suite.as_str()).join("manifest.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    let manifest = manifest_of(&a)?;
    ensure(manifest == manifest_of(&b)?, "the two suite runs have different manifests")?;
    let mut dirs: Vec<PathBuf> = vec![PathBuf::from(suite.as_str())];
    for arm in &manifest.arms {
        for seed in &manifest.seeds {
            dirs.push(Path::new("runs").join(&arm.training_hash).join(format!("seed-{seed}")));
        }
    }
    let (mut files, mut checkpoints) = (0, 0);
    for d in &dirs {
        let (fa, fb) = (files_under(&a.join(d))?, files_under(&b.join(d))?);
        ensure(fa.keys().eq(fb.keys()), format!("{}: different file sets", d.display()))?;
        for (name, bytes) in &fa {
            ensure(fb[name] == *bytes, format!("{} differs", d.join(name).display()))?;
            checkpoints += name.extension().is_some_and(|e| e == "ckpt") as usize;
        }
        files += fa.len();
    }
    ensure(checkpoints > 0, "no checkpoints compared")?;
    Ok(format!("{}: {files} files identical, {checkpoints} checkpoints", suite.as_str()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("oracle correctness", criterion_1),
        ("bad-decision accounting", criterion_2),
        ("softmax, selection and improvement properties", criterion_3),
        ("gradient check", criterion_4),
        ("exploration A/B", criterion_5),
        ("eager playout A/B", criterion_6),
        ("Dirichlet A/B and entropy", criterion_7),
        ("compound-error ablation", criterion_8),
        ("reproducibility", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
