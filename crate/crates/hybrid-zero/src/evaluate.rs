//! Audits every checkpoint of a run against the solved graph and records
//! the per-epoch entropy and value-error series.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use hybrid_zero_core::evaluation::{audit_modes, exploring_value_error, root_policy_entropy};
use hybrid_zero_core::game::Player;
use hybrid_zero_core::oracle::{BadDecisionCount, DecisionGraph, EvalMode, Scope};
use serde::{Deserialize, Serialize};

use crate::config::EvaluationConfig;
use crate::orchestrator::{read_csv, stamp, write_csv, RunDir, RunError};
use crate::store;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: u32,
    pub eval_hash: String,
    pub eval_seed: u64,
    pub player: String,
    pub mode: String,
    pub scope: String,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: u32,
    pub entropy: f64,
}

/// Mean `|v^0_t - v*(s_t)|` over the exploring-phase decisions of the games
/// played in `epoch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueErrorRow {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: u32,
    pub mae: f64,
    pub states: usize,
}

pub fn player_label(p: Player) -> &'static str {
    match p {
        Player::X => "x",
        Player::O => "o",
    }
}

impl RunDir {
    pub fn eval_dir(&self, eval: &EvaluationConfig) -> PathBuf {
        self.root.join("eval").join(eval.hash())
    }
    pub fn audit_csv(&self, eval: &EvaluationConfig) -> PathBuf {
        self.eval_dir(eval).join("audit.csv")
    }
    pub fn entropy_csv(&self) -> PathBuf {
        self.root.join("entropy.csv")
    }
    pub fn value_error_csv(&self) -> PathBuf {
        self.root.join("value_error.csv")
    }
}

fn rows_for(counts: &BadDecisionCount, hash: &str, seed: u64, epoch: u32, eval_hash: &str, eval_seed: u64, modes: &[EvalMode]) -> Vec<AuditRow> {
    counts
        .iter()
        .filter(|(_, m, _, _)| modes.contains(m))
        .map(|(p, m, s, c)| AuditRow {
            config_hash: hash.to_string(),
            seed,
            epoch,
            eval_hash: eval_hash.to_string(),
            eval_seed,
            player: player_label(p).into(),
            mode: m.label().into(),
            scope: s.label().into(),
            count: c,
        })
        .collect()
}

/// Audits the selected checkpoints not yet in the run's audit file. The
/// search-free mode does not depend on the Gumbel seed and is computed once
/// per checkpoint, then listed under every seed.
pub fn audit_run(run: &RunDir, eval: &EvaluationConfig, graph: &DecisionGraph) -> Result<PathBuf, RunError> {
    let cfg = run.load_config()?;
    let st = stamp(&cfg);
    let path = run.audit_csv(eval);
    let mut rows: Vec<AuditRow> = if path.exists() { read_csv(&path)? } else { Vec::new() };
    let done: BTreeSet<u32> = rows.iter().map(|r| r.epoch).collect();
    store::write_atomic(&run.eval_dir(eval).join("evaluation.toml"), toml::to_string(eval).unwrap().as_bytes())?;
    let ckpts = run.checkpoints()?;
    let last = ckpts.last().map_or(0, |c| c.0);
    let eval_hash = eval.hash();
    let mut fresh = false;
    for (epoch, ckpt) in ckpts {
        if done.contains(&epoch) || !eval.selects(epoch, last) {
            continue;
        }
        let (_, _, net) = store::load_checkpoint(&ckpt, Some(&st))?;
        let configs = eval.eval_configs();
        let intuition = audit_modes(&net, graph, &configs[0], &[EvalMode::Intuition]).map_err(|e| RunError::Other(e.to_string()))?;
        for ec in &configs {
            let planning = audit_modes(&net, graph, ec, &[EvalMode::Planning]).map_err(|e| RunError::Other(e.to_string()))?;
            rows.extend(rows_for(&intuition, &st.training_hash, st.seed, epoch, &eval_hash, ec.seed, &[EvalMode::Intuition]));
            rows.extend(rows_for(&planning, &st.training_hash, st.seed, epoch, &eval_hash, ec.seed, &[EvalMode::Planning]));
        }
        fresh = true;
    }
    if fresh || !path.exists() {
        rows.sort_by(|a, b| {
            (a.epoch, a.eval_seed, &a.mode, &a.player, &a.scope).cmp(&(b.epoch, b.eval_seed, &b.mode, &b.player, &b.scope))
        });
        write_csv(&path, &rows)?;
    }
    Ok(path)
}

/// Entropy at the empty board for every checkpoint and exploring-phase
/// value error for every episode file. Recomputed in full; both are cheap.
pub fn run_metrics(run: &RunDir, graph: &DecisionGraph) -> Result<(), RunError> {
    let cfg = run.load_config()?;
    let st = stamp(&cfg);
    let mut entropy = Vec::new();
    let mut errors = Vec::new();
    for (epoch, ckpt) in run.checkpoints()? {
        let (_, _, net) = store::load_checkpoint(&ckpt, Some(&st))?;
        let h = root_policy_entropy(&net)?;
        entropy.push(EntropyRow { config_hash: st.training_hash.clone(), seed: st.seed, epoch, entropy: h });
        if epoch == 0 {
            continue;
        }
        let (_, eps) = store::load_episode_file(&run.episodes(epoch), Some(&st))?;
        let (mae, states) = exploring_value_error(graph, &eps)?;
        errors.push(ValueErrorRow { config_hash: st.training_hash.clone(), seed: st.seed, epoch, mae, states });
    }
    write_csv(&run.entropy_csv(), &entropy)?;
    write_csv(&run.value_error_csv(), &errors)?;
    Ok(())
}

/// Headline per epoch: the four all-node counts summed, averaged over the
/// Gumbel seeds.
pub fn headline_series(rows: &[AuditRow]) -> Vec<(u32, f64)> {
    per_epoch(rows, |r| r.scope == Scope::AllNodes.label())
}

/// Planning-mode all-node count per epoch, averaged over Gumbel seeds.
pub fn planning_series(rows: &[AuditRow]) -> Vec<(u32, f64)> {
    per_epoch(rows, |r| r.scope == Scope::AllNodes.label() && r.mode == EvalMode::Planning.label())
}

fn per_epoch<F: Fn(&AuditRow) -> bool>(rows: &[AuditRow], keep: F) -> Vec<(u32, f64)> {
    let mut acc: std::collections::BTreeMap<u32, (f64, BTreeSet<u64>)> = Default::default();
    for r in rows.iter().filter(|r| keep(r)) {
        let e = acc.entry(r.epoch).or_default();
        e.0 += r.count as f64;
        e.1.insert(r.eval_seed);
    }
    acc.into_iter().map(|(epoch, (sum, seeds))| (epoch, sum / seeds.len() as f64)).collect()
}

pub fn load_audit(path: &Path) -> Result<Vec<AuditRow>, RunError> {
    read_csv(path)
}
