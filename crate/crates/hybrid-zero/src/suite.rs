//! Named A/B experiment suites: arms of one base configuration that differ
//! only in declared keys, trained per seed and audited under one or more
//! evaluation variants.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use hybrid_zero_core::oracle::DecisionGraph;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::config::{hash_of, set_path, to_table, EvaluationConfig, ExperimentConfig};
use crate::evaluate::{audit_run, headline_series, load_audit, planning_series, run_metrics, EntropyRow, ValueErrorRow};
use crate::orchestrator::{read_csv, write_csv, RunDir, RunError};
use crate::report::ReportSpec;
use crate::store;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteName {
    ExplorationAb,
    GumbelPlayoutAb,
    DirichletAb,
    CompoundError,
    EntropyTrack,
}

impl SuiteName {
    pub const ALL: [SuiteName; 5] = [
        SuiteName::ExplorationAb,
        SuiteName::GumbelPlayoutAb,
        SuiteName::DirichletAb,
        SuiteName::CompoundError,
        SuiteName::EntropyTrack,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SuiteName::ExplorationAb => "exploration_ab",
            SuiteName::GumbelPlayoutAb => "gumbel_playout_ab",
            SuiteName::DirichletAb => "dirichlet_ab",
            SuiteName::CompoundError => "compound_error",
            SuiteName::EntropyTrack => "entropy_track",
        }
    }
}

/// A named set of dotted-key overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub set: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub suite: SuiteName,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: Table,
    pub arms: Vec<Variant>,
    /// keys relative to the `evaluation` table
    #[serde(default = "default_evals")]
    pub evals: Vec<Variant>,
    pub report: ReportSpec,
}

fn default_evals() -> Vec<Variant> {
    vec![Variant { name: "default".into(), set: BTreeMap::new() }]
}

impl SuiteSpec {
    pub fn from_str(text: &str) -> Result<SuiteSpec, RunError> {
        let spec: SuiteSpec = toml::from_str(text).map_err(|e| RunError::Other(format!("suite: {e}")))?;
        spec.check()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<SuiteSpec, RunError> {
        SuiteSpec::from_str(&String::from_utf8_lossy(&store::read(path)?))
    }

    /// Configuration of one arm and seed.
    pub fn arm_config(&self, arm: &Variant, seed: u64, overrides: &[String]) -> Result<ExperimentConfig, RunError> {
        let mut t = self.base.clone();
        for (k, v) in &arm.set {
            set_path(&mut t, k, v.clone()).map_err(|_| RunError::Other(format!("arm {}: bad key {k}", arm.name)))?;
        }
        t.insert("seed".into(), Value::Integer(seed as i64));
        t.insert("name".into(), Value::String(format!("{}/{}", self.suite.as_str(), arm.name)));
        Ok(ExperimentConfig::resolve(&t, overrides)?)
    }

    pub fn eval_config(&self, base: &EvaluationConfig, variant: &Variant) -> Result<EvaluationConfig, RunError> {
        let mut t = to_table(base);
        for (k, v) in &variant.set {
            set_path(&mut t, k, v.clone()).map_err(|_| RunError::Other(format!("eval {}: bad key {k}", variant.name)))?;
        }
        let e: EvaluationConfig = Value::Table(t).try_into().map_err(|e| RunError::Other(format!("eval {}: {e}", variant.name)))?;
        Ok(e)
    }

    fn check(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Other(m));
        if self.seeds.len() < 2 {
            return bad("a suite needs at least 2 seeds".into());
        }
        let names: BTreeSet<&str> = self.arms.iter().map(|a| a.name.as_str()).collect();
        if self.arms.is_empty() || names.len() != self.arms.len() {
            return bad("arm names must be present and unique".into());
        }
        let evals: BTreeSet<&str> = self.evals.iter().map(|a| a.name.as_str()).collect();
        if self.evals.is_empty() || evals.len() != self.evals.len() {
            return bad("eval names must be present and unique".into());
        }
        self.report.check(&names, &evals)
    }

    /// Every pair of arms may differ only in keys one of them declares.
    pub fn check_arm_isolation(&self, overrides: &[String]) -> Result<(), RunError> {
        let seed = self.seeds[0];
        let cfgs: Vec<ExperimentConfig> =
            self.arms.iter().map(|a| self.arm_config(a, seed, overrides)).collect::<Result<_, _>>()?;
        for i in 0..cfgs.len() {
            for j in i + 1..cfgs.len() {
                let declared: BTreeSet<&String> = self.arms[i].set.keys().chain(self.arms[j].set.keys()).collect();
                for k in cfgs[i].diff(&cfgs[j]) {
                    if k != "name" && !declared.contains(&k) {
                        return Err(RunError::Other(format!(
                            "arms {} and {} differ in undeclared key {k}",
                            self.arms[i].name, self.arms[j].name
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Where a suite puts its outputs; training runs live under `runs/` keyed
/// by training hash and seed, so suites sharing an arm share its runs.
#[derive(Debug, Clone)]
pub struct ResultsDir {
    pub root: PathBuf,
}

impl ResultsDir {
    pub fn new(root: impl Into<PathBuf>) -> ResultsDir {
        ResultsDir { root: root.into() }
    }
    pub fn run(&self, cfg: &ExperimentConfig) -> RunDir {
        RunDir::new(self.root.join("runs").join(cfg.training_hash()).join(format!("seed-{}", cfg.seed)))
    }
    pub fn suite(&self, name: SuiteName) -> PathBuf {
        self.root.join(name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestArm {
    pub name: String,
    pub training_hash: String,
    pub config: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEval {
    pub name: String,
    pub eval_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub suite: SuiteName,
    pub seeds: Vec<u64>,
    pub overrides: Vec<String>,
    pub arms: Vec<ManifestArm>,
    pub evals: Vec<ManifestEval>,
    pub spec: String,
}

impl Manifest {
    pub fn hash(&self) -> String {
        hash_of(self)
    }
}

/// One long-format result value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub suite: String,
    pub arm: String,
    pub eval: String,
    pub seed: u64,
    pub epoch: u32,
    pub metric: String,
    pub value: f64,
}

pub const METRIC_HEADLINE: &str = "headline";
pub const METRIC_PLANNING: &str = "planning";
pub const METRIC_ENTROPY: &str = "entropy";
pub const METRIC_VALUE_ERROR: &str = "value_error";
/// eval column for metrics that do not depend on the evaluation variant
pub const NO_EVAL: &str = "-";

pub fn build_manifest(spec: &SuiteSpec, overrides: &[String]) -> Result<Manifest, RunError> {
    let mut arms = Vec::new();
    let mut evals = Vec::new();
    for a in &spec.arms {
        let cfg = spec.arm_config(a, spec.seeds[0], overrides)?;
        let mut shown = cfg.clone();
        shown.seed = 0;
        arms.push(ManifestArm { name: a.name.clone(), training_hash: cfg.training_hash(), config: shown.to_toml() });
        if evals.is_empty() {
            for e in &spec.evals {
                evals.push(ManifestEval { name: e.name.clone(), eval_hash: spec.eval_config(&cfg.evaluation, e)?.hash() });
            }
        }
    }
    Ok(Manifest {
        suite: spec.suite,
        seeds: spec.seeds.clone(),
        overrides: overrides.to_vec(),
        arms,
        evals,
        spec: toml::to_string(spec).map_err(|e| RunError::Other(e.to_string()))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress<'a> {
    Training { arm: &'a str, seed: u64 },
    Epoch { arm: &'a str, seed: u64, epoch: u32, of: u32 },
    Evaluating { arm: &'a str, seed: u64, eval: &'a str },
}

/// Trains and evaluates every arm and seed (skipping finished work), then
/// writes the manifest and the suite's `results.csv`.
pub fn run_experiment_suite<F: FnMut(Progress<'_>)>(
    spec: &SuiteSpec,
    overrides: &[String],
    out: &ResultsDir,
    mut progress: F,
) -> Result<PathBuf, RunError> {
    spec.check_arm_isolation(overrides)?;
    let manifest = build_manifest(spec, overrides)?;
    let dir = out.suite(spec.suite);
    let mut text = toml::to_string(&manifest).map_err(|e| RunError::Other(e.to_string()))?;
    text.push_str(&format!("\n# manifest hash {}\n", manifest.hash()));
    store::write_atomic(&dir.join("manifest.toml"), text.as_bytes())?;
    let graph = DecisionGraph::solved();
    for arm in &spec.arms {
        for &seed in &spec.seeds {
            let cfg = spec.arm_config(arm, seed, overrides)?;
            let run = out.run(&cfg);
            progress(Progress::Training { arm: &arm.name, seed });
            let of = cfg.schedule.epochs();
            crate::orchestrator::run_training_until(&cfg, &run.root, of, |r| {
                progress(Progress::Epoch { arm: &arm.name, seed, epoch: r.epoch, of })
            })?;
            for e in &spec.evals {
                progress(Progress::Evaluating { arm: &arm.name, seed, eval: &e.name });
                audit_run(&run, &spec.eval_config(&cfg.evaluation, e)?, &graph)?;
            }
            run_metrics(&run, &graph)?;
        }
    }
    collect_results(spec, overrides, out)
}

/// Gathers the per-run files of a finished suite into `results.csv`.
pub fn collect_results(spec: &SuiteSpec, overrides: &[String], out: &ResultsDir) -> Result<PathBuf, RunError> {
    let suite = spec.suite.as_str();
    let mut rows = Vec::new();
    for arm in &spec.arms {
        for &seed in &spec.seeds {
            let cfg = spec.arm_config(arm, seed, overrides)?;
            let run = out.run(&cfg);
            let mut push = |eval: &str, metric: &str, series: Vec<(u32, f64)>| {
                for (epoch, value) in series {
                    rows.push(ResultRow {
                        suite: suite.into(),
                        arm: arm.name.clone(),
                        eval: eval.into(),
                        seed,
                        epoch,
                        metric: metric.into(),
                        value,
                    });
                }
            };
            for e in &spec.evals {
                let audit = load_audit(&run.audit_csv(&spec.eval_config(&cfg.evaluation, e)?))?;
                push(&e.name, METRIC_HEADLINE, headline_series(&audit));
                push(&e.name, METRIC_PLANNING, planning_series(&audit));
            }
            let ent: Vec<EntropyRow> = read_csv(&run.entropy_csv())?;
            push(NO_EVAL, METRIC_ENTROPY, ent.iter().map(|r| (r.epoch, r.entropy)).collect());
            let ve: Vec<ValueErrorRow> = read_csv(&run.value_error_csv())?;
            push(NO_EVAL, METRIC_VALUE_ERROR, ve.iter().filter(|r| r.states > 0).map(|r| (r.epoch, r.mae)).collect());
        }
    }
    let path = out.suite(spec.suite).join("results.csv");
    write_csv(&path, &rows)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TINY_SUITE: &str = r#"
suite = "dirichlet_ab"
seeds = [0, 1]

[base]
profile = "desk"
[base.network]
residual_blocks = 1
channels = 2
bottleneck_channels = 2
projector_hidden = 8
projector_out = 4
predictor_hidden = 8
predictor_out = 4
unroll_steps = 2
[base.schedule]
games_per_epoch = 4
train_steps_per_epoch = 1
total_train_steps = 2
batch_size = 4
window_capacity = 8
[base.selfplay.plan]
simulations = 6
[base.evaluation]
simulations = 6

[[arms]]
name = "noise"
set = { "selfplay.plan.dirichlet_fraction" = 0.25 }

[[arms]]
name = "no_noise"
set = { "selfplay.plan.dirichlet_fraction" = 0.0 }

[report]
figure = "figure7"
metric = "headline"
comparison = "unpaired_difference"
level = "0.99"
minuend = { arm = "no_noise", eval = "default" }
subtrahend = { arm = "noise", eval = "default" }
"#;

    #[test]
    fn arms_share_everything_but_the_switch() {
        let spec = SuiteSpec::from_str(TINY_SUITE).unwrap();
        spec.check_arm_isolation(&[]).unwrap();
        let a = spec.arm_config(&spec.arms[0], 0, &[]).unwrap();
        let b = spec.arm_config(&spec.arms[1], 0, &[]).unwrap();
        let keys: Vec<String> = a.diff(&b).into_iter().collect();
        assert_eq!(keys, ["name", "selfplay.plan.dirichlet_fraction"]);

        // switching the profile changes every preset value behind the arm's back
        let mut leaky = spec.clone();
        leaky.arms[1].set.insert("profile".into(), Value::String("paper".into()));
        assert!(leaky.check_arm_isolation(&[]).is_err());
    }

    #[test]
    fn suite_runs_resume_and_reproduce() {
        let spec = SuiteSpec::from_str(TINY_SUITE).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = run_experiment_suite(&spec, &[], &ResultsDir::new(a.path()), |_| {}).unwrap();
        let pb = run_experiment_suite(&spec, &[], &ResultsDir::new(b.path()), |_| {}).unwrap();
        let ra = std::fs::read(&pa).unwrap();
        assert_eq!(ra, std::fs::read(&pb).unwrap());
        let rows: Vec<ResultRow> = read_csv(&pa).unwrap();
        // 2 arms x 2 seeds x (3 checkpoints x 3 series + 2 value-error epochs)
        assert!(rows.len() >= 2 * 2 * (3 * 3));
        // rerun is a no-op
        run_experiment_suite(&spec, &[], &ResultsDir::new(a.path()), |_| {}).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), ra);
        let manifest = std::fs::read_to_string(a.path().join("dirichlet_ab/manifest.toml")).unwrap();
        assert!(manifest.contains("manifest hash"));
    }

    #[test]
    fn rejects_malformed_suites() {
        assert!(SuiteSpec::from_str(&TINY_SUITE.replace("seeds = [0, 1]", "seeds = [0]")).is_err());
        assert!(SuiteSpec::from_str(&TINY_SUITE.replace("name = \"no_noise\"", "name = \"noise\"")).is_err());
        assert!(SuiteSpec::from_str(&TINY_SUITE.replace("arm = \"no_noise\"", "arm = \"missing\"")).is_err());
    }

    #[test]
    fn reproduce_suites_parse_and_isolate_arms() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../reproduce");
        for name in SuiteName::ALL {
            let spec = SuiteSpec::load(&dir.join(format!("{}.toml", name.as_str()))).unwrap();
            assert_eq!(spec.suite, name);
            assert!(spec.seeds.len() >= 3);
            spec.check_arm_isolation(&[]).unwrap();
            for arm in &spec.arms {
                let cfg = spec.arm_config(arm, spec.seeds[0], &[]).unwrap();
                assert_eq!(cfg.profile, crate::config::Profile::Desk);
                cfg.validate().unwrap();
            }
        }
    }
}
