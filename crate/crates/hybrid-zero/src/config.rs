//! Experiment configuration: a profile preset, overlaid by a TOML file and
//! `key.path=value` overrides, resolved into one closed parameter set.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use hybrid_zero_core::evaluation::EvalConfig;
use hybrid_zero_core::experience::ValueTargetMode;
use hybrid_zero_core::model::NetworkConfig;
use hybrid_zero_core::planner::{GumbelMode, PlanConfig};
use hybrid_zero_core::selfplay::SelfPlayConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::{Table, Value};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing configuration: {0}")]
    Parse(String),
    #[error("override `{0}` is not of the form key.path=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub games_per_epoch: usize,
    pub train_steps_per_epoch: usize,
    pub total_train_steps: usize,
    /// positions per batch before the 8-fold symmetry expansion
    pub batch_size: usize,
    /// in games
    pub window_capacity: usize,
    pub value_target_mode: ValueTargetMode,
    /// self-play threads; results are ordered by game index either way
    pub workers: usize,
}

impl ScheduleConfig {
    pub fn epochs(&self) -> u32 {
        (self.total_train_steps / self.train_steps_per_epoch) as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub gumbel_mode: GumbelMode,
    pub simulations: usize,
    pub candidates: usize,
    pub prior_temperature: f64,
    /// temperature of the search-free playout; only the greedy limit 0 is used
    pub intuition_temperature: f64,
    /// Gumbel seeds averaged per checkpoint; only the first is used with `g = 0`
    pub seeds: Vec<u64>,
    /// audit every n-th checkpoint (the last one always)
    pub every: u32,
}

impl EvaluationConfig {
    pub fn eval_configs(&self) -> Vec<EvalConfig> {
        let seeds = match self.gumbel_mode {
            GumbelMode::Zero => &self.seeds[..1],
            GumbelMode::Sampled => &self.seeds[..],
        };
        seeds
            .iter()
            .map(|&seed| EvalConfig {
                gumbel_mode: self.gumbel_mode,
                simulations: self.simulations,
                candidates: self.candidates,
                prior_temperature: self.prior_temperature,
                seed,
            })
            .collect()
    }

    pub fn hash(&self) -> String {
        hash_of(self)
    }

    pub fn selects(&self, epoch: u32, last: u32) -> bool {
        epoch == last || epoch.is_multiple_of(self.every.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub profile: Profile,
    pub seed: u64,
    pub network: NetworkConfig,
    pub selfplay: SelfPlayConfig,
    pub schedule: ScheduleConfig,
    pub evaluation: EvaluationConfig,
}

impl ExperimentConfig {
    pub fn preset(profile: Profile) -> ExperimentConfig {
        let evaluation = EvaluationConfig {
            gumbel_mode: GumbelMode::Sampled,
            simulations: 20,
            candidates: 4,
            prior_temperature: 1.0,
            intuition_temperature: 0.0,
            seeds: vec![0],
            every: 1,
        };
        match profile {
            Profile::Paper => ExperimentConfig {
                name: "paper".into(),
                profile,
                seed: 0,
                network: NetworkConfig::paper(),
                selfplay: SelfPlayConfig::default(),
                schedule: ScheduleConfig {
                    games_per_epoch: 1000,
                    train_steps_per_epoch: 40,
                    total_train_steps: 50_000,
                    batch_size: 256,
                    window_capacity: 10_000,
                    value_target_mode: ValueTargetMode::HybridInitial,
                    workers: 1,
                },
                evaluation,
            },
            Profile::Desk => ExperimentConfig {
                name: "desk".into(),
                profile,
                seed: 0,
                network: NetworkConfig { learning_rate: DESK_LEARNING_RATE, ..NetworkConfig::desk() },
                selfplay: SelfPlayConfig::default(),
                schedule: ScheduleConfig {
                    games_per_epoch: 100,
                    train_steps_per_epoch: 10,
                    total_train_steps: 1500,
                    batch_size: DESK_BATCH,
                    window_capacity: 2000,
                    value_target_mode: ValueTargetMode::HybridInitial,
                    workers: 1,
                },
                evaluation,
            },
        }
    }

    /// Resolves a partial table: the profile preset (default desk) overlaid
    /// by `table`, then by the overrides.
    pub fn resolve(table: &Table, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
        let mut user = table.clone();
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let profile = match user.get("profile") {
            Some(v) => v.clone().try_into::<Profile>().map_err(|e| ConfigError::Parse(e.to_string()))?,
            None => Profile::Desk,
        };
        let mut merged = to_table(&ExperimentConfig::preset(profile));
        merge(&mut merged, &user);
        let cfg: ExperimentConfig =
            Value::Table(merged.clone()).try_into().map_err(|e| ConfigError::Parse(e.to_string()))?;
        let (mut given, mut known) = (Vec::new(), Vec::new());
        flatten("", &merged, &mut given);
        flatten("", &to_table(&cfg), &mut known);
        let known: BTreeSet<String> = known.into_iter().map(|(k, _)| k).collect();
        if let Some((k, _)) = given.iter().find(|(k, _)| !known.contains(k)) {
            return Err(ConfigError::Parse(format!("unknown key `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        ExperimentConfig::resolve(&table, overrides)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        ExperimentConfig::from_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.network.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.selfplay.plan.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.selfplay.temperature > 0.0) {
            return invalid("selfplay.temperature must be positive".into());
        }
        let s = &self.schedule;
        if s.games_per_epoch == 0 || s.train_steps_per_epoch == 0 || s.batch_size == 0 || s.workers == 0 {
            return invalid("schedule counts must be positive".into());
        }
        if s.window_capacity == 0 {
            return invalid("schedule.window_capacity must be positive".into());
        }
        if !s.total_train_steps.is_multiple_of(s.train_steps_per_epoch) {
            return invalid("schedule.total_train_steps must be a multiple of train_steps_per_epoch".into());
        }
        let e = &self.evaluation;
        if e.intuition_temperature != 0.0 {
            return invalid("evaluation.intuition_temperature: only the greedy playout (0) is supported".into());
        }
        if e.seeds.is_empty() {
            return invalid("evaluation.seeds must not be empty".into());
        }
        for ec in e.eval_configs() {
            ec.plan_config().validate().map_err(|err| ConfigError::Invalid(format!("evaluation: {err}")))?;
        }
        Ok(())
    }

    /// Identifies everything that shapes training: the whole configuration
    /// except its name, seed and evaluation settings.
    pub fn training_hash(&self) -> String {
        let mut t = to_table(self);
        for k in ["name", "seed", "evaluation"] {
            t.remove(k);
        }
        hash_of(&t)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Dotted keys whose values differ between two configurations.
    pub fn diff(&self, other: &ExperimentConfig) -> BTreeSet<String> {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        flatten("", &to_table(self), &mut a);
        flatten("", &to_table(other), &mut b);
        let a: std::collections::BTreeMap<_, _> = a.into_iter().collect();
        let b: std::collections::BTreeMap<_, _> = b.into_iter().collect();
        a.keys()
            .chain(b.keys())
            .filter(|k| a.get(*k) != b.get(*k))
            .cloned()
            .collect()
    }

    pub fn plan_config(&self) -> &PlanConfig {
        &self.selfplay.plan
    }
}

/// Desk batch, in positions before symmetry expansion.
pub const DESK_BATCH: usize = 32;
pub const DESK_LEARNING_RATE: f64 = 1e-3;

pub fn to_table<T: Serialize>(v: &T) -> Table {
    match Value::try_from(v).expect("serializes to TOML") {
        Value::Table(t) => t,
        _ => unreachable!("structs serialize to tables"),
    }
}

/// Hex SHA-256 prefix of the canonical TOML form.
pub fn hash_of<T: Serialize>(v: &T) -> String {
    let text = toml::to_string(v).expect("serializes to TOML");
    let digest = Sha256::digest(text.as_bytes());
    let mut s = String::with_capacity(16);
    for b in &digest[..8] {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

/// Deep merge: tables merge key by key, everything else is replaced.
pub fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Sets `a.b.c` in `table`. The value is read as a TOML value, falling back
/// to a bare string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.into()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(spec.into()));
    }
    let value = parse_value(raw.trim());
    set_path(table, key, value).map_err(|_| ConfigError::Override(spec.into()))
}

pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), ()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().ok_or(())?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(()),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn flatten(prefix: &str, t: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(inner) => flatten(&key, inner, out),
            _ => out.push((key, v.clone())),
        }
    }
}
