//! The epoch loop: self-play with the epoch-start snapshot, a fixed number
//! of training steps, then checkpoint and resume state.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hybrid_zero_core::experience::{Episode, ReplayWindow};
use hybrid_zero_core::model::{ModelError, ModelParameters, Network};
use hybrid_zero_core::selfplay::{play_episode, SelfPlayError};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::store::{self, ResumeState, Stamp, StoreError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("self-play: {0}")]
    SelfPlay(#[from] SelfPlayError),
    #[error("training: {0}")]
    Model(#[from] ModelError),
    #[error("sampling: {0}")]
    Experience(#[from] hybrid_zero_core::experience::ExperienceError),
    #[error("{dir}: existing run has a different configuration ({found} != {expected})")]
    ResumeMismatch { dir: PathBuf, expected: String, found: String },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Other(String),
}

/// Layout of one training run (one configuration, one seed).
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> RunDir {
        RunDir { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn checkpoint(&self, epoch: u32) -> PathBuf {
        self.root.join("checkpoints").join(store::checkpoint_name(epoch))
    }
    pub fn episodes(&self, epoch: u32) -> PathBuf {
        self.root.join("episodes").join(store::episodes_name(epoch))
    }
    pub fn state(&self) -> PathBuf {
        self.root.join("state.bin")
    }
    pub fn epochs_csv(&self) -> PathBuf {
        self.root.join("epochs.csv")
    }
    pub fn timing_csv(&self) -> PathBuf {
        self.root.join("timing.csv")
    }

    /// Committed epochs, ascending; checkpoints past the resume state are
    /// leftovers of an interrupted epoch and are ignored.
    pub fn checkpoints(&self) -> Result<Vec<(u32, PathBuf)>, RunError> {
        let last = self.committed_epoch()?;
        let Some(last) = last else { return Ok(Vec::new()) };
        Ok((0..=last).map(|e| (e, self.checkpoint(e))).filter(|(_, p)| p.exists()).collect())
    }

    pub fn committed_epoch(&self) -> Result<Option<u32>, RunError> {
        if !self.state().exists() {
            return Ok(None);
        }
        let cfg = self.load_config()?;
        Ok(Some(store::load_state(&self.state(), &stamp(&cfg))?.epoch))
    }

    pub fn load_config(&self) -> Result<ExperimentConfig, RunError> {
        Ok(ExperimentConfig::load(&self.config(), &[])?)
    }
}

pub fn stamp(cfg: &ExperimentConfig) -> Stamp {
    Stamp { training_hash: cfg.training_hash(), seed: cfg.seed }
}

#[derive(Debug, Clone, Copy)]
#[repr(u32)]
pub enum Stream {
    Init = 0,
    SelfPlay = 1,
    Training = 2,
}

/// Independent generator per (seed, epoch, purpose); a resumed run draws
/// exactly what an uninterrupted one would.
pub fn derive_rng(seed: u64, epoch: u32, stream: Stream) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&epoch.to_le_bytes());
    key[12..16].copy_from_slice(&(stream as u32).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u32,
    pub games: usize,
    pub train_steps: usize,
    pub loss_total: f64,
    pub loss_policy: f64,
    pub loss_value: f64,
    pub loss_similarity: f64,
    pub loss_weight_decay: f64,
    pub checkpoint: String,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Plays `cfg.schedule.games_per_epoch` games with `net`. Game `i` is seeded
/// by the `i`-th draw of the epoch's self-play stream and the result is in
/// game order whatever the worker count.
pub fn self_play_phase(cfg: &ExperimentConfig, net: &Network<f32>, epoch: u32) -> Result<Vec<Episode>, RunError> {
    let mut rng = derive_rng(cfg.seed, epoch, Stream::SelfPlay);
    let seeds: Vec<u64> = (0..cfg.schedule.games_per_epoch).map(|_| rng.next_u64()).collect();
    let played_by = epoch - 1;
    let workers = cfg.schedule.workers.min(seeds.len()).max(1);
    if workers == 1 {
        return seeds
            .iter()
            .map(|&s| play_episode(net, &cfg.selfplay, played_by, s).map_err(RunError::from))
            .collect();
    }
    let chunk = seeds.len().div_ceil(workers);
    let results: Vec<Result<Vec<Episode>, SelfPlayError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || part.iter().map(|&s| play_episode(net, &cfg.selfplay, played_by, s)).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("self-play worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(seeds.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// One epoch. On error nothing is written and `params`/`window` are left as
/// they were.
pub fn run_epoch(
    cfg: &ExperimentConfig,
    params: &mut ModelParameters,
    window: &mut ReplayWindow,
    run: &RunDir,
) -> Result<EpochReport, RunError> {
    let started = Instant::now();
    let epoch = params.epoch + 1;
    let episodes = self_play_phase(cfg, &params.network, epoch)?;

    let mut next_window = window.clone();
    for ep in &episodes {
        next_window.store(ep.clone())?;
    }
    let mut next = params.clone();
    let mut rng = derive_rng(cfg.seed, epoch, Stream::Training);
    let steps = cfg.schedule.train_steps_per_epoch;
    let mut sums = [0.0f64; 5];
    for _ in 0..steps {
        let batch = next_window.sample_batch(
            cfg.schedule.batch_size,
            cfg.network.unroll_steps,
            cfg.schedule.value_target_mode,
            &mut rng,
        )?;
        let l = next.train_step(&batch)?;
        for (s, v) in sums.iter_mut().zip([l.total, l.policy, l.value, l.similarity, l.weight_decay]) {
            *s += v;
        }
    }
    next.epoch = epoch;

    let st = stamp(cfg);
    let ckpt = run.checkpoint(epoch);
    store::write_atomic(&run.episodes(epoch), &store::encode_episode_file(&st, epoch, &episodes))?;
    store::save_checkpoint(&ckpt, &st, epoch, &next.network)?;
    let n = steps as f64;
    let report = EpochReport {
        epoch,
        games: episodes.len(),
        train_steps: steps,
        loss_total: sums[0] / n,
        loss_policy: sums[1] / n,
        loss_value: sums[2] / n,
        loss_similarity: sums[3] / n,
        loss_weight_decay: sums[4] / n,
        checkpoint: ckpt.strip_prefix(&run.root).unwrap_or(&ckpt).display().to_string(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    upsert_rows(&run.epochs_csv(), epoch, std::slice::from_ref(&report), |r: &EpochReport| r.epoch)?;
    let timing = Timing { epoch, wall_time_s: report.wall_time_s };
    upsert_rows(&run.timing_csv(), epoch, &[timing], |r: &Timing| r.epoch)?;
    // the resume state is the commit point of the epoch
    let state = ResumeState { epoch, optimizer: next.optimizer.clone(), window: next_window.clone() };
    store::write_atomic(&run.state(), &store::encode_state(&st, &state))?;

    *params = next;
    *window = next_window;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Timing {
    epoch: u32,
    wall_time_s: f64,
}

/// Replaces the rows at or after `epoch` with `rows`.
pub fn upsert_rows<T, F>(path: &Path, epoch: u32, rows: &[T], key: F) -> Result<(), RunError>
where
    T: Serialize + for<'de> Deserialize<'de>,
    F: Fn(&T) -> u32,
{
    let mut all: Vec<T> = if path.exists() { read_csv(path)? } else { Vec::new() };
    all.retain(|r| key(r) < epoch);
    let mut all: Vec<&T> = all.iter().collect();
    all.extend(rows);
    write_csv(path, all)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, RunError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_csv<T: Serialize, I: IntoIterator<Item = T>>(path: &Path, rows: I) -> Result<(), RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| RunError::Other(e.to_string()))?;
    Ok(store::write_atomic(path, &bytes)?)
}

/// Trains until the configured step budget, resuming from `dir` when it
/// holds an earlier run of the same configuration and seed. Returns the
/// checkpoint series.
pub fn run_training(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<(u32, PathBuf)>, RunError> {
    run_training_until(cfg, dir, cfg.schedule.epochs(), |_| {})
}

/// As [`run_training`], stopping after `last` epochs; `progress` sees every
/// finished epoch.
pub fn run_training_until<F: FnMut(&EpochReport)>(
    cfg: &ExperimentConfig,
    dir: &Path,
    last: u32,
    mut progress: F,
) -> Result<Vec<(u32, PathBuf)>, RunError> {
    let run = RunDir::new(dir);
    let st = stamp(cfg);
    if run.config().exists() {
        let old = run.load_config()?;
        let old_stamp = stamp(&old);
        if old_stamp != st {
            return Err(RunError::ResumeMismatch {
                dir: dir.to_path_buf(),
                expected: format!("{}/{}", st.training_hash, st.seed),
                found: format!("{}/{}", old_stamp.training_hash, old_stamp.seed),
            });
        }
    } else {
        fs::create_dir_all(dir).map_err(|source| StoreError::Io { path: dir.to_path_buf(), source })?;
    }
    // evaluation settings may change between invocations; keep them current
    store::write_atomic(&run.config(), cfg.to_toml().as_bytes())?;

    let (mut params, mut window) = if run.state().exists() {
        let state = store::load_state(&run.state(), &st)?;
        let (_, epoch, net) = store::load_checkpoint(&run.checkpoint(state.epoch), Some(&st))?;
        if epoch != state.epoch {
            return Err(RunError::Other(format!("checkpoint epoch {epoch} != resume epoch {}", state.epoch)));
        }
        let params = store::restore_parameters(net, &state).map_err(RunError::Other)?;
        (params, state.window)
    } else {
        let init_seed = derive_rng(cfg.seed, 0, Stream::Init).next_u64();
        let params = ModelParameters::new(cfg.network.clone(), init_seed)?;
        let window = ReplayWindow::new(cfg.schedule.window_capacity);
        store::save_checkpoint(&run.checkpoint(0), &st, 0, &params.network)?;
        let state = ResumeState { epoch: 0, optimizer: params.optimizer.clone(), window: window.clone() };
        store::write_atomic(&run.state(), &store::encode_state(&st, &state))?;
        (params, window)
    };
    while params.epoch < last.min(cfg.schedule.epochs()) {
        let report = run_epoch(cfg, &mut params, &mut window, &run)?;
        progress(&report);
    }
    run.checkpoints()
}
