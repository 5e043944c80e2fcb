//! Episodes, the sliding replay window, and unrolled training batches with
//! 8-fold symmetry augmentation.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{Action, GameError, GameState, Observation, SymmetryTransform, TerminalResult, CELLS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Exploring,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub t: u32,
    pub phase: Phase,
    pub action: Action,
    /// improved policy, the policy training target
    pub p_normal: [f32; CELLS],
    /// `v^0_t` from initial inference of the acting model
    pub root_value: f32,
    /// the planner's improved value `v_mix`
    pub improved_value: f32,
}

/// How value targets before `t_start_normal` are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueTargetMode {
    /// stored `v^0_t` of the acting model
    HybridInitial,
    /// stored improved value `v_mix`
    HybridImproved,
    /// signed terminal reward everywhere
    Plain,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperienceError {
    #[error("episode is not terminal")]
    NotTerminal,
    #[error("episode replay failed: {0}")]
    Replay(#[from] GameError),
    #[error("record {index} has time {found}")]
    BadTime { index: usize, found: u32 },
    #[error("stored result does not match the replayed game")]
    ResultMismatch,
    #[error("corrupt episode store at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: &'static str },
    #[error("unsupported episode store version {0}")]
    Version(u16),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub records: Vec<DecisionRecord>,
    pub result: TerminalResult,
    pub t_start_normal: u32,
    /// epoch of the network that played the game
    pub epoch: u32,
    pub seed: u64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn actions(&self) -> impl Iterator<Item = Action> + '_ {
        self.records.iter().map(|r| r.action)
    }

    /// All states `s_0 ..= s_T`, terminal state included.
    pub fn states(&self) -> Result<Vec<GameState>, ExperienceError> {
        let mut s = GameState::new();
        let mut out = Vec::with_capacity(self.len() + 1);
        out.push(s);
        for r in &self.records {
            s = s.apply_action(r.action)?;
            out.push(s);
        }
        Ok(out)
    }

    pub fn observations(&self) -> Result<Vec<Observation>, ExperienceError> {
        Ok(self.states()?.iter().map(|s| s.observe()).collect())
    }

    /// Replays the actions and checks times and the recorded result.
    pub fn validate(&self) -> Result<(), ExperienceError> {
        for (i, r) in self.records.iter().enumerate() {
            if r.t as usize != i {
                return Err(ExperienceError::BadTime { index: i, found: r.t });
            }
        }
        let states = self.states()?;
        let last = states.last().expect("initial state");
        match last.terminal_result() {
            None => Err(ExperienceError::NotTerminal),
            Some(res) if res != self.result => Err(ExperienceError::ResultMismatch),
            Some(_) => Ok(()),
        }
    }

    /// Reward of the final move for the player who made it.
    pub fn terminal_reward(&self) -> f32 {
        self.result.reward_to_last_mover()
    }

    /// Value target for time `t` from the perspective of the player to move
    /// at `t`. Times at or past the end get the terminal state's own value.
    pub fn value_target(&self, t: usize, mode: ValueTargetMode) -> f32 {
        let end = self.len();
        let r = self.terminal_reward();
        if t >= end {
            return -r;
        }
        let before_switch = t < self.t_start_normal as usize;
        match mode {
            ValueTargetMode::HybridInitial if before_switch => self.records[t].root_value,
            ValueTargetMode::HybridImproved if before_switch => self.records[t].improved_value,
            _ => {
                if (end - 1 - t).is_multiple_of(2) {
                    r
                } else {
                    -r
                }
            }
        }
    }

    pub fn value_targets(&self, mode: ValueTargetMode) -> Vec<f32> {
        (0..=self.len()).map(|t| self.value_target(t, mode)).collect()
    }
}

/// The most recent `capacity` episodes, evicted first-in first-out.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayWindow {
    capacity: usize,
    episodes: VecDeque<Episode>,
    positions: usize,
}

impl ReplayWindow {
    pub fn new(capacity: usize) -> ReplayWindow {
        ReplayWindow { capacity, episodes: VecDeque::new(), positions: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Number of decision positions across all stored games.
    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn store(&mut self, ep: Episode) -> Result<(), ExperienceError> {
        ep.validate()?;
        self.positions += ep.len();
        self.episodes.push_back(ep);
        while self.episodes.len() > self.capacity {
            let old = self.episodes.pop_front().expect("non-empty");
            self.positions -= old.len();
        }
        Ok(())
    }

    /// `count` positions drawn uniformly over all (game, time) pairs.
    pub fn sample_positions<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
        if self.positions == 0 {
            return Vec::new();
        }
        let mut cumulative = Vec::with_capacity(self.episodes.len());
        let mut acc = 0;
        for ep in &self.episodes {
            acc += ep.len();
            cumulative.push(acc);
        }
        (0..count)
            .map(|_| {
                let u = rng.random_range(0..self.positions);
                let g = cumulative.partition_point(|&c| c <= u);
                let start = if g == 0 { 0 } else { cumulative[g - 1] };
                (g, u - start)
            })
            .collect()
    }

    /// Samples `batch_size` positions and expands each into its 8 symmetry
    /// images, giving `8 * batch_size` training samples.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        unroll_steps: usize,
        mode: ValueTargetMode,
        rng: &mut R,
    ) -> Result<TrainingBatch, ExperienceError> {
        let picks = self.sample_positions(batch_size, rng);
        let mut samples = Vec::with_capacity(picks.len() * 8);
        for (g, t) in picks {
            let base = make_sample(&self.episodes[g], t, unroll_steps, mode, rng)?;
            for tr in SymmetryTransform::all() {
                samples.push(base.transform(tr));
            }
        }
        Ok(TrainingBatch { unroll_steps, samples })
    }
}

/// One unrolled training position. Step `τ = 0..=K` targets are indexed
/// directly; `actions` and `target_observations` hold steps `1..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub observation: Observation,
    pub actions: Vec<Action>,
    pub policy_targets: Vec<[f32; CELLS]>,
    /// false past the terminal state
    pub policy_mask: Vec<bool>,
    pub value_targets: Vec<f32>,
    /// observations `o_{t+τ}` for the similarity targets, clamped to the
    /// terminal observation
    pub target_observations: Vec<Observation>,
}

impl TrainingSample {
    pub fn transform(&self, tr: SymmetryTransform) -> TrainingSample {
        TrainingSample {
            observation: self.observation.transform(tr),
            actions: self.actions.iter().map(|&a| tr.apply_action(a)).collect(),
            policy_targets: self.policy_targets.iter().map(|p| tr.apply_policy(p)).collect(),
            policy_mask: self.policy_mask.clone(),
            value_targets: self.value_targets.clone(),
            target_observations: self.target_observations.iter().map(|o| o.transform(tr)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub unroll_steps: usize,
    pub samples: Vec<TrainingSample>,
}

/// Builds the unroll targets for position `t` of `ep`. Filler actions past
/// the terminal state are drawn uniformly from all nine cells.
pub fn make_sample<R: Rng + ?Sized>(
    ep: &Episode,
    t: usize,
    unroll_steps: usize,
    mode: ValueTargetMode,
    rng: &mut R,
) -> Result<TrainingSample, ExperienceError> {
    let obs = ep.observations()?;
    let end = ep.len();
    let mut sample = TrainingSample {
        observation: obs[t],
        actions: Vec::with_capacity(unroll_steps),
        policy_targets: Vec::with_capacity(unroll_steps + 1),
        policy_mask: Vec::with_capacity(unroll_steps + 1),
        value_targets: Vec::with_capacity(unroll_steps + 1),
        target_observations: Vec::with_capacity(unroll_steps),
    };
    for tau in 0..=unroll_steps {
        let u = t + tau;
        if u < end {
            sample.policy_targets.push(ep.records[u].p_normal);
            sample.policy_mask.push(true);
        } else {
            sample.policy_targets.push([0.0; CELLS]);
            sample.policy_mask.push(false);
        }
        sample.value_targets.push(ep.value_target(u, mode));
        if tau > 0 {
            let a = if u - 1 < end {
                ep.records[u - 1].action
            } else {
                Action::new(rng.random_range(0..CELLS)).expect("cell index")
            };
            sample.actions.push(a);
            sample.target_observations.push(obs[u.min(end)]);
        }
    }
    Ok(sample)
}

const STORE_MAGIC: &[u8; 4] = b"HZEP";
pub const STORE_VERSION: u16 = 1;

/// Serialises episodes as: magic `HZEP`, version `u16`, count `u32`, then per
/// episode a `u32` byte length followed by `epoch u32, seed u64,
/// t_start_normal u8, result u8 (0 draw, 1 x wins, 2 o wins), moves u8` and
/// per move `t u8, phase u8 (0 exploring, 1 normal), action u8,
/// p_normal 9×f32, root_value f32, improved_value f32`. Little endian.
pub fn encode_episodes<'a, I: IntoIterator<Item = &'a Episode>>(episodes: I) -> Vec<u8> {
    let eps: Vec<&Episode> = episodes.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(STORE_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    out.extend_from_slice(&(eps.len() as u32).to_le_bytes());
    for ep in eps {
        let mut rec = Vec::with_capacity(16 + ep.len() * 47);
        rec.extend_from_slice(&ep.epoch.to_le_bytes());
        rec.extend_from_slice(&ep.seed.to_le_bytes());
        rec.push(ep.t_start_normal as u8);
        rec.push(match ep.result {
            TerminalResult::Draw => 0,
            TerminalResult::Win(crate::game::Player::X) => 1,
            TerminalResult::Win(crate::game::Player::O) => 2,
        });
        rec.push(ep.len() as u8);
        for r in &ep.records {
            rec.push(r.t as u8);
            rec.push(match r.phase {
                Phase::Exploring => 0,
                Phase::Normal => 1,
            });
            rec.push(r.action.index() as u8);
            for p in r.p_normal {
                rec.extend_from_slice(&p.to_le_bytes());
            }
            rec.extend_from_slice(&r.root_value.to_le_bytes());
            rec.extend_from_slice(&r.improved_value.to_le_bytes());
        }
        out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        out.extend_from_slice(&rec);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ExperienceError> {
        if self.buf.len() - self.pos < n {
            return Err(ExperienceError::Corrupt { offset: self.pos, reason: "unexpected end of data" });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ExperienceError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ExperienceError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ExperienceError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ExperienceError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32, ExperienceError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn corrupt(&self, at: usize, reason: &'static str) -> ExperienceError {
        ExperienceError::Corrupt { offset: at, reason }
    }
}

/// Inverse of [`encode_episodes`]. Any defect fails the whole decode.
pub fn decode_episodes(buf: &[u8]) -> Result<Vec<Episode>, ExperienceError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != STORE_MAGIC {
        return Err(r.corrupt(0, "bad magic"));
    }
    let version = r.u16()?;
    if version != STORE_VERSION {
        return Err(ExperienceError::Version(version));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let start = r.pos;
        let len = r.u32()? as usize;
        let body_start = r.pos;
        let body = r.take(len)?;
        let mut br = Reader { buf: &r.buf[..body_start + body.len()], pos: body_start };
        let epoch = br.u32()?;
        let seed = br.u64()?;
        let t_start_normal = br.u8()? as u32;
        let result_at = br.pos;
        let result = match br.u8()? {
            0 => TerminalResult::Draw,
            1 => TerminalResult::Win(crate::game::Player::X),
            2 => TerminalResult::Win(crate::game::Player::O),
            _ => return Err(br.corrupt(result_at, "bad result code")),
        };
        let moves = br.u8()? as usize;
        if moves > CELLS {
            return Err(br.corrupt(br.pos - 1, "too many moves"));
        }
        let mut records = Vec::with_capacity(moves);
        for _ in 0..moves {
            let t = br.u8()? as u32;
            let phase_at = br.pos;
            let phase = match br.u8()? {
                0 => Phase::Exploring,
                1 => Phase::Normal,
                _ => return Err(br.corrupt(phase_at, "bad phase code")),
            };
            let action_at = br.pos;
            let action = Action::new(br.u8()? as usize).map_err(|_| br.corrupt(action_at, "bad action"))?;
            let mut p_normal = [0.0f32; CELLS];
            for p in p_normal.iter_mut() {
                *p = br.f32()?;
            }
            let root_value = br.f32()?;
            let improved_value = br.f32()?;
            records.push(DecisionRecord { t, phase, action, p_normal, root_value, improved_value });
        }
        if br.pos != body_start + len {
            return Err(br.corrupt(br.pos, "record length mismatch"));
        }
        let ep = Episode { records, result, t_start_normal, epoch, seed };
        ep.validate().map_err(|_| r.corrupt(start, "episode does not replay"))?;
        out.push(ep);
    }
    if r.pos != buf.len() {
        return Err(r.corrupt(r.pos, "trailing bytes"));
    }
    Ok(out)
}

pub fn encode_window(w: &ReplayWindow) -> Vec<u8> {
    encode_episodes(w.episodes())
}

/// Restores a window; episodes beyond `capacity` are evicted oldest first.
pub fn decode_window(buf: &[u8], capacity: usize) -> Result<ReplayWindow, ExperienceError> {
    let mut w = ReplayWindow::new(capacity);
    for ep in decode_episodes(buf)? {
        w.store(ep)?;
    }
    Ok(w)
}

/// Builds an episode from a full action sequence with dummy search data.
pub fn scripted_episode(actions: &[usize], t_start_normal: u32) -> Result<Episode, ExperienceError> {
    let mut s = GameState::new();
    let mut records = Vec::with_capacity(actions.len());
    for (t, &c) in actions.iter().enumerate() {
        let a = Action::new(c)?;
        let mut p = [0.0; CELLS];
        p[c] = 1.0;
        records.push(DecisionRecord {
            t: t as u32,
            phase: if (t as u32) < t_start_normal { Phase::Exploring } else { Phase::Normal },
            action: a,
            p_normal: p,
            root_value: 0.0,
            improved_value: 0.0,
        });
        s = s.apply_action(a)?;
    }
    let result = s.terminal_result().ok_or(ExperienceError::NotTerminal)?;
    Ok(Episode { records, result, t_start_normal, epoch: 0, seed: 0 })
}
