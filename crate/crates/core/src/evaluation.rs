//! Auditing a model against the solved graph: intuition and planning
//! decisions, value trajectories, policy entropy and value error.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::experience::{Episode, ExperienceError, Phase};
use crate::game::{Action, ActionSet, GameError, GameState, CELLS};
use crate::model::{Model, ModelError};
use crate::oracle::{count_bad_decisions, entropy, BadDecisionCount, DecisionGraph, EvalMode};
use crate::planner::{argmax, plan, GumbelMode, PlanConfig, PlanError};

/// Test-time planning settings. Root noise is never applied at test time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub gumbel_mode: GumbelMode,
    pub simulations: usize,
    pub candidates: usize,
    pub prior_temperature: f64,
    /// base seed for the per-node Gumbel draws
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = PlanConfig::default();
        EvalConfig {
            gumbel_mode: GumbelMode::Sampled,
            simulations: p.simulations,
            candidates: p.candidates,
            prior_temperature: p.prior_temperature,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn plan_config(&self) -> PlanConfig {
        PlanConfig {
            simulations: self.simulations,
            candidates: self.candidates,
            prior_temperature: self.prior_temperature,
            gumbel_mode: self.gumbel_mode,
            dirichlet_fraction: 0.0,
            ..PlanConfig::default()
        }
    }
}

/// Greedy action of the raw policy head over legal actions (`T = 0`).
pub fn intuition_action<M: Model + ?Sized>(model: &M, s: &GameState) -> Result<Action, PlanError> {
    let legal = s.legal_actions().map_err(|_| PlanError::NoLegalActions)?;
    let out = model.initial_inference(&s.observe())?;
    Ok(masked_argmax(&out.policy_logits.map(|l| l as f64), legal))
}

fn masked_argmax(logits: &[f64; CELLS], legal: ActionSet) -> Action {
    let masked: [f64; CELLS] = core::array::from_fn(|a| {
        if legal.contains(Action::new(a).expect("cell")) {
            logits[a]
        } else {
            f64::NEG_INFINITY
        }
    });
    Action::new(argmax(&masked)).expect("cell")
}

/// Full planning decision. The Gumbel stream is keyed by the state so the
/// outcome does not depend on evaluation order.
pub fn planning_action<M: Model + ?Sized>(model: &M, s: &GameState, cfg: &EvalConfig) -> Result<Action, PlanError> {
    let legal = s.legal_actions().map_err(|_| PlanError::NoLegalActions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(s.code() as u64);
    Ok(plan(&s.observe(), legal, model, &cfg.plan_config(), &mut rng)?.chosen_action)
}

/// Bad decisions of `model` over every relevant node, both modes.
pub fn audit<M: Model + ?Sized>(
    model: &M,
    graph: &DecisionGraph,
    cfg: &EvalConfig,
) -> Result<BadDecisionCount, PlanError> {
    audit_modes(model, graph, cfg, &[EvalMode::Intuition, EvalMode::Planning])
}

pub fn audit_modes<M: Model + ?Sized>(
    model: &M,
    graph: &DecisionGraph,
    cfg: &EvalConfig,
    modes: &[EvalMode],
) -> Result<BadDecisionCount, PlanError> {
    count_bad_decisions(graph, modes, |s, mode| match mode {
        EvalMode::Intuition => intuition_action(model, s),
        EvalMode::Planning => planning_action(model, s, cfg),
    })
}

/// Longest trajectory index: two full horizons.
pub const TRAJECTORY_LEN: usize = 2 * CELLS + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTrajectory {
    pub t_start: usize,
    /// `v(t')` for `t' = 0 ..= 18`
    pub values: Vec<f64>,
    /// action used for in-mind steps past the end of the sequence
    pub filler: Option<Action>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrajectoryError {
    #[error("t_start {0} is past the real states")]
    StartOutOfRange(usize),
    #[error("empty action sequence")]
    Empty,
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `v^0_{t'}` for `t' < t_start`, then the recurrent continuation
/// `v^{t' - t_start}_{t_start}` driven by the sequence and, past its end, by
/// repeating its last action.
pub fn value_trajectory<M: Model + ?Sized>(
    model: &M,
    actions: &[Action],
    t_start: usize,
) -> Result<ValueTrajectory, TrajectoryError> {
    let last = *actions.last().ok_or(TrajectoryError::Empty)?;
    let mut states = Vec::with_capacity(actions.len() + 1);
    let mut s = GameState::new();
    states.push(s);
    for &a in actions {
        s = s.apply_action(a)?;
        states.push(s);
    }
    if t_start >= states.len() {
        return Err(TrajectoryError::StartOutOfRange(t_start));
    }
    let mut values = Vec::with_capacity(TRAJECTORY_LEN);
    for state in &states[..t_start] {
        values.push(model.initial_inference(&state.observe())?.value as f64);
    }
    let mut out = model.initial_inference(&states[t_start].observe())?;
    values.push(out.value as f64);
    let mut filler = None;
    for t in t_start..TRAJECTORY_LEN - 1 {
        let a = match actions.get(t) {
            Some(&a) => a,
            None => {
                filler = Some(last);
                last
            }
        };
        out = model.recurrent_inference(&out.latent, a)?;
        values.push(out.value as f64);
    }
    Ok(ValueTrajectory { t_start, values, filler })
}

/// Entropy of the raw policy at the empty board, `H_0^0`.
pub fn root_policy_entropy<M: Model + ?Sized>(model: &M) -> Result<f64, ModelError> {
    let out = model.initial_inference(&GameState::new().observe())?;
    Ok(entropy(&out.policy()))
}

/// Mean absolute difference between the stored `v^0_t` of exploring-phase
/// decisions and the solver value of the same state, with the sample count.
pub fn exploring_value_error<'a, I: IntoIterator<Item = &'a Episode>>(
    graph: &DecisionGraph,
    episodes: I,
) -> Result<(f64, usize), ExperienceError> {
    let mut total = 0.0;
    let mut n = 0;
    for ep in episodes {
        let states = ep.states()?;
        for r in ep.records.iter().filter(|r| r.phase == Phase::Exploring) {
            let v = graph.value(&states[r.t as usize]).expect("reachable state") as f64;
            total += (r.root_value as f64 - v).abs();
            n += 1;
        }
    }
    Ok((if n > 0 { total / n as f64 } else { 0.0 }, n))
}
