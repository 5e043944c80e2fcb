//! One self-play game: plan every move, act by the hybrid policy.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experience::{Episode, ExperienceError};
use crate::game::{GameError, GameState};
use crate::hybrid::{decide, draw_t_start_normal, HybridError, HybridSchedule, T_END};
use crate::model::Model;
use crate::planner::{plan, PlanConfig, PlanError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelfPlayError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Hybrid(#[from] HybridError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Experience(#[from] ExperienceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfPlayConfig {
    pub plan: PlanConfig,
    pub exploration: bool,
    /// exploring temperature `T`
    pub temperature: f64,
}

impl Default for SelfPlayConfig {
    fn default() -> Self {
        SelfPlayConfig { plan: PlanConfig::default(), exploration: true, temperature: 5.0 }
    }
}

/// Plays one game; the episode is fully determined by `seed`.
pub fn play_episode<M: Model + ?Sized>(
    model: &M,
    cfg: &SelfPlayConfig,
    epoch: u32,
    seed: u64,
) -> Result<Episode, SelfPlayError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = HybridSchedule {
        t_start_normal: draw_t_start_normal(T_END, cfg.exploration, &mut rng),
        temperature: cfg.temperature,
        t_end: T_END,
    };
    let mut state = GameState::new();
    let mut records = Vec::with_capacity(T_END as usize);
    while let Ok(legal) = state.legal_actions() {
        let result = plan(&state.observe(), legal, model, &cfg.plan, &mut rng)?;
        let record = decide(records.len() as u32, &schedule, &result, &mut rng)?;
        state = state.apply_action(record.action)?;
        records.push(record);
    }
    let ep = Episode {
        records,
        result: state.terminal_result().expect("loop ends at a terminal state"),
        t_start_normal: schedule.t_start_normal,
        epoch,
        seed,
    };
    ep.validate()?;
    Ok(ep)
}
