//! The hybrid acting policy: temperature-flattened improved policy before a
//! random switch time, the planner's own choice after it.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experience::{DecisionRecord, Episode, ExperienceError, Phase, ValueTargetMode};
use crate::game::{Action, CELLS};
use crate::planner::PlanResult;

/// Episode horizon: the longest possible game.
pub const T_END: u32 = CELLS as u32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HybridError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("exploring distribution has no mass")]
    EmptyDistribution,
    #[error("missing stored root value at t = {0}")]
    MissingRootValue(usize),
    #[error(transparent)]
    Experience(#[from] ExperienceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridSchedule {
    pub t_start_normal: u32,
    pub temperature: f64,
    pub t_end: u32,
}

/// Uniform on `0..=t_end`; always 0 with exploration off.
pub fn draw_t_start_normal<R: Rng + ?Sized>(t_end: u32, exploration: bool, rng: &mut R) -> u32 {
    if exploration {
        rng.random_range(0..=t_end)
    } else {
        0
    }
}

/// `softmax(improved_logits / T)`; zero on illegal actions.
pub fn exploring_distribution(plan: &PlanResult, temperature: f64) -> Result<[f64; CELLS], HybridError> {
    if !(temperature > 0.0) {
        return Err(HybridError::Temperature(temperature));
    }
    let p = crate::model::softmax(&plan.improved_logits.map(|l| l / temperature));
    if p.iter().sum::<f64>() <= 0.0 {
        return Err(HybridError::EmptyDistribution);
    }
    Ok(p)
}

/// Picks the action for time `t` and records the decision.
pub fn decide<R: Rng + ?Sized>(
    t: u32,
    schedule: &HybridSchedule,
    plan: &PlanResult,
    rng: &mut R,
) -> Result<DecisionRecord, HybridError> {
    let (phase, action) = if t < schedule.t_start_normal {
        let p = exploring_distribution(plan, schedule.temperature)?;
        let dist = WeightedIndex::new(p).map_err(|_| HybridError::EmptyDistribution)?;
        (Phase::Exploring, Action::new(dist.sample(rng)).expect("cell index"))
    } else {
        (Phase::Normal, plan.chosen_action)
    };
    Ok(DecisionRecord {
        t,
        phase,
        action,
        p_normal: plan.improved_policy.map(|p| p as f32),
        root_value: plan.root_value as f32,
        improved_value: plan.improved_value as f32,
    })
}

/// Value targets `z_0 ..= z_T` for a finished episode under `mode`.
pub fn assign_value_targets(ep: &Episode, mode: ValueTargetMode) -> Result<Vec<f32>, HybridError> {
    ep.validate()?;
    for (t, r) in ep.records.iter().enumerate() {
        let stored = match mode {
            ValueTargetMode::HybridInitial => r.root_value,
            ValueTargetMode::HybridImproved => r.improved_value,
            ValueTargetMode::Plain => 0.0,
        };
        if (t as u32) < ep.t_start_normal && !stored.is_finite() {
            return Err(HybridError::MissingRootValue(t));
        }
    }
    Ok(ep.value_targets(mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experience::scripted_episode;
    use crate::game::ActionSet;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plan_with(p: &[f64], chosen: usize) -> PlanResult {
        let mut improved = [0.0; CELLS];
        improved[..p.len()].copy_from_slice(p);
        let logits = improved.map(|v| if v > 0.0 { libm::log(v) } else { f64::NEG_INFINITY });
        PlanResult {
            chosen_action: Action::new(chosen).unwrap(),
            improved_policy: improved,
            improved_logits: logits,
            improved_value: 0.25,
            root_value: -0.5,
            visit_counts: [0; CELLS],
            completed_q: [0.0; CELLS],
            prior_logits: logits,
            gumbel: [0.0; CELLS],
            legal: ActionSet::from_actions((0..p.len()).filter(|&c| p[c] > 0.0).map(|c| Action::new(c).unwrap())),
        }
    }

    #[test]
    fn switch_time_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(draw_t_start_normal(0, true, &mut rng), 0);
        assert!((0..100).all(|_| draw_t_start_normal(9, false, &mut rng) == 0));
        let n = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            counts[draw_t_start_normal(9, true, &mut rng) as usize] += 1;
        }
        let e = n as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // chi-square, 9 degrees of freedom, p = 0.001
        assert!(chi2 < 27.88, "{chi2}");
    }

    #[test]
    fn exploring_distribution_limits() {
        let plan = plan_with(&[0.7, 0.2, 0.1], 0);
        assert_eq!(exploring_distribution(&plan, 1.0).unwrap(), crate::model::softmax(&plan.improved_logits));
        let flat = exploring_distribution(&plan, 1e6).unwrap();
        for a in 0..3 {
            assert!((flat[a] - 1.0 / 3.0).abs() < 1e-4);
        }
        assert!(flat[3..].iter().all(|&v| v == 0.0));
        assert!(exploring_distribution(&plan, 0.0).is_err());
    }

    #[test]
    fn exploring_distribution_at_t5() {
        // softmax(ln p / 5) = p^(1/5) / Σ p^(1/5), evaluated independently
        let plan = plan_with(&[0.7, 0.2, 0.1], 0);
        let p = exploring_distribution(&plan, 5.0).unwrap();
        let roots = [0.7f64, 0.2, 0.1].map(|v| v.powf(0.2));
        let z: f64 = roots.iter().sum();
        for a in 0..3 {
            assert!((p[a] - roots[a] / z).abs() < 1e-12);
        }
        // frozen reference values
        assert!((p[0] - 0.407_169_198_278_692).abs() < 1e-12);
        assert!((p[2] - 0.275_902_292_354_166).abs() < 1e-12);
    }

    #[test]
    fn decide_respects_the_switch() {
        let plan = plan_with(&[0.5, 0.3, 0.2], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = HybridSchedule { t_start_normal: 0, temperature: 5.0, t_end: 9 };
        for t in 0..9 {
            let r = decide(t, &normal, &plan, &mut rng).unwrap();
            assert_eq!(r.phase, Phase::Normal);
            assert_eq!(r.action.index(), 2);
            assert_eq!(r.root_value, -0.5);
            assert_eq!(r.improved_value, 0.25);
        }
        let exploring = HybridSchedule { t_start_normal: 9, ..normal };
        for t in 0..9 {
            assert_eq!(decide(t, &exploring, &plan, &mut rng).unwrap().phase, Phase::Exploring);
        }
        let mixed = HybridSchedule { t_start_normal: 4, ..normal };
        for t in 0..9 {
            let r = decide(t, &mixed, &plan, &mut rng).unwrap();
            assert_eq!(r.phase == Phase::Exploring, t < 4);
        }
    }

    #[test]
    fn exploring_frequencies_match_improved_policy_at_t1() {
        let p = [0.5, 0.3, 0.2];
        let plan = plan_with(&p, 0);
        let sched = HybridSchedule { t_start_normal: 9, temperature: 1.0, t_end: 9 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[decide(0, &sched, &plan, &mut rng).unwrap().action.index()] += 1;
        }
        let chi2: f64 = (0..3).map(|a| (counts[a] as f64 - n as f64 * p[a]).powi(2) / (n as f64 * p[a])).sum();
        assert!(chi2 < 13.82, "{counts:?}");
    }

    #[test]
    fn value_targets_for_hand_built_episode() {
        let mut ep = scripted_episode(&[0, 3, 1, 4, 2], 3).unwrap();
        let stored = [0.11f32, -0.22, 0.33, 0.44, 0.55];
        for (r, &v) in ep.records.iter_mut().zip(&stored) {
            r.root_value = v;
        }
        let z = assign_value_targets(&ep, ValueTargetMode::HybridInitial).unwrap();
        assert_eq!(z, [0.11, -0.22, 0.33, -1.0, 1.0, -1.0]);
        ep.records[1].root_value = f32::NAN;
        assert_eq!(assign_value_targets(&ep, ValueTargetMode::HybridInitial), Err(HybridError::MissingRootValue(1)));
        assert!(assign_value_targets(&ep, ValueTargetMode::Plain).is_ok());
    }

    #[test]
    fn targets_after_switch_ignore_the_prefix() {
        // same suffix from t = 3 on, different exploring prefixes
        let mut a = scripted_episode(&[0, 3, 4, 5, 8], 3).unwrap();
        let mut b = scripted_episode(&[4, 3, 0, 5, 8], 3).unwrap();
        for (i, r) in a.records.iter_mut().enumerate() {
            r.root_value = i as f32 * 0.1;
        }
        for (i, r) in b.records.iter_mut().enumerate() {
            r.root_value = -(i as f32) * 0.1;
        }
        let za = assign_value_targets(&a, ValueTargetMode::HybridInitial).unwrap();
        let zb = assign_value_targets(&b, ValueTargetMode::HybridInitial).unwrap();
        assert_ne!(za[..3], zb[..3]);
        assert_eq!(za[3..], zb[3..]);
    }

    proptest! {
        #[test]
        fn low_temperature_amplifies_ratios(
            raw in proptest::collection::vec(0.01f64..1.0, 2..9),
            t in 0.01f64..0.99,
        ) {
            let sum: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let plan = plan_with(&p, 0);
            let q = exploring_distribution(&plan, t).unwrap();
            for i in 0..p.len() {
                for j in 0..p.len() {
                    if p[i] > p[j] * (1.0 + 1e-9) {
                        prop_assert!(q[i] / q[j] > p[i] / p[j]);
                    }
                }
            }
        }
    }
}
