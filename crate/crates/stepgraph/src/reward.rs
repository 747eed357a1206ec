//! Dense per-step rewards: progress (certainty delta), structural
//! connectivity and answer-reach ratios, and the λ-weighted total.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matcher::EntityMatcher;
use crate::retrieval::RetrievedFactSet;
use crate::split_seed;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("negative lambda weight {0}")]
    NegativeLambda(f64),
    #[error("rollouts_m must be >= 1")]
    ZeroRollouts,
    #[error("certainty rollout failed: {0}")]
    RolloutFailed(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub rollouts_m: usize,
    pub accuracy_weight: f64,
    pub format_weight: f64,
    /// true: the trajectory outcome reward enters every step's total
    /// (literal reading of the total-reward formula); false: final step only.
    pub outcome_in_every_step: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
            rollouts_m: 4,
            accuracy_weight: 1.0,
            format_weight: 0.2,
            outcome_in_every_step: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.lambda1 < 0.0 {
            return Err(RewardError::NegativeLambda(self.lambda1));
        }
        if self.lambda2 < 0.0 {
            return Err(RewardError::NegativeLambda(self.lambda2));
        }
        if self.rollouts_m == 0 {
            return Err(RewardError::ZeroRollouts);
        }
        Ok(())
    }
}

/// Decomposed reward at one turn; `total` honors
/// total = r_outcome_share + λ1·r_sp + λ2·(r_con + r_ans).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReward {
    pub turn_index: usize,
    pub r_sp: f64,
    pub r_con: f64,
    pub r_ans: f64,
    pub r_struct: f64,
    pub r_outcome_share: f64,
    pub total: f64,
}

/// Monte-Carlo estimate of P(gold | state): mean outcome accuracy of
/// continuation rollouts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertaintyEstimate {
    pub value: f64,
    pub samples: usize,
    pub std_error: f64,
}

impl CertaintyEstimate {
    /// Exact certainty (terminal states, enumeration oracles).
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            samples: 0,
            std_error: 0.0,
        }
    }
}

/// Runs M independent continuation rollouts on pre-split rng streams and
/// averages their outcome accuracies. `rollout(i, rng)` must play one
/// continuation to termination and return its accuracy in [0, 1].
pub fn estimate_certainty<F>(
    m: usize,
    rng_seed: u64,
    mut rollout: F,
) -> Result<CertaintyEstimate, RewardError>
where
    F: FnMut(usize, &mut ChaCha8Rng) -> Result<f64, String>,
{
    if m == 0 {
        return Err(RewardError::ZeroRollouts);
    }
    let mut values = Vec::with_capacity(m);
    for i in 0..m {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(rng_seed, i as u64));
        values.push(rollout(i, &mut rng).map_err(RewardError::RolloutFailed)?);
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
    Ok(CertaintyEstimate {
        value: mean,
        samples: m,
        std_error: (var / m as f64).sqrt(),
    })
}

/// r_sp = P(gold | after step) - P(gold | before step).
pub fn step_progress_reward(after: &CertaintyEstimate, before: &CertaintyEstimate) -> f64 {
    after.value - before.value
}

fn overlap_ratio(
    retrieved: &RetrievedFactSet,
    reference_ids: &std::collections::BTreeSet<usize>,
) -> f64 {
    let retrieved_ids = retrieved.entity_union();
    if retrieved_ids.is_empty() {
        // a retrieval grounding no known entities makes no measurable progress
        return 0.0;
    }
    let common = retrieved_ids.intersection(reference_ids).count();
    common as f64 / retrieved_ids.len() as f64
}

/// r_con = |V(G_t) ∩ V(s_<t)| / |V(G_t)|.
pub fn connectivity_reward(
    retrieved: &RetrievedFactSet,
    prior_state_text: &str,
    matcher: &EntityMatcher,
) -> f64 {
    let prior = matcher.extract_entities(prior_state_text).into_iter().collect();
    overlap_ratio(retrieved, &prior)
}

/// r_ans = |V(G_t) ∩ V(y*)| / |V(G_t)|.
pub fn answer_reach_reward(
    retrieved: &RetrievedFactSet,
    gold_answer_text: &str,
    matcher: &EntityMatcher,
) -> f64 {
    let gold = matcher.extract_entities(gold_answer_text).into_iter().collect();
    overlap_ratio(retrieved, &gold)
}

/// accuracy_weight · EM + format_weight · well_formed.
pub fn outcome_reward(
    answer: Option<&str>,
    gold: &str,
    well_formed: bool,
    config: &RewardConfig,
) -> f64 {
    let em = answer.is_some_and(|a| crate::qa::exact_match(a, gold));
    config.accuracy_weight * (em as u8 as f64)
        + config.format_weight * (well_formed as u8 as f64)
}

/// Assembles one StepReward from its components.
pub fn total_step_reward(
    turn_index: usize,
    r_sp: f64,
    r_con: f64,
    r_ans: f64,
    r_outcome_share: f64,
    config: &RewardConfig,
) -> StepReward {
    let r_struct = r_con + r_ans;
    StepReward {
        turn_index,
        r_sp,
        r_con,
        r_ans,
        r_struct,
        r_outcome_share,
        total: r_outcome_share + config.lambda1 * r_sp + config.lambda2 * r_struct,
    }
}
