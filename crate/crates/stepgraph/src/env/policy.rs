//! Toy policies over the discrete action-token vocabulary.
//!
//! A policy sees only a feature vector and the allowed-token set for the
//! current decoding position, so exact distributions (and therefore exact KL
//! and enumeration oracles) are always available.

use serde::{Deserialize, Serialize};

use super::episode::MAX_SLOTS;

/// turn one-hot + last-relation one-hot (including "none") + bias
pub fn feature_dim(max_turns: usize, n_relations: usize) -> usize {
    max_turns + n_relations + 2
}

/// Everything a policy may condition on at one decoding position.
#[derive(Debug, Clone)]
pub struct TokenContext {
    pub features: Vec<f64>,
    /// token ids admissible at this position, ascending
    pub allowed: Vec<usize>,
    pub turn_index: usize,
    /// 0 = verb, 1 = entity slot, 2 = relation
    pub position: u8,
    /// entity id behind each slot token, most recent first
    pub slot_entities: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyParams {
    /// row-major vocab_size x feat_dim
    pub weights: Vec<f64>,
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub version: u64,
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, feat_dim: usize) -> Self {
        Self {
            weights: vec![0.0; vocab_size * feat_dim],
            vocab_size,
            feat_dim,
            version: 0,
        }
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.weights[token * self.feat_dim..(token + 1) * self.feat_dim]
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

/// softmax over the allowed tokens; returned probabilities align with
/// `ctx.allowed` and sum to 1.
pub fn masked_softmax(params: &PolicyParams, temperature: f64, ctx: &TokenContext) -> Vec<f64> {
    let logits: Vec<f64> = ctx
        .allowed
        .iter()
        .map(|&a| {
            params
                .row(a)
                .iter()
                .zip(&ctx.features)
                .map(|(w, f)| w * f)
                .sum::<f64>()
                / temperature
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub trait AgentPolicy {
    /// Probabilities aligned with `ctx.allowed`; must sum to 1.
    fn action_probs(&self, ctx: &TokenContext) -> Vec<f64>;
}

#[derive(Debug, Clone)]
pub struct ToyPolicy {
    pub params: PolicyParams,
    pub temperature: f64,
}

impl ToyPolicy {
    pub fn new(params: PolicyParams, temperature: f64) -> Self {
        assert!(temperature > 0.0);
        Self { params, temperature }
    }
}

impl AgentPolicy for ToyPolicy {
    fn action_probs(&self, ctx: &TokenContext) -> Vec<f64> {
        masked_softmax(&self.params, self.temperature, ctx)
    }
}

/// Non-learned policy that deterministically follows a task's gold chain;
/// certifies task solvability.
#[derive(Debug, Clone)]
pub struct ScriptedOracle {
    /// chain entity ids, start first, answer last
    pub chain_entity_ids: Vec<usize>,
    pub hops: usize,
}

impl ScriptedOracle {
    pub fn for_task(
        graph: &crate::store::KnowledgeHypergraph,
        task: &super::corpus::SyntheticTask,
    ) -> Self {
        let chain_entity_ids = task
            .chain_entities
            .iter()
            .map(|n| graph.lookup_entity(n).expect("chain entity stored"))
            .collect();
        Self {
            chain_entity_ids,
            hops: task.gold_chain.len(),
        }
    }

    fn target_token(&self, ctx: &TokenContext) -> Option<usize> {
        let t = ctx.turn_index;
        match ctx.position {
            0 => Some(if t < self.hops { super::episode::TOKEN_QUERY } else { super::episode::TOKEN_ANSWER }),
            1 => {
                let want = self.chain_entity_ids[t.min(self.hops)];
                ctx.slot_entities
                    .iter()
                    .position(|&e| e == want)
                    .map(|s| 2 + s)
            }
            2 => Some(2 + MAX_SLOTS + t.min(self.hops - 1)),
            _ => None,
        }
    }
}

impl AgentPolicy for ScriptedOracle {
    fn action_probs(&self, ctx: &TokenContext) -> Vec<f64> {
        let target = self.target_token(ctx);
        let hit = target.and_then(|t| ctx.allowed.iter().position(|&a| a == t));
        let mut probs = vec![0.0; ctx.allowed.len()];
        probs[hit.unwrap_or(0)] = 1.0;
        probs
    }
}
