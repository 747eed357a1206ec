//! Synthetic multi-hop QA environment: corpus generation with gold reasoning
//! chains, a small discrete action grammar, toy softmax policies and EM/F1
//! evaluation.

mod corpus;
mod episode;
mod eval;
mod policy;

pub use corpus::{generate_corpus, validate_tasks, Corpus, CorpusError, CorpusSpec, SyntheticTask};
pub use episode::{
    EnvError, EpisodeState, QaEnv, Termination, TurnOutcome, MAX_SLOTS, TOKEN_ANSWER, TOKEN_QUERY,
};
pub use eval::{evaluate, gold_hit_rate, EvalReport};
pub use policy::{
    feature_dim, masked_softmax, AgentPolicy, PolicyParams, ScriptedOracle, TokenContext,
    ToyPolicy,
};
