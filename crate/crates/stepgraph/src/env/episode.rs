//! The interaction loop: episode state, the QUERY/ANSWER action grammar and
//! turn execution against the retrieval engine.
//!
//! Action grammar per turn (composite action, one token per position):
//!   QUERY  <slot> <relation>   renders "{entity} {relation}", retrieves
//!   ANSWER <slot>              terminates with the slot entity's name
//!
//! Slot tokens index into the episode's mentioned-entity list, most recently
//! discovered entity first, so "slot 0" tracks the reasoning frontier.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::corpus::{Corpus, SyntheticTask};
use super::policy::{AgentPolicy, TokenContext};
use crate::embed::EmbeddingProvider;
use crate::retrieval::{RetrievalEngine, RetrievalError, RetrievalMode, RetrievalQuery, RetrievedFactSet};

pub const MAX_SLOTS: usize = 6;
pub const TOKEN_QUERY: usize = 0;
pub const TOKEN_ANSWER: usize = 1;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode already terminated")]
    AlreadyDone,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answer,
    MaxTurns,
    Malformed,
}

/// Full episode state; `Clone` is the snapshot/restore mechanism required by
/// certainty estimation.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub task_index: usize,
    pub state_text: String,
    pub turn: usize,
    /// entity id per slot, most recently discovered first
    pub slot_entities: Vec<usize>,
    pub last_relation: Option<usize>,
    pub done: bool,
    pub terminated_by: Option<Termination>,
    pub answer: Option<String>,
    pub malformed: bool,
}

#[derive(Debug, Clone)]
pub struct TurnOutcome {
    pub query_text: Option<String>,
    pub retrieved: Option<RetrievedFactSet>,
    pub done: bool,
}

pub struct QaEnv<'c> {
    corpus: &'c Corpus,
    engine: RetrievalEngine<'c>,
    pub mode: RetrievalMode,
    pub k: usize,
    pub max_turns: usize,
}

impl<'c> QaEnv<'c> {
    pub fn new(
        corpus: &'c Corpus,
        provider: Box<dyn EmbeddingProvider>,
        mode: RetrievalMode,
        k: usize,
        max_turns: usize,
    ) -> Result<Self, RetrievalError> {
        Ok(Self {
            engine: RetrievalEngine::new(&corpus.graph, provider)?,
            corpus,
            mode,
            k,
            max_turns,
        })
    }

    pub fn corpus(&self) -> &Corpus {
        self.corpus
    }

    pub fn engine(&self) -> &RetrievalEngine<'c> {
        &self.engine
    }

    pub fn task(&self, index: usize) -> &SyntheticTask {
        &self.corpus.tasks[index]
    }

    pub fn n_relations(&self) -> usize {
        self.corpus.relations.len()
    }

    pub fn vocab_size(&self) -> usize {
        2 + MAX_SLOTS + self.n_relations()
    }

    pub fn feature_dim(&self) -> usize {
        super::policy::feature_dim(self.max_turns, self.n_relations())
    }

    pub fn reset(&self, task_index: usize) -> EpisodeState {
        let task = &self.corpus.tasks[task_index];
        let slot_entities = self.engine.matcher().extract_entities(&task.question);
        EpisodeState {
            task_index,
            state_text: task.question.clone(),
            turn: 0,
            slot_entities,
            last_relation: None,
            done: false,
            terminated_by: None,
            answer: None,
            malformed: false,
        }
    }

    pub fn features(&self, state: &EpisodeState) -> Vec<f64> {
        let n_rel = self.n_relations();
        let mut f = vec![0.0; self.feature_dim()];
        f[state.turn.min(self.max_turns - 1)] = 1.0;
        let rel_slot = state.last_relation.map_or(0, |r| r + 1);
        f[self.max_turns + rel_slot] = 1.0;
        f[self.max_turns + n_rel + 1] = 1.0; // bias
        f
    }

    /// Token ids admissible at a decoding position within the current turn.
    pub fn allowed_tokens(&self, state: &EpisodeState, position: u8) -> Vec<usize> {
        match position {
            0 => vec![TOKEN_QUERY, TOKEN_ANSWER],
            1 => (0..state.slot_entities.len().min(MAX_SLOTS))
                .map(|s| 2 + s)
                .collect(),
            2 => (0..self.n_relations()).map(|r| 2 + MAX_SLOTS + r).collect(),
            _ => vec![],
        }
    }

    pub fn context(&self, state: &EpisodeState, position: u8) -> TokenContext {
        TokenContext {
            features: self.features(state),
            allowed: self.allowed_tokens(state, position),
            turn_index: state.turn,
            position,
            slot_entities: state.slot_entities.clone(),
        }
    }

    fn malform(&self, state: &mut EpisodeState) -> TurnOutcome {
        state.done = true;
        state.malformed = true;
        state.terminated_by = Some(Termination::Malformed);
        TurnOutcome {
            query_text: None,
            retrieved: None,
            done: true,
        }
    }

    /// Executes one composite turn action. Malformed token sequences
    /// terminate the episode with the format penalty.
    pub fn step_turn(
        &self,
        state: &mut EpisodeState,
        tokens: &[usize],
    ) -> Result<TurnOutcome, EnvError> {
        if state.done {
            return Err(EnvError::AlreadyDone);
        }
        let slot_of = |tok: usize, state: &EpisodeState| -> Option<usize> {
            let s = tok.checked_sub(2)?;
            (s < state.slot_entities.len().min(MAX_SLOTS)).then_some(s)
        };
        match tokens {
            [TOKEN_ANSWER, slot_tok] => {
                let Some(slot) = slot_of(*slot_tok, state) else {
                    return Ok(self.malform(state));
                };
                let entity = state.slot_entities[slot];
                state.answer =
                    Some(self.corpus.graph.entities()[entity].name.clone());
                state.turn += 1;
                state.done = true;
                state.terminated_by = Some(Termination::Answer);
                Ok(TurnOutcome {
                    query_text: None,
                    retrieved: None,
                    done: true,
                })
            }
            [TOKEN_QUERY, slot_tok, rel_tok] => {
                let Some(slot) = slot_of(*slot_tok, state) else {
                    return Ok(self.malform(state));
                };
                let Some(rel) = rel_tok.checked_sub(2 + MAX_SLOTS) else {
                    return Ok(self.malform(state));
                };
                if rel >= self.n_relations() {
                    return Ok(self.malform(state));
                }
                let entity_name =
                    &self.corpus.graph.entities()[state.slot_entities[slot]].name;
                let query_text =
                    format!("{entity_name} {}", self.corpus.relations[rel]);
                let retrieved = self.engine.retrieve(
                    &RetrievalQuery {
                        text: query_text.clone(),
                        turn_index: state.turn,
                        explicit_entities: None,
                        k: self.k,
                    },
                    self.mode,
                )?;

                // newly discovered entities become the most recent slots,
                // ordered by first appearance in the ranked knowledge text
                let mut fresh: Vec<usize> = Vec::new();
                for fact in &retrieved.facts {
                    for &v in &fact.entity_ids {
                        if !state.slot_entities.contains(&v) && !fresh.contains(&v) {
                            fresh.push(v);
                        }
                    }
                }
                let mut slots = fresh;
                slots.extend(state.slot_entities.iter().copied());
                state.slot_entities = slots;

                state.state_text.push_str(&format!(
                    " <query> {query_text} </query> <knowledge> {} </knowledge>",
                    retrieved.knowledge_text()
                ));
                state.last_relation = Some(rel);
                state.turn += 1;
                if state.turn >= self.max_turns {
                    state.done = true;
                    state.terminated_by = Some(Termination::MaxTurns);
                }
                Ok(TurnOutcome {
                    query_text: Some(query_text),
                    retrieved: Some(retrieved),
                    done: state.done,
                })
            }
            _ => Ok(self.malform(state)),
        }
    }

    /// Samples one turn's composite action from the policy.
    /// Returns (tokens, contexts, logprobs under the sampling policy).
    pub fn sample_turn(
        &self,
        state: &EpisodeState,
        policy: &dyn AgentPolicy,
        rng: &mut ChaCha8Rng,
    ) -> (Vec<usize>, Vec<TokenContext>, Vec<f64>) {
        let mut tokens = Vec::with_capacity(3);
        let mut contexts = Vec::with_capacity(3);
        let mut logprobs = Vec::with_capacity(3);
        let pick = |position: u8,
                    tokens: &mut Vec<usize>,
                        contexts: &mut Vec<TokenContext>,
                        logprobs: &mut Vec<f64>,
                        rng: &mut ChaCha8Rng| {
            let ctx = self.context(state, position);
            let probs = policy.action_probs(&ctx);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut idx = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            tokens.push(ctx.allowed[idx]);
            logprobs.push(probs[idx].ln());
            contexts.push(ctx);
        };
        pick(0, &mut tokens, &mut contexts, &mut logprobs, rng);
        pick(1, &mut tokens, &mut contexts, &mut logprobs, rng);
        if tokens[0] == TOKEN_QUERY {
            pick(2, &mut tokens, &mut contexts, &mut logprobs, rng);
        }
        (tokens, contexts, logprobs)
    }

    /// Greedy (argmax) turn decoding; ties break toward the lower token id.
    pub fn greedy_turn(&self, state: &EpisodeState, policy: &dyn AgentPolicy) -> Vec<usize> {
        let mut tokens = Vec::with_capacity(3);
        let pick = |position: u8, tokens: &mut Vec<usize>| {
            let ctx = self.context(state, position);
            let probs = policy.action_probs(&ctx);
            let mut best = 0;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[best] {
                    best = i;
                }
            }
            tokens.push(ctx.allowed[best]);
        };
        pick(0, &mut tokens);
        pick(1, &mut tokens);
        if tokens[0] == TOKEN_QUERY {
            pick(2, &mut tokens);
        }
        tokens
    }

    /// Plays a continuation from `state` to termination by sampling the
    /// policy; returns the outcome accuracy (exact match) against the task's
    /// gold answer.
    pub fn rollout_accuracy(
        &self,
        mut state: EpisodeState,
        policy: &dyn AgentPolicy,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, EnvError> {
        while !state.done {
            let (tokens, _, _) = self.sample_turn(&state, policy, rng);
            self.step_turn(&mut state, &tokens)?;
        }
        Ok(self.accuracy(&state))
    }

    /// Outcome accuracy of a terminated episode.
    pub fn accuracy(&self, state: &EpisodeState) -> f64 {
        let gold = &self.corpus.tasks[state.task_index].gold_answer;
        match &state.answer {
            Some(a) if crate::qa::exact_match(a, gold) => 1.0,
            _ => 0.0,
        }
    }
}
