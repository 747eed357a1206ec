//! Deterministic synthetic corpus generation.
//!
//! Each task is a chain of hyperedges `start -rel_0-> m_1 -rel_1-> ... -> answer`.
//! Relation words are fixed per hop index across the corpus, so a policy can
//! learn the hop schedule from turn features. Distractor edges reuse the
//! per-hop relation word but lead into high-degree hub entities shared across
//! chains: textually they look as good as the gold edge, structurally they
//! are far less informative.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{ingest_facts, FactRecord, KnowledgeHypergraph};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("infeasible corpus spec: {0}")]
    Infeasible(String),
    #[error("corpus build failed: {0}")]
    Build(String),
    #[error("task {task} invalid: {reason}")]
    InvalidTask { task: usize, reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_entities: usize,
    pub n_chains: usize,
    pub hops: usize,
    pub distractors_per_chain: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub question: String,
    pub gold_answer: String,
    /// hyperedge ids of the gold chain, in traversal order
    pub gold_chain: Vec<usize>,
    pub start_entity: String,
    /// entity names along the chain, start first, answer last
    pub chain_entities: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub graph: KnowledgeHypergraph,
    pub tasks: Vec<SyntheticTask>,
    /// relation word for each hop index
    pub relations: Vec<String>,
    pub spec: CorpusSpec,
}

const CONSONANTS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(CONSONANTS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
    }
    w
}

fn unique_words(rng: &mut ChaCha8Rng, n: usize, syllables: usize) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut w = pseudo_word(rng, syllables);
        // rare collisions: extend rather than loop forever on tiny spaces
        while !seen.insert(w.clone()) {
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        out.push(w);
    }
    out
}

fn hub_count(n_chains: usize) -> usize {
    (n_chains / 10).max(2)
}

/// Deterministic corpus with one answerable task per chain.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus, CorpusError> {
    if spec.hops == 0 {
        return Err(CorpusError::Infeasible("hops must be >= 1".into()));
    }
    if spec.n_chains == 0 {
        return Err(CorpusError::Infeasible("n_chains must be >= 1".into()));
    }
    let chain_slots = spec.n_chains * (spec.hops + 1);
    let hubs = if spec.distractors_per_chain > 0 {
        hub_count(spec.n_chains)
    } else {
        0
    };
    if chain_slots + hubs > spec.n_entities {
        return Err(CorpusError::Infeasible(format!(
            "n_entities = {} but {} chains of {} hops need {} chain entities plus {} hubs",
            spec.n_entities, spec.n_chains, spec.hops, chain_slots, hubs
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let relations = unique_words(&mut rng, spec.hops, 3);
    // every entity shares one corpus-wide token: inter-entity similarity is
    // then uniformly positive, so informativeness (not embedding noise)
    // decides rankings among edges that tie on the query entity
    let stem = unique_words(&mut rng, 1, 2).pop().unwrap();
    let mut words = unique_words(&mut rng, spec.n_entities, 3);
    // entity and relation words must not collide: relations are not entities
    words.retain(|n| !relations.contains(n) && *n != stem);
    while words.len() < spec.n_entities {
        let extra = unique_words(&mut rng, 1, 4).pop().unwrap();
        if !relations.contains(&extra) && extra != stem && !words.contains(&extra) {
            words.push(extra);
        }
    }
    let names: Vec<String> = words.iter().map(|w| format!("{stem} {w}")).collect();

    let chain_names: Vec<Vec<String>> = (0..spec.n_chains)
        .map(|c| {
            names[c * (spec.hops + 1)..(c + 1) * (spec.hops + 1)].to_vec()
        })
        .collect();
    let hub_names: Vec<String> = names[chain_slots..chain_slots + hubs].to_vec();
    let filler_names: Vec<String> = names[chain_slots + hubs..].to_vec();

    let mut records: Vec<FactRecord> = Vec::new();
    let mut push = |text: String, entities: Vec<String>| {
        records.push(FactRecord {
            edge_id: None,
            text,
            entities,
            source_doc: None,
        });
    };

    // gold chain edges first: ties in retrieval break toward lower edge ids
    let mut gold_chains: Vec<Vec<usize>> = Vec::with_capacity(spec.n_chains);
    let mut next_edge = 0usize;
    for chain in &chain_names {
        let mut ids = Vec::with_capacity(spec.hops);
        for t in 0..spec.hops {
            push(
                format!("{} {} {}", chain[t], relations[t], chain[t + 1]),
                vec![chain[t].clone(), chain[t + 1].clone()],
            );
            ids.push(next_edge);
            next_edge += 1;
        }
        gold_chains.push(ids);
    }

    if hubs > 0 {
        for (c, chain) in chain_names.iter().enumerate() {
            for j in 0..spec.distractors_per_chain {
                // walk (hop, hub) combinations without repeating until
                // hops x hubs distractors; repeats beyond that dedup away
                let hop = j % spec.hops;
                let hub = &hub_names[(c + j / spec.hops) % hubs];
                if hop == 0 {
                    push(
                        format!("{} {} {}", chain[0], relations[0], hub),
                        vec![chain[0].clone(), hub.clone()],
                    );
                } else {
                    // later-hop distractors are 3-ary: dragging the previous
                    // chain entity along keeps the on-chain entity's
                    // informativeness high while the text still mimics the
                    // hop query
                    push(
                        format!(
                            "{} {} {} {}",
                            chain[hop - 1],
                            chain[hop],
                            relations[hop],
                            hub
                        ),
                        vec![chain[hop - 1].clone(), chain[hop].clone(), hub.clone()],
                    );
                }
            }
        }
    }

    // filler profile edges keep |V| at spec.n_entities
    for f in &filler_names {
        push(format!("{f} keeps a quiet profile"), vec![f.clone()]);
    }

    let (graph, report) = ingest_facts(
        records.into_iter().enumerate().map(|(i, r)| (i + 1, Ok(r))),
    )
    .map_err(|e| CorpusError::Build(e.to_string()))?;
    if !report.rejected.is_empty() {
        return Err(CorpusError::Build(format!(
            "generator produced rejected records: {:?}",
            report.rejected
        )));
    }

    let tasks: Vec<SyntheticTask> = chain_names
        .iter()
        .zip(&gold_chains)
        .map(|(chain, gold)| {
            let hops_desc = relations
                .iter()
                .map(String::as_str)
                .collect::<Vec<_>>()
                .join(" then ");
            SyntheticTask {
                question: format!(
                    "starting at {} follow {} and name the entity reached",
                    chain[0], hops_desc
                ),
                gold_answer: chain[spec.hops].clone(),
                gold_chain: gold.clone(),
                start_entity: chain[0].clone(),
                chain_entities: chain.clone(),
            }
        })
        .collect();

    let corpus = Corpus {
        graph,
        tasks,
        relations,
        spec: spec.clone(),
    };
    validate_tasks(&corpus)?;
    Ok(corpus)
}

/// Independent validator: every gold chain must be connected, start at the
/// task's start entity and end in an edge containing the gold answer.
pub fn validate_tasks(corpus: &Corpus) -> Result<(), CorpusError> {
    for (i, task) in corpus.tasks.iter().enumerate() {
        let err = |reason: String| CorpusError::InvalidTask { task: i, reason };
        if task.gold_chain.is_empty() {
            return Err(err("empty gold chain".into()));
        }
        let start = corpus
            .graph
            .lookup_entity(&task.start_entity)
            .ok_or_else(|| err(format!("unknown start entity {:?}", task.start_entity)))?;
        let answer = corpus
            .graph
            .lookup_entity(&task.gold_answer)
            .ok_or_else(|| err(format!("unknown answer entity {:?}", task.gold_answer)))?;
        let mut prev: Option<&[usize]> = None;
        for (pos, &edge_id) in task.gold_chain.iter().enumerate() {
            let edge = corpus
                .graph
                .edge(edge_id)
                .ok_or_else(|| err(format!("unknown edge {edge_id}")))?;
            if pos == 0 && !edge.entity_ids.contains(&start) {
                return Err(err("first edge does not contain the start entity".into()));
            }
            if let Some(prev_ids) = prev {
                if !edge.entity_ids.iter().any(|v| prev_ids.contains(v)) {
                    return Err(err(format!("edges {pos} and {} share no entity", pos - 1)));
                }
            }
            prev = Some(&edge.entity_ids);
        }
        if !prev.unwrap().contains(&answer) {
            return Err(err("last edge does not contain the gold answer".into()));
        }
    }
    Ok(())
}
