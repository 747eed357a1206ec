//! Hyperedge scoring and top-k retrieval.
//!
//! Two routes: baseline context-similarity (query text vs hyperedge text)
//! and entity-informativeness scoring, which weights each hyperedge entity's
//! structural informativeness by its semantic share within the edge.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{
    aggregate_embeddings, cosine_sim, entity_embed_text, EmbedError, EmbeddingProvider,
    EmbeddingVector,
};
use crate::matcher::EntityMatcher;
use crate::store::{KnowledgeHypergraph, StoreError};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("empty query entity set; caller must fall back to baseline retrieval")]
    EmptyQueryEntities,
    #[error("graph has no hyperedges")]
    EmptyGraph,
    #[error("k must be >= 1")]
    ZeroK,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    Baseline,
    Informativeness,
}

impl std::str::FromStr for RetrievalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "informativeness" => Ok(Self::Informativeness),
            other => Err(format!("unknown retrieval mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalQuery {
    pub text: String,
    pub turn_index: usize,
    pub explicit_entities: Option<Vec<usize>>,
    pub k: usize,
}

/// Per-entity scoring row of one hyperedge: semantic score s_v, within-edge
/// share, informativeness I(v) and their product R(v,e).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntityScoreRow {
    pub entity_id: usize,
    pub semantic: f64,
    pub share: f64,
    pub informativeness: f64,
    pub relevance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredHyperedge {
    pub edge_id: usize,
    pub score: f64,
    pub breakdown: Vec<EntityScoreRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievedFact {
    pub edge_id: usize,
    pub text: String,
    pub entities: Vec<String>,
    #[serde(skip)]
    pub entity_ids: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievedFactSet {
    pub facts: Vec<RetrievedFact>,
    pub query_echo: String,
    pub mode: RetrievalMode,
    pub truncated: bool,
}

impl RetrievedFactSet {
    /// Union of the retrieved facts' entity id sets (V(G_t), set semantics).
    pub fn entity_union(&self) -> std::collections::BTreeSet<usize> {
        self.facts
            .iter()
            .flat_map(|f| f.entity_ids.iter().copied())
            .collect()
    }

    /// Knowledge text appended to the agent state, facts in rank order.
    pub fn knowledge_text(&self) -> String {
        self.facts
            .iter()
            .map(|f| f.text.as_str())
            .collect::<Vec<_>>()
            .join(". ")
    }
}

/// Ranks hyperedges for queries against one immutable graph.
///
/// Entity and hyperedge embeddings are computed once at construction; scoring
/// afterwards is pure, so the engine is safe for concurrent queries.
pub struct RetrievalEngine<'g> {
    graph: &'g KnowledgeHypergraph,
    matcher: EntityMatcher,
    entity_embeddings: Vec<EmbeddingVector>,
    edge_embeddings: Vec<EmbeddingVector>,
    provider: Box<dyn EmbeddingProvider>,
}

impl<'g> RetrievalEngine<'g> {
    pub fn new(
        graph: &'g KnowledgeHypergraph,
        provider: Box<dyn EmbeddingProvider>,
    ) -> Result<Self, RetrievalError> {
        let entity_embeddings = graph
            .entities()
            .iter()
            .map(|e| provider.embed(&entity_embed_text(e)))
            .collect::<Result<Vec<_>, _>>()?;
        let edge_embeddings = graph
            .hyperedges()
            .iter()
            .map(|e| provider.embed(&e.text))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            graph,
            matcher: EntityMatcher::build(graph),
            entity_embeddings,
            edge_embeddings,
            provider,
        })
    }

    pub fn graph(&self) -> &KnowledgeHypergraph {
        self.graph
    }

    pub fn matcher(&self) -> &EntityMatcher {
        &self.matcher
    }

    fn fact(&self, edge_id: usize, score: f64) -> RetrievedFact {
        let e = &self.graph.hyperedges()[edge_id];
        RetrievedFact {
            edge_id,
            text: e.text.clone(),
            entities: e
                .entity_ids
                .iter()
                .map(|&v| self.graph.entities()[v].name.clone())
                .collect(),
            entity_ids: e.entity_ids.clone(),
            score,
        }
    }

    /// Top-k facts by descending score, ties broken by ascending edge id.
    fn take_topk(
        &self,
        mut scored: Vec<(usize, f64)>,
        k: usize,
        query_echo: String,
        mode: RetrievalMode,
    ) -> RetrievedFactSet {
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let truncated = k > scored.len();
        scored.truncate(k);
        RetrievedFactSet {
            facts: scored
                .into_iter()
                .map(|(id, s)| self.fact(id, s))
                .collect(),
            query_echo,
            mode,
            truncated,
        }
    }

    /// Context-similarity retrieval: top-k hyperedges by
    /// cosine(query text, hyperedge text).
    pub fn baseline_retrieve(
        &self,
        query_text: &str,
        k: usize,
    ) -> Result<RetrievedFactSet, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if self.graph.edge_count() == 0 {
            return Err(RetrievalError::EmptyGraph);
        }
        let q = self.provider.embed(query_text)?;
        let scored = self
            .edge_embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| Ok((i, cosine_sim(&q, e)?)))
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        Ok(self.take_topk(scored, k, query_text.to_string(), RetrievalMode::Baseline))
    }

    /// s_v for every entity in the graph: cosine against the renormalized
    /// mean embedding of the query entities.
    pub fn entity_semantic_scores(
        &self,
        query_entities: &[usize],
    ) -> Result<Vec<f64>, RetrievalError> {
        if query_entities.is_empty() {
            return Err(RetrievalError::EmptyQueryEntities);
        }
        let members: Vec<EmbeddingVector> = query_entities
            .iter()
            .map(|&v| self.entity_embeddings[v].clone())
            .collect();
        let query_vec = aggregate_embeddings(&members)?;
        self.entity_embeddings
            .iter()
            .map(|e| Ok(cosine_sim(&query_vec, e)?))
            .collect()
    }

    /// I(v) = ln(1 + |relevant edges containing v| / degree(v)).
    pub fn entity_informativeness(
        &self,
        query_entities: &[usize],
    ) -> Result<Vec<f64>, RetrievalError> {
        let relevant = self.graph.edges_containing(query_entities)?;
        Ok((0..self.graph.entity_count())
            .map(|v| {
                let incident = self.graph.incident_edges(v);
                let hits = incident.iter().filter(|e| relevant.contains(e)).count();
                // degree >= 1 is a store invariant
                (1.0 + hits as f64 / incident.len() as f64).ln()
            })
            .collect())
    }

    /// Within-edge shares: clipped-positive semantic scores normalized over
    /// the edge's entities; uniform when every clipped score is zero.
    pub fn within_edge_shares(entity_ids: &[usize], semantic: &[f64]) -> Vec<f64> {
        let clipped: Vec<f64> = entity_ids
            .iter()
            .map(|&v| semantic[v].max(0.0))
            .collect();
        let total: f64 = clipped.iter().sum();
        if total == 0.0 {
            vec![1.0 / entity_ids.len() as f64; entity_ids.len()]
        } else {
            clipped.into_iter().map(|s| s / total).collect()
        }
    }

    /// Full informativeness scoring: per-edge score with per-entity breakdown.
    pub fn score_hyperedges(
        &self,
        query_entities: &[usize],
    ) -> Result<Vec<ScoredHyperedge>, RetrievalError> {
        let semantic = self.entity_semantic_scores(query_entities)?;
        let info = self.entity_informativeness(query_entities)?;
        Ok(self
            .graph
            .hyperedges()
            .iter()
            .map(|e| {
                let shares = Self::within_edge_shares(&e.entity_ids, &semantic);
                let breakdown: Vec<EntityScoreRow> = e
                    .entity_ids
                    .iter()
                    .zip(shares)
                    .map(|(&v, share)| EntityScoreRow {
                        entity_id: v,
                        semantic: semantic[v],
                        share,
                        informativeness: info[v],
                        relevance: share * info[v],
                    })
                    .collect();
                ScoredHyperedge {
                    edge_id: e.id,
                    score: breakdown.iter().map(|r| r.relevance).sum(),
                    breakdown,
                }
            })
            .collect())
    }

    /// Resolves the query entity set: explicit override, else dictionary
    /// extraction on the query text.
    pub fn resolve_query_entities(&self, query: &RetrievalQuery) -> Vec<usize> {
        match &query.explicit_entities {
            Some(ids) => ids.clone(),
            None => self.matcher.extract_entities(&query.text),
        }
    }

    /// Informativeness-mode top-k, falling back to baseline retrieval when
    /// the query mentions no known entity.
    pub fn retrieve_topk(
        &self,
        query: &RetrievalQuery,
    ) -> Result<RetrievedFactSet, RetrievalError> {
        if query.k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if self.graph.edge_count() == 0 {
            return Err(RetrievalError::EmptyGraph);
        }
        let entities = self.resolve_query_entities(query);
        if entities.is_empty() {
            return self.baseline_retrieve(&query.text, query.k);
        }
        let scored = self.score_hyperedges(&entities)?;
        Ok(self.take_topk(
            scored.into_iter().map(|s| (s.edge_id, s.score)).collect(),
            query.k,
            query.text.clone(),
            RetrievalMode::Informativeness,
        ))
    }

    /// Mode dispatch used by the CLI and the environment.
    pub fn retrieve(
        &self,
        query: &RetrievalQuery,
        mode: RetrievalMode,
    ) -> Result<RetrievedFactSet, RetrievalError> {
        match mode {
            RetrievalMode::Baseline => self.baseline_retrieve(&query.text, query.k),
            RetrievalMode::Informativeness => self.retrieve_topk(query),
        }
    }
}

pub const LN_2: f64 = std::f64::consts::LN_2;
