//! Pluggable text embeddings with similarity and aggregation utilities.
//!
//! Ships two providers: a deterministic synthetic provider (seeded token
//! hashing, used by every test and the synthetic environment) and a sidecar
//! provider that loads precomputed vectors so real-model embeddings can be
//! injected without linking an ML runtime.

use std::collections::HashMap;
use std::io::BufRead;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fnv1a64;
use crate::store::normalize_name;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm embedding vector")]
    ZeroNorm,
    #[error("empty input set")]
    EmptySet,
    #[error("sidecar miss: no embedding for {0:?}")]
    SidecarMiss(String),
    #[error("sidecar format: {0}")]
    SidecarFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn normalized(mut self) -> Result<Self, EmbedError> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(EmbedError::ZeroNorm);
        }
        for x in &mut self.0 {
            *x /= n;
        }
        Ok(self)
    }
}

/// cosine(a, b) = dot / (|a||b|). Zero-norm inputs are an error, never 0.
pub fn cosine_sim(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dimension() != b.dimension() {
        return Err(EmbedError::DimensionMismatch(a.dimension(), b.dimension()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroNorm);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Arithmetic mean of the vectors, L2-renormalized.
pub fn aggregate_embeddings(vectors: &[EmbeddingVector]) -> Result<EmbeddingVector, EmbedError> {
    let first = vectors.first().ok_or(EmbedError::EmptySet)?;
    let d = first.dimension();
    let mut mean = vec![0.0; d];
    for v in vectors {
        if v.dimension() != d {
            return Err(EmbedError::DimensionMismatch(d, v.dimension()));
        }
        for (m, x) in mean.iter_mut().zip(&v.0) {
            *m += x;
        }
    }
    let n = vectors.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    EmbeddingVector(mean).normalized()
}

pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

/// Surface string used to embed an entity: name plus aliases.
pub fn entity_embed_text(entity: &crate::store::Entity) -> String {
    if entity.aliases.is_empty() {
        entity.name.clone()
    } else {
        format!("{} {}", entity.name, entity.aliases.join(" "))
    }
}

fn seeded_unit_vector(seed: u64, key: &str, dimension: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(key.as_bytes()));
    (0..dimension)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

/// Deterministic synthetic embeddings from seeded token hashing.
///
/// A text embeds as the mean of its tokens' hash vectors plus a small
/// text-specific component, renormalized. Texts sharing tokens land close
/// together, which gives the synthetic corpora a controllable notion of
/// semantic proximity.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    seed: u64,
    dimension: usize,
    /// weight of the whole-text component relative to the token mean
    text_noise: f64,
}

impl SyntheticProvider {
    pub fn new(seed: u64, dimension: usize) -> Self {
        assert!(dimension >= 2, "synthetic provider needs dimension >= 2");
        Self {
            seed,
            dimension,
            text_noise: 0.2,
        }
    }

    pub fn with_text_noise(mut self, weight: f64) -> Self {
        self.text_noise = weight;
        self
    }
}

pub fn synthetic_embed(
    text: &str,
    seed: u64,
    dimension: usize,
    text_noise: f64,
) -> EmbeddingVector {
    let normalized = normalize_name(text);
    let tokens: Vec<&str> = normalized.split_whitespace().collect();
    let mut acc = vec![0.0; dimension];
    if tokens.is_empty() {
        acc = seeded_unit_vector(seed, &format!("\u{0}text\u{0}{normalized}"), dimension);
    } else {
        for tok in &tokens {
            for (a, x) in acc
                .iter_mut()
                .zip(seeded_unit_vector(seed, &format!("\u{0}tok\u{0}{tok}"), dimension))
            {
                *a += x;
            }
        }
        for a in &mut acc {
            *a /= tokens.len() as f64;
        }
        let noise = seeded_unit_vector(seed, &format!("\u{0}text\u{0}{normalized}"), dimension);
        let scale = text_noise / (dimension as f64).sqrt();
        for (a, x) in acc.iter_mut().zip(noise) {
            *a += scale * x;
        }
    }
    // Gaussian sums are zero-norm with probability zero; normalization
    // cannot fail for dimension >= 2.
    EmbeddingVector(acc).normalized().expect("nonzero synthetic vector")
}

impl EmbeddingProvider for SyntheticProvider {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(synthetic_embed(text, self.seed, self.dimension, self.text_noise))
    }
}

/// Precomputed embeddings keyed by normalized text. A miss is an error,
/// never a silent fallback.
#[derive(Debug, Clone)]
pub struct SidecarProvider {
    dimension: usize,
    table: HashMap<String, EmbeddingVector>,
}

#[derive(Deserialize)]
struct SidecarLine {
    text: String,
    vector: Vec<f64>,
}

impl SidecarProvider {
    /// Loads the line-delimited JSON sidecar format
    /// `{"text": ..., "vector": [...]}`; dimension must be uniform.
    pub fn load_jsonl<R: BufRead>(reader: R) -> Result<Self, EmbedError> {
        let mut table = HashMap::new();
        let mut dimension = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SidecarLine = serde_json::from_str(&line)
                .map_err(|e| EmbedError::SidecarFormat(format!("line {}: {e}", i + 1)))?;
            let d = *dimension.get_or_insert(rec.vector.len());
            if rec.vector.len() != d {
                return Err(EmbedError::SidecarFormat(format!(
                    "line {}: dimension {} != {}",
                    i + 1,
                    rec.vector.len(),
                    d
                )));
            }
            table.insert(
                normalize_name(&rec.text),
                EmbeddingVector(rec.vector).normalized()?,
            );
        }
        let dimension = dimension.ok_or_else(|| {
            EmbedError::SidecarFormat("empty sidecar file".into())
        })?;
        Ok(Self { dimension, table })
    }
}

impl EmbeddingProvider for SidecarProvider {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        self.table
            .get(&normalize_name(text))
            .cloned()
            .ok_or_else(|| EmbedError::SidecarMiss(text.to_string()))
    }
}
