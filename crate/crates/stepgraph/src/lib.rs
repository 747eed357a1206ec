//! Hypergraph knowledge retrieval with step-progress-aware policy optimization.
//!
//! The library is organized around three layers:
//!
//! - a knowledge layer: [`store`] (n-ary fact hypergraph), [`embed`]
//!   (pluggable text embeddings), [`matcher`] (dictionary entity extraction)
//!   and [`retrieval`] (baseline similarity and entity-informativeness
//!   hyperedge scoring);
//! - a learning layer: [`reward`] (dense per-step rewards), [`grpo`]
//!   (group-relative advantages, clipped surrogate objective, training loop);
//! - a harness layer: [`env`] (synthetic multi-hop QA environment with toy
//!   softmax policies), [`config`] and [`service`] backing the CLI.

pub mod config;
pub mod embed;
pub mod env;
pub mod grpo;
pub mod matcher;
pub mod qa;
pub mod retrieval;
pub mod reward;
pub mod service;
pub mod store;

/// FNV-1a over bytes; the crate's stable text -> seed derivation.
///
/// Used wherever a deterministic, platform-independent hash is needed
/// (synthetic embeddings, config hashes). Not cryptographic.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Mixes a base seed with a stream index into an independent 64-bit seed.
pub fn split_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = seed ^ stream.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
