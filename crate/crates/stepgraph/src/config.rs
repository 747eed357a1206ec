//! Flat `section.key = value` experiment configuration with CLI overrides.
//!
//! Every knob has a default, so an empty file is a valid config; unknown keys
//! and unparseable values are hard errors. `canonical()` renders the full
//! key set sorted, and `config_hash()` fingerprints that rendering so outputs
//! can be traced back to the exact configuration that produced them.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::env::CorpusSpec;
use crate::fnv1a64;
use crate::grpo::{OptAlgo, TrainConfig};
use crate::retrieval::RetrievalMode;
use crate::reward::RewardConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected 'section.key = value', got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub embed_dimension: usize,
    pub embed_seed: u64,
    pub retrieval_mode: RetrievalMode,
    pub retrieval_k: usize,
    pub max_turns: usize,
    pub reward: RewardConfig,
    pub train: TrainConfig,
    /// seeds for multi-seed reports
    pub report_seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec {
                n_entities: 80,
                n_chains: 10,
                hops: 2,
                distractors_per_chain: 4,
                seed: 7,
            },
            embed_dimension: 16,
            embed_seed: 7,
            retrieval_mode: RetrievalMode::Informativeness,
            retrieval_k: 2,
            max_turns: 4,
            reward: RewardConfig::default(),
            train: TrainConfig::default(),
            report_seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "expected true/false".into(),
        }),
    }
}

impl ExperimentConfig {
    /// Applies one `section.key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "corpus.n_entities" => self.corpus.n_entities = parse(key, value)?,
            "corpus.n_chains" => self.corpus.n_chains = parse(key, value)?,
            "corpus.hops" => self.corpus.hops = parse(key, value)?,
            "corpus.distractors_per_chain" => {
                self.corpus.distractors_per_chain = parse(key, value)?
            }
            "corpus.seed" => self.corpus.seed = parse(key, value)?,
            "embed.dimension" => self.embed_dimension = parse(key, value)?,
            "embed.seed" => self.embed_seed = parse(key, value)?,
            "retrieval.mode" => {
                self.retrieval_mode =
                    value.parse::<RetrievalMode>().map_err(|e| ConfigError::BadValue {
                        key: key.into(),
                        value: value.into(),
                        reason: e,
                    })?
            }
            "retrieval.k" => self.retrieval_k = parse(key, value)?,
            "env.max_turns" => self.max_turns = parse(key, value)?,
            "reward.lambda1" => self.reward.lambda1 = parse(key, value)?,
            "reward.lambda2" => self.reward.lambda2 = parse(key, value)?,
            "reward.rollouts_m" => self.reward.rollouts_m = parse(key, value)?,
            "reward.accuracy_weight" => self.reward.accuracy_weight = parse(key, value)?,
            "reward.format_weight" => self.reward.format_weight = parse(key, value)?,
            "reward.outcome_in_every_step" => {
                self.reward.outcome_in_every_step = parse_bool(key, value)?
            }
            "train.group_size" => self.train.group_size = parse(key, value)?,
            "train.tasks_per_iter" => self.train.tasks_per_iter = parse(key, value)?,
            "train.iterations" => self.train.iterations = parse(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, value)?,
            "train.eps_clip" => self.train.eps_clip = parse(key, value)?,
            "train.beta" => self.train.beta = parse(key, value)?,
            "train.eps_norm" => self.train.eps_norm = parse(key, value)?,
            "train.temperature" => self.train.temperature = parse(key, value)?,
            "train.optimizer" => {
                self.train.optimizer =
                    value.parse::<OptAlgo>().map_err(|e| ConfigError::BadValue {
                        key: key.into(),
                        value: value.into(),
                        reason: e,
                    })?
            }
            "train.seed" => self.train.seed = parse(key, value)?,
            "report.seeds" => {
                let mut seeds = Vec::new();
                for part in value.split(',') {
                    seeds.push(parse::<u64>(key, part.trim())?);
                }
                if seeds.is_empty() {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        value: value.into(),
                        reason: "need at least one seed".into(),
                    });
                }
                self.report_seeds = seeds;
            }
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Parses `#`-commented flat key-value text on top of the defaults.
    pub fn from_str_overrides(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line: i + 1,
                    text: raw.into(),
                });
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_str_overrides(&text)
    }

    /// `--set key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(ConfigError::Malformed {
                line: 0,
                text: assignment.into(),
            });
        };
        self.set(key.trim(), value)
    }

    /// Full key set rendered in sorted order; the parse fixpoint.
    pub fn canonical(&self) -> String {
        let mode = match self.retrieval_mode {
            RetrievalMode::Baseline => "baseline",
            RetrievalMode::Informativeness => "informativeness",
        };
        let optimizer = match self.train.optimizer {
            OptAlgo::Sgd => "sgd",
            OptAlgo::Adam => "adam",
        };
        let seeds = self
            .report_seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("corpus.distractors_per_chain", self.corpus.distractors_per_chain.to_string());
        kv("corpus.hops", self.corpus.hops.to_string());
        kv("corpus.n_chains", self.corpus.n_chains.to_string());
        kv("corpus.n_entities", self.corpus.n_entities.to_string());
        kv("corpus.seed", self.corpus.seed.to_string());
        kv("embed.dimension", self.embed_dimension.to_string());
        kv("embed.seed", self.embed_seed.to_string());
        kv("env.max_turns", self.max_turns.to_string());
        kv("report.seeds", seeds);
        kv("retrieval.k", self.retrieval_k.to_string());
        kv("retrieval.mode", mode.to_string());
        kv("reward.accuracy_weight", format!("{}", self.reward.accuracy_weight));
        kv("reward.format_weight", format!("{}", self.reward.format_weight));
        kv("reward.lambda1", format!("{}", self.reward.lambda1));
        kv("reward.lambda2", format!("{}", self.reward.lambda2));
        kv("reward.outcome_in_every_step", self.reward.outcome_in_every_step.to_string());
        kv("reward.rollouts_m", self.reward.rollouts_m.to_string());
        kv("train.beta", format!("{}", self.train.beta));
        kv("train.eps_clip", format!("{}", self.train.eps_clip));
        kv("train.eps_norm", format!("{}", self.train.eps_norm));
        kv("train.group_size", self.train.group_size.to_string());
        kv("train.iterations", self.train.iterations.to_string());
        kv("train.learning_rate", format!("{}", self.train.learning_rate));
        kv("train.optimizer", optimizer.to_string());
        kv("train.seed", self.train.seed.to_string());
        kv("train.tasks_per_iter", self.train.tasks_per_iter.to_string());
        kv("train.temperature", format!("{}", self.train.temperature));
        out
    }

    /// Stable fingerprint of the canonical rendering.
    pub fn config_hash(&self) -> u64 {
        fnv1a64(self.canonical().as_bytes())
    }
}
