//! The defaults ledger: one embedded TOML file holds every tunable, and an
//! optional override file replaces individual keys.

use std::path::Path;

use serde::Deserialize;

use crate::lora::AdapterSpec;

pub const DEFAULTS_TOML: &str = include_str!("../defaults.toml");

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterDefaults {
    pub rank: usize,
    pub targets: Vec<String>,
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalDefaults {
    pub top_k: usize,
    pub tau: f64,
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingDefaults {
    pub learning_rate: f64,
    pub expert_batch: usize,
    pub expert_steps: usize,
    pub expert_examples: usize,
    pub few_shot_batch: usize,
    pub few_shot_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainDefaults {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationDefaults {
    pub shots: Vec<usize>,
    pub eval_queries: usize,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentDefaults {
    pub max_train_tasks: usize,
    pub max_test_tasks: usize,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defaults {
    pub adapter: AdapterDefaults,
    pub retrieval: RetrievalDefaults,
    pub training: TrainingDefaults,
    pub pretrain: PretrainDefaults,
    pub evaluation: EvaluationDefaults,
    pub experiment: ExperimentDefaults,
}

impl Default for Defaults {
    fn default() -> Self {
        Defaults::from_toml_str("").expect("embedded defaults are valid")
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in over {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (None, _) => return Err(ConfigError::Invalid { key, message: "unknown key".into() }),
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o, &key)?,
            (Some(toml::Value::Table(_)), _) => {
                return Err(ConfigError::Invalid { key, message: "expected a section".into() })
            }
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

impl Defaults {
    /// Applies the overrides in `text` on top of the embedded defaults.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let mut base: toml::Table = DEFAULTS_TOML.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let over: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        merge_tables(&mut base, over, "")?;
        let d: Defaults = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: &str| Err(ConfigError::Invalid { key: key.into(), message: message.into() });
        if let Err(e) = AdapterSpec::new(self.adapter.targets.clone(), self.adapter.rank) {
            let key = if self.adapter.rank == 0 { "adapter.rank" } else { "adapter.targets" };
            return bad(key, &e.to_string());
        }
        let t = self.retrieval.tau;
        if !(t > 0.0 && t <= 1.0) {
            return bad("retrieval.tau", "must lie in (0, 1]");
        }
        let lr = [("training.learning_rate", self.training.learning_rate), ("pretrain.learning_rate", self.pretrain.learning_rate)];
        for (key, v) in lr {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, "must be positive");
            }
        }
        let positive = [
            ("retrieval.top_k", self.retrieval.top_k),
            ("retrieval.embed_dim", self.retrieval.embed_dim),
            ("training.expert_batch", self.training.expert_batch),
            ("training.expert_steps", self.training.expert_steps),
            ("training.expert_examples", self.training.expert_examples),
            ("training.few_shot_batch", self.training.few_shot_batch),
            ("training.few_shot_steps", self.training.few_shot_steps),
            ("pretrain.steps", self.pretrain.steps),
            ("pretrain.batch", self.pretrain.batch),
            ("evaluation.eval_queries", self.evaluation.eval_queries),
            ("evaluation.seeds", self.evaluation.seeds),
        ];
        for (key, v) in positive {
            if v == 0 {
                return bad(key, "must be positive");
            }
        }
        if self.evaluation.shots.is_empty() || self.evaluation.shots.contains(&0) {
            return bad("evaluation.shots", "must be a non-empty list of positive counts");
        }
        Ok(())
    }

    pub fn adapter_spec(&self) -> AdapterSpec {
        AdapterSpec::new(self.adapter.targets.clone(), self.adapter.rank).expect("validated")
    }
}

/// Embedded defaults, overridden by the file at `path` when given.
pub fn load_defaults(path: Option<&Path>) -> Result<Defaults, ConfigError> {
    match path {
        None => Defaults::from_toml_str(""),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ConfigError::Io { path: p.display().to_string(), message: e.to_string() })?;
            Defaults::from_toml_str(&text)
        }
    }
}
