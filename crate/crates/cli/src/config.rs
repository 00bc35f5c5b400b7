//! Run configuration: one TOML document, every field defaulted, unknown keys
//! rejected so a typo in a sweep fails loudly instead of silently using a
//! default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use recloop_core::corpus::TaskKind;
use recloop_core::metrics::{ComponentKind, RewardComponent, RewardSpec};
use recloop_core::optim::GrpoConfig;
use recloop_core::policy::SamplerConfig;
use recloop_core::retrieval::Bm25Params;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Invalid { path: String, message: String },
    #[error("config field error: {0}")]
    Field(String),
}

/// Training method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Grpo,
    Sft,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskKind,
    pub corpus: PathBuf,
    pub relevance: PathBuf,
    pub train_states: PathBuf,
    pub valid_states: PathBuf,
    pub test_states: PathBuf,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub method: Method,
    pub bm25: Bm25Section,
    pub reward: RewardSection,
    pub policy: PolicySection,
    pub grpo: GrpoSection,
    pub sft: SftSection,
    pub eval: EvalSection,
    pub env: EnvSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::ProductSearch,
            corpus: "corpus.jsonl".into(),
            relevance: "relevance.jsonl".into(),
            train_states: "train_states.txt".into(),
            valid_states: "valid_states.txt".into(),
            test_states: "test_states.txt".into(),
            seed: 0,
            out_dir: "run_out".into(),
            method: Method::Grpo,
            bm25: Bm25Section::default(),
            reward: RewardSection::default(),
            policy: PolicySection::default(),
            grpo: GrpoSection::default(),
            sft: SftSection::default(),
            eval: EvalSection::default(),
            env: EnvSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bm25Section {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Section {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    /// Training-reward retrieval cutoff; omitted means "corpus size" (the
    /// desk-scale stand-in for a deep training cutoff).
    pub k_train: Option<usize>,
    pub k_eval: usize,
    /// Composite training-reward components; empty means pure NDCG at the
    /// training cutoff.
    pub components: Vec<ComponentSection>,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            k_train: None,
            k_eval: 10,
            components: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSection {
    pub kind: ComponentKind,
    #[serde(default)]
    pub cutoff: Option<usize>,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub l_max: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden_dim: 32,
            l_max: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoSection {
    pub steps: u64,
    pub group_size: usize,
    pub clip: f64,
    pub kl_coef: f64,
    pub learning_rate: f64,
    pub minibatch: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub advantage_epsilon: f64,
}

impl Default for GrpoSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            group_size: 12,
            clip: 0.2,
            kl_coef: 0.001,
            learning_rate: 1e-3,
            minibatch: 8,
            epochs: 1,
            temperature: 0.6,
            top_p: 0.95,
            advantage_epsilon: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftSection {
    /// Samples drawn from the generating policy.
    pub n_samples: u64,
    pub learning_rate: f64,
    pub steps: u64,
    pub minibatch: usize,
}

impl Default for SftSection {
    fn default() -> Self {
        Self {
            n_samples: 100_000,
            learning_rate: 0.01,
            steps: 500,
            minibatch: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Validation cadence in trainer steps.
    pub every: u64,
    /// Draws per state for sampled evaluation statistics.
    pub samples_per_state: usize,
    /// Sampling settings for evaluation draws, independent of the rollout
    /// exploration settings.
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            every: 50,
            samples_per_state: 16,
            temperature: 0.6,
            top_p: 0.95,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    /// History truncation for sequential states.
    pub history_len: usize,
    /// Candidate count for rerank states.
    pub rerank_m: usize,
    /// NDCG cutoff for rerank rewards.
    pub rerank_cutoff: usize,
    /// Always-valid constrained sampling for rerank rollouts (ablation).
    pub rerank_masked: bool,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            history_len: 10,
            rerank_m: 8,
            rerank_cutoff: 10,
            rerank_masked: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Invalid {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ConfigError> {
        let path = path.as_ref();
        let text = toml::to_string_pretty(self).map_err(|e| ConfigError::Invalid {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Field-level checks that do not require touching the data files.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |m: String| Err(ConfigError::Field(m));
        if self.policy.embed_dim == 0 || self.policy.hidden_dim == 0 || self.policy.l_max == 0 {
            return field("policy dims and l_max must be positive".into());
        }
        if self.reward.k_eval == 0 {
            return field("reward.k_eval must be >= 1".into());
        }
        if let Some(k) = self.reward.k_train {
            if k < self.reward.k_eval {
                return field(format!(
                    "reward.k_train {k} must be >= reward.k_eval {}",
                    self.reward.k_eval
                ));
            }
        }
        if self.env.history_len == 0 {
            return field("env.history_len must be >= 1".into());
        }
        if self.env.rerank_m < 2 {
            return field("env.rerank_m must be >= 2".into());
        }
        if self.eval.samples_per_state == 0 {
            return field("eval.samples_per_state must be >= 1".into());
        }
        self.grpo_config()
            .validate()
            .map_err(|e| ConfigError::Field(e.to_string()))?;
        self.bm25_params()
            .validate()
            .map_err(ConfigError::Field)?;
        Ok(())
    }

    /// Existence checks for every referenced input path.
    pub fn validate_paths(&self) -> Result<(), ConfigError> {
        for (name, path) in [
            ("corpus", &self.corpus),
            ("relevance", &self.relevance),
            ("train_states", &self.train_states),
            ("valid_states", &self.valid_states),
            ("test_states", &self.test_states),
        ] {
            if !path.exists() {
                return Err(ConfigError::Field(format!(
                    "{name} path {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn bm25_params(&self) -> Bm25Params {
        Bm25Params {
            k1: self.bm25.k1,
            b: self.bm25.b,
        }
    }

    pub fn grpo_config(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.grpo.group_size,
            clip: self.grpo.clip,
            kl_coef: self.grpo.kl_coef,
            learning_rate: self.grpo.learning_rate,
            minibatch: self.grpo.minibatch,
            epochs: self.grpo.epochs,
            sampler: SamplerConfig {
                temperature: self.grpo.temperature,
                top_p: self.grpo.top_p,
                seed: self.seed,
            },
            advantage_epsilon: self.grpo.advantage_epsilon,
        }
    }

    /// Training cutoff resolved against the corpus size.
    pub fn k_train(&self, corpus_len: usize) -> usize {
        self.reward.k_train.unwrap_or(corpus_len).max(self.reward.k_eval)
    }

    /// The composite training reward. An empty component list means pure
    /// NDCG at the training cutoff; ranking components without an explicit
    /// cutoff inherit it too.
    pub fn reward_spec(&self, corpus_len: usize) -> RewardSpec {
        let k_train = self.k_train(corpus_len);
        let default_cutoff = match self.task {
            TaskKind::Rerank => self.env.rerank_cutoff,
            _ => k_train,
        };
        if self.reward.components.is_empty() {
            return RewardSpec::ndcg(default_cutoff);
        }
        RewardSpec {
            components: self
                .reward
                .components
                .iter()
                .map(|c| RewardComponent {
                    kind: c.kind,
                    cutoff: match c.kind {
                        ComponentKind::Format => None,
                        _ => Some(c.cutoff.unwrap_or(default_cutoff)),
                    },
                    weight: c.weight,
                })
                .collect(),
        }
    }
}

/// Reads a state-id list, one id per line, ignoring blanks.
pub fn read_state_list(path: impl AsRef<Path>) -> Result<Vec<String>, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_document() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.grpo.group_size, 12);
        assert_eq!(cfg.grpo.kl_coef, 0.001);
        assert_eq!(cfg.grpo.temperature, 0.6);
        assert_eq!(cfg.grpo.top_p, 0.95);
        assert_eq!(cfg.bm25.k1, 1.2);
        assert_eq!(cfg.bm25.b, 0.75);
        assert_eq!(cfg.env.history_len, 10);
        assert_eq!(cfg.reward.k_eval, 10);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("group_sizee = 3").unwrap_err();
        assert!(err.to_string().contains("group_sizee"));
        let err = toml::from_str::<RunConfig>("[grpo]\ngroup_sizee = 3").unwrap_err();
        assert!(err.to_string().contains("group_sizee"));
    }

    #[test]
    fn roundtrip_through_file() {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.grpo.steps = 77;
        cfg.reward.components = vec![ComponentSection {
            kind: ComponentKind::Format,
            cutoff: None,
            weight: 0.25,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        cfg.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.seed, 9);
        assert_eq!(loaded.grpo.steps, 77);
        assert_eq!(loaded.reward.components.len(), 1);
    }

    #[test]
    fn invalid_fields_are_diagnosed() {
        let mut cfg = RunConfig::default();
        cfg.reward.k_train = Some(5);
        cfg.reward.k_eval = 10;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("k_train"));

        let mut cfg = RunConfig::default();
        cfg.grpo.group_size = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn reward_spec_defaults_to_train_cutoff_ndcg() {
        let cfg = RunConfig::default();
        let spec = cfg.reward_spec(200);
        assert_eq!(spec.components.len(), 1);
        assert_eq!(spec.components[0].cutoff, Some(200));
        assert_eq!(cfg.k_train(200), 200);
    }
}
