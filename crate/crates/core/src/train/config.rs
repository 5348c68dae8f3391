use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{StrategyMix, World};
use crate::error::{EmpoError, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::par::Execution;
use crate::seed::derive_seed;

/// Model size knobs. Vocabulary and patch count come from the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub context_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embed_dim: 24,
            num_blocks: 2,
            context_len: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Preference records in JSONL. Generated per seed when absent.
    pub path: Option<PathBuf>,
    pub records: usize,
    pub mix: StrategyMix,
    pub eval_scenes: usize,
    /// Seed of the held-out benchmark, shared by every run.
    pub eval_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            records: 2000,
            mix: StrategyMix::default(),
            eval_scenes: 500,
            eval_seed: 20_240_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 5e-4,
            epochs: 4,
            batch_size: 8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// Supervised warm-start that produces the base model. Caption targets are
/// made noisy by appending the strongest absent co-occurrence partner, which
/// is where the base model's hallucinations come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub caption_noise: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            caption_noise: 0.4,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                learning_rate: 1e-2,
                batch_size: 16,
                ..OptimizerConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub parallel: bool,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub data: DataSection,
    pub pretrain: PretrainConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
            parallel: true,
            model: ModelSection::default(),
            loss: LossConfig::default(),
            data: DataSection::default(),
            pretrain: PretrainConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

const MODEL_STREAM: u64 = 0x6d6f_6465;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| EmpoError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EmpoError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| EmpoError::Config(e.to_string()))
    }

    /// Applies `dotted.key=value`. The value is read as a TOML literal and
    /// falls back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| EmpoError::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| EmpoError::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts.split_last().expect("split yields at least one part");
        let mut node = &mut root;
        for p in path {
            node = node
                .get_mut(*p)
                .filter(|n| n.is_table())
                .ok_or_else(|| EmpoError::Config(format!("unknown config section `{p}` in `{key}`")))?;
        }
        node.as_table_mut()
            .expect("sections are tables")
            .insert(last.to_string(), value);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| EmpoError::Config(format!("`{key}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(EmpoError::Config("seed list is empty".into()));
        }
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return Err(EmpoError::Config(format!("dataset {} does not exist", p.display())));
            }
        }
        for (name, o) in [
            ("optimizer", &self.optimizer),
            ("pretrain.optimizer", &self.pretrain.optimizer),
        ] {
            if o.batch_size == 0 {
                return Err(EmpoError::Config(format!("{name}.batch_size must be positive")));
            }
            if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
                return Err(EmpoError::Config(format!(
                    "{name}.learning_rate must be finite and non-negative"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.pretrain.caption_noise) {
            return Err(EmpoError::Config("pretrain.caption_noise must lie in [0, 1]".into()));
        }
        if self.data.path.is_none() && self.data.records == 0 {
            return Err(EmpoError::Config("data.records must be positive".into()));
        }
        self.loss.validate()
    }

    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn model_config(&self, world: &World, seed: u64) -> ModelConfig {
        let cfg = ModelConfig {
            vocab_size: world.vocab_size(),
            embed_dim: self.model.embed_dim,
            num_patches: world.num_cells(),
            context_len: self.model.context_len,
            num_blocks: self.model.num_blocks,
            seed: derive_seed(seed, 0, MODEL_STREAM),
        };
        debug_assert!(cfg.validate().is_ok());
        cfg
    }
}
