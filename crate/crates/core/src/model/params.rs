use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{EmpoError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_patches: usize,
    pub context_len: usize,
    pub num_blocks: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            embed_dim: 32,
            num_patches: 16,
            context_len: 48,
            num_blocks: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 6 || self.embed_dim == 0 || self.num_patches == 0 || self.num_blocks == 0 {
            return Err(EmpoError::Config(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }

    /// Initialization standard deviation, `0.02 / √embed_dim`.
    pub fn init_std(&self) -> f64 {
        0.02 / (self.embed_dim as f64).sqrt()
    }
}

/// Projections of one block: causal self-attention over the response
/// prefix, then cross-attention over the image patches and instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub self_query: Tensor,
    pub self_key: Tensor,
    pub self_value: Tensor,
    pub self_output: Tensor,
    pub cross_query: Tensor,
    pub cross_key: Tensor,
    pub cross_value: Tensor,
    pub cross_output: Tensor,
}

const BLOCK_NAMES: [&str; 8] = [
    "self_query",
    "self_key",
    "self_value",
    "self_output",
    "cross_query",
    "cross_key",
    "cross_value",
    "cross_output",
];

impl BlockParams {
    fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.self_query,
            &self.self_key,
            &self.self_value,
            &self.self_output,
            &self.cross_query,
            &self.cross_key,
            &self.cross_value,
            &self.cross_output,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.self_query,
            &mut self.self_key,
            &mut self.self_value,
            &mut self.self_output,
            &mut self.cross_query,
            &mut self.cross_key,
            &mut self.cross_value,
            &mut self.cross_output,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub patch_embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub unembedding: Tensor,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, d) = (config.vocab_size, config.embed_dim);
        let sq = || Tensor::zeros(&[d, d]);
        Self {
            config: config.clone(),
            token_embedding: Tensor::zeros(&[v, d]),
            patch_embedding: Tensor::zeros(&[v, d]),
            blocks: (0..config.num_blocks)
                .map(|_| BlockParams {
                    self_query: sq(),
                    self_key: sq(),
                    self_value: sq(),
                    self_output: sq(),
                    cross_query: sq(),
                    cross_key: sq(),
                    cross_value: sq(),
                    cross_output: sq(),
                })
                .collect(),
            unembedding: Tensor::zeros(&[d, v]),
        }
    }

    /// Gaussian initialization with the configured std, seeded by `config.seed`.
    pub fn init(config: &ModelConfig) -> Self {
        Self::init_with_std(config, config.init_std())
    }

    pub fn init_with_std(config: &ModelConfig, std: f64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        for (_, t) in p.named_tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        }
        p
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("patch_embedding".to_string(), &self.patch_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_NAMES.iter().zip(b.tensors()) {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("unembedding".to_string(), &self.unembedding));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("patch_embedding".to_string(), &mut self.patch_embedding),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in BLOCK_NAMES.iter().zip(b.tensors_mut()) {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("unembedding".to_string(), &mut self.unembedding));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for (_, t) in self.named_tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn axpy(&mut self, scale: f64, other: &ModelParams) {
        for ((_, a), (_, b)) in self.named_tensors_mut().into_iter().zip(other.named_tensors()) {
            a.scaled_add_assign(scale, b);
        }
    }

    /// Bit-level fingerprint, for checking that a snapshot never moves.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for x in self.flatten() {
            h = crate::seed::mix64(h ^ x.to_bits());
        }
        h
    }
}

/// Graph handles for every parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub token_embedding: Var,
    pub patch_embedding: Var,
    pub blocks: Vec<[Var; 8]>,
    pub unembedding: Var,
}

impl ParamVars {
    /// Registers the parameters as differentiable leaves (`trainable`) or
    /// as constants.
    pub fn register(g: &mut Graph, p: &ModelParams, trainable: bool) -> Self {
        let mut put = |t: &Tensor| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let token_embedding = put(&p.token_embedding);
        let patch_embedding = put(&p.patch_embedding);
        let blocks = p
            .blocks
            .iter()
            .map(|b| {
                let t = b.tensors();
                std::array::from_fn(|i| put(t[i]))
            })
            .collect();
        let unembedding = put(&p.unembedding);
        Self {
            token_embedding,
            patch_embedding,
            blocks,
            unembedding,
        }
    }

    fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.token_embedding, self.patch_embedding];
        for b in &self.blocks {
            v.extend_from_slice(b);
        }
        v.push(self.unembedding);
        v
    }

    /// Gradients accumulated on the registered leaves, shaped like the model.
    pub fn gradients(&self, g: &Graph, config: &ModelConfig) -> ModelParams {
        let mut out = ModelParams::zeros(config);
        for ((_, t), v) in out.named_tensors_mut().into_iter().zip(self.vars()) {
            t.data_mut().copy_from_slice(g.grad(v).data());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_scaled() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(&cfg);
        assert_eq!(a, ModelParams::init(&cfg));
        let other = ModelConfig { seed: 1, ..cfg.clone() };
        assert_ne!(a, ModelParams::init(&other));
        let flat = a.flatten();
        let var = flat.iter().map(|x| x * x).sum::<f64>() / flat.len() as f64;
        let expected = cfg.init_std().powi(2);
        assert!((var / expected - 1.0).abs() < 0.05, "var {var} vs {expected}");
    }

    #[test]
    fn flat_roundtrip_and_names() {
        let cfg = ModelConfig {
            vocab_size: 10,
            embed_dim: 4,
            ..ModelConfig::default()
        };
        let p = ModelParams::init(&cfg);
        let mut q = ModelParams::zeros(&cfg);
        q.assign_flat(&p.flatten());
        assert_eq!(p, q);
        assert_eq!(p.num_parameters(), 3 * 10 * 4 + 2 * 8 * 16);
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[2], "block0.self_query");
        assert_eq!(names.last().unwrap(), "unembedding");
    }
}
