//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `EMPOCKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, the JSON header, then every float of
//! the policy, the reference and the optimizer moments as little-endian
//! `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{OptimizerConfig, RunConfig};
use super::optim::Optimizer;
use crate::error::{EmpoError, Result};
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"EMPOCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub seed: u64,
    pub variant: String,
    /// Optimizer steps completed.
    pub step: usize,
    pub policy: ModelParams,
    pub reference: ModelParams,
    pub optimizer: Optimizer,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    seed: u64,
    variant: String,
    step: usize,
    model: ModelConfig,
    reference_model: ModelConfig,
    tensors: Vec<TensorEntry>,
    optimizer: OptimizerConfig,
    optimizer_t: u64,
    moment_len: usize,
}

fn bad(msg: impl Into<String>) -> EmpoError {
    EmpoError::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("checkpoint is truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| bad("tensor size overflows"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            seed: self.seed,
            variant: self.variant.clone(),
            step: self.step,
            model: self.policy.config.clone(),
            reference_model: self.reference.config.clone(),
            tensors: self
                .policy
                .named_tensors()
                .into_iter()
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer: self.optimizer.config.clone(),
            optimizer_t: self.optimizer.t,
            moment_len: self.optimizer.m.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let floats = self
            .policy
            .flatten()
            .into_iter()
            .chain(self.reference.flatten())
            .chain(self.optimizer.m.iter().copied())
            .chain(self.optimizer.v.iter().copied());
        let mut out = Vec::with_capacity(20 + json.len() + 8 * 2 * self.policy.num_parameters());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for x in floats {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| bad("header length overflows"))?;
        let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| bad(format!("bad header: {e}")))?;
        header.model.validate().map_err(|e| bad(e.to_string()))?;

        let mut policy = ModelParams::zeros(&header.model);
        let expected: Vec<(String, Vec<usize>)> = policy
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let listed: Vec<(String, Vec<usize>)> = header.tensors.into_iter().map(|t| (t.name, t.shape)).collect();
        if expected != listed {
            return Err(bad("tensor table does not match the model configuration"));
        }
        let n = policy.num_parameters();
        let reseeded = ModelConfig {
            seed: header.model.seed,
            ..header.reference_model.clone()
        };
        if reseeded != header.model {
            return Err(bad("reference model shape differs from the policy"));
        }
        let mut reference = ModelParams::zeros(&header.reference_model);
        policy.assign_flat(&r.floats(n)?);
        reference.assign_flat(&r.floats(n)?);
        let m = r.floats(header.moment_len)?;
        let v = r.floats(header.moment_len)?;
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after checkpoint data"));
        }
        Ok(Self {
            config: header.config,
            seed: header.seed,
            variant: header.variant,
            step: header.step,
            policy,
            reference,
            optimizer: Optimizer {
                config: header.optimizer,
                t: header.optimizer_t,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
