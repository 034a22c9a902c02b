//! Versioned training checkpoints: parameter tensors, optimizer moments,
//! and sampler position, serialized as JSON with exact float round-trips.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::AdamState;

/// Bumped whenever the on-disk layout changes; loads reject other versions.
pub const CHECKPOINT_VERSION: u32 = 1;

/// A tensor as stored on disk: shape header plus row-major values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn from_tensor(t: &Tensor) -> Self {
        TensorRecord { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone())
    }
}

/// Everything needed to reconstruct a `ChaCha8Rng` mid-stream: the seed it
/// was derived from, the stream it was moved to, and the word position it
/// had advanced to.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RngRecord {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngRecord {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngRecord { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// One training snapshot. `params` follows the parameter order of the
/// model that produced it ([`crate::velocity::MlpField::params`] or
/// [`crate::velocity::QuadraticPsiField::params`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub problem: String,
    pub algorithm: String,
    /// Completed optimizer iterations at capture time.
    pub iteration: usize,
    pub params: Vec<TensorRecord>,
    pub adam_m: Vec<TensorRecord>,
    pub adam_v: Vec<TensorRecord>,
    pub adam_step: u64,
    /// Sampler position; absent when the run used a fixed batch.
    pub rng: Option<RngRecord>,
}

impl Checkpoint {
    pub fn capture(
        problem: &str,
        algorithm: &str,
        iteration: usize,
        params: &[&Tensor],
        adam: &AdamState,
        rng: Option<RngRecord>,
    ) -> Self {
        let (m, v, step) = adam.parts();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            problem: problem.to_string(),
            algorithm: algorithm.to_string(),
            iteration,
            params: params.iter().map(|t| TensorRecord::from_tensor(t)).collect(),
            adam_m: m.iter().map(TensorRecord::from_tensor).collect(),
            adam_v: v.iter().map(TensorRecord::from_tensor).collect(),
            adam_step: step,
            rng,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        std::fs::write(path, body)
            .map_err(|source| Error::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let body = std::fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        let ckpt: Checkpoint = serde_json::from_str(&body)
            .map_err(|e| Error::Checkpoint(format!("parse {}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} unsupported (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }

    /// Rebuilds the optimizer state.
    pub fn adam_state(&self) -> Result<AdamState> {
        let m = self.adam_m.iter().map(|r| r.to_tensor()).collect::<Result<Vec<_>>>()?;
        let v = self.adam_v.iter().map(|r| r.to_tensor()).collect::<Result<Vec<_>>>()?;
        AdamState::from_parts(m, v, self.adam_step)
    }

    /// Writes the stored parameters into a live model, shape-checked
    /// slot by slot.
    pub fn restore_params(&self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameter tensors, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for (slot, record) in params.iter_mut().zip(&self.params) {
            if slot.shape() != record.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter shape {:?} does not match stored shape {:?}",
                    slot.shape(),
                    record.shape
                )));
            }
            slot.data_mut().copy_from_slice(&record.data);
        }
        Ok(())
    }
}
