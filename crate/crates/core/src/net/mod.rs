//! The masked token predictor, its flattened autoregressive counterpart,
//! and the machinery to train and persist them.

mod ar;
mod checkpoint;
mod conformer;
mod masked;
mod train;


use ndarray::{Array2, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use ar::ArPredictor;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, ModelKind, TrainingMeta};
pub use masked::{MaskedPredictor, TokenModel};
pub use train::{train_step, AdamConfig, OptimizerState, StepReport, TrainableModel, Trainer, TrainerConfig};

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub conv_kernel_size: usize,
    /// Q, the number of RVQ levels.
    pub levels: usize,
    /// C, tokens per level.
    pub codebook_size: usize,
    /// C_cond, conditioning vocabulary.
    pub cond_vocab: usize,
    /// Longest grid, in frames, the model accepts.
    pub max_len: usize,
    pub rotary_base: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            model_dim: 128,
            num_heads: 4,
            ff_dim: 512,
            conv_kernel_size: 5,
            levels: 3,
            codebook_size: 16,
            cond_vocab: 8,
            max_len: 256,
            rotary_base: 10_000.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.num_layers,
            self.model_dim,
            self.num_heads,
            self.ff_dim,
            self.conv_kernel_size,
            self.levels,
            self.codebook_size,
            self.cond_vocab,
            self.max_len,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidArgument("model config counts must be >= 1".into()));
        }
        if self.model_dim % self.num_heads != 0 || (self.model_dim / self.num_heads) % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "model_dim {} must split into an even head dim over {} heads",
                self.model_dim, self.num_heads
            )));
        }
        if self.conv_kernel_size % 2 == 0 {
            return Err(Error::InvalidArgument("conv_kernel_size must be odd".into()));
        }
        if !(self.rotary_base > 1.0) {
            return Err(Error::InvalidArgument("rotary_base must exceed 1".into()));
        }
        Ok(())
    }
}

/// Per-frame, per-level logits, shaped (T, Q, C).
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<S> {
    values: Array3<S>,
}

impl<S: Scalar> Logits<S> {
    pub fn new(values: Array3<S>) -> Self {
        Self { values }
    }

    /// Reshapes a (T, Q·C) matrix whose column block q holds head q.
    pub(crate) fn from_flat(flat: &Array2<S>, levels: usize) -> Self {
        let (t, w) = flat.dim();
        let c = w / levels;
        let values = Array3::from_shape_fn((t, levels, c), |(i, q, j)| flat[[i, q * c + j]]);
        Self { values }
    }

    /// (T, Q, C).
    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn row(&self, frame: usize, level: usize) -> ArrayView1<'_, S> {
        self.values.slice(ndarray::s![frame, level, ..])
    }

    pub fn values(&self) -> &Array3<S> {
        &self.values
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Uniform with the given standard deviation.
    Std(f64),
}

pub(crate) fn init_params<S: Scalar>(shapes: &[(String, usize, usize, Init)], seed: u64) -> ParamStore<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, r, c, init) in shapes {
        let m = match *init {
            Init::Zeros => Array2::zeros((*r, *c)),
            Init::Ones => Array2::ones((*r, *c)),
            Init::Std(std) => {
                let a = std * 3f64.sqrt();
                Array2::from_shape_fn((*r, *c), |_| S::of(rng.gen_range(-a..a)))
            }
        };
        store.insert(name.clone(), m);
    }
    store
}

/// Reorders `store` into the canonical parameter order, checking that the
/// names and shapes match exactly.
pub(crate) fn arrange<S: Scalar>(mut store: ParamStore<S>, shapes: &[(String, usize, usize, Init)]) -> Result<ParamStore<S>> {
    if store.len() != shapes.len() {
        return Err(Error::Checkpoint(format!("expected {} parameters, found {}", shapes.len(), store.len())));
    }
    let mut out = ParamStore::new();
    for (name, r, c, _) in shapes {
        let value = store
            .get_mut(name)
            .map(std::mem::take)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if value.dim() != (*r, *c) {
            return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected ({r}, {c})", value.dim())));
        }
        out.insert(name.clone(), value);
    }
    Ok(out)
}
