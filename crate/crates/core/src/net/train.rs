use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelKind};
use crate::autograd::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::LabeledExample;

/// A network the trainer can update and the checkpoint code can persist.
pub trait TrainableModel<S: Scalar>: Sized {
    const KIND: ModelKind;

    fn config(&self) -> &ModelConfig;

    fn params(&self) -> &ParamStore<S>;

    fn params_mut(&mut self) -> &mut ParamStore<S>;

    fn from_parts(config: ModelConfig, params: ParamStore<S>) -> Result<Self>;

    /// Adds the training loss for `batch` to `g` and returns its 1×1 node.
    fn loss_graph<R: Rng + ?Sized>(&self, g: &mut Graph<S>, batch: &[LabeledExample], rng: &mut R) -> Result<NodeId>;
}

/// Adam with linear warmup and global-norm gradient clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps: 100, clip_norm: 1.0 }
    }
}

impl AdamConfig {
    /// Step size for 1-based update `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// First and second moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S> {
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Array2<S>>,
    pub v: Vec<Array2<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        Self { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// 0-based index of the update just applied.
    pub step: u64,
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Computes the loss on `batch`, backpropagates, and applies one update.
pub fn train_step<S: Scalar, M: TrainableModel<S>, R: Rng + ?Sized>(
    model: &mut M,
    batch: &[LabeledExample],
    rng: &mut R,
    state: &mut OptimizerState<S>,
    adam: &AdamConfig,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (loss, grads) = {
        let mut g = Graph::new(model.params());
        let out = model.loss_graph(&mut g, batch, rng)?;
        let loss = g.value(out)[[0, 0]].to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss {loss} at step {}", state.step)));
        }
        (loss, g.backward(out).into_params())
    };
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::Divergence(format!("gradient norm {norm} at step {} (loss {loss})", state.step)));
    }
    let clip = if norm > adam.clip_norm { adam.clip_norm / norm } else { 1.0 };

    let index = state.step;
    state.step += 1;
    let t = state.step as i32;
    let lr = adam.lr_at(state.step);
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    let (b1, b2, eps) = (S::of(adam.beta1), S::of(adam.beta2), S::of(adam.eps));
    let (clip, step_size, c2_sqrt) = (S::of(clip), S::of(lr / c1), S::of(c2.sqrt()));
    for (((p, g), m), v) in model.params_mut().values_mut().zip(&grads).zip(&mut state.m).zip(&mut state.v) {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            let g = g * clip;
            *m = b1 * *m + (S::one() - b1) * g;
            *v = b2 * *v + (S::one() - b2) * g * g;
            *p -= step_size * *m / ((*v).sqrt() / c2_sqrt + eps);
        });
    }
    Ok(StepReport { step: index, loss, grad_norm: norm })
}

/// Batch construction and optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// If set, each batch is cropped to a random window of at least this
    /// many frames (all examples in a batch share the window length).
    pub min_crop: Option<usize>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self { adam: AdamConfig::default(), batch_size: 8, seed: 0, min_crop: None }
    }
}

/// Drives [`train_step`] over a dataset. Step k draws everything from
/// stream k of the seeded generator, so a run resumed from a checkpoint
/// replays exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer<S> {
    pub config: TrainerConfig,
    pub state: OptimizerState<S>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: TrainerConfig, params: &ParamStore<S>) -> Self {
        Self { config, state: OptimizerState::new(params) }
    }

    pub fn step<M: TrainableModel<S>>(&mut self, model: &mut M, dataset: &[LabeledExample]) -> Result<StepReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.state.step);
        let batch = self.sample_batch(model.config(), dataset, &mut rng)?;
        train_step(model, &batch, &mut rng, &mut self.state, &self.config.adam)
    }

    fn sample_batch<R: Rng + ?Sized>(
        &self,
        cfg: &ModelConfig,
        dataset: &[LabeledExample],
        rng: &mut R,
    ) -> Result<Vec<LabeledExample>> {
        if dataset.is_empty() || self.config.batch_size == 0 {
            return Err(Error::InvalidArgument("training needs a non-empty dataset and batch".into()));
        }
        let frames = dataset.iter().map(|e| e.grid.frames()).min().unwrap_or(0);
        let longest = frames.min(cfg.max_len);
        let len = match self.config.min_crop {
            Some(min) if min < longest => rng.gen_range(min.max(1)..=longest),
            _ => longest,
        };
        if len < 2 {
            return Err(Error::DegenerateData("training examples need at least 2 frames".into()));
        }
        (0..self.config.batch_size)
            .map(|_| {
                let e = &dataset[rng.gen_range(0..dataset.len())];
                if e.grid.frames() == len {
                    return Ok(e.clone());
                }
                let start = rng.gen_range(0..=e.grid.frames() - len);
                Ok(LabeledExample { cond: e.cond.window(start, len)?, grid: e.grid.window(start, len)? })
            })
            .collect()
    }
}
