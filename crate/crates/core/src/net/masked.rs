use ndarray::Array2;
use rand::Rng;

use super::conformer::{head_shapes, heads, trunk, trunk_shapes};
use super::{arrange, init_params, Init, Logits, ModelConfig};
use crate::autograd::{Graph, GraphStats, NodeId, ParamStore, XentTerm};
use crate::cond::ConditioningSequence;
use crate::error::{Error, Result};
use crate::grid::{MaskedGrid, TokenGrid, MASK};
use crate::mask::{apply_mask, sample_mask, MaskSpec};
use crate::scalar::Scalar;
use crate::synth::LabeledExample;

/// Anything that scores every (frame, level) of a partially masked grid.
pub trait TokenModel: Sync {
    type Scalar: Scalar;

    fn levels(&self) -> usize;

    fn codebook_size(&self) -> usize;

    fn predict(&self, grid: &MaskedGrid, cond: &ConditioningSequence) -> Result<Logits<Self::Scalar>>;
}

/// Per-level embeddings summed per frame, a bidirectional Conformer trunk,
/// and one classification head per level.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedPredictor<S: Scalar> {
    config: ModelConfig,
    params: ParamStore<S>,
}

pub(crate) fn masked_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.model_dim;
    let mut v = Vec::new();
    for q in 0..cfg.levels {
        v.push((format!("embed.level{q}"), cfg.codebook_size + 1, d, Init::Std(1.0)));
    }
    v.push(("embed.cond".to_string(), cfg.cond_vocab, d, Init::Std(1.0)));
    v.extend(trunk_shapes(cfg));
    v.extend(head_shapes(cfg));
    v
}

/// Checks a model input and returns its frame count.
pub(crate) fn check_input(cfg: &ModelConfig, grid: &MaskedGrid, cond: &ConditioningSequence) -> Result<usize> {
    let t = grid.frames();
    if grid.levels() != cfg.levels || grid.codebook_size() != cfg.codebook_size {
        return Err(Error::Shape(format!(
            "grid has Q={} C={}, model expects Q={} C={}",
            grid.levels(),
            grid.codebook_size(),
            cfg.levels,
            cfg.codebook_size
        )));
    }
    if t == 0 {
        return Err(Error::Shape("empty grid".into()));
    }
    if t > cfg.max_len {
        return Err(Error::Capacity(format!("{t} frames exceed max_len {}", cfg.max_len)));
    }
    check_cond(cfg, cond, t)?;
    Ok(t)
}

pub(crate) fn check_cond(cfg: &ModelConfig, cond: &ConditioningSequence, frames: usize) -> Result<()> {
    if cond.len() < frames {
        return Err(Error::Alignment(format!(
            "conditioning has {} tokens for {frames} frames",
            cond.len()
        )));
    }
    if cond.vocab() as usize > cfg.cond_vocab {
        return Err(Error::Shape(format!(
            "conditioning vocabulary {} exceeds model's {}",
            cond.vocab(),
            cfg.cond_vocab
        )));
    }
    Ok(())
}

impl<S: Scalar> MaskedPredictor<S> {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&masked_shapes(&config), config.seed);
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names, shapes and finiteness.
    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let params = arrange(params, &masked_shapes(&config))?;
        if !params.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    /// Row t = Σ_q emb_q(grid[t, q]) + emb_cond(cond[t]).
    pub fn embed_frames(&self, grid: &MaskedGrid, cond: &ConditioningSequence) -> Result<Array2<S>> {
        check_input(&self.config, grid, cond)?;
        let mut g = Graph::new(&self.params);
        let x = self.embed(&mut g, &[(grid, cond.tokens())])?;
        Ok(g.value(x).clone())
    }

    pub fn forward(&self, grid: &MaskedGrid, cond: &ConditioningSequence) -> Result<Logits<S>> {
        Ok(self.forward_with_stats(grid, cond)?.0)
    }

    /// Forward pass plus the attention counters of the graph that ran it.
    pub fn forward_with_stats(&self, grid: &MaskedGrid, cond: &ConditioningSequence) -> Result<(Logits<S>, GraphStats)> {
        let t = check_input(&self.config, grid, cond)?;
        let mut g = Graph::new(&self.params);
        let out = self.build(&mut g, &[(grid, cond.tokens())], t)?;
        let logits = Logits::from_flat(g.value(out), self.config.levels);
        Ok((logits, g.stats()))
    }

    fn embed(&self, g: &mut Graph<S>, inputs: &[(&MaskedGrid, &[u32])]) -> Result<NodeId> {
        let cfg = &self.config;
        let c = cfg.codebook_size;
        let mut lookups = Vec::with_capacity(cfg.levels + 1);
        for q in 0..cfg.levels {
            let table = g.param(&format!("embed.level{q}"))?;
            let idx = inputs
                .iter()
                .flat_map(|(grid, _)| {
                    (0..grid.frames()).map(move |i| match grid.get(i, q) {
                        MASK => c,
                        tok => tok as usize,
                    })
                })
                .collect();
            lookups.push((table, idx));
        }
        let table = g.param("embed.cond")?;
        let idx = inputs
            .iter()
            .flat_map(|(grid, cond)| cond[..grid.frames()].iter().map(|&k| k as usize))
            .collect();
        lookups.push((table, idx));
        g.embed_sum(lookups)
    }

    /// Stacked (B·T, Q·C) logits for equally long inputs.
    pub(crate) fn build(&self, g: &mut Graph<S>, inputs: &[(&MaskedGrid, &[u32])], frames: usize) -> Result<NodeId> {
        let x = self.embed(g, inputs)?;
        let h = trunk(g, &self.config, x, frames, false)?;
        heads(g, &self.config, h)
    }

    /// Builds the masked loss for `batch` under fixed `specs`: the mean over
    /// examples of each example's mean cross-entropy at its masked frames.
    /// Returns the logits node and the 1×1 loss node.
    pub fn masked_loss_graph(
        &self,
        g: &mut Graph<S>,
        batch: &[(&TokenGrid, &ConditioningSequence)],
        specs: &[MaskSpec],
    ) -> Result<(NodeId, NodeId)> {
        if batch.is_empty() || batch.len() != specs.len() {
            return Err(Error::InvalidArgument("batch and mask specs must be non-empty and equally long".into()));
        }
        let frames = batch[0].0.frames();
        let mut masked = Vec::with_capacity(batch.len());
        for ((grid, cond), spec) in batch.iter().zip(specs) {
            if grid.frames() != frames {
                return Err(Error::Shape("batch grids differ in length".into()));
            }
            spec.validate()?;
            let m = apply_mask(grid, spec)?;
            check_input(&self.config, &m, cond)?;
            masked.push(m);
        }
        let inputs: Vec<(&MaskedGrid, &[u32])> =
            masked.iter().zip(batch).map(|(m, (_, cond))| (m, cond.tokens())).collect();
        let logits = self.build(g, &inputs, frames)?;
        let c = self.config.codebook_size;
        let b = batch.len() as f64;
        let mut terms = Vec::new();
        for (e, ((grid, _), spec)) in batch.iter().zip(specs).enumerate() {
            let weight = S::of(1.0 / (spec.masked_count() as f64 * b));
            for i in spec.masked_frames() {
                terms.push(XentTerm {
                    row: e * frames + i,
                    offset: spec.level * c,
                    width: c,
                    target: grid.get(i, spec.level) as usize,
                    weight,
                });
            }
        }
        let loss = g.cross_entropy(logits, terms)?;
        Ok((logits, loss))
    }
}

impl<S: Scalar> TokenModel for MaskedPredictor<S> {
    type Scalar = S;

    fn levels(&self) -> usize {
        self.config.levels
    }

    fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    fn predict(&self, grid: &MaskedGrid, cond: &ConditioningSequence) -> Result<Logits<S>> {
        self.forward(grid, cond)
    }
}

impl<S: Scalar> super::TrainableModel<S> for MaskedPredictor<S> {
    const KIND: super::ModelKind = super::ModelKind::Masked;

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    fn from_parts(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        Self::from_params(config, params)
    }

    fn loss_graph<R: Rng + ?Sized>(&self, g: &mut Graph<S>, batch: &[LabeledExample], rng: &mut R) -> Result<NodeId> {
        let pairs: Vec<_> = batch.iter().map(|e| (&e.grid, &e.cond)).collect();
        let specs = batch
            .iter()
            .map(|e| sample_mask(e.grid.frames(), e.grid.levels(), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.masked_loss_graph(g, &pairs, &specs)?.1)
    }
}
