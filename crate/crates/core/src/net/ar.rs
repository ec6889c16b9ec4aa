use rand::Rng;

use super::conformer::{head_shapes, heads, trunk, trunk_shapes};
use super::masked::check_cond;
use super::{arrange, init_params, Init, ModelConfig};
use crate::autograd::{Graph, GraphStats, NodeId, ParamStore, XentTerm};
use crate::cond::ConditioningSequence;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::LabeledExample;

/// Causal next-token model over the row-major flattened grid.
///
/// Position p predicts token p (frame p / Q, level p % Q). Its input is the
/// previous token's embedding in a shared (level, token) vocabulary, or a
/// start row for p = 0, plus the conditioning embedding of frame p / Q and a
/// per-level slot embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ArPredictor<S: Scalar> {
    config: ModelConfig,
    params: ParamStore<S>,
}

fn ar_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.model_dim;
    let mut v = vec![
        ("embed.flat".to_string(), cfg.levels * cfg.codebook_size + 1, d, Init::Std(1.0)),
        ("embed.cond".to_string(), cfg.cond_vocab, d, Init::Std(1.0)),
        ("embed.slot".to_string(), cfg.levels, d, Init::Std(1.0)),
    ];
    v.extend(trunk_shapes(cfg));
    v.extend(head_shapes(cfg));
    v
}

impl<S: Scalar> ArPredictor<S> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&ar_shapes(&config), config.seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let params = arrange(params, &ar_shapes(&config))?;
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

    /// Input rows for predicting tokens `0..len` of each (cond, tokens)
    /// pair, stacked.
    fn inputs(&self, g: &mut Graph<S>, seqs: &[(&[u32], &[u32])], len: usize) -> Result<NodeId> {
        let (q_levels, c) = (self.config.levels, self.config.codebook_size);
        let (mut prev, mut cond_idx, mut slot_idx) = (Vec::new(), Vec::new(), Vec::new());
        for (cond, tokens) in seqs {
            for p in 0..len {
                prev.push(match p {
                    0 => 0,
                    _ => 1 + ((p - 1) % q_levels) * c + tokens[p - 1] as usize,
                });
                cond_idx.push(cond[p / q_levels] as usize);
                slot_idx.push(p % q_levels);
            }
        }
        let flat = g.param("embed.flat")?;
        let ce = g.param("embed.cond")?;
        let slot = g.param("embed.slot")?;
        g.embed_sum(vec![(flat, prev), (ce, cond_idx), (slot, slot_idx)])
    }

    /// Logits for flattened token `prefix.len()` given the tokens before it,
    /// with `cond` aligned to the first frame of `prefix`. One forward pass.
    pub fn next_logits(&self, cond: &ConditioningSequence, prefix: &[u32]) -> Result<Vec<S>> {
        Ok(self.next_logits_with_stats(cond, prefix)?.0)
    }

    pub fn next_logits_with_stats(&self, cond: &ConditioningSequence, prefix: &[u32]) -> Result<(Vec<S>, GraphStats)> {
        let (q_levels, c) = (self.config.levels, self.config.codebook_size);
        let len = prefix.len() + 1;
        let frames = (len + q_levels - 1) / q_levels;
        if frames > self.config.max_len {
            return Err(Error::Capacity(format!("{frames} frames exceed max_len {}", self.config.max_len)));
        }
        check_cond(&self.config, cond, frames)?;
        if let Some(&tok) = prefix.iter().find(|&&t| t as usize >= c) {
            return Err(Error::CorruptGrid(format!("prefix token {tok} outside [0, {c})")));
        }
        let mut g = Graph::new(&self.params);
        let x = self.inputs(&mut g, &[(cond.tokens(), prefix)], len)?;
        let h = trunk(&mut g, &self.config, x, len, true)?;
        let out = heads(&mut g, &self.config, h)?;
        let level = (len - 1) % q_levels;
        let row = g.value(out).row(len - 1);
        let logits = row.slice(ndarray::s![level * c..(level + 1) * c]).to_vec();
        Ok((logits, g.stats()))
    }

    /// Teacher-forced next-token loss, averaged over every token of every
    /// example.
    pub fn loss_graph_for(&self, g: &mut Graph<S>, batch: &[LabeledExample]) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let (q_levels, c) = (self.config.levels, self.config.codebook_size);
        let frames = batch[0].grid.frames();
        let len = frames * q_levels;
        for e in batch {
            if e.grid.frames() != frames {
                return Err(Error::Shape("batch grids differ in length".into()));
            }
            if e.grid.levels() != q_levels || e.grid.codebook_size() != c {
                return Err(Error::Shape("grid dims disagree with the model".into()));
            }
            if frames > self.config.max_len {
                return Err(Error::Capacity(format!("{frames} frames exceed max_len {}", self.config.max_len)));
            }
            check_cond(&self.config, &e.cond, frames)?;
        }
        let seqs: Vec<(&[u32], &[u32])> = batch.iter().map(|e| (e.cond.tokens(), e.grid.tokens())).collect();
        let x = self.inputs(g, &seqs, len)?;
        let h = trunk(g, &self.config, x, len, true)?;
        let logits = heads(g, &self.config, h)?;
        let weight = S::of(1.0 / (len * batch.len()) as f64);
        let mut terms = Vec::with_capacity(len * batch.len());
        for (e, ex) in batch.iter().enumerate() {
            for (p, &tok) in ex.grid.tokens().iter().enumerate() {
                let level = p % q_levels;
                terms.push(XentTerm { row: e * len + p, offset: level * c, width: c, target: tok as usize, weight });
            }
        }
        g.cross_entropy(logits, terms)
    }
}

impl<S: Scalar> super::TrainableModel<S> for ArPredictor<S> {
    const KIND: super::ModelKind = super::ModelKind::FlattenedAr;

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

    fn loss_graph<R: Rng + ?Sized>(&self, g: &mut Graph<S>, batch: &[LabeledExample], _rng: &mut R) -> Result<NodeId> {
        self.loss_graph_for(g, batch)
    }
}
