//! The STRW checkpoint file: magic, version, a length-prefixed canonical
//! JSON header, then a name-sorted table of 32-bit float tensors.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::train::{OptimizerState, TrainableModel, Trainer, TrainerConfig};
use super::ModelConfig;
use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"STRW";
const VERSION: u8 = 1;
const MOMENT_M: &str = "opt.m.";
const MOMENT_V: &str = "opt.v.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Masked,
    FlattenedAr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub step: u64,
    pub trainer: TrainerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub model: ModelConfig,
    /// Present when optimizer moments follow the parameters.
    pub training: Option<TrainingMeta>,
    /// Free-form provenance, e.g. the effective run configuration.
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// A decoded checkpoint before it is turned back into a model.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub header: CheckpointHeader,
    /// Model parameters and, for training checkpoints, `opt.m.*`/`opt.v.*`
    /// moments, keyed by name.
    pub tensors: BTreeMap<String, Array2<S>>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn from_model<M: TrainableModel<S>>(model: &M, trainer: Option<&Trainer<S>>, extra: serde_json::Value) -> Self {
        let params = model.params();
        let mut tensors: BTreeMap<String, Array2<S>> =
            params.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        let training = trainer.map(|t| {
            for (i, (name, _)) in params.iter().enumerate() {
                tensors.insert(format!("{MOMENT_M}{name}"), t.state.m[i].clone());
                tensors.insert(format!("{MOMENT_V}{name}"), t.state.v[i].clone());
            }
            TrainingMeta { step: t.state.step, trainer: t.config.clone() }
        });
        let header = CheckpointHeader { kind: M::KIND, model: model.config().clone(), training, extra };
        Self { header, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header)?;
        let mut w = Writer::new(MAGIC, VERSION);
        w.u32(json.len() as u32);
        w.bytes(&json);
        w.u32(self.tensors.len() as u32);
        for (name, value) in &self.tensors {
            w.u32(name.len() as u32);
            w.bytes(name.as_bytes());
            w.u32(2);
            w.u32(value.nrows() as u32);
            w.u32(value.ncols() as u32);
            for v in value.iter() {
                w.f32(v.to_f32_lossy());
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        Self::parse(data).map_err(|e| match e {
            Error::Checkpoint(_) => e,
            other => Error::Checkpoint(other.to_string()),
        })
    }

    fn parse(data: &[u8]) -> Result<Self> {
        let mut r = Reader::open(data, MAGIC, VERSION, "checkpoint")?;
        let json_len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.bytes(json_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.bytes(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32()?;
            if rank != 2 {
                return Err(Error::Checkpoint(format!("{name}: rank {rank}, expected 2")));
            }
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: dims overflow")))?;
            let raw = r.bytes(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|b| S::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            let value = Array2::from_shape_vec((rows, cols), values).expect("length checked");
            if tensors.insert(name.clone(), value).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        r.expect_end()?;
        Ok(Self { header, tensors })
    }

    /// Rebuilds the model; fails if the checkpoint holds a different kind.
    pub fn into_model<M: TrainableModel<S>>(self) -> Result<M> {
        Ok(self.into_parts::<M>()?.0)
    }

    /// Rebuilds the model and, for training checkpoints, its trainer.
    pub fn into_parts<M: TrainableModel<S>>(mut self) -> Result<(M, Option<Trainer<S>>)> {
        if self.header.kind != M::KIND {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {:?} model, expected {:?}",
                self.header.kind,
                M::KIND
            )));
        }
        let mut moments = BTreeMap::new();
        let names: Vec<String> = self.tensors.keys().filter(|n| n.starts_with("opt.")).cloned().collect();
        for n in names {
            let v = self.tensors.remove(&n).expect("key listed");
            moments.insert(n, v);
        }
        let mut params = ParamStore::new();
        for (name, value) in self.tensors {
            params.insert(name, value);
        }
        let model = M::from_parts(self.header.model.clone(), params)?;
        let trainer = match self.header.training {
            None if moments.is_empty() => None,
            None => return Err(Error::Checkpoint("optimizer moments without training metadata".into())),
            Some(meta) => {
                let mut state = OptimizerState::new(model.params());
                state.step = meta.step;
                for (i, (name, value)) in model.params().iter().enumerate() {
                    for (prefix, slot) in [(MOMENT_M, &mut state.m[i]), (MOMENT_V, &mut state.v[i])] {
                        let key = format!("{prefix}{name}");
                        let moment = moments
                            .remove(&key)
                            .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
                        if moment.dim() != value.dim() {
                            return Err(Error::Checkpoint(format!("{key}: shape mismatch")));
                        }
                        *slot = moment;
                    }
                }
                if let Some(extra) = moments.keys().next() {
                    return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
                }
                Some(Trainer { config: meta.trainer, state })
            }
        };
        Ok((model, trainer))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

pub fn save_checkpoint<S: Scalar, M: TrainableModel<S>>(model: &M, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model, None, serde_json::Value::Null).save(path)
}

pub fn load_checkpoint<S: Scalar, M: TrainableModel<S>>(path: impl AsRef<Path>) -> Result<M> {
    Checkpoint::load(path)?.into_model()
}
