//! Confidence-based parallel decoding over residual-vector-quantized token
//! grids.
//!
//! The crate is organised around the objects a generation pipeline touches:
//!
//! - [`rvq`]: a toy residual vector quantizer producing [`TokenGrid`]s.
//! - [`cond`]: conditioning token streams and their frame-rate alignment.
//! - [`net`]: the masked token predictor (per-level embeddings summed per
//!   frame, a small Conformer trunk with rotary attention, one head per
//!   level), its flattened autoregressive counterpart, and training.
//! - [`mask`]: the training-time masking law and the masked loss.
//! - [`decode`]: level-wise iterative parallel decoding plus the greedy and
//!   flattened autoregressive baselines.
//! - [`synth`]: a synthetic hierarchical task with closed-form conditionals.
//! - [`bench`]: runtime and iteration-ablation harnesses.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the common instantiations.

pub mod autograd;
pub mod bench;
pub mod cond;
pub mod decode;
pub mod error;
pub mod grid;
mod io;
pub mod mask;
pub mod net;
pub mod rvq;
pub mod scalar;
pub mod synth;

pub use cond::ConditioningSequence;
pub use decode::{DecodeOptions, DecodeOutput, DecodeSchedule};
pub use error::{Error, Result};
pub use grid::{MaskedGrid, TokenGrid, MASK};
pub use mask::MaskSpec;
pub use net::{ArPredictor, Logits, MaskedPredictor, ModelConfig};
pub use rvq::{Codebook, FrameSequence, RvqCodec};
pub use scalar::Scalar;
pub use synth::TaskSpec;

/// Single-precision codec, the on-disk precision.
pub type RvqCodecF32 = RvqCodec<f32>;
/// Double-precision codec.
pub type RvqCodecF64 = RvqCodec<f64>;
/// Single-precision masked predictor used for training and sampling.
pub type MaskedPredictorF32 = MaskedPredictor<f32>;
/// Double-precision masked predictor, used for gradient verification.
pub type MaskedPredictorF64 = MaskedPredictor<f64>;
/// Single-precision flattened autoregressive baseline.
pub type ArPredictorF32 = ArPredictor<f32>;
pub type LogitsF32 = Logits<f32>;
pub type FrameSequenceF32 = FrameSequence<f32>;
