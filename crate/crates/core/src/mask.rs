//! Training-time masking and the loss restricted to the sampled level.
//!
//! Positions are 0-based. Frames `0..prompt_end` form the prompt and are
//! never masked; frames `prompt_end..T` are maskable. With `prompt_end = 0`
//! there is no prompt and every frame may be masked.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{MaskedGrid, TokenGrid, MASK};
use crate::net::Logits;
use crate::scalar::Scalar;

/// A sampled masking pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub frames: usize,
    pub levels: usize,
    /// First maskable frame; earlier frames are prompt.
    pub prompt_end: usize,
    /// 0-based level whose selected tokens are masked and scored.
    pub level: usize,
    /// `mask[i]` selects frame i at `level`; false for every `i < prompt_end`.
    pub mask: Vec<bool>,
    /// Accepted draw of u ∈ [0, π/2].
    pub u: f64,
    /// Number of (u, M) draws rejected for masking nothing.
    pub redraws: usize,
}

impl MaskSpec {
    /// Masking ratio p = cos(u) of the accepted draw.
    pub fn ratio(&self) -> f64 {
        self.u.cos()
    }

    /// Frames whose level-`level` token is masked and scored.
    pub fn masked_frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Checks prompt safety and that at least one position is selected.
    pub fn validate(&self) -> Result<()> {
        if self.mask.len() != self.frames || self.level >= self.levels || self.prompt_end >= self.frames {
            return Err(Error::Shape("mask spec dims are inconsistent".into()));
        }
        if self.mask[..self.prompt_end].iter().any(|&m| m) {
            return Err(Error::Invariant("mask selects a prompt frame".into()));
        }
        if self.masked_count() == 0 {
            return Err(Error::Invariant("mask selects no position".into()));
        }
        Ok(())
    }
}

/// Pins parts of a draw; unset fields are sampled.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaskOverrides {
    pub prompt_end: Option<usize>,
    /// 0-based level.
    pub level: Option<usize>,
    /// Used for the first draw only; redraws sample u afresh.
    pub u: Option<f64>,
}

/// Samples t, q, then (u, M) until M selects at least one frame.
pub fn sample_mask<R: Rng + ?Sized>(frames: usize, levels: usize, rng: &mut R) -> Result<MaskSpec> {
    sample_mask_with(frames, levels, MaskOverrides::default(), rng)
}

pub fn sample_mask_with<R: Rng + ?Sized>(
    frames: usize,
    levels: usize,
    overrides: MaskOverrides,
    rng: &mut R,
) -> Result<MaskSpec> {
    if frames < 2 {
        return Err(Error::DegenerateData(format!("cannot mask a {frames}-frame grid")));
    }
    if levels == 0 {
        return Err(Error::DegenerateData("grid has no levels".into()));
    }
    let prompt_end = match overrides.prompt_end {
        Some(t) if t < frames => t,
        Some(t) => return Err(Error::InvalidArgument(format!("prompt end {t} outside {frames} frames"))),
        None => rng.gen_range(0..frames),
    };
    let level = match overrides.level {
        Some(q) if q < levels => q,
        Some(q) => return Err(Error::InvalidArgument(format!("level {q} outside {levels} levels"))),
        None => rng.gen_range(0..levels),
    };
    let mut forced_u = overrides.u;
    let mut redraws = 0;
    loop {
        let u = forced_u.take().unwrap_or_else(|| rng.gen::<f64>() * FRAC_PI_2);
        let mask = draw_level_mask(frames, prompt_end, u, rng);
        if mask.iter().any(|&m| m) {
            return Ok(MaskSpec { frames, levels, prompt_end, level, mask, u, redraws });
        }
        redraws += 1;
    }
}

/// One Bernoulli(cos u) draw per maskable frame, before any redraw.
pub fn draw_level_mask<R: Rng + ?Sized>(frames: usize, prompt_end: usize, u: f64, rng: &mut R) -> Vec<bool> {
    let p = u.cos();
    (0..frames).map(|i| i >= prompt_end && rng.gen::<f64>() < p).collect()
}

/// Masks the selected frames at `spec.level` and every non-prompt frame at
/// finer levels.
pub fn apply_mask(grid: &TokenGrid, spec: &MaskSpec) -> Result<MaskedGrid> {
    if grid.frames() != spec.frames || grid.levels() != spec.levels {
        return Err(Error::Shape(format!(
            "mask for {}x{} applied to {}x{} grid",
            spec.frames,
            spec.levels,
            grid.frames(),
            grid.levels()
        )));
    }
    let mut out = grid.to_masked();
    for i in spec.prompt_end..spec.frames {
        if spec.mask[i] {
            out.set(i, spec.level, MASK);
        }
        for q in spec.level + 1..spec.levels {
            out.set(i, q, MASK);
        }
    }
    Ok(out)
}

/// Mean cross-entropy of the ground truth over the masked level-q frames.
pub fn masked_ce_loss<S: Scalar>(logits: &Logits<S>, grid: &TokenGrid, spec: &MaskSpec) -> Result<f64> {
    if logits.dims() != (grid.frames(), grid.levels(), grid.codebook_size())
        || grid.frames() != spec.frames
        || grid.levels() != spec.levels
    {
        return Err(Error::Shape("logits, grid and mask disagree in shape".into()));
    }
    let n = spec.masked_count();
    if n == 0 {
        return Err(Error::InvalidArgument("mask selects no position".into()));
    }
    let total: f64 = spec
        .masked_frames()
        .map(|i| {
            let row: Vec<f64> = logits.row(i, spec.level).iter().map(|v| v.to_f64_lossy()).collect();
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[grid.get(i, spec.level) as usize]
        })
        .sum();
    Ok(total / n as f64)
}
