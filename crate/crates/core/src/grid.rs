//! Token grids: the T×Q matrices of codebook indices that every other
//! module masks, predicts, or decodes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};

/// Sentinel stored in a [`MaskedGrid`] for a hidden entry.
pub const MASK: u32 = u32::MAX;

const GRID_MAGIC: &[u8; 4] = b"STRM";
const GRID_VERSION: u8 = 1;

/// A fully populated T×Q grid of tokens in `[0, C)`, stored time-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    frames: usize,
    levels: usize,
    codebook_size: usize,
    tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(frames: usize, levels: usize, codebook_size: usize, tokens: Vec<u32>) -> Result<Self> {
        if levels == 0 || codebook_size == 0 {
            return Err(Error::Shape("grid needs Q >= 1 and C >= 1".into()));
        }
        if tokens.len() != frames * levels {
            return Err(Error::Shape(format!(
                "grid of {frames}x{levels} needs {} tokens, got {}",
                frames * levels,
                tokens.len()
            )));
        }
        if let Some((idx, &tok)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &tok)| tok as usize >= codebook_size)
        {
            return Err(Error::CorruptGrid(format!(
                "token {tok} at frame {} level {} outside [0, {codebook_size})",
                idx / levels,
                idx % levels
            )));
        }
        Ok(Self { frames, levels, codebook_size, tokens })
    }

    /// Grid with every entry set to `token`.
    pub fn filled(frames: usize, levels: usize, codebook_size: usize, token: u32) -> Result<Self> {
        Self::new(frames, levels, codebook_size, vec![token; frames * levels])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames, self.levels, self.codebook_size)
    }

    #[inline]
    pub fn get(&self, frame: usize, level: usize) -> u32 {
        self.tokens[frame * self.levels + level]
    }

    /// Row-major (time-major) token storage.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn frame(&self, frame: usize) -> &[u32] {
        &self.tokens[frame * self.levels..(frame + 1) * self.levels]
    }

    /// The first `frames` frames.
    pub fn prefix(&self, frames: usize) -> Result<TokenGrid> {
        if frames > self.frames {
            return Err(Error::Shape(format!(
                "prefix of {frames} frames from a {}-frame grid",
                self.frames
            )));
        }
        Ok(TokenGrid {
            frames,
            levels: self.levels,
            codebook_size: self.codebook_size,
            tokens: self.tokens[..frames * self.levels].to_vec(),
        })
    }

    /// Frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<TokenGrid> {
        if start + len > self.frames {
            return Err(Error::Shape(format!(
                "window {start}..{} outside {} frames",
                start + len,
                self.frames
            )));
        }
        Ok(TokenGrid {
            frames: len,
            levels: self.levels,
            codebook_size: self.codebook_size,
            tokens: self.tokens[start * self.levels..(start + len) * self.levels].to_vec(),
        })
    }

    pub fn to_masked(&self) -> MaskedGrid {
        MaskedGrid {
            frames: self.frames,
            levels: self.levels,
            codebook_size: self.codebook_size,
            tokens: self.tokens.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.codebook_size > u16::MAX as usize + 1 {
            return Err(Error::Format(format!(
                "codebook size {} does not fit 16-bit tokens",
                self.codebook_size
            )));
        }
        let mut w = Writer::new(GRID_MAGIC, GRID_VERSION);
        w.u32(self.frames as u32);
        w.u32(self.levels as u32);
        w.u32(self.codebook_size as u32);
        for &tok in &self.tokens {
            w.u16(tok as u16);
        }
        Ok(w.finish())
    }

    /// Parses one grid record from the start of `data`, returning the grid
    /// and the number of bytes consumed.
    pub fn read_record(data: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader::open(data, GRID_MAGIC, GRID_VERSION, "token grid")?;
        let frames = r.u32()? as usize;
        let levels = r.u32()? as usize;
        let codebook_size = r.u32()? as usize;
        let count = frames
            .checked_mul(levels)
            .ok_or_else(|| Error::Format("token grid: dims overflow".into()))?;
        let raw = r.bytes(count * 2)?;
        let tokens = raw
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as u32)
            .collect();
        let grid = TokenGrid::new(frames, levels, codebook_size, tokens)?;
        Ok((grid, r.position()))
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let (grid, used) = Self::read_record(data)?;
        if used != data.len() {
            return Err(Error::Format(format!(
                "token grid: {} trailing bytes",
                data.len() - used
            )));
        }
        Ok(grid)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A grid whose entries are tokens in `[0, C)` or [`MASK`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedGrid {
    frames: usize,
    levels: usize,
    codebook_size: usize,
    tokens: Vec<u32>,
}

impl MaskedGrid {
    /// A grid with every entry masked.
    pub fn all_masked(frames: usize, levels: usize, codebook_size: usize) -> Self {
        Self { frames, levels, codebook_size, tokens: vec![MASK; frames * levels] }
    }

    pub fn new(frames: usize, levels: usize, codebook_size: usize, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != frames * levels {
            return Err(Error::Shape(format!(
                "masked grid of {frames}x{levels} needs {} entries, got {}",
                frames * levels,
                tokens.len()
            )));
        }
        if tokens.iter().any(|&t| t != MASK && t as usize >= codebook_size) {
            return Err(Error::CorruptGrid("masked grid entry out of range".into()));
        }
        Ok(Self { frames, levels, codebook_size, tokens })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    #[inline]
    pub fn get(&self, frame: usize, level: usize) -> u32 {
        self.tokens[frame * self.levels + level]
    }

    #[inline]
    pub fn is_masked(&self, frame: usize, level: usize) -> bool {
        self.get(frame, level) == MASK
    }

    #[inline]
    pub fn set(&mut self, frame: usize, level: usize, token: u32) {
        debug_assert!(token == MASK || (token as usize) < self.codebook_size);
        self.tokens[frame * self.levels + level] = token;
    }

    pub fn entries(&self) -> &[u32] {
        &self.tokens
    }

    pub fn mask_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == MASK).count()
    }

    /// Converts to a [`TokenGrid`], failing if any entry is still masked.
    pub fn into_complete(self) -> Result<TokenGrid> {
        if let Some(idx) = self.tokens.iter().position(|&t| t == MASK) {
            return Err(Error::Invariant(format!(
                "frame {} level {} still masked",
                idx / self.levels,
                idx % self.levels
            )));
        }
        TokenGrid::new(self.frames, self.levels, self.codebook_size, self.tokens)
    }
}
