//! A toy residual vector quantizer.
//!
//! Level ℓ quantizes whatever the levels before it left over, so tokens at
//! finer levels only ever refine the reconstruction. Codebooks are fit by
//! per-level k-means on residuals of synthetic feature streams.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::io::{Reader, Writer};
use crate::scalar::Scalar;

/// Lloyd iterations per level.
pub const KMEANS_ITERATIONS: usize = 25;

const CODEC_MAGIC: &[u8; 4] = b"STRC";
const CODEC_VERSION: u8 = 1;
const FRAMES_MAGIC: &[u8; 4] = b"STRF";
const FRAMES_VERSION: u8 = 1;

/// A sequence of real feature frames of a common dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence<S> {
    dim: usize,
    data: Vec<S>,
}

impl<S: Scalar> FrameSequence<S> {
    pub fn new(dim: usize, data: Vec<S>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "frame data of length {} is not a positive multiple of dim {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite frame entry".into()));
        }
        Ok(Self { dim, data })
    }

    pub fn from_frames(frames: &[Vec<S>]) -> Result<Self> {
        let dim = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != dim) {
            return Err(Error::Shape("frames of unequal dimension".into()));
        }
        Self::new(dim, frames.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[S] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    /// Root-mean-square difference to another sequence of the same shape.
    pub fn rms_error(&self, other: &Self) -> Result<f64> {
        if self.dim != other.dim || self.data.len() != other.data.len() {
            return Err(Error::Shape("frame sequences differ in shape".into()));
        }
        let sq: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
            .sum();
        Ok((sq / self.data.len() as f64).sqrt())
    }

    /// `STRF` record: magic, version, u32 T, u32 D, then T·D f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(FRAMES_MAGIC, FRAMES_VERSION);
        w.u32(self.len() as u32);
        w.u32(self.dim as u32);
        for v in &self.data {
            w.f32(v.to_f32_lossy());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, FRAMES_MAGIC, FRAMES_VERSION, "frame file")?;
        let len = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let data = (0..len * dim)
            .map(|_| r.f32().map(|v| S::of(v as f64)))
            .collect::<Result<Vec<_>>>()?;
        r.expect_end()?;
        Self::new(dim, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One level's codewords.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<S> {
    level: usize,
    dim: usize,
    vectors: Vec<S>,
}

impl<S: Scalar> Codebook<S> {
    /// `level` is 1-based; `vectors` holds C rows of length `dim`.
    pub fn new(level: usize, dim: usize, vectors: Vec<S>) -> Result<Self> {
        if dim == 0 || vectors.len() % dim != 0 {
            return Err(Error::Shape("codebook data is not a multiple of dim".into()));
        }
        let size = vectors.len() / dim;
        if size < 2 {
            return Err(Error::InvalidArgument(format!("codebook size {size} < 2")));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite codeword".into()));
        }
        let mut seen = HashSet::with_capacity(size);
        for row in vectors.chunks_exact(dim) {
            if !seen.insert(bit_key(row)) {
                return Err(Error::InvalidArgument(format!(
                    "level {level} codebook has duplicate codewords"
                )));
            }
        }
        Ok(Self { level, dim, vectors })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn size(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn codeword(&self, k: usize) -> &[S] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the nearest codeword; ties go to the lowest index.
    pub fn nearest(&self, x: &[S]) -> usize {
        nearest(&self.vectors, self.dim, x).0
    }
}

/// Q ordered codebooks sharing one frame dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct RvqCodec<S> {
    codebooks: Vec<Codebook<S>>,
    frame_dim: usize,
    frame_rate: f64,
}

impl<S: Scalar> RvqCodec<S> {
    pub fn new(codebooks: Vec<Codebook<S>>, frame_rate: f64) -> Result<Self> {
        let first = codebooks
            .first()
            .ok_or_else(|| Error::InvalidArgument("codec needs at least one level".into()))?;
        let frame_dim = first.dim;
        let size = first.size();
        if codebooks.iter().any(|cb| cb.dim != frame_dim || cb.size() != size) {
            return Err(Error::Shape("codebooks differ in dimension or size".into()));
        }
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("frame rate {frame_rate} must be positive")));
        }
        Ok(Self { codebooks, frame_dim, frame_rate })
    }

    pub fn levels(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks[0].size()
    }

    pub fn frame_dim(&self) -> usize {
        self.frame_dim
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn codebooks(&self) -> &[Codebook<S>] {
        &self.codebooks
    }

    /// Quantizes each frame greedily, level by level, on the running residual.
    pub fn encode(&self, frames: &FrameSequence<S>) -> Result<TokenGrid> {
        if frames.dim() != self.frame_dim {
            return Err(Error::Shape(format!(
                "frames have dim {}, codec expects {}",
                frames.dim(),
                self.frame_dim
            )));
        }
        let q = self.levels();
        let mut tokens = Vec::with_capacity(frames.len() * q);
        let mut residual = vec![S::zero(); self.frame_dim];
        for t in 0..frames.len() {
            residual.copy_from_slice(frames.frame(t));
            for cb in &self.codebooks {
                let k = cb.nearest(&residual);
                for (r, c) in residual.iter_mut().zip(cb.codeword(k)) {
                    *r -= *c;
                }
                tokens.push(k as u32);
            }
        }
        TokenGrid::new(frames.len(), q, self.codebook_size(), tokens)
    }

    /// Sums the selected codewords of levels `1..=levels_used` per frame.
    pub fn decode(&self, grid: &TokenGrid, levels_used: usize) -> Result<FrameSequence<S>> {
        if levels_used == 0 || levels_used > self.levels() {
            return Err(Error::InvalidArgument(format!(
                "levels_used {levels_used} outside 1..={}",
                self.levels()
            )));
        }
        if grid.levels() != self.levels() {
            return Err(Error::Shape(format!(
                "grid has {} levels, codec has {}",
                grid.levels(),
                self.levels()
            )));
        }
        let c = self.codebook_size();
        let mut data = vec![S::zero(); grid.frames() * self.frame_dim];
        for t in 0..grid.frames() {
            let out = &mut data[t * self.frame_dim..(t + 1) * self.frame_dim];
            for (level, cb) in self.codebooks.iter().take(levels_used).enumerate() {
                let k = grid.get(t, level) as usize;
                if k >= c {
                    return Err(Error::CorruptGrid(format!(
                        "token {k} at frame {t} level {level} outside codebook of {c}"
                    )));
                }
                for (o, v) in out.iter_mut().zip(cb.codeword(k)) {
                    *o += *v;
                }
            }
        }
        FrameSequence::new(self.frame_dim, data)
    }

    /// Bits per second carried by the token grid.
    pub fn bitrate(&self) -> f64 {
        bitrate(self.frame_rate, self.levels(), self.codebook_size())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CODEC_MAGIC, CODEC_VERSION);
        w.f64(self.frame_rate);
        w.u32(self.frame_dim as u32);
        w.u32(self.levels() as u32);
        w.u32(self.codebook_size() as u32);
        for cb in &self.codebooks {
            for v in &cb.vectors {
                w.f32(v.to_f32_lossy());
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CODEC_MAGIC, CODEC_VERSION, "codec file")?;
        let frame_rate = r.f64()?;
        let dim = r.u32()? as usize;
        let levels = r.u32()? as usize;
        let size = r.u32()? as usize;
        let mut codebooks = Vec::with_capacity(levels);
        for level in 1..=levels {
            let vectors = (0..size * dim)
                .map(|_| r.f32().map(|v| S::of(v as f64)))
                .collect::<Result<Vec<_>>>()?;
            codebooks.push(Codebook::new(level, dim, vectors)?);
        }
        r.expect_end()?;
        Self::new(codebooks, frame_rate)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// `frame_rate · Q · log2(C)` bits per second.
pub fn bitrate(frame_rate: f64, levels: usize, codebook_size: usize) -> f64 {
    frame_rate * levels as f64 * (codebook_size as f64).log2()
}

/// Fits Q codebooks of size C by k-means on successive residuals.
///
/// Initialization draws distinct samples with a seeded shuffle; empty
/// clusters are re-seeded from the point farthest from its centroid. The
/// result depends only on `(data, levels, codebook_size, seed)`.
pub fn train_codebooks<S: Scalar>(
    data: &[FrameSequence<S>],
    levels: usize,
    codebook_size: usize,
    frame_rate: f64,
    seed: u64,
) -> Result<RvqCodec<S>> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training data".into()))?;
    let dim = first.dim();
    if data.iter().any(|f| f.dim() != dim) {
        return Err(Error::Shape("training sequences differ in frame dim".into()));
    }
    if levels == 0 {
        return Err(Error::InvalidArgument("need at least one level".into()));
    }
    if codebook_size < 2 {
        return Err(Error::InvalidArgument("codebook size must be >= 2".into()));
    }
    let mut residuals: Vec<S> = data.iter().flat_map(|f| f.as_slice().iter().copied()).collect();
    let n = residuals.len() / dim;
    if n < codebook_size {
        return Err(Error::DegenerateData(format!(
            "{n} frames cannot fill a codebook of {codebook_size}"
        )));
    }
    let distinct = residuals.chunks_exact(dim).map(bit_key).collect::<HashSet<_>>().len();
    if distinct < codebook_size {
        return Err(Error::DegenerateData(format!(
            "{distinct} distinct frames cannot fill a codebook of {codebook_size}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codebooks = Vec::with_capacity(levels);
    for level in 1..=levels {
        let centroids = kmeans(&residuals, dim, codebook_size, &mut rng);
        for x in residuals.chunks_exact_mut(dim) {
            let (k, _) = nearest(&centroids, dim, x);
            for (r, c) in x.iter_mut().zip(&centroids[k * dim..(k + 1) * dim]) {
                *r -= *c;
            }
        }
        codebooks.push(Codebook::new(level, dim, centroids)?);
    }
    RvqCodec::new(codebooks, frame_rate)
}

fn kmeans<S: Scalar>(points: &[S], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<S> {
    let n = points.len() / dim;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut seen = HashSet::with_capacity(k);
    let mut centroids = Vec::with_capacity(k * dim);
    for &i in &order {
        let p = &points[i * dim..(i + 1) * dim];
        if seen.insert(bit_key(p)) {
            centroids.extend_from_slice(p);
            if seen.len() == k {
                break;
            }
        }
    }
    // Residuals at deep levels can collapse onto fewer than k points; pad
    // with distinct placeholder codewords (zero first) that stay unused.
    if seen.len() < k {
        let scale = points
            .iter()
            .fold(S::zero(), |m, v| m.max(v.abs()))
            .max(S::of(1e-3));
        let zero = vec![S::zero(); dim];
        if seen.insert(bit_key(&zero)) {
            centroids.extend_from_slice(&zero);
        }
        let mut j = 0usize;
        while seen.len() < k {
            let mut v = vec![S::zero(); dim];
            v[j % dim] = scale * S::of(1.0 + (j / dim) as f64);
            if j % 2 == 1 {
                v[j % dim] = -v[j % dim];
            }
            if seen.insert(bit_key(&v)) {
                centroids.extend_from_slice(&v);
            }
            j += 1;
        }
    }

    let mut assign = vec![usize::MAX; n];
    let mut dist = vec![S::zero(); n];
    for _ in 0..KMEANS_ITERATIONS {
        let mut changed = false;
        for i in 0..n {
            let (c, d) = nearest(&centroids, dim, &points[i * dim..(i + 1) * dim]);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
            dist[i] = d;
        }
        if !changed {
            break;
        }
        let mut sums = vec![S::zero(); k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, p) in sums[assign[i] * dim..(assign[i] + 1) * dim]
                .iter_mut()
                .zip(&points[i * dim..(i + 1) * dim])
            {
                *s += *p;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = S::one() / S::of(counts[c] as f64);
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = *s * inv;
                }
            } else {
                let (far, d) = dist
                    .iter()
                    .enumerate()
                    .fold((0, S::zero()), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
                if d > S::zero() {
                    centroids[c * dim..(c + 1) * dim]
                        .copy_from_slice(&points[far * dim..(far + 1) * dim]);
                    dist[far] = S::zero();
                }
            }
        }
    }
    dedup_codewords(&mut centroids, dim, rng);
    centroids
}

/// Nudges any codeword that duplicates an earlier one.
fn dedup_codewords<S: Scalar>(centroids: &mut [S], dim: usize, rng: &mut ChaCha8Rng) {
    let mut seen = HashSet::new();
    for row in centroids.chunks_exact_mut(dim) {
        while !seen.insert(bit_key(row)) {
            let j = rng.gen_range(0..dim);
            let bump = row[j].abs().max(S::one()) * S::of(1e-4);
            row[j] += bump;
        }
    }
}

fn nearest<S: Scalar>(codewords: &[S], dim: usize, x: &[S]) -> (usize, S) {
    let mut best = (0, S::infinity());
    for (k, c) in codewords.chunks_exact(dim).enumerate() {
        let d = x.iter().zip(c).fold(S::zero(), |acc, (a, b)| {
            let diff = *a - *b;
            acc + diff * diff
        });
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn bit_key<S: Scalar>(row: &[S]) -> Vec<u64> {
    // +0.0 and -0.0 compare equal as codewords.
    row.iter()
        .map(|v| {
            let f = v.to_f64_lossy();
            if f == 0.0 { 0 } else { f.to_bits() }
        })
        .collect()
}

/// Synthetic feature streams: per dimension, a sum of three seeded
/// low-frequency sinusoids plus Gaussian noise.
pub fn synthetic_frames<S: Scalar, R: Rng + ?Sized>(
    frames: usize,
    dim: usize,
    noise: f64,
    rng: &mut R,
) -> Result<FrameSequence<S>> {
    const COMPONENTS: usize = 3;
    let mut params = Vec::with_capacity(dim * COMPONENTS);
    for _ in 0..dim {
        for c in 0..COMPONENTS {
            let freq = rng.gen_range(0.005..0.08) * std::f64::consts::TAU;
            let amp = rng.gen_range(0.5..1.5) / (c + 1) as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            params.push((freq, amp, phase));
        }
    }
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        for d in 0..dim {
            let clean: f64 = params[d * COMPONENTS..(d + 1) * COMPONENTS]
                .iter()
                .map(|&(f, a, p)| a * (f * t as f64 + p).sin())
                .sum();
            data.push(S::of(clean + normal.sample(rng)));
        }
    }
    FrameSequence::new(dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cb(level: usize, dim: usize, v: &[f64]) -> Codebook<f64> {
        Codebook::new(level, dim, v.to_vec()).unwrap()
    }

    fn hand_codec() -> RvqCodec<f64> {
        RvqCodec::new(vec![cb(1, 1, &[0.0, 1.0]), cb(2, 1, &[-0.1, 0.1])], 50.0).unwrap()
    }

    #[test]
    fn encode_hand_example() {
        let codec = hand_codec();
        let frames = FrameSequence::new(1, vec![0.85]).unwrap();
        let grid = codec.encode(&frames).unwrap();
        assert_eq!(grid.tokens(), &[1, 0]);
        let one = codec.decode(&grid, 1).unwrap();
        assert_eq!(one.as_slice(), &[1.0]);
        let two = codec.decode(&grid, 2).unwrap();
        assert!((two.as_slice()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn exact_codeword_selects_zero_deeper() {
        let codec = RvqCodec::new(
            vec![cb(1, 2, &[0.0, 0.0, 1.0, 2.0, -3.0, 0.5]), cb(2, 2, &[0.0, 0.0, 0.3, 0.3, -0.2, 0.1])],
            50.0,
        )
        .unwrap();
        let frames = FrameSequence::new(2, vec![1.0, 2.0]).unwrap();
        let grid = codec.encode(&frames).unwrap();
        assert_eq!(grid.tokens(), &[1, 0]);
        assert_eq!(codec.decode(&grid, 2).unwrap(), frames);
    }

    #[test]
    fn tie_breaks_to_lowest_index() {
        let mut v = vec![10.0; 8];
        v[3] = -1.0;
        v[7] = 1.0;
        for (i, x) in v.iter_mut().enumerate() {
            if i != 3 && i != 7 {
                *x = 10.0 + i as f64;
            }
        }
        let book = cb(1, 1, &v);
        assert_eq!(book.nearest(&[0.0]), 3);
    }

    #[test]
    fn all_zero_tokens_decode_to_zero() {
        let codec = RvqCodec::new(vec![cb(1, 1, &[0.0, 1.0]), cb(2, 1, &[0.0, 0.5])], 50.0).unwrap();
        let grid = TokenGrid::filled(4, 2, 2, 0).unwrap();
        assert!(codec.decode(&grid, 2).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_rejects_out_of_range_token() {
        let codec = hand_codec();
        let grid = TokenGrid::new(1, 2, 4, vec![3, 0]).unwrap();
        assert!(matches!(codec.decode(&grid, 2), Err(Error::CorruptGrid(_))));
        let ok = TokenGrid::new(1, 2, 2, vec![1, 0]).unwrap();
        assert!(codec.decode(&ok, 0).is_err());
        assert!(codec.decode(&ok, 3).is_err());
    }

    #[test]
    fn encode_rejects_dim_mismatch() {
        let frames = FrameSequence::new(2, vec![0.0, 1.0]).unwrap();
        assert!(matches!(hand_codec().encode(&frames), Err(Error::Shape(_))));
    }

    #[test]
    fn bitrate_examples() {
        assert_eq!(bitrate(50.0, 12, 1024), 6000.0);
        assert_eq!(bitrate(1.0, 1, 2), 1.0);
        assert_eq!(bitrate(50.0, 4, 64), 1200.0);
        assert_eq!(hand_codec().bitrate(), 100.0);
    }

    #[test]
    fn exactly_c_points_become_the_codebook() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![5.0, 5.0], vec![-3.0, 0.5]];
        let data = vec![FrameSequence::<f64>::from_frames(&pts).unwrap()];
        let codec = train_codebooks(&data, 1, 4, 50.0, 11).unwrap();
        let mut got: Vec<Vec<f64>> = (0..4).map(|k| codec.codebooks()[0].codeword(k).to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = pts.clone();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
        let recon = codec.decode(&codec.encode(&data[0]).unwrap(), 1).unwrap();
        assert_eq!(recon.rms_error(&data[0]).unwrap(), 0.0);
    }

    #[test]
    fn indistinct_data_is_degenerate() {
        let data = vec![FrameSequence::<f64>::new(3, vec![0.0; 30]).unwrap()];
        assert!(matches!(train_codebooks(&data, 2, 2, 50.0, 0), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn deep_levels_survive_collapsed_residuals() {
        // Two distinct points and C = 2: level 2 sees all-zero residuals.
        let data = vec![FrameSequence::<f64>::new(1, vec![0.0, 1.0, 0.0, 1.0]).unwrap()];
        let codec = train_codebooks(&data, 3, 2, 50.0, 5).unwrap();
        assert_eq!(codec.levels(), 3);
        let grid = codec.encode(&data[0]).unwrap();
        assert_eq!(codec.decode(&grid, 3).unwrap(), data[0]);
    }

    /// Brute force over all 2-partitions of the four points: the fitted
    /// level-1 codebook must be the mean pair of a Lloyd-stable partition.
    #[test]
    fn kmeans_matches_partition_oracle() {
        let pts = [0.0, 1.0, 0.45, 0.55];
        let mut stable = Vec::new();
        let mut best_sse = f64::INFINITY;
        for mask in 1u32..(1 << 3) {
            // point 3 always in cluster B; mask picks cluster A among the rest
            let a: Vec<f64> = (0..4).filter(|i| *i < 3 && mask >> i & 1 == 1).map(|i| pts[i]).collect();
            let b: Vec<f64> = (0..4).filter(|i| *i == 3 || mask >> i & 1 == 0).map(|i| pts[i]).collect();
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let sse: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>()
                + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
            best_sse = best_sse.min(sse);
            let self_consistent = a.iter().all(|x| (x - ma).abs() <= (x - mb).abs())
                && b.iter().all(|x| (x - mb).abs() <= (x - ma).abs());
            if self_consistent {
                let (lo, hi) = if ma < mb { (ma, mb) } else { (mb, ma) };
                stable.push((lo, hi, sse));
            }
        }
        assert!((best_sse - 0.171_666_666_666_666_7).abs() < 1e-12);
        for seed in 0..20 {
            let data = vec![FrameSequence::<f64>::new(1, pts.to_vec()).unwrap()];
            let codec = train_codebooks(&data, 2, 2, 50.0, seed).unwrap();
            let book = &codec.codebooks()[0];
            let (mut lo, mut hi) = (book.codeword(0)[0], book.codeword(1)[0]);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            assert!(
                stable.iter().any(|&(a, b, _)| (a - lo).abs() < 1e-12 && (b - hi).abs() < 1e-12),
                "seed {seed}: centroids ({lo}, {hi}) are not a stable partition"
            );
        }
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<FrameSequence<f32>> =
            (0..3).map(|_| synthetic_frames(200, 4, 0.05, &mut rng).unwrap()).collect();
        let a = train_codebooks(&data, 3, 16, 50.0, 9).unwrap();
        let b = train_codebooks(&data, 3, 16, 50.0, 9).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.encode(&data[0]).unwrap(), b.encode(&data[0]).unwrap());
        // Later levels refine the reconstruction on this data.
        let grid = a.encode(&data[1]).unwrap();
        let e1 = a.decode(&grid, 1).unwrap().rms_error(&data[1]).unwrap();
        let e3 = a.decode(&grid, 3).unwrap().rms_error(&data[1]).unwrap();
        assert!(e3 < e1);
    }

    #[test]
    fn codec_file_round_trip_and_header() {
        let codec = RvqCodec::new(vec![cb(1, 1, &[0.0, 1.0]), cb(2, 1, &[-0.25, 0.25])], 50.0).unwrap();
        let bytes = codec.to_bytes();
        assert_eq!(&bytes[..5], b"STRC\x01");
        assert_eq!(&bytes[5..13], &50.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 5 + 8 + 12 + 4 * 4);
        let back = RvqCodec::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, codec);
        assert!(RvqCodec::<f64>::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    fn random_codec_with_zero(levels: usize, size: usize, dim: usize, seed: u64) -> RvqCodec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let books = (1..=levels)
            .map(|level| {
                let scale = 0.5f64.powi(level as i32 - 1);
                let mut v = vec![0.0; dim];
                v.extend((0..(size - 1) * dim).map(|_| rng.gen_range(-1.0..1.0) * scale));
                cb(level, dim, &v)
            })
            .collect();
        RvqCodec::new(books, 50.0).unwrap()
    }

    proptest! {
        #[test]
        fn residual_error_is_monotone_with_zero_codewords(seed: u64, levels in 1usize..5, size in 2usize..9) {
            let codec = random_codec_with_zero(levels, size, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let x: Vec<f64> = (0..30).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let frames = FrameSequence::new(3, x).unwrap();
            let grid = codec.encode(&frames).unwrap();
            let mut prev = f64::INFINITY;
            for l in 1..=levels {
                let e = codec.decode(&grid, l).unwrap().rms_error(&frames).unwrap();
                prop_assert!(e <= prev * (1.0 + 1e-12) + 1e-15, "level {}: {} > {}", l, e, prev);
                prev = e;
            }
        }

        #[test]
        fn encode_inverts_decode_on_scale_separated_codecs(seed: u64, levels in 1usize..4, frames in 1usize..12) {
            // Level l codewords are distinct lattice points scaled by 20^-l, so
            // deeper sums never cross a coarser decision boundary.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = 2;
            let size = 6;
            let books = (1..=levels).map(|level| {
                let scale = 20f64.powi(-(level as i32));
                let mut pts = HashSet::new();
                let mut v = Vec::new();
                while pts.len() < size {
                    let p = (rng.gen_range(-4i32..=4), rng.gen_range(-4i32..=4));
                    if pts.insert(p) {
                        v.push(p.0 as f64 * scale);
                        v.push(p.1 as f64 * scale);
                    }
                }
                cb(level, dim, &v)
            }).collect();
            let codec = RvqCodec::new(books, 50.0).unwrap();
            let tokens: Vec<u32> = (0..frames * levels).map(|_| rng.gen_range(0..size as u32)).collect();
            let grid = TokenGrid::new(frames, levels, size, tokens).unwrap();
            let x = codec.decode(&grid, levels).unwrap();
            prop_assert_eq!(codec.encode(&x).unwrap(), grid);
        }
    }
}
