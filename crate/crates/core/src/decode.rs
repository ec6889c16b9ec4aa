//! Level-wise iterative parallel decoding and the two baselines it is
//! compared against: level-by-level greedy decoding and token-by-token
//! decoding of the flattened grid.
//!
//! Within level q the decoder runs n_q iterations. Iteration i < n_q makes
//! one forward pass, samples a candidate at every still-masked level-q
//! position, and commits the most confident candidates so that exactly
//! ⌈N_q·cos(π/2·i/n_q)⌉ positions stay masked. Iteration n_q commits the
//! rest by argmax. Level q+1 starts only after level q is complete.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cond::ConditioningSequence;
use crate::error::{Error, Result};
use crate::grid::{MaskedGrid, TokenGrid};
use crate::net::{ArPredictor, TokenModel};
use crate::scalar::Scalar;

/// Iterations per level, coarse to fine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct DecodeSchedule {
    iterations: Vec<usize>,
}

impl DecodeSchedule {
    pub fn new(iterations: Vec<usize>) -> Result<Self> {
        if iterations.is_empty() {
            return Err(Error::Schedule("schedule needs at least one level".into()));
        }
        if let Some(q) = iterations.iter().position(|&n| n == 0) {
            return Err(Error::Schedule(format!("level {} has zero iterations", q + 1)));
        }
        Ok(Self { iterations })
    }

    /// One iteration per level: greedy decoding.
    pub fn greedy(levels: usize) -> Result<Self> {
        Self::new(vec![1; levels])
    }

    /// `first` iterations on the coarsest level, one on every other.
    pub fn coarse_first(first: usize, levels: usize) -> Result<Self> {
        let mut it = vec![1; levels];
        if let Some(f) = it.first_mut() {
            *f = first;
        }
        Self::new(it)
    }

    pub fn iterations(&self) -> &[usize] {
        &self.iterations
    }

    pub fn levels(&self) -> usize {
        self.iterations.len()
    }

    /// Network invocations needed: Σ n_q.
    pub fn forward_pass_count(&self) -> usize {
        self.iterations.iter().sum()
    }
}

impl TryFrom<Vec<usize>> for DecodeSchedule {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DecodeSchedule> for Vec<usize> {
    fn from(s: DecodeSchedule) -> Self {
        s.iterations
    }
}

impl FromStr for DecodeSchedule {
    type Err = Error;

    /// Parses a comma-separated list such as `16,1,1`.
    fn from_str(s: &str) -> Result<Self> {
        let it = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Schedule(format!("bad schedule entry {p:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(it)
    }
}

impl fmt::Display for DecodeSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iterations.iter().map(|n| n.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

pub fn forward_pass_count(schedule: &DecodeSchedule) -> usize {
    schedule.forward_pass_count()
}

/// Positions still masked after iteration `iteration` (1-based) of `n`,
/// starting from `total`: ⌈total·cos(π/2·i/n)⌉, and 0 after the last.
pub fn masked_target(total: usize, iteration: usize, n: usize) -> usize {
    if iteration >= n {
        return 0;
    }
    let r = total as f64 * (FRAC_PI_2 * iteration as f64 / n as f64).cos();
    ((r - 1e-9).ceil().max(0.0) as usize).min(total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    /// log-probability plus Gumbel noise annealed to zero over the level.
    #[default]
    Gumbel,
    /// log-probability alone.
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeOptions {
    /// Softmax temperature for candidate sampling; 0 samples the argmax.
    pub temperature: f64,
    pub confidence: ConfidenceMode,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { temperature: 1.0, confidence: ConfidenceMode::Gumbel }
    }
}

/// One committed token. `level` and `iteration` are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommitEvent {
    pub level: usize,
    pub iteration: usize,
    pub position: usize,
    pub token: u32,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub grid: TokenGrid,
    /// Commitments in the order they happened.
    pub trace: Vec<CommitEvent>,
    pub forward_passes: usize,
}

/// Trace as text, one "level iteration position token confidence" line per
/// commitment.
pub fn trace_to_text(trace: &[CommitEvent]) -> String {
    let mut s = String::new();
    for e in trace {
        s.push_str(&format!("{} {} {} {} {}\n", e.level, e.iteration, e.position, e.token, e.confidence));
    }
    s
}

pub fn parse_trace(text: &str) -> Result<Vec<CommitEvent>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Format(format!("trace line {}: {line:?}", n + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(CommitEvent {
                level: f[0].parse().map_err(|_| bad())?,
                iteration: f[1].parse().map_err(|_| bad())?,
                position: f[2].parse().map_err(|_| bad())?,
                token: f[3].parse().map_err(|_| bad())?,
                confidence: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn log_softmax<S: Scalar>(row: impl Iterator<Item = S>, temperature: f64) -> Vec<f64> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let v: Vec<f64> = row.map(|x| x.to_f64_lossy() / t).collect();
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_index<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    argmax(log_probs)
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

fn check_prompt(prompt: Option<&TokenGrid>, frames: usize, levels: usize, c: usize) -> Result<usize> {
    match prompt {
        None => Ok(0),
        Some(p) if p.frames() > frames => {
            Err(Error::Shape(format!("prompt of {} frames longer than {frames}", p.frames())))
        }
        Some(p) if p.levels() != levels || p.codebook_size() != c => {
            Err(Error::Shape("prompt dims disagree with the model".into()))
        }
        Some(p) => Ok(p.frames()),
    }
}

fn seeded_grid(prompt: Option<&TokenGrid>, frames: usize, levels: usize, c: usize) -> MaskedGrid {
    let mut grid = MaskedGrid::all_masked(frames, levels, c);
    if let Some(p) = prompt {
        for i in 0..p.frames() {
            for q in 0..levels {
                grid.set(i, q, p.get(i, q));
            }
        }
    }
    grid
}

/// Confidence-based iterative decoding of a `frames`-long grid.
pub fn parallel_decode<M: TokenModel, R: Rng + ?Sized>(
    model: &M,
    cond: &ConditioningSequence,
    frames: usize,
    prompt: Option<&TokenGrid>,
    schedule: &DecodeSchedule,
    options: &DecodeOptions,
    rng: &mut R,
) -> Result<DecodeOutput> {
    let (levels, c) = (model.levels(), model.codebook_size());
    if schedule.levels() != levels {
        return Err(Error::Schedule(format!("schedule has {} levels, model has {levels}", schedule.levels())));
    }
    let prompt_frames = check_prompt(prompt, frames, levels, c)?;
    let mut grid = seeded_grid(prompt, frames, levels, c);
    let mut trace = Vec::with_capacity((frames - prompt_frames) * levels);
    let mut passes = 0;
    let total = frames - prompt_frames;

    for (q, &n) in schedule.iterations().iter().enumerate() {
        if total == 0 {
            break;
        }
        for i in 1..=n {
            let logits = model.predict(&grid, cond)?;
            passes += 1;
            let masked: Vec<usize> = (prompt_frames..frames).filter(|&f| grid.is_masked(f, q)).collect();
            if i == n {
                for f in masked {
                    let lp = log_softmax(logits.row(f, q).iter().copied(), 1.0);
                    let tok = argmax(&lp);
                    grid.set(f, q, tok as u32);
                    trace.push(CommitEvent { level: q + 1, iteration: i, position: f, token: tok as u32, confidence: lp[tok] });
                }
                break;
            }
            let keep_masked = masked_target(total, i, n);
            let commit = masked.len().saturating_sub(keep_masked);
            let noise_scale = options.temperature * (1.0 - i as f64 / n as f64);
            let mut candidates: Vec<(f64, usize, u32)> = masked
                .iter()
                .map(|&f| {
                    let lp = log_softmax(logits.row(f, q).iter().copied(), options.temperature);
                    let tok = if options.temperature > 0.0 { sample_index(&lp, rng) } else { argmax(&lp) };
                    let mut conf = lp[tok];
                    if options.confidence == ConfidenceMode::Gumbel {
                        conf += noise_scale * gumbel(rng);
                    }
                    (conf, f, tok as u32)
                })
                .collect();
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(conf, f, tok) in &candidates[..commit] {
                grid.set(f, q, tok);
                trace.push(CommitEvent { level: q + 1, iteration: i, position: f, token: tok, confidence: conf });
            }
        }
    }
    Ok(DecodeOutput { grid: grid.into_complete()?, trace, forward_passes: passes })
}

/// Argmax decoding of one level per forward pass.
pub fn level_greedy_decode<M: TokenModel>(
    model: &M,
    cond: &ConditioningSequence,
    frames: usize,
    prompt: Option<&TokenGrid>,
) -> Result<DecodeOutput> {
    let schedule = DecodeSchedule::greedy(model.levels())?;
    let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
    parallel_decode(model, cond, frames, prompt, &schedule, &DecodeOptions::default(), &mut no_rng)
}

/// A model that scores the next token of the row-major flattened grid.
pub trait NextTokenModel: Sync {
    type Scalar: Scalar;

    fn levels(&self) -> usize;

    fn codebook_size(&self) -> usize;

    /// Logits over the C tokens of flattened position `prefix.len()`; `cond`
    /// is aligned to the first frame of `prefix`.
    fn next_logits(&self, cond: &ConditioningSequence, prefix: &[u32]) -> Result<Vec<Self::Scalar>>;
}

impl<S: Scalar> NextTokenModel for ArPredictor<S> {
    type Scalar = S;

    fn levels(&self) -> usize {
        self.config().levels
    }

    fn codebook_size(&self) -> usize {
        self.config().codebook_size
    }

    fn next_logits(&self, cond: &ConditioningSequence, prefix: &[u32]) -> Result<Vec<S>> {
        ArPredictor::next_logits(self, cond, prefix)
    }
}

/// Chunked generation for long outputs: once the context reaches `chunk`
/// frames it restarts from the last `overlap` frames, which act as the
/// prompt for the next chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlidingWindow {
    pub chunk: usize,
    pub overlap: usize,
}

impl SlidingWindow {
    pub fn new(chunk: usize, overlap: usize) -> Result<Self> {
        if chunk == 0 || overlap >= chunk {
            return Err(Error::InvalidArgument(format!("window needs 0 <= overlap < chunk, got {overlap}/{chunk}")));
        }
        Ok(Self { chunk, overlap })
    }

    /// Chunk and overlap given in seconds at `frame_rate`.
    pub fn from_seconds(chunk_s: f64, overlap_s: f64, frame_rate: f64) -> Result<Self> {
        Self::new((chunk_s * frame_rate).round() as usize, (overlap_s * frame_rate).round() as usize)
    }

    /// 10 s chunks with 3 s of overlap.
    pub fn default_for_rate(frame_rate: f64) -> Self {
        Self::from_seconds(10.0, 3.0, frame_rate).expect("positive rate")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ArOptions {
    /// Sampling temperature; 0 takes the argmax.
    pub temperature: f64,
    pub window: Option<SlidingWindow>,
}

/// Token-by-token decoding of the flattened grid: one forward pass per
/// non-prompt token.
pub fn flattened_ar_decode<M: NextTokenModel, R: Rng + ?Sized>(
    model: &M,
    cond: &ConditioningSequence,
    frames: usize,
    prompt: Option<&TokenGrid>,
    options: &ArOptions,
    rng: &mut R,
) -> Result<DecodeOutput> {
    let (levels, c) = (model.levels(), model.codebook_size());
    let prompt_frames = check_prompt(prompt, frames, levels, c)?;
    if cond.len() < frames {
        return Err(Error::Alignment(format!("conditioning has {} tokens for {frames} frames", cond.len())));
    }
    let mut tokens: Vec<u32> = prompt.map(|p| p.tokens().to_vec()).unwrap_or_default();
    tokens.reserve(frames * levels);
    let mut trace = Vec::with_capacity((frames - prompt_frames) * levels);
    let mut start = 0;
    let mut window_cond = cond.clone();
    let mut passes = 0;
    for p in prompt_frames * levels..frames * levels {
        let frame = p / levels;
        if let Some(w) = options.window {
            if frame - start >= w.chunk && p % levels == 0 {
                start = frame - w.overlap;
                window_cond = cond.window(start, cond.len() - start)?;
            }
        }
        let logits = model.next_logits(&window_cond, &tokens[start * levels..])?;
        passes += 1;
        let lp = log_softmax(logits.iter().copied(), options.temperature);
        let tok = if options.temperature > 0.0 { sample_index(&lp, rng) } else { argmax(&lp) };
        tokens.push(tok as u32);
        trace.push(CommitEvent { level: p % levels + 1, iteration: 1, position: frame, token: tok as u32, confidence: lp[tok] });
    }
    Ok(DecodeOutput { grid: TokenGrid::new(frames, levels, c, tokens)?, trace, forward_passes: passes })
}

/// Replays a parallel-decoding trace and checks that commitments are
/// monotone, levels complete in order, every iteration leaves exactly the
/// scheduled number of positions masked, and the prompt is untouched.
pub fn verify_trace(
    output: &TokenGrid,
    trace: &[CommitEvent],
    schedule: &DecodeSchedule,
    prompt: Option<&TokenGrid>,
) -> Result<()> {
    let (frames, levels, _) = output.dims();
    if schedule.levels() != levels {
        return Err(Error::Schedule("schedule and grid disagree on levels".into()));
    }
    let prompt_frames = prompt.map_or(0, |p| p.frames());
    if let Some(p) = prompt {
        if output.prefix(prompt_frames)? != *p {
            return Err(Error::Invariant("prompt frames changed".into()));
        }
    }
    let total = frames - prompt_frames;
    let fail = |msg: String| Err(Error::Invariant(msg));
    let mut committed = vec![false; frames * levels];
    let mut level = 1;
    let mut iteration = 1;
    let mut done_in_level = 0;
    // Remaining-masked count must hit the target at each iteration boundary.
    let check_boundary = |level: usize, it: usize, done: usize| -> Result<()> {
        let n = schedule.iterations()[level - 1];
        let want = masked_target(total, it, n);
        if total - done != want {
            return fail(format!("level {level} iteration {it}: {} masked, schedule says {want}", total - done));
        }
        Ok(())
    };
    for e in trace {
        if e.level == 0 || e.level > levels || e.position >= frames {
            return fail(format!("event out of range: {e:?}"));
        }
        if e.position < prompt_frames {
            return fail(format!("prompt position {} sampled", e.position));
        }
        if e.level < level {
            return fail(format!("level {} revisited after level {level}", e.level));
        }
        while e.level > level || (e.level == level && e.iteration > iteration) {
            check_boundary(level, iteration, done_in_level)?;
            if iteration < schedule.iterations()[level - 1] {
                iteration += 1;
            } else {
                level += 1;
                iteration = 1;
                done_in_level = 0;
            }
        }
        if e.iteration < iteration || e.iteration > schedule.iterations()[level - 1] {
            return fail(format!("iteration {} out of order at level {level}", e.iteration));
        }
        let idx = e.position * levels + e.level - 1;
        if committed[idx] {
            return fail(format!("position {} level {} committed twice", e.position, e.level));
        }
        committed[idx] = true;
        done_in_level += 1;
        if output.get(e.position, e.level - 1) != e.token {
            return fail(format!("output disagrees with trace at {} level {}", e.position, e.level));
        }
    }
    if total > 0 {
        loop {
            check_boundary(level, iteration, done_in_level)?;
            if iteration < schedule.iterations()[level - 1] {
                iteration += 1;
            } else if level < levels {
                level += 1;
                iteration = 1;
                done_in_level = 0;
            } else {
                break;
            }
        }
    }
    let missing = (prompt_frames * levels..frames * levels).filter(|&i| !committed[i]).count();
    if missing > 0 {
        return fail(format!("{missing} positions never committed"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Logits;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Mutex;

    /// Logits that depend on position, level and how much of the grid is
    /// still masked, so successive passes differ.
    struct HashModel {
        levels: usize,
        c: usize,
        seed: u64,
    }

    fn mix(mut x: u64) -> u64 {
        x ^= x >> 33;
        x = x.wrapping_mul(0xff51afd7ed558ccd);
        x ^= x >> 33;
        x = x.wrapping_mul(0xc4ceb9fe1a85ec53);
        x ^ (x >> 33)
    }

    impl TokenModel for HashModel {
        type Scalar = f64;

        fn levels(&self) -> usize {
            self.levels
        }

        fn codebook_size(&self) -> usize {
            self.c
        }

        fn predict(&self, grid: &MaskedGrid, _cond: &ConditioningSequence) -> Result<Logits<f64>> {
            let m = grid.mask_count() as u64;
            let t = grid.frames();
            Ok(Logits::new(Array3::from_shape_fn((t, self.levels, self.c), |(f, q, k)| {
                let h = mix(self.seed ^ mix((f as u64) << 40 ^ (q as u64) << 20 ^ (k as u64) ^ m << 50));
                (h % 10_000) as f64 / 1000.0
            })))
        }
    }

    fn cond(len: usize) -> ConditioningSequence {
        ConditioningSequence::new(vec![0; len], 50, 1).unwrap()
    }

    #[test]
    fn forward_pass_counts() {
        let mut paper = vec![16];
        paper.extend([1; 11]);
        assert_eq!(DecodeSchedule::new(paper).unwrap().forward_pass_count(), 27);
        assert_eq!(DecodeSchedule::greedy(5).unwrap().forward_pass_count(), 5);
        assert_eq!("8,4,2,1".parse::<DecodeSchedule>().unwrap().forward_pass_count(), 15);
        assert_eq!(DecodeSchedule::coarse_first(16, 12).unwrap().forward_pass_count(), 27);
        assert!(DecodeSchedule::new(vec![]).is_err());
        assert!(DecodeSchedule::new(vec![2, 0]).is_err());
        assert!("4,x".parse::<DecodeSchedule>().is_err());
        assert_eq!(DecodeSchedule::new(vec![16, 1, 1]).unwrap().to_string(), "16,1,1");
    }

    #[test]
    fn cosine_targets() {
        // 10·cos(π/8) = 9.24, 10·cos(π/4) = 7.07, 10·cos(3π/8) = 3.83.
        let got: Vec<usize> = (1..=4).map(|i| masked_target(10, i, 4)).collect();
        assert_eq!(got, vec![10, 8, 4, 0]);
        // 2·cos(π/3) is 1 up to rounding and must not round up to 2.
        assert_eq!(masked_target(2, 2, 3), 1);
        assert_eq!(masked_target(0, 1, 5), 0);
        assert_eq!(masked_target(7, 1, 1), 0);
    }

    #[test]
    fn invariants_hold_on_random_decodes() {
        for seed in 0..40u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let levels = 1 + (seed % 4) as usize;
            let model = HashModel { levels, c: 6, seed };
            let frames = 5 + (seed % 13) as usize;
            let it: Vec<usize> = (0..levels).map(|q| 1 + ((seed as usize + q * 3) % 6)).collect();
            let schedule = DecodeSchedule::new(it).unwrap();
            let prompt = if seed % 3 == 0 {
                let pf = (seed % 4) as usize;
                let toks = (0..pf * levels).map(|i| (i % 6) as u32).collect();
                Some(TokenGrid::new(pf, levels, 6, toks).unwrap())
            } else {
                None
            };
            let opts = DecodeOptions {
                confidence: if seed % 2 == 0 { ConfidenceMode::Gumbel } else { ConfidenceMode::Plain },
                ..Default::default()
            };
            let out = parallel_decode(&model, &cond(frames), frames, prompt.as_ref(), &schedule, &opts, &mut rng).unwrap();
            assert_eq!(out.forward_passes, schedule.forward_pass_count());
            verify_trace(&out.grid, &out.trace, &schedule, prompt.as_ref()).unwrap();
            let text = trace_to_text(&out.trace);
            assert_eq!(parse_trace(&text).unwrap(), out.trace);
        }
    }

    #[test]
    fn verifier_rejects_tampering() {
        let model = HashModel { levels: 2, c: 5, seed: 1 };
        let schedule = DecodeSchedule::new(vec![4, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = parallel_decode(&model, &cond(12), 12, None, &schedule, &DecodeOptions::default(), &mut rng).unwrap();
        verify_trace(&out.grid, &out.trace, &schedule, None).unwrap();

        let mut dup = out.trace.clone();
        dup.push(dup[0]);
        assert!(verify_trace(&out.grid, &dup, &schedule, None).is_err());

        let mut reordered = out.trace.clone();
        let last = reordered.pop().unwrap();
        reordered.insert(0, last);
        assert!(verify_trace(&out.grid, &reordered, &schedule, None).is_err());

        let mut shifted = out.trace.clone();
        let first_iter2 = shifted.iter().position(|e| e.iteration == 2).unwrap();
        shifted[first_iter2].iteration = 1;
        assert!(verify_trace(&out.grid, &shifted, &schedule, None).is_err());

        let mut dropped = out.trace.clone();
        dropped.remove(3);
        assert!(verify_trace(&out.grid, &dropped, &schedule, None).is_err());
    }

    #[test]
    fn full_prompt_is_returned_unchanged() {
        let model = HashModel { levels: 3, c: 4, seed: 0 };
        let prompt = TokenGrid::new(4, 3, 4, (0..12).map(|i| (i % 4) as u32).collect()).unwrap();
        let schedule = DecodeSchedule::new(vec![8, 1, 1]).unwrap();
        let out = parallel_decode(&model, &cond(4), 4, Some(&prompt), &schedule, &DecodeOptions::default(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(out.grid, prompt);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn all_ones_schedule_is_level_greedy() {
        for seed in 0..10 {
            let model = HashModel { levels: 3, c: 7, seed };
            let schedule = DecodeSchedule::greedy(3).unwrap();
            let a = parallel_decode(&model, &cond(9), 9, None, &schedule, &DecodeOptions::default(), &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
            let b = level_greedy_decode(&model, &cond(9), 9, None).unwrap();
            assert_eq!(a, b);
            assert_eq!(b.forward_passes, 3);
        }
    }

    #[test]
    fn single_iteration_commits_argmax() {
        let model = HashModel { levels: 2, c: 9, seed: 5 };
        let out = level_greedy_decode(&model, &cond(6), 6, None).unwrap();
        // Level 1 is decided from the all-masked grid.
        let logits = model.predict(&MaskedGrid::all_masked(6, 2, 9), &cond(6)).unwrap();
        for f in 0..6 {
            let row = logits.row(f, 0);
            let best = (0..9).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            assert_eq!(out.grid.get(f, 0), best as u32);
        }
    }

    #[test]
    fn decode_errors() {
        let model = HashModel { levels: 2, c: 4, seed: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = DecodeSchedule::new(vec![4, 1, 1]).unwrap();
        let e = parallel_decode(&model, &cond(4), 4, None, &bad, &DecodeOptions::default(), &mut rng).unwrap_err();
        assert!(matches!(e, Error::Schedule(_)));
        let long = TokenGrid::filled(5, 2, 4, 0).unwrap();
        let e = level_greedy_decode(&model, &cond(5), 4, Some(&long)).unwrap_err();
        assert!(matches!(e, Error::Shape(_)));
    }

    /// Always prefers token (frame + level) mod C, by a wide margin.
    struct OneHotAr {
        levels: usize,
        c: usize,
        longest: Mutex<usize>,
    }

    impl NextTokenModel for OneHotAr {
        type Scalar = f32;

        fn levels(&self) -> usize {
            self.levels
        }

        fn codebook_size(&self) -> usize {
            self.c
        }

        fn next_logits(&self, _cond: &ConditioningSequence, prefix: &[u32]) -> Result<Vec<f32>> {
            let mut l = self.longest.lock().unwrap();
            *l = (*l).max(prefix.len() + 1);
            let p = prefix.len();
            let want = (p / self.levels + p % self.levels) % self.c;
            Ok((0..self.c).map(|k| if k == want { 1000.0 } else { 0.0 }).collect())
        }
    }

    #[test]
    fn flattened_ar_counts_and_determinism() {
        let model = OneHotAr { levels: 3, c: 5, longest: Mutex::new(0) };
        let prompt = TokenGrid::new(2, 3, 5, vec![0, 1, 2, 1, 2, 3]).unwrap();
        let opts = ArOptions { temperature: 1.0, window: None };
        let a = flattened_ar_decode(&model, &cond(8), 8, Some(&prompt), &opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = flattened_ar_decode(&model, &cond(8), 8, Some(&prompt), &opts, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a.forward_passes, 8 * 3 - 2 * 3);
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.grid.prefix(2).unwrap(), prompt);
        for f in 0..8 {
            for q in 0..3 {
                assert_eq!(a.grid.get(f, q) as usize, (f + q) % 5);
            }
        }
        assert_eq!(*model.longest.lock().unwrap(), 24);
    }

    #[test]
    fn sliding_window_bounds_context() {
        let model = OneHotAr { levels: 2, c: 50, longest: Mutex::new(0) };
        let opts = ArOptions { temperature: 0.0, window: Some(SlidingWindow::new(10, 3).unwrap()) };
        let out = flattened_ar_decode(&model, &cond(40), 40, None, &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.forward_passes, 80);
        assert_eq!(*model.longest.lock().unwrap(), 20);
        assert_eq!(SlidingWindow::default_for_rate(50.0), SlidingWindow { chunk: 500, overlap: 150 });
        assert!(SlidingWindow::new(3, 3).is_err());
    }
}
