//! A synthetic hierarchical token task with closed-form conditionals.
//!
//! Conditioning follows a Markov chain at the conditioning rate and is
//! duplicated up to the frame rate. The level-1 token at a frame is a fixed
//! function of the conditioning token there; every finer token is a fixed
//! function of its parent token and the frame parity. Each token is
//! independently replaced by a uniform draw with probability ε. Finer tokens
//! at different frames are therefore independent given their parents.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cond::ConditioningSequence;
use crate::error::{Error, Result};
use crate::grid::TokenGrid;

/// The knobs a task is generated from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskParams {
    pub frames: usize,
    pub levels: usize,
    pub codebook_size: usize,
    pub cond_vocab: usize,
    pub noise: f64,
    pub cond_rate: u32,
    pub frame_rate: u32,
    pub seed: u64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            frames: 32,
            levels: 3,
            codebook_size: 16,
            cond_vocab: 8,
            noise: 0.05,
            cond_rate: 25,
            frame_rate: 50,
            seed: 0,
        }
    }
}

/// A fully specified task: dimensions plus the generating tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub frames: usize,
    pub levels: usize,
    pub codebook_size: usize,
    pub cond_vocab: usize,
    pub cond_rate: u32,
    pub frame_rate: u32,
    /// Row-stochastic conditioning transition matrix.
    pub cond_transition: Vec<Vec<f64>>,
    /// Conditioning token → level-1 token.
    pub coarse_map: Vec<u32>,
    /// `refine_maps[l][parent][parity]` is the level `l + 2` token.
    pub refine_maps: Vec<Vec<[u32; 2]>>,
    /// Probability that a token is redrawn uniformly.
    pub noise: f64,
    pub seed: u64,
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub cond: ConditioningSequence,
    pub grid: TokenGrid,
}

impl TaskSpec {
    /// Draws the tables from `params.seed`.
    ///
    /// Transition rows put zero mass on staying in the same state (unless the
    /// vocabulary has a single symbol), so every pair of duplicated frames is
    /// bordered by a change of conditioning token.
    pub fn generate(params: &TaskParams) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let n = params.cond_vocab;
        let cond_transition = (0..n)
            .map(|i| {
                if n == 1 {
                    return vec![1.0];
                }
                let w: Vec<f64> = (0..n).map(|j| if i == j { 0.0 } else { rng.gen_range(0.2..1.0) }).collect();
                let total: f64 = w.iter().sum();
                w.into_iter().map(|x| x / total).collect()
            })
            .collect();
        let c = params.codebook_size as u32;
        let coarse_map = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let refine_maps = (1..params.levels)
            .map(|_| (0..c).map(|_| [rng.gen_range(0..c), rng.gen_range(0..c)]).collect())
            .collect();
        let spec = Self {
            frames: params.frames,
            levels: params.levels,
            codebook_size: params.codebook_size,
            cond_vocab: params.cond_vocab,
            cond_rate: params.cond_rate,
            frame_rate: params.frame_rate,
            cond_transition,
            coarse_map,
            refine_maps,
            noise: params.noise,
            seed: params.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.frames == 0 || self.levels == 0 || self.codebook_size < 2 || self.cond_vocab == 0 {
            return bad("task needs T >= 1, Q >= 1, C >= 2, C_cond >= 1".into());
        }
        if self.cond_rate == 0 || self.frame_rate % self.cond_rate != 0 {
            return bad(format!(
                "frame rate {} is not a multiple of conditioning rate {}",
                self.frame_rate, self.cond_rate
            ));
        }
        if self.cond_transition.len() != self.cond_vocab {
            return bad("transition matrix has wrong row count".into());
        }
        for (i, row) in self.cond_transition.iter().enumerate() {
            if row.len() != self.cond_vocab || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return bad(format!("transition row {i} is malformed"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return bad(format!("transition row {i} sums to {s}"));
            }
        }
        let c = self.codebook_size as u32;
        if self.coarse_map.len() != self.cond_vocab || self.coarse_map.iter().any(|&t| t >= c) {
            return bad("coarse map is not total over the conditioning vocabulary".into());
        }
        if self.refine_maps.len() + 1 != self.levels
            || self
                .refine_maps
                .iter()
                .any(|m| m.len() != self.codebook_size || m.iter().flatten().any(|&t| t >= c))
        {
            return bad("refine maps are not total over (parent, parity)".into());
        }
        if !(0.0..1.0 - 1.0 / self.codebook_size as f64).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1 - 1/C)", self.noise));
        }
        Ok(())
    }

    /// Frame-rate over conditioning-rate.
    pub fn upsample_ratio(&self) -> usize {
        (self.frame_rate / self.cond_rate) as usize
    }

    /// Deterministic child of `parent` at `level` (0-based, ≥ 1).
    pub fn refine(&self, level: usize, parent: u32, frame: usize) -> u32 {
        self.refine_maps[level - 1][parent as usize][frame % 2]
    }

    /// The knobs this spec was generated from.
    pub fn params(&self) -> TaskParams {
        TaskParams {
            frames: self.frames,
            levels: self.levels,
            codebook_size: self.codebook_size,
            cond_vocab: self.cond_vocab,
            noise: self.noise,
            cond_rate: self.cond_rate,
            frame_rate: self.frame_rate,
            seed: self.seed,
        }
    }

    /// The ε = 0 grid implied by `cond`.
    pub fn skeleton(&self, cond: &ConditioningSequence) -> Result<TokenGrid> {
        let frames = cond.len();
        let mut tokens = Vec::with_capacity(frames * self.levels);
        for (i, &ct) in cond.tokens().iter().enumerate() {
            let mut tok = self.coarse_map[ct as usize];
            tokens.push(tok);
            for level in 1..self.levels {
                tok = self.refine(level, tok, i);
                tokens.push(tok);
            }
        }
        TokenGrid::new(frames, self.levels, self.codebook_size, tokens)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Byte offsets of one example inside the dataset data file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordOffsets {
    pub cond: u64,
    pub grid: u64,
    pub end: u64,
}

/// JSON index written next to a dataset's data file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: TaskSpec,
    pub count: usize,
    /// Data file name, relative to the manifest.
    pub data_file: String,
    pub records: Vec<RecordOffsets>,
    /// Free-form provenance, e.g. the effective configuration.
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";

/// Writes `examples` as concatenated conditioning and grid records to
/// `dir/data.bin`, plus `dir/manifest.json`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    spec: &TaskSpec,
    examples: &[LabeledExample],
    extra: serde_json::Value,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut data = Vec::new();
    let mut records = Vec::with_capacity(examples.len());
    for e in examples {
        let cond = data.len() as u64;
        data.extend(e.cond.to_bytes()?);
        let grid = data.len() as u64;
        data.extend(e.grid.to_bytes()?);
        records.push(RecordOffsets { cond, grid, end: data.len() as u64 });
    }
    let manifest = DatasetManifest {
        task: spec.clone(),
        count: examples.len(),
        data_file: DATA_FILE.into(),
        records,
        extra,
    };
    std::fs::write(dir.join(DATA_FILE), data)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Reads a dataset written by [`write_dataset`], checking every offset.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<LabeledExample>)> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
    manifest.task.validate()?;
    let data = std::fs::read(dir.join(&manifest.data_file))?;
    if manifest.records.len() != manifest.count {
        return Err(Error::Format(format!(
            "manifest lists {} records but count {}",
            manifest.records.len(),
            manifest.count
        )));
    }
    let mut examples = Vec::with_capacity(manifest.count);
    let mut expected_start = 0u64;
    for (k, r) in manifest.records.iter().enumerate() {
        let bad = || Error::Format(format!("record {k}: offsets disagree with data"));
        if r.cond != expected_start || r.end as usize > data.len() || r.cond > r.grid || r.grid > r.end {
            return Err(bad());
        }
        let (cond, used) = ConditioningSequence::read_record(&data[r.cond as usize..r.grid as usize])?;
        let (grid, used2) = TokenGrid::read_record(&data[r.grid as usize..r.end as usize])?;
        if used as u64 != r.grid - r.cond || used2 as u64 != r.end - r.grid {
            return Err(bad());
        }
        examples.push(LabeledExample { cond, grid });
        expected_start = r.end;
    }
    if expected_start as usize != data.len() {
        return Err(Error::Format("data file has trailing bytes".into()));
    }
    Ok((manifest, examples))
}

/// Samples conditioning at the conditioning rate, long enough to cover
/// `spec.frames` frames once aligned. The initial state is uniform.
pub fn generate_conditioning<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Result<ConditioningSequence> {
    let len = spec.frames.div_ceil(spec.upsample_ratio());
    let initial = rng.gen_range(0..spec.cond_vocab as u32);
    let tokens = crate::cond::markov_chain(&spec.cond_transition, initial, len, rng)?;
    ConditioningSequence::new(tokens, spec.cond_rate, spec.cond_vocab as u32)
}

/// One example drawn from `rng`: frame-aligned conditioning and its grid.
pub fn generate_example<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Result<LabeledExample> {
    let raw = generate_conditioning(spec, rng)?;
    let cond = raw.align(spec.frame_rate)?.window(0, spec.frames)?;
    let c = spec.codebook_size as u32;
    let noisy = |tok: u32, rng: &mut R| {
        if spec.noise > 0.0 && rng.gen::<f64>() < spec.noise {
            rng.gen_range(0..c)
        } else {
            tok
        }
    };
    let mut tokens = Vec::with_capacity(spec.frames * spec.levels);
    for (i, &ct) in cond.tokens().iter().enumerate() {
        let mut tok = noisy(spec.coarse_map[ct as usize], rng);
        tokens.push(tok);
        for level in 1..spec.levels {
            tok = noisy(spec.refine(level, tok, i), rng);
            tokens.push(tok);
        }
    }
    let grid = TokenGrid::new(spec.frames, spec.levels, spec.codebook_size, tokens)?;
    Ok(LabeledExample { cond, grid })
}

/// `n` examples; example k is generated from its own stream seeded by the
/// k-th draw of `rng`, so the result does not depend on `workers`.
pub fn generate_dataset<R: Rng + ?Sized>(spec: &TaskSpec, n: usize, rng: &mut R) -> Result<Vec<LabeledExample>> {
    generate_dataset_parallel(spec, n, rng, 1)
}

pub fn generate_dataset_parallel<R: Rng + ?Sized>(
    spec: &TaskSpec,
    n: usize,
    rng: &mut R,
    workers: usize,
) -> Result<Vec<LabeledExample>> {
    spec.validate()?;
    let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
    let one = |s: u64| generate_example(spec, &mut ChaCha8Rng::seed_from_u64(s));
    let workers = workers.max(1).min(n.max(1));
    if workers == 1 {
        return seeds.into_iter().map(one).collect();
    }
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&s| one(s)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Invariant("generator thread panicked".into()))??);
        }
        Ok(out)
    })
}

/// Exact distribution of the token at (`frame`, `level`) given its context.
///
/// `level` is 1-based. Level 1 needs `cond` to cover `frame`; finer levels
/// need the tokens of all coarser levels at that frame in `parent_tokens`.
pub fn oracle_conditional(
    spec: &TaskSpec,
    cond: &ConditioningSequence,
    frame: usize,
    level: usize,
    parent_tokens: &[u32],
) -> Result<Vec<f64>> {
    if level == 0 || level > spec.levels {
        return Err(Error::Context(format!("level {level} outside 1..={}", spec.levels)));
    }
    let mapped = if level == 1 {
        let ct = *cond
            .tokens()
            .get(frame)
            .ok_or_else(|| Error::Context(format!("no conditioning token at frame {frame}")))?;
        spec.coarse_map[ct as usize]
    } else {
        let parent = *parent_tokens
            .get(level - 2)
            .ok_or_else(|| Error::Context(format!("level {level} needs {} parent tokens", level - 1)))?;
        if parent as usize >= spec.codebook_size {
            return Err(Error::Context(format!("parent token {parent} out of range")));
        }
        spec.refine(level - 1, parent, frame)
    };
    Ok(mapped_distribution(spec, mapped))
}

fn mapped_distribution(spec: &TaskSpec, mapped: u32) -> Vec<f64> {
    let c = spec.codebook_size;
    let floor = spec.noise / c as f64;
    let mut p = vec![floor; c];
    p[mapped as usize] = 1.0 - spec.noise + floor;
    p
}

/// Per-level sample quality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    /// 1-based level.
    pub level: usize,
    /// Fraction of tokens equal to the ε = 0 skeleton.
    pub exact_match: f64,
    /// Context-weighted KL(empirical ‖ oracle) in nats.
    pub kl: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub levels: Vec<LevelMetrics>,
}

impl EvalReport {
    pub fn mean_kl(&self) -> f64 {
        self.levels.iter().map(|l| l.kl).sum::<f64>() / self.levels.len() as f64
    }

    pub fn mean_exact_match(&self) -> f64 {
        self.levels.iter().map(|l| l.exact_match).sum::<f64>() / self.levels.len() as f64
    }
}

/// Scores samples against the skeleton and the oracle conditionals.
///
/// For each level the samples are bucketed by context (the conditioning
/// token for level 1, the sampled parent and frame parity otherwise). The
/// reported KL is Σ_ctx n_ctx · KL(empirical_ctx ‖ oracle_ctx) / Σ n_ctx.
pub fn evaluate_samples(samples: &[TokenGrid], conds: &[ConditioningSequence], spec: &TaskSpec) -> Result<EvalReport> {
    if samples.len() != conds.len() {
        return Err(Error::Shape(format!("{} samples vs {} conditions", samples.len(), conds.len())));
    }
    let c = spec.codebook_size;
    let mut levels = Vec::with_capacity(spec.levels);
    let skeletons = conds
        .iter()
        .zip(samples)
        .map(|(cond, s)| {
            if s.levels() != spec.levels || s.codebook_size() != c || cond.len() < s.frames() {
                return Err(Error::Shape("sample does not match the task".into()));
            }
            spec.skeleton(&cond.window(0, s.frames())?)
        })
        .collect::<Result<Vec<_>>>()?;
    for level in 0..spec.levels {
        let contexts = if level == 0 { spec.cond_vocab } else { 2 * c };
        let mut counts = vec![vec![0u64; c]; contexts];
        let mut ctx_mapped = vec![0u32; contexts];
        let (mut hits, mut total) = (0usize, 0usize);
        for ((sample, cond), skel) in samples.iter().zip(conds).zip(&skeletons) {
            for i in 0..sample.frames() {
                let tok = sample.get(i, level);
                let (ctx, mapped) = if level == 0 {
                    let ct = cond.tokens()[i];
                    (ct as usize, spec.coarse_map[ct as usize])
                } else {
                    let parent = sample.get(i, level - 1);
                    (2 * parent as usize + i % 2, spec.refine(level, parent, i))
                };
                counts[ctx][tok as usize] += 1;
                ctx_mapped[ctx] = mapped;
                hits += usize::from(tok == skel.get(i, level));
                total += 1;
            }
        }
        let mut kl_sum = 0.0;
        for (ctx, row) in counts.iter().enumerate() {
            let n: u64 = row.iter().sum();
            if n == 0 {
                continue;
            }
            let oracle = mapped_distribution(spec, ctx_mapped[ctx]);
            let kl: f64 = row
                .iter()
                .zip(&oracle)
                .filter(|(&k, _)| k > 0)
                .map(|(&k, &q)| {
                    let p = k as f64 / n as f64;
                    if q == 0.0 { f64::INFINITY } else { p * (p / q).ln() }
                })
                .sum();
            kl_sum += n as f64 * kl;
        }
        levels.push(LevelMetrics {
            level: level + 1,
            exact_match: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
            kl: if total == 0 { 0.0 } else { kl_sum / total as f64 },
            tokens: total,
        });
    }
    Ok(EvalReport { levels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> TaskSpec {
        TaskSpec::generate(&TaskParams { noise, seed: 7, ..TaskParams::default() }).unwrap()
    }

    #[test]
    fn noiseless_grid_is_the_skeleton() {
        let s = spec(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for ex in generate_dataset(&s, 20, &mut rng).unwrap() {
            assert_eq!(ex.grid, s.skeleton(&ex.cond).unwrap());
        }
    }

    #[test]
    fn constant_conditioning_gives_constant_level_one() {
        let s = spec(0.0);
        let cond = ConditioningSequence::new(vec![3; 32], 50, 8).unwrap();
        let grid = s.skeleton(&cond).unwrap();
        assert!((0..32).all(|i| grid.get(i, 0) == grid.get(0, 0)));
    }

    #[test]
    fn conditioning_is_duplicated_and_changes_every_pair() {
        let s = spec(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = generate_example(&s, &mut rng).unwrap();
        let t = ex.cond.tokens();
        assert_eq!(t.len(), 32);
        for k in 0..16 {
            assert_eq!(t[2 * k], t[2 * k + 1]);
            if k > 0 {
                assert_ne!(t[2 * k], t[2 * k - 1]);
            }
        }
    }

    #[test]
    fn flip_rate_matches_formula() {
        let s = spec(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut flips = 0usize;
        let mut total = 0usize;
        while total < 1_000_000 {
            let ex = generate_example(&s, &mut rng).unwrap();
            for i in 0..s.frames {
                // Compare each token with its deterministic image given the
                // actual (possibly flipped) parent.
                let mut expected = s.coarse_map[ex.cond.tokens()[i] as usize];
                for level in 0..s.levels {
                    if level > 0 {
                        expected = s.refine(level, ex.grid.get(i, level - 1), i);
                    }
                    flips += usize::from(ex.grid.get(i, level) != expected);
                    total += 1;
                }
            }
        }
        let rate = flips as f64 / total as f64;
        let want = 0.1 * (1.0 - 1.0 / 16.0);
        assert!((rate - want).abs() <= 0.005, "{rate} vs {want}");
    }

    #[test]
    fn oracle_values() {
        let s = spec(0.1);
        let cond = ConditioningSequence::new(vec![2; 4], 50, 8).unwrap();
        let p = oracle_conditional(&s, &cond, 1, 1, &[]).unwrap();
        let mapped = s.coarse_map[2] as usize;
        assert!((p[mapped] - (0.9 + 0.1 / 16.0)).abs() < 1e-15);
        assert!(p.iter().enumerate().all(|(j, &v)| j == mapped || (v - 0.1 / 16.0).abs() < 1e-15));
        let s0 = spec(0.0);
        let p0 = oracle_conditional(&s0, &cond, 3, 2, &[5]).unwrap();
        assert_eq!(p0[s0.refine(1, 5, 3) as usize], 1.0);
        assert_eq!(p0.iter().sum::<f64>(), 1.0);
        assert!(matches!(oracle_conditional(&s, &cond, 3, 3, &[5]), Err(Error::Context(_))));
        assert!(matches!(oracle_conditional(&s, &cond, 9, 1, &[]), Err(Error::Context(_))));
    }

    #[test]
    fn oracle_sums_to_one() {
        let s = spec(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cond = ConditioningSequence::new((0..32).map(|i| i % 8).collect(), 50, 8).unwrap();
        for _ in 0..1000 {
            let level = rng.gen_range(1..=3);
            let parents = [rng.gen_range(0..16), rng.gen_range(0..16)];
            let p = oracle_conditional(&s, &cond, rng.gen_range(0..32), level, &parents).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_matches_oracle_within_three_sigma() {
        let s = spec(0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = generate_dataset(&s, 4000, &mut rng).unwrap();
        // Context: level 2 given parent 0..C at even frames.
        let mut counts = vec![vec![0u64; 16]; 16];
        for ex in &data {
            for i in (0..s.frames).step_by(2) {
                counts[ex.grid.get(i, 0) as usize][ex.grid.get(i, 1) as usize] += 1;
            }
        }
        for (parent, row) in counts.iter().enumerate() {
            let n: u64 = row.iter().sum();
            if n < 100 {
                continue;
            }
            let p = oracle_conditional(&s, &data[0].cond, 0, 2, &[parent as u32]).unwrap();
            for (tok, &k) in row.iter().enumerate() {
                let sigma = (p[tok] * (1.0 - p[tok]) / n as f64).sqrt();
                let f = k as f64 / n as f64;
                assert!((f - p[tok]).abs() <= 3.0 * sigma + 1e-12, "parent {parent} tok {tok}: {f} vs {}", p[tok]);
            }
        }
    }

    #[test]
    fn oracle_samples_have_small_kl() {
        let s = spec(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = generate_dataset(&s, 100_000 / 32 + 1, &mut rng).unwrap();
        let grids: Vec<_> = data.iter().map(|e| e.grid.clone()).collect();
        let conds: Vec<_> = data.iter().map(|e| e.cond.clone()).collect();
        let report = evaluate_samples(&grids, &conds, &s).unwrap();
        for l in &report.levels {
            assert!(l.tokens >= 100_000);
            assert!(l.kl <= 0.02, "level {} kl {}", l.level, l.kl);
        }
        let noiseless = spec(0.0);
        let data0 = generate_dataset(&noiseless, 50, &mut rng).unwrap();
        let g0: Vec<_> = data0.iter().map(|e| e.grid.clone()).collect();
        let c0: Vec<_> = data0.iter().map(|e| e.cond.clone()).collect();
        let r0 = evaluate_samples(&g0, &c0, &noiseless).unwrap();
        assert!(r0.levels.iter().all(|l| l.exact_match == 1.0 && l.kl == 0.0));
    }

    #[test]
    fn constant_samples_have_positive_kl() {
        let s = spec(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = generate_dataset(&s, 50, &mut rng).unwrap();
        let zeros: Vec<_> = data.iter().map(|_| TokenGrid::filled(32, 3, 16, 0).unwrap()).collect();
        let conds: Vec<_> = data.iter().map(|e| e.cond.clone()).collect();
        let r = evaluate_samples(&zeros, &conds, &s).unwrap();
        assert!(r.levels.iter().all(|l| l.kl > 0.0));
    }

    #[test]
    fn dataset_is_independent_of_worker_count() {
        let s = spec(0.05);
        let a = generate_dataset_parallel(&s, 37, &mut ChaCha8Rng::seed_from_u64(9), 1).unwrap();
        let b = generate_dataset_parallel(&s, 37, &mut ChaCha8Rng::seed_from_u64(9), 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validation_rejects_bad_tables() {
        let mut s = spec(0.05);
        s.cond_transition[0][1] += 0.01;
        assert!(s.validate().is_err());
        let mut s = spec(0.05);
        s.noise = 15.0 / 16.0;
        assert!(s.validate().is_err());
        let mut s = spec(0.05);
        s.refine_maps[0][3][1] = 16;
        assert!(s.validate().is_err());
    }

    #[test]
    fn dataset_files_round_trip() {
        let spec = TaskSpec::generate(&TaskParams { frames: 6, ..Default::default() }).unwrap();
        let data = generate_dataset(&spec, 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &spec, &data, serde_json::json!({"k": 1})).unwrap();
        let (m2, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back, data);
        let bytes = std::fs::read(dir.path().join(DATA_FILE)).unwrap();
        assert_eq!(&bytes[..4], b"STRS");
        assert_eq!(&bytes[m.records[0].grid as usize..][..4], b"STRM");
        std::fs::write(dir.path().join(DATA_FILE), &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }
}
