//! Runtime and iteration-ablation harnesses.
//!
//! Wall times are only ever compared as ratios; every report carries the
//! environment it was measured on.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cond::ConditioningSequence;
use crate::decode::{
    flattened_ar_decode, level_greedy_decode, parallel_decode, ArOptions, DecodeOptions, DecodeSchedule, NextTokenModel,
};
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::net::TokenModel;
use crate::synth::{evaluate_samples, EvalReport, TaskSpec};

/// First-level iteration counts evaluated by default.
pub const DEFAULT_ABLATION_ITERATIONS: [usize; 5] = [1, 4, 8, 16, 32];

/// Tokens in `seconds` of audio at `frame_rate` with `levels` levels.
pub fn token_count(seconds: f64, frame_rate: f64, levels: usize) -> usize {
    (seconds * frame_rate).round() as usize * levels
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "schedule")]
pub enum DecoderKind {
    Parallel(DecodeSchedule),
    LevelGreedy,
    FlattenedAr,
}

impl DecoderKind {
    pub fn name(&self) -> String {
        match self {
            DecoderKind::Parallel(s) => format!("parallel[{}]", s.to_string().replace(',', "-")),
            DecoderKind::LevelGreedy => "level_greedy".into(),
            DecoderKind::FlattenedAr => "flattened_ar".into(),
        }
    }

    /// Network invocations for a `frames × levels` grid without prompt.
    pub fn expected_passes(&self, frames: usize, levels: usize) -> usize {
        match self {
            DecoderKind::Parallel(s) => s.forward_pass_count(),
            DecoderKind::LevelGreedy => levels,
            DecoderKind::FlattenedAr => frames * levels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub package_version: String,
    pub debug_build: bool,
}

impl Environment {
    pub fn capture() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            package_version: env!("CARGO_PKG_VERSION").into(),
            debug_build: cfg!(debug_assertions),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub decoder: String,
    pub frames: usize,
    pub levels: usize,
    /// T·Q.
    pub tokens: usize,
    pub forward_passes: usize,
    pub median_seconds: f64,
    /// Median wall time divided by the audio duration T / frame_rate.
    pub rtf: f64,
    pub seconds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeReport {
    pub frame_rate: f64,
    pub repetitions: usize,
    pub environment: Environment,
    pub rows: Vec<RuntimeRow>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Times each decoder at each length: one untimed warm-up, then the median
/// of `repetitions` timed runs. Conditioning is drawn from `seed`.
pub fn run_runtime_bench<M: TokenModel, A: NextTokenModel>(
    masked: &M,
    ar: Option<&A>,
    decoders: &[DecoderKind],
    lengths: &[usize],
    repetitions: usize,
    frame_rate: f64,
    cond_vocab: u32,
    seed: u64,
) -> Result<RuntimeReport> {
    if repetitions < 3 {
        return Err(Error::InvalidArgument("runtime bench needs at least 3 repetitions".into()));
    }
    let levels = masked.levels();
    if let Some(a) = ar {
        if a.levels() != levels || a.codebook_size() != masked.codebook_size() {
            return Err(Error::Shape("masked and autoregressive models disagree on grid dims".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &frames in lengths {
        let tokens = (0..frames).map(|_| rng.gen_range(0..cond_vocab)).collect();
        let cond = ConditioningSequence::new(tokens, frame_rate.round() as u32, cond_vocab)?;
        for decoder in decoders {
            let run = |rep: u64| -> Result<usize> {
                let mut r = ChaCha8Rng::seed_from_u64(seed ^ rep);
                let out = match decoder {
                    DecoderKind::Parallel(s) => {
                        parallel_decode(masked, &cond, frames, None, s, &DecodeOptions::default(), &mut r)?
                    }
                    DecoderKind::LevelGreedy => level_greedy_decode(masked, &cond, frames, None)?,
                    DecoderKind::FlattenedAr => {
                        let a = ar.ok_or_else(|| {
                            Error::InvalidArgument("flattened_ar decoder needs an autoregressive model".into())
                        })?;
                        let opts = ArOptions { temperature: 1.0, window: None };
                        flattened_ar_decode(a, &cond, frames, None, &opts, &mut r)?
                    }
                };
                Ok(out.forward_passes)
            };
            run(0)?;
            let mut seconds = Vec::with_capacity(repetitions);
            let mut passes = 0;
            for rep in 0..repetitions {
                let start = Instant::now();
                passes = run(rep as u64 + 1)?;
                seconds.push(start.elapsed().as_secs_f64());
            }
            let med = median(&seconds);
            rows.push(RuntimeRow {
                decoder: decoder.name(),
                frames,
                levels,
                tokens: frames * levels,
                forward_passes: passes,
                median_seconds: med,
                rtf: med / (frames as f64 / frame_rate),
                seconds,
            });
        }
    }
    Ok(RuntimeReport { frame_rate, repetitions, environment: Environment::capture(), rows })
}

impl RuntimeReport {
    pub fn row(&self, decoder: &str, frames: usize) -> Option<&RuntimeRow> {
        self.rows.iter().find(|r| r.decoder == decoder && r.frames == frames)
    }

    /// Median time of `slow` over median time of `fast` at `frames`.
    pub fn speedup(&self, fast: &str, slow: &str, frames: usize) -> Option<f64> {
        Some(self.row(slow, frames)?.median_seconds / self.row(fast, frames)?.median_seconds)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<24} {:>6} {:>7} {:>8} {:>12} {:>10}\n",
            "decoder", "T", "tokens", "passes", "median_s", "rtf"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<24} {:>6} {:>7} {:>8} {:>12.6} {:>10.4}\n",
                r.decoder, r.frames, r.tokens, r.forward_passes, r.median_seconds, r.rtf
            ));
        }
        s.push_str(&format!(
            "# {} {} cpus={} reps={}\n",
            self.environment.os, self.environment.arch, self.environment.cpus, self.repetitions
        ));
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut points = Vec::new();
        for r in &self.rows {
            let x = r.frames as f64;
            points.push((x, format!("{}:median_seconds", r.decoder), r.median_seconds));
            points.push((x, format!("{}:forward_passes", r.decoder), r.forward_passes as f64));
            points.push((x, format!("{}:rtf", r.decoder), r.rtf));
        }
        write_csv(&points)
    }
}

/// One plot point per line under an `x,series,value` header.
pub fn write_csv(points: &[(f64, String, f64)]) -> String {
    let mut s = String::from("x,series,value\n");
    for (x, series, value) in points {
        s.push_str(&format!("{x},{series},{value}\n"));
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<(f64, String, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some("x,series,value") {
        return Err(Error::Format("csv: missing x,series,value header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let bad = || Error::Format(format!("csv: bad line {l:?}"));
            let (x, rest) = l.split_once(',').ok_or_else(bad)?;
            let (series, value) = rest.rsplit_once(',').ok_or_else(bad)?;
            Ok((x.parse().map_err(|_| bad())?, series.to_string(), value.parse().map_err(|_| bad())?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub first_level_iterations: usize,
    pub forward_passes: usize,
    pub metrics: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub samples: usize,
    pub rows: Vec<AblationRow>,
}

/// Decodes every condition once per first-level iteration count (other
/// levels get one iteration) and scores the samples against the oracle.
/// Sample k always uses stream k of `seed`, for every iteration count.
pub fn run_iteration_ablation<M: TokenModel>(
    model: &M,
    spec: &TaskSpec,
    conds: &[ConditioningSequence],
    first_level_iters: &[usize],
    options: &DecodeOptions,
    seed: u64,
    workers: usize,
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(first_level_iters.len());
    for &n in first_level_iters {
        let schedule = DecodeSchedule::coarse_first(n, model.levels())?;
        let decode_one = |k: usize| -> Result<TokenGrid> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            Ok(parallel_decode(model, &conds[k], spec.frames, None, &schedule, options, &mut rng)?.grid)
        };
        let samples = fan_out(conds.len(), workers, decode_one)?;
        let metrics = evaluate_samples(&samples, conds, spec)?;
        rows.push(AblationRow { first_level_iterations: n, forward_passes: schedule.forward_pass_count(), metrics });
    }
    Ok(AblationReport { samples: conds.len(), rows })
}

/// `f(0..n)` across up to `workers` threads, results in index order.
fn fan_out<T: Send, F: Fn(usize) -> Result<T> + Sync>(n: usize, workers: usize, f: F) -> Result<Vec<T>> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = (0..workers)
            .map(|w| scope.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Invariant("worker panicked".into()))??);
        }
        Ok(out)
    })
}

impl AblationReport {
    pub fn row(&self, iterations: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.first_level_iterations == iterations)
    }

    pub fn to_table(&self) -> String {
        let levels = self.rows.first().map_or(0, |r| r.metrics.levels.len());
        let mut s = format!("{:>6} {:>7}", "iters", "passes");
        for q in 1..=levels {
            s.push_str(&format!(" {:>9} {:>9}", format!("kl_l{q}"), format!("exact_l{q}")));
        }
        s.push_str(&format!(" {:>9}\n", "mean_kl"));
        for r in &self.rows {
            s.push_str(&format!("{:>6} {:>7}", r.first_level_iterations, r.forward_passes));
            for l in &r.metrics.levels {
                s.push_str(&format!(" {:>9.5} {:>9.5}", l.kl, l.exact_match));
            }
            s.push_str(&format!(" {:>9.5}\n", r.metrics.mean_kl()));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut points = Vec::new();
        for r in &self.rows {
            let x = r.first_level_iterations as f64;
            points.push((x, "forward_passes".to_string(), r.forward_passes as f64));
            for l in &r.metrics.levels {
                points.push((x, format!("kl_level{}", l.level), l.kl));
                points.push((x, format!("exact_level{}", l.level), l.exact_match));
            }
            points.push((x, "mean_kl".to_string(), r.metrics.mean_kl()));
        }
        write_csv(&points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::MaskedGrid;
    use crate::net::Logits;
    use crate::synth::{generate_conditioning, oracle_conditional, TaskParams};
    use ndarray::Array3;

    /// Scores each position with the exact oracle given the visible parents.
    struct OracleModel<'a> {
        spec: &'a TaskSpec,
    }

    impl TokenModel for OracleModel<'_> {
        type Scalar = f64;

        fn levels(&self) -> usize {
            self.spec.levels
        }

        fn codebook_size(&self) -> usize {
            self.spec.codebook_size
        }

        fn predict(&self, grid: &MaskedGrid, cond: &ConditioningSequence) -> Result<Logits<f64>> {
            let (t, q, c) = (grid.frames(), self.spec.levels, self.spec.codebook_size);
            let mut out = Array3::from_elem((t, q, c), -(c as f64).ln());
            for f in 0..t {
                let mut parents = Vec::new();
                for level in 0..q {
                    let p = oracle_conditional(self.spec, cond, f, level + 1, &parents)?;
                    for k in 0..c {
                        out[[f, level, k]] = p[k].ln();
                    }
                    if grid.is_masked(f, level) {
                        break;
                    }
                    parents.push(grid.get(f, level));
                }
            }
            Ok(Logits::new(out))
        }
    }

    struct NoAr;

    impl NextTokenModel for NoAr {
        type Scalar = f32;

        fn levels(&self) -> usize {
            3
        }

        fn codebook_size(&self) -> usize {
            16
        }

        fn next_logits(&self, _: &ConditioningSequence, _: &[u32]) -> Result<Vec<f32>> {
            Ok(vec![0.0; 16])
        }
    }

    fn spec(noise: f64) -> TaskSpec {
        TaskSpec::generate(&TaskParams { noise, ..Default::default() }).unwrap()
    }

    #[test]
    fn paper_token_count() {
        assert_eq!(token_count(30.0, 50.0, 12), 18000);
        assert_eq!(DecoderKind::FlattenedAr.expected_passes(1500, 12), 18000);
    }

    #[test]
    fn runtime_report_counts_and_exports() {
        let s = spec(0.05);
        let model = OracleModel { spec: &s };
        let decoders = vec![
            DecoderKind::Parallel(DecodeSchedule::new(vec![16, 1, 1]).unwrap()),
            DecoderKind::LevelGreedy,
            DecoderKind::FlattenedAr,
        ];
        let report = run_runtime_bench(&model, Some(&NoAr), &decoders, &[8, 16], 3, 50.0, 8, 1).unwrap();
        assert_eq!(report.rows.len(), 6);
        for r in &report.rows {
            let kind = decoders.iter().find(|d| d.name() == r.decoder).unwrap();
            assert_eq!(r.forward_passes, kind.expected_passes(r.frames, 3));
            assert_eq!(r.tokens, r.frames * 3);
            assert_eq!(r.seconds.len(), 3);
        }
        let csv = report.to_csv();
        let parsed = parse_csv(&csv).unwrap();
        assert_eq!(parsed.len(), 18);
        assert_eq!(write_csv(&parsed), csv);
        let back: RuntimeReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
        assert!(report.to_table().lines().count() >= 7);
        assert!(run_runtime_bench(&model, Some(&NoAr), &decoders, &[8], 2, 50.0, 8, 1).is_err());
    }

    #[test]
    fn ablation_is_deterministic_and_greedy_row_matches() {
        let s = spec(0.05);
        let model = OracleModel { spec: &s };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conds: Vec<_> = (0..20)
            .map(|_| generate_conditioning(&s, &mut rng).unwrap().align(s.frame_rate).unwrap().window(0, s.frames).unwrap())
            .collect();
        let opts = DecodeOptions::default();
        let a = run_iteration_ablation(&model, &s, &conds, &[1, 4, 16], &opts, 7, 1).unwrap();
        let b = run_iteration_ablation(&model, &s, &conds, &[1, 4, 16], &opts, 7, 3).unwrap();
        assert_eq!(a, b);
        let greedy: Vec<_> = conds.iter().map(|c| level_greedy_decode(&model, c, s.frames, None).unwrap().grid).collect();
        assert_eq!(a.row(1).unwrap().metrics, evaluate_samples(&greedy, &conds, &s).unwrap());
        assert_eq!(a.row(16).unwrap().forward_passes, 18);
        let parsed = parse_csv(&a.to_csv()).unwrap();
        assert_eq!(write_csv(&parsed), a.to_csv());
    }

    #[test]
    fn oracle_model_greedy_reproduces_skeleton() {
        let s = spec(0.05);
        let model = OracleModel { spec: &s };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let c = generate_conditioning(&s, &mut rng).unwrap().align(s.frame_rate).unwrap().window(0, s.frames).unwrap();
            let out = level_greedy_decode(&model, &c, s.frames, None).unwrap();
            assert_eq!(out.grid, s.skeleton(&c).unwrap());
        }
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(parse_csv("a,b\n").is_err());
        assert!(parse_csv("x,series,value\n1,foo\n").is_err());
    }
}
