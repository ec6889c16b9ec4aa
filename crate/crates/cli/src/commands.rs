use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use stormdec::bench::{run_iteration_ablation, run_runtime_bench, DecoderKind, DEFAULT_ABLATION_ITERATIONS};
use stormdec::decode::{
    flattened_ar_decode, level_greedy_decode, parallel_decode, trace_to_text, ArOptions, ConfidenceMode, SlidingWindow,
};
use stormdec::net::{Checkpoint, ModelKind, TrainableModel, Trainer};
use stormdec::rvq::{synthetic_frames, train_codebooks};
use stormdec::synth::{evaluate_samples, generate_dataset_parallel, read_dataset, write_dataset, LabeledExample};
use stormdec::{
    ArPredictor, ConditioningSequence, DecodeSchedule, FrameSequence, MaskedPredictor, ModelConfig, RvqCodec, TaskSpec,
    TokenGrid,
};

use crate::config::RunConfig;
use crate::{
    AblationArgs, BenchCommand, Cli, CliError, CodecCommand, Command, DecodeArgs, DecoderChoice, EncodeArgs,
    FitArgs, FramesArgs, GenArgs, ModelFlags, RuntimeArgs, SampleArgs, TaskCommand, TrainArgs,
};

type Res<T = ()> = Result<T, CliError>;

pub fn run(cli: Cli) -> Res {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.command {
        Command::Codec(CodecCommand::Frames(a)) => codec_frames(a, seed),
        Command::Codec(CodecCommand::Fit(a)) => codec_fit(a, seed),
        Command::Codec(CodecCommand::Encode(a)) => codec_encode(a),
        Command::Codec(CodecCommand::Decode(a)) => codec_decode(a),
        Command::Task(TaskCommand::Gen(a)) => task_gen(a, &mut config, seed),
        Command::Train(a) => train(a, &mut config, seed),
        Command::Sample(a) => sample(a, &mut config, seed),
        Command::Bench(BenchCommand::Runtime(a)) => bench_runtime(a, &mut config, seed),
        Command::Bench(BenchCommand::Ablation(a)) => bench_ablation(a, &mut config, seed),
    }
}

fn codec_frames(a: FramesArgs, seed: u64) -> Res {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: FrameSequence<f32> = synthetic_frames(a.frames, a.dim, a.noise, &mut rng)?;
    frames.save(&a.out)?;
    println!("wrote {} frames of dim {} to {}", frames.len(), frames.dim(), a.out.display());
    Ok(())
}

fn codec_fit(a: FitArgs, seed: u64) -> Res {
    let frames: FrameSequence<f32> = match &a.input {
        Some(p) => FrameSequence::load(p)?,
        None => synthetic_frames(a.frames, a.dim, a.noise, &mut ChaCha8Rng::seed_from_u64(seed))?,
    };
    let codec = train_codebooks(&[frames.clone()], a.levels, a.codebook, a.frame_rate, seed)?;
    codec.save(&a.out)?;
    let recon = codec.decode(&codec.encode(&frames)?, codec.levels())?;
    println!("levels {} codebook {} bitrate {} bps", codec.levels(), codec.codebook_size(), codec.bitrate());
    println!("training rms error: {}", frames.rms_error(&recon)?);
    Ok(())
}

fn codec_encode(a: EncodeArgs) -> Res {
    let codec = RvqCodec::<f32>::load(&a.codec)?;
    let grid = codec.encode(&FrameSequence::load(&a.input)?)?;
    grid.save(&a.out)?;
    println!("encoded {} frames x {} levels", grid.frames(), grid.levels());
    Ok(())
}

fn codec_decode(a: DecodeArgs) -> Res {
    let codec = RvqCodec::<f32>::load(&a.codec)?;
    let grid = TokenGrid::load(&a.input)?;
    let frames = codec.decode(&grid, a.levels_used.unwrap_or(codec.levels()))?;
    frames.save(&a.out)?;
    println!("decoded {} frames", frames.len());
    if let Some(r) = &a.reference {
        println!("rms error: {}", frames.rms_error(&FrameSequence::load(r)?)?);
    }
    Ok(())
}

fn task_gen(a: GenArgs, config: &mut RunConfig, seed: u64) -> Res {
    let t = &mut config.task;
    set(&mut t.frames, a.frames);
    set(&mut t.levels, a.levels);
    set(&mut t.codebook_size, a.codebook);
    set(&mut t.cond_vocab, a.cond_vocab);
    set(&mut t.noise, a.noise);
    set(&mut t.seed, a.task_seed);
    let spec = TaskSpec::generate(t)?;
    let examples = generate_dataset_parallel(&spec, a.count, &mut ChaCha8Rng::seed_from_u64(seed), a.workers)?;
    let mut extra = json!({ "run": config.echo(seed) });
    if a.eval {
        let grids: Vec<TokenGrid> = examples.iter().map(|e| e.grid.clone()).collect();
        let conds: Vec<ConditioningSequence> = examples.iter().map(|e| e.cond.clone()).collect();
        let report = evaluate_samples(&grids, &conds, &spec)?;
        for l in &report.levels {
            println!("level {}: exact-match {:.4} kl {:.4}", l.level, l.exact_match, l.kl);
        }
        extra["eval"] = serde_json::to_value(&report)?;
    }
    write_dataset(&a.out, &spec, &examples, extra)?;
    println!("wrote {} examples to {}", examples.len(), a.out.display());
    Ok(())
}

/// Prefixes a library error with the path it concerns.
fn at(path: &Path, e: stormdec::Error) -> CliError {
    match CliError::from(e) {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn apply_model_flags(cfg: &mut ModelConfig, f: &ModelFlags) {
    set(&mut cfg.num_layers, f.layers);
    set(&mut cfg.model_dim, f.model_dim);
    set(&mut cfg.num_heads, f.heads);
    set(&mut cfg.ff_dim, f.ff_dim);
    set(&mut cfg.conv_kernel_size, f.kernel);
    set(&mut cfg.max_len, f.max_len);
}

fn train(a: TrainArgs, config: &mut RunConfig, seed: u64) -> Res {
    let (manifest, data) = read_dataset(&a.data).map_err(|e| at(&a.data, e))?;
    let kind = if a.flattened_ar { ModelKind::FlattenedAr } else { ModelKind::Masked };
    let resumed = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::<f32>::load(p)?;
            if ckpt.header.kind != kind {
                return Err(CliError::Data(format!("{} holds a {:?} model", p.display(), ckpt.header.kind)));
            }
            Some(ckpt)
        }
        None => None,
    };
    let m = &mut config.model;
    if let Some(c) = &resumed {
        *m = c.header.model.clone();
    } else {
        apply_model_flags(m, &a.model);
        m.levels = manifest.task.levels;
        m.codebook_size = manifest.task.codebook_size;
        m.cond_vocab = manifest.task.cond_vocab;
        m.seed = seed;
        let tr = &mut config.training;
        tr.seed = seed;
        set(&mut tr.batch_size, a.batch_size);
        set(&mut tr.adam.lr, a.lr);
        if a.min_crop.is_some() {
            tr.min_crop = a.min_crop;
        }
    }
    match kind {
        ModelKind::Masked => train_loop::<MaskedPredictor<f32>>(&a, config, seed, resumed, &data),
        ModelKind::FlattenedAr => train_loop::<ArPredictor<f32>>(&a, config, seed, resumed, &data),
    }
}

fn train_loop<M: TrainableModel<f32>>(
    a: &TrainArgs,
    config: &mut RunConfig,
    seed: u64,
    resumed: Option<Checkpoint<f32>>,
    data: &[LabeledExample],
) -> Res {
    let (mut model, mut trainer) = match resumed {
        Some(c) => {
            let (model, trainer) = c.into_parts::<M>()?;
            let trainer = trainer.ok_or_else(|| CliError::Data("checkpoint has no optimizer state".into()))?;
            config.training = trainer.config.clone();
            (model, trainer)
        }
        None => {
            let model = M::from_parts(config.model.clone(), init_params::<M>(&config.model)?)?;
            let trainer = Trainer::new(config.training.clone(), model.params());
            (model, trainer)
        }
    };
    fs::create_dir_all(&a.out)?;
    let echo = config.echo(seed);
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&echo)? + "\n")?;
    let mut log = OpenOptions::new().create(true).append(true).open(a.out.join("loss.log"))?;
    let every = a.checkpoint_every.max(1);
    let mut last = None;
    while trainer.state.step < a.steps {
        let step = trainer.state.step;
        let report = trainer.step(&mut model, data)?;
        writeln!(log, "{step} {}", report.loss)?;
        last = Some(report.loss);
        if trainer.state.step % every == 0 {
            save(&model, &trainer, &echo, &a.out.join(format!("ckpt-{}.strw", trainer.state.step)))?;
        }
    }
    save(&model, &trainer, &echo, &a.out.join("model.strw"))?;
    match last {
        Some(l) => println!("step {} loss {l}", trainer.state.step),
        None => println!("already at step {}", trainer.state.step),
    }
    Ok(())
}

fn init_params<M: TrainableModel<f32>>(cfg: &ModelConfig) -> Res<stormdec::autograd::ParamStore<f32>> {
    Ok(match M::KIND {
        ModelKind::Masked => MaskedPredictor::<f32>::new(cfg.clone())?.params().clone(),
        ModelKind::FlattenedAr => ArPredictor::<f32>::new(cfg.clone())?.params().clone(),
    })
}

fn save<M: TrainableModel<f32>>(model: &M, trainer: &Trainer<f32>, echo: &serde_json::Value, path: &Path) -> Res {
    Checkpoint::from_model(model, Some(trainer), echo.clone()).save(path)?;
    Ok(())
}

enum Loaded {
    Masked(MaskedPredictor<f32>),
    Ar(ArPredictor<f32>),
}

impl Loaded {
    fn load(path: &Path) -> Res<Self> {
        let ckpt = Checkpoint::<f32>::load(path).map_err(|e| at(path, e))?;
        Ok(match ckpt.header.kind {
            ModelKind::Masked => Loaded::Masked(ckpt.into_model()?),
            ModelKind::FlattenedAr => Loaded::Ar(ckpt.into_model()?),
        })
    }

    fn config(&self) -> &ModelConfig {
        match self {
            Loaded::Masked(m) => m.config(),
            Loaded::Ar(m) => m.config(),
        }
    }
}

fn sample(a: SampleArgs, config: &mut RunConfig, seed: u64) -> Res {
    let model = Loaded::load(&a.model)?;
    let mcfg = model.config().clone();
    let (cond, record) = match (&a.cond, &a.data) {
        (Some(p), _) => (ConditioningSequence::load(p)?.align(a.frame_rate)?, None),
        (None, Some(d)) => {
            let (_, mut data) = read_dataset(d).map_err(|e| at(d, e))?;
            if a.index >= data.len() {
                return Err(CliError::Data(format!("index {} outside {} records", a.index, data.len())));
            }
            let e = data.swap_remove(a.index);
            (e.cond, Some(e.grid))
        }
        (None, None) => return Err(CliError::Usage("sample needs --cond or --data".into())),
    };
    let frames = a.frames.unwrap_or_else(|| record.as_ref().map_or(cond.len(), |g| g.frames()).min(mcfg.max_len));
    let prompt = match (&a.prompt, a.prompt_frames) {
        (Some(p), _) => Some(TokenGrid::load(p)?),
        (None, Some(k)) => {
            let g = record.as_ref().ok_or_else(|| CliError::Usage("--prompt-frames needs --data".into()))?;
            Some(g.prefix(k)?)
        }
        (None, None) => None,
    };
    set(&mut config.decode.temperature, a.temperature);
    if a.plain_confidence {
        config.decode.confidence = ConfidenceMode::Plain;
    }
    if let Some(s) = &a.schedule {
        config.schedule = Some(s.parse()?);
    }
    config.model = mcfg.clone();
    let schedule = match &config.schedule {
        Some(s) => s.clone(),
        None => DecodeSchedule::coarse_first(16, mcfg.levels)?,
    };
    config.schedule = Some(schedule.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decoder = a.decoder.unwrap_or(match model {
        Loaded::Masked(_) => DecoderChoice::Parallel,
        Loaded::Ar(_) => DecoderChoice::Ar,
    });
    let prompt_ref = prompt.as_ref();
    let out = match (&model, decoder) {
        (Loaded::Masked(m), DecoderChoice::Parallel) => {
            parallel_decode(m, &cond, frames, prompt_ref, &schedule, &config.decode, &mut rng)?
        }
        (Loaded::Masked(m), DecoderChoice::Greedy) => level_greedy_decode(m, &cond, frames, prompt_ref)?,
        (Loaded::Ar(m), DecoderChoice::Ar) => {
            let window = match a.window_chunk {
                Some(c) => Some(SlidingWindow::new(c, a.window_overlap)?),
                None => None,
            };
            let opts = ArOptions { temperature: config.decode.temperature, window };
            flattened_ar_decode(m, &cond, frames, prompt_ref, &opts, &mut rng)?
        }
        _ => {
            return Err(CliError::Usage(format!(
                "decoder {decoder:?} does not match the checkpoint's model kind"
            )))
        }
    };
    out.grid.save(&a.out)?;
    if let Some(t) = &a.trace {
        fs::write(t, trace_to_text(&out.trace))?;
    }
    let sidecar = json!({
        "model": a.model,
        "decoder": format!("{decoder:?}").to_lowercase(),
        "frames": frames,
        "prompt_frames": prompt.as_ref().map_or(0, |p| p.frames()),
        "forward_passes": out.forward_passes,
        "run": config.echo(seed),
    });
    fs::write(sidecar_path(&a.out), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    println!("forward passes: {}", out.forward_passes);
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn parse_list(s: &str) -> Res<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| CliError::Usage(format!("bad list entry {p:?}"))))
        .collect()
}

fn write_report(dir: &Path, stem: &str, json: serde_json::Value, table: &str, csv: &str) -> Res {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&json)? + "\n")?;
    fs::write(dir.join(format!("{stem}.txt")), table)?;
    let mut f = File::create(dir.join(format!("{stem}.csv")))?;
    f.write_all(csv.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn bench_runtime(a: RuntimeArgs, config: &mut RunConfig, seed: u64) -> Res {
    let masked = match &a.model {
        Some(p) => match Loaded::load(p)? {
            Loaded::Masked(m) => m,
            Loaded::Ar(_) => return Err(CliError::Data(format!("{} is not a masked predictor", p.display()))),
        },
        None => {
            apply_model_flags(&mut config.model, &a.model_flags);
            set(&mut config.model.levels, a.levels);
            config.model.seed = seed;
            MaskedPredictor::new(config.model.clone())?
        }
    };
    config.model = masked.config().clone();
    let mut decoders = Vec::new();
    for name in a.decoders.split(',').map(str::trim) {
        decoders.push(match name {
            "parallel" => {
                let s = match (&a.schedule, &config.schedule) {
                    (Some(s), _) => s.parse()?,
                    (None, Some(s)) => s.clone(),
                    (None, None) => DecodeSchedule::coarse_first(16, config.model.levels)?,
                };
                config.schedule = Some(s.clone());
                DecoderKind::Parallel(s)
            }
            "greedy" => DecoderKind::LevelGreedy,
            "ar" => DecoderKind::FlattenedAr,
            other => return Err(CliError::Usage(format!("unknown decoder {other:?}"))),
        });
    }
    let ar = if decoders.contains(&DecoderKind::FlattenedAr) {
        Some(match &a.ar_model {
            Some(p) => match Loaded::load(p)? {
                Loaded::Ar(m) => m,
                Loaded::Masked(_) => return Err(CliError::Data(format!("{} is not an autoregressive model", p.display()))),
            },
            None => ArPredictor::new(config.model.clone())?,
        })
    } else {
        None
    };
    let lengths = parse_list(&a.lengths)?;
    let report = run_runtime_bench(
        &masked,
        ar.as_ref(),
        &decoders,
        &lengths,
        a.repetitions,
        a.frame_rate,
        config.model.cond_vocab as u32,
        seed,
    )?;
    let json = json!({ "run": config.echo(seed), "report": report });
    write_report(&a.out, "runtime", json, &report.to_table(), &report.to_csv())
}

fn bench_ablation(a: AblationArgs, config: &mut RunConfig, seed: u64) -> Res {
    let model = match Loaded::load(&a.model)? {
        Loaded::Masked(m) => m,
        Loaded::Ar(_) => return Err(CliError::Data(format!("{} is not a masked predictor", a.model.display()))),
    };
    let (manifest, data) = read_dataset(&a.data).map_err(|e| at(&a.data, e))?;
    let n = a.limit.unwrap_or(data.len()).min(data.len());
    let conds: Vec<ConditioningSequence> = data.into_iter().take(n).map(|e| e.cond).collect();
    let iters = if a.iterations.is_empty() { DEFAULT_ABLATION_ITERATIONS.to_vec() } else { parse_list(&a.iterations)? };
    config.model = model.config().clone();
    config.task = manifest.task.params();
    let report = run_iteration_ablation(&model, &manifest.task, &conds, &iters, &config.decode, seed, a.workers)?;
    let json = json!({ "run": config.echo(seed), "report": report });
    write_report(&a.out, "ablation", json, &report.to_table(), &report.to_csv())
}
