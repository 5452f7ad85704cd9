use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use ndarray::Array3;
use ouro_core::dataset::read_intrinsics;
use ouro_core::diffusion::{full_condition, single_step_infer, ConditionStack, Direction, Prompt, Sampling};
use ouro_core::evalkit::{backend_by_name, evaluate, read_report, render_report, render_table, EvalOptions, EvalTarget};
use ouro_core::imageio::{load_image, save_otns, save_png};
use ouro_core::sceneforge::{build_dataset, BuildOptions};
use ouro_core::temporal::{infer_video, VideoConfig};
use ouro_core::trainer::{load_checkpoint, load_sources, Checkpoint, DataSource, LoadOptions, SourceKind, TrainConfig, Trainer};
use ouro_core::types::{collapse_planes, decode_normal, MIN_SIDE};
use ouro_core::{Caption, Channel, Real};
use serde::Serialize;
use serde_json::json;

use crate::settings::{io_error, load_block, Recorder};
use crate::{
    CliError, CliResult, Cli, Command, CycleArgs, EvalArgs, EvalConfig, GenDataArgs, GenDataConfig, InferArgs,
    InferConfig, InferVideoConfig, ReportArgs, TrainArgs, TrainOverrides, VideoArgs,
};

pub(crate) fn dispatch(cli: &Cli, argv: &[String]) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a, argv),
        Command::Train(a) => train(cli, a, argv),
        Command::TrainCycle(a) => train_cycle(cli, a, argv),
        Command::Infer(a) => infer(cli, a, argv),
        Command::InferVideo(a) => infer_video_cmd(cli, a, argv),
        Command::Eval(a) => eval(cli, a, argv),
        Command::Report(a) => report(cli, a, argv),
    }
}

fn require_out(cli: &Cli) -> CliResult<&Path> {
    cli.out.as_deref().ok_or_else(|| CliError::Invalid(format!("{} needs --out", cli.command.name())))
}

/// Runs `body` and records its provenance at `prov`, whatever the outcome.
fn recorded<C: Serialize>(
    command: &str,
    argv: &[String],
    cfg: &C,
    prov: &Path,
    body: impl FnOnce(&mut Vec<PathBuf>) -> CliResult<()>,
) -> CliResult<()> {
    let mut rec = Recorder::new(command, argv, cfg);
    let result = body(&mut rec.outputs);
    let written = rec.write(prov, &result);
    result.and(written)
}

fn parse_channels(s: &str) -> CliResult<Vec<Channel>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let c: Channel = part.parse()?;
        if !out.contains(&c) {
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(CliError::Invalid("no channels selected".into()));
    }
    Ok(out)
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    fs::write(path, serde_json::to_vec_pretty(value).expect("json serializes")).map_err(|e| io_error(path, e))
}

fn gen_data(cli: &Cli, a: &GenDataArgs, argv: &[String]) -> CliResult<()> {
    let mut cfg: GenDataConfig = load_block(cli.config.as_deref(), "gen-data")?;
    if let Some(p) = &a.profile {
        cfg.profile = p.parse()?;
    }
    if let Some(n) = a.count {
        cfg.count = n;
    }
    if let Some(r) = a.res {
        cfg.resolution = r;
    }
    if let Some(s) = &a.split {
        cfg.split = s.clone();
    }
    cfg.previews |= a.previews;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cfg.count == 0 {
        return Err(CliError::Invalid("count must be at least 1".into()));
    }
    if cfg.resolution < MIN_SIDE {
        return Err(CliError::Invalid(format!("resolution must be at least {MIN_SIDE}")));
    }
    cfg.scene.validate()?;
    let out = require_out(cli)?;
    recorded("gen-data", argv, &cfg, &out.join("provenance.json"), |outputs| {
        let opts = BuildOptions {
            resolution: cfg.resolution,
            split: cfg.split.clone(),
            scene: cfg.scene.clone(),
            previews: cfg.previews,
        };
        let entries = build_dataset(cfg.count, cfg.seed, out, cfg.profile, &opts)?;
        info!("wrote {} {} records to {}", entries.len(), cfg.profile.name(), out.join(&cfg.split).display());
        outputs.push(out.join("manifest.json"));
        outputs.push(out.join(&cfg.split));
        Ok(())
    })
}

fn apply_overrides(cfg: &mut TrainConfig, o: &TrainOverrides, seed: Option<u64>) {
    if let Some(v) = o.steps {
        cfg.steps = v;
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
}

fn annotated(root: &Path, ratio: f64) -> DataSource {
    DataSource { root: root.to_path_buf(), split: "train".into(), ratio, kind: SourceKind::Annotated }
}

fn run_training(
    command: &str,
    argv: &[String],
    out: &Path,
    mut trainer: Trainer<Real>,
    append: bool,
) -> CliResult<()> {
    let cfg = trainer.config().clone();
    recorded(command, argv, &cfg, &out.join("provenance.json"), |outputs| {
        fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
        let log_path = out.join("train.log.jsonl");
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&log_path)
            .map_err(|e| io_error(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let result = trainer.run(out, &mut log);
        log.flush().map_err(|e| io_error(&log_path, e))?;
        result?;
        info!("finished at step {}; checkpoint in {}", trainer.step(), out.join("final").display());
        outputs.push(log_path);
        outputs.push(out.join("final"));
        Ok(())
    })
}

fn train(cli: &Cli, a: &TrainArgs, argv: &[String]) -> CliResult<()> {
    let mut cfg: TrainConfig = load_block(cli.config.as_deref(), "train")?;
    if let Some(d) = &a.direction {
        cfg.direction = Some(d.parse()?);
    }
    if cfg.direction.is_none() {
        return Err(CliError::Invalid("train needs --direction; joint training is train-cycle".into()));
    }
    if let Some(root) = &a.data {
        cfg.sources = vec![annotated(root, 1.0)];
    }
    apply_overrides(&mut cfg, &a.common, cli.seed);
    if cfg.sources.is_empty() {
        return Err(CliError::Invalid("no training data: pass --data or list sources in the config".into()));
    }
    cfg.validate()?;
    let out = require_out(cli)?;
    let sources = load_sources::<Real>(&cfg)?;
    let trainer = match &a.resume {
        Some(dir) => Trainer::resume(cfg, sources, dir, a.allow_config_mismatch)?,
        None => Trainer::new(cfg, sources)?,
    };
    run_training("train", argv, out, trainer, a.resume.is_some())
}

fn checkpoint(path: &Path, expect: Direction, flag: &str) -> CliResult<Checkpoint<Real>> {
    let ck = load_checkpoint::<Real>(path, LoadOptions::default())?;
    if ck.meta.spec.direction() != expect {
        return Err(CliError::Invalid(format!(
            "{flag} {} holds a {} model, expected {}",
            path.display(),
            ck.meta.spec.direction().name(),
            expect.name()
        )));
    }
    Ok(ck)
}

fn train_cycle(cli: &Cli, a: &CycleArgs, argv: &[String]) -> CliResult<()> {
    let mut cfg: TrainConfig = load_block(cli.config.as_deref(), "train-cycle")?;
    cfg.direction = None;
    if a.wild_ratio.is_some() && a.wild.is_none() {
        return Err(CliError::Invalid("--wild-ratio needs --wild".into()));
    }
    if a.data.is_some() || a.wild.is_some() {
        let wild_ratio = if a.wild.is_some() { a.wild_ratio.unwrap_or(0.5) } else { 0.0 };
        cfg.sources.clear();
        if let Some(root) = &a.data {
            cfg.sources.push(annotated(root, 1.0 - wild_ratio));
        }
        if let Some(root) = &a.wild {
            let ratio = if a.data.is_some() { wild_ratio } else { 1.0 };
            cfg.sources.push(DataSource { root: root.clone(), split: "train".into(), ratio, kind: SourceKind::Wild });
        }
    }
    if let Some(l) = a.lambda_cyc {
        cfg.lambda_cyc = l;
    }
    apply_overrides(&mut cfg, &a.common, cli.seed);
    if cfg.sources.is_empty() {
        return Err(CliError::Invalid("no training data: pass --data/--wild or list sources in the config".into()));
    }
    let out = require_out(cli)?;
    let inv = checkpoint(&a.inv, Direction::Rgb2x, "--inv")?;
    let fwd = checkpoint(&a.fwd, Direction::X2rgb, "--fwd")?;
    // Diffusion settings follow the pretrained models.
    cfg.schedule = inv.meta.spec.schedule.clone();
    cfg.noise = inv.meta.spec.noise.clone();
    cfg.codec = inv.meta.spec.codec.clone();
    cfg.validate()?;
    let sources = load_sources::<Real>(&cfg)?;
    let trainer = Trainer::from_pretrained(cfg, sources, vec![inv, fwd])?;
    run_training("train-cycle", argv, out, trainer, false)
}

/// Channel-form prediction in the layout the dataset stores on disk.
fn storage_prediction(out: &Array3<Real>, c: Channel) -> Array3<Real> {
    match c {
        Channel::Normal => decode_normal(out).mapv(|v| (v + 1.0) * 0.5),
        Channel::Roughness | Channel::Metallicity => collapse_planes(out),
        _ => out.clone(),
    }
}

fn write_map(dir: &Path, name: &str, a: &Array3<Real>, outputs: &mut Vec<PathBuf>) -> CliResult<()> {
    let tensor = dir.join(format!("{name}.otns"));
    let preview = dir.join(format!("{name}.png"));
    save_otns(a, name, &tensor)?;
    save_png(a, &preview)?;
    outputs.push(tensor);
    outputs.push(preview);
    Ok(())
}

fn infer(cli: &Cli, a: &InferArgs, argv: &[String]) -> CliResult<()> {
    let mut cfg: InferConfig = load_block(cli.config.as_deref(), "infer")?;
    if let Some(t) = &a.tokens {
        cfg.tokens = parse_channels(t)?;
    }
    if let Some(c) = &a.caption {
        cfg.caption = Some(c.clone());
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = require_out(cli)?;
    let ck = load_checkpoint::<Real>(&a.ckpt, LoadOptions::default())?;
    let spec = ck.meta.spec.clone();
    let direction = spec.direction();
    match direction {
        Direction::Rgb2x if cfg.caption.is_some() => {
            return Err(CliError::Invalid("captions drive x2rgb models; this checkpoint is rgb2x".into()))
        }
        Direction::X2rgb if !cfg.tokens.is_empty() => {
            return Err(CliError::Invalid("task tokens drive rgb2x models; this checkpoint is x2rgb".into()))
        }
        _ => {}
    }
    recorded("infer", argv, &cfg, &out.join("provenance.json"), |outputs| {
        fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
        let schedule = spec.build_schedule()?;
        let s = Sampling { schedule: &schedule, noise: &spec.noise, codec: &spec.codec };
        let model = &ck.model;
        model.reset_evaluations();
        let mut jobs: Vec<(String, ConditionStack<Real>, Prompt, Option<Channel>)> = Vec::new();
        match direction {
            Direction::Rgb2x => {
                let path = if a.input.is_dir() { a.input.join("rgb.otns") } else { a.input.clone() };
                let image: Array3<Real> = load_image(&path)?;
                let cond = ConditionStack::from_image(&image, &spec.codec)?;
                let tokens = if cfg.tokens.is_empty() { Channel::ALL.to_vec() } else { cfg.tokens.clone() };
                for c in tokens {
                    jobs.push((c.name().into(), cond.clone(), Prompt::Task(c), Some(c)));
                }
            }
            Direction::X2rgb => {
                let (x, meta) = read_intrinsics::<Real>(&a.input)?;
                let caption = Caption::new(cfg.caption.clone().unwrap_or_else(|| meta.caption.as_str().to_string()))?;
                let cond = full_condition(&x, x.mask, &spec.codec)?;
                jobs.push(("rgb".into(), cond, Prompt::Caption(caption), None));
            }
        }
        let mut rows = Vec::new();
        for (name, cond, prompt, channel) in &jobs {
            let before = model.evaluations();
            let clock = Instant::now();
            let o = single_step_infer(model, cond, prompt, cfg.seed, &s)?;
            let ms = clock.elapsed().as_secs_f64() * 1e3;
            let evals = model.evaluations() - before;
            let stored = match channel {
                Some(c) => storage_prediction(&o, *c),
                None => o,
            };
            write_map(out, name, &stored, outputs)?;
            info!("{name}: {evals} network evaluation(s) in {ms:.1} ms");
            rows.push(json!({ "output": name, "evaluations": evals, "wall_ms": ms }));
        }
        let evaluations = model.evaluations();
        info!("{evaluations} network evaluations for {} output maps", jobs.len());
        let summary = out.join("infer.json");
        write_json(
            &summary,
            &json!({
                "checkpoint": a.ckpt,
                "direction": direction.name(),
                "seed": cfg.seed,
                "outputs": rows,
                "evaluations": evaluations,
            }),
        )?;
        outputs.push(summary);
        if evaluations != jobs.len() as u64 {
            return Err(CliError::Runtime(ouro_core::Error::Validation(format!(
                "{evaluations} network evaluations for {} outputs",
                jobs.len()
            ))));
        }
        Ok(())
    })
}

/// Frame files sorted by the last number in their stem.
fn list_frames(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
    let mut frames = Vec::new();
    for e in entries {
        let p = e.map_err(|e| io_error(dir, e))?.path();
        if matches!(p.extension().and_then(|x| x.to_str()), Some("png" | "otns")) {
            frames.push(p);
        }
    }
    let key = |p: &PathBuf| {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let digits: String = stem
            .chars()
            .rev()
            .skip_while(|c| !c.is_ascii_digit())
            .take_while(|c| c.is_ascii_digit())
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        (digits.parse::<u64>().ok(), stem)
    };
    frames.sort_by_key(key);
    if frames.is_empty() {
        return Err(CliError::Invalid(format!("{} holds no PNG or OTNS frames", dir.display())));
    }
    Ok(frames)
}

fn infer_video_cmd(cli: &Cli, a: &VideoArgs, argv: &[String]) -> CliResult<()> {
    let mut cfg: InferVideoConfig = load_block(cli.config.as_deref(), "infer-video")?;
    if let Some(t) = &a.task {
        cfg.task = t.parse()?;
    }
    if let Some(v) = a.window {
        cfg.window_size = v;
    }
    if let Some(v) = a.stride {
        cfg.stride = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    let vcfg = VideoConfig { window_size: cfg.window_size, stride: cfg.stride, gamma: cfg.gamma, seed: cfg.seed };
    vcfg.validate()?;
    let out = require_out(cli)?;
    let frames = list_frames(&a.frames)?;
    let ck = checkpoint(&a.ckpt, Direction::Rgb2x, "--ckpt")?;
    let spec = ck.meta.spec.clone();
    recorded("infer-video", argv, &cfg, &out.join("provenance.json"), |outputs| {
        fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
        let schedule = spec.build_schedule()?;
        let s = Sampling { schedule: &schedule, noise: &spec.noise, codec: &spec.codec };
        let cond = frames
            .iter()
            .map(|p| Ok(spec.codec.encode(&load_image::<Real>(p)?)?))
            .collect::<CliResult<Vec<_>>>()?;
        let video = infer_video(&ck.model, &cond, &Prompt::Task(cfg.task), &vcfg, &s)?;
        for (p, f) in frames.iter().zip(&video.frames) {
            let stem = p.file_stem().expect("frame files have stems").to_string_lossy();
            write_map(out, &stem, &storage_prediction(f, cfg.task), outputs)?;
        }
        info!(
            "{} frames in {} windows, {} network evaluations",
            frames.len(),
            video.plan.windows.len(),
            video.evaluations
        );
        let summary = out.join("video.json");
        write_json(
            &summary,
            &json!({
                "task": cfg.task,
                "frames": frames,
                "windows": video.plan.windows,
                "evaluations": video.evaluations,
            }),
        )?;
        outputs.push(summary);
        Ok(())
    })
}

fn eval(cli: &Cli, a: &EvalArgs, argv: &[String]) -> CliResult<()> {
    let mut cfg: EvalConfig = load_block(cli.config.as_deref(), "eval")?;
    if let Some(c) = &a.channels {
        cfg.channels = c.clone();
    }
    if let Some(p) = &a.perceptual {
        cfg.perceptual = p.clone();
    }
    cfg.allow_unpaired |= a.allow_unpaired;
    cfg.per_channel_si |= a.per_channel_si;
    let targets = EvalTarget::parse_list(&cfg.channels)?;
    let perceptual = backend_by_name(&cfg.perceptual)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("report.json"));
    let prov = out.with_extension("provenance.json");
    let quiet = cli.quiet;
    recorded("eval", argv, &cfg, &prov, |outputs| {
        let opts = EvalOptions { allow_unpaired: cfg.allow_unpaired, per_channel_si: cfg.per_channel_si, perceptual };
        let report = evaluate(&a.pred, &a.gt, &targets, &opts)?;
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
        }
        write_json(&out, &serde_json::to_value(&report).expect("report serializes"))?;
        if !quiet {
            print!("{}", render_table(&report));
        }
        outputs.push(out.clone());
        Ok(())
    })
}

fn report(cli: &Cli, a: &ReportArgs, argv: &[String]) -> CliResult<()> {
    if cli.config.is_some() {
        return Err(CliError::Invalid("report takes no config".into()));
    }
    let plots = match (&a.plots, &cli.out) {
        (Some(p), _) | (None, Some(p)) => p.clone(),
        (None, None) => a.report.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    let cfg = json!({ "report": a.report, "plots": plots });
    let quiet = cli.quiet;
    recorded("report", argv, &cfg, &plots.join("provenance.json"), |outputs| {
        let r = read_report(&a.report)?;
        outputs.extend(render_report(&r, &plots)?);
        if !quiet {
            print!("{}", render_table(&r));
        }
        Ok(())
    })
}
