mod config;

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geoalign_core::alignment::{
    load_text_table, random_text_table, read_text_header, write_text_table, LossDirection,
    TEXT_MAGIC,
};
use geoalign_core::checkpoint::{
    read_checkpoint_header, AnyCheckpoint, Checkpoint, CHECKPOINT_MAGIC,
};
use geoalign_core::data::{
    read_grid_header, read_label_header, SceneDataset, CUBE_MAGIC, ELEVATION_MAGIC, LABEL_MAGIC,
};
use geoalign_core::encoders::Modality;
use geoalign_core::evaluation::{evaluate, render_class_map, Split, DEFAULT_PALETTE};
use geoalign_core::sampling::{generate_synthetic_scene, SynthConfig};
use geoalign_core::scalar::set_threads;
use geoalign_core::training::Trainer;
use geoalign_core::{Error, Precision, Result, Scalar};

use config::{EvalOptions, RunConfig, RunHeader};

#[derive(Parser)]
#[command(
    name = "geoalign",
    version,
    about = "Language-aligned hyperspectral + LiDAR classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the train or test split.
    Eval(EvalArgs),
    /// Render a classification map (same as `eval --map`).
    Map(MapArgs),
    /// Write a synthetic scene, a text table and a default run config.
    Synth(SynthArgs),
    /// Print the header of an MMRS/MMEL/MMLB/MMTE/MMCK file.
    Inspect(InspectArgs),
}

fn parse_loss(s: &str) -> std::result::Result<LossDirection, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
    }
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    match s {
        "both" => Ok(Modality::Both),
        "hsi" => Ok(Modality::Hsi),
        "lidar" => Ok(Modality::Lidar),
        other => Err(format!(
            "unknown modality {other:?} (expected both, hsi or lidar)"
        )),
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Flags that override keys of the config file.
#[derive(Args, Default)]
struct Overrides {
    /// Loss direction: v2t, t2v or sym.
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossDirection>,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// f32 (default) or f64.
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// both, hsi or lidar.
    #[arg(long, value_parser = parse_modality)]
    modality: Option<Modality>,
    /// Worker threads; anything above 1 leaves the reference mode.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.loss {
            t.loss = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.epochs {
            t.max_epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
        if let Some(v) = self.precision {
            t.precision = v;
        }
        if let Some(v) = self.modality {
            t.modality = v;
        }
        if let Some(v) = self.threads {
            cfg.threads = v;
        }
        if let Some(v) = &self.output {
            cfg.output_dir = v.clone();
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (JSON).
    #[arg(
        long,
        required_unless_present = "from_header",
        conflicts_with = "from_header"
    )]
    config: Option<PathBuf>,
    /// Repeat the run recorded in a run header.
    #[arg(long)]
    from_header: Option<PathBuf>,
    /// Continue from `last.mmck` in the output directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// Defaults to `best.mmck` in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// train or test.
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    /// Also write a class map (PPM).
    #[arg(long)]
    map: Option<PathBuf>,
    /// Paint unlabeled pixels with the background color.
    #[arg(long)]
    mask_unlabeled: bool,
    /// Report path; defaults to `eval_<split>.json` in the output directory.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Map output path (PPM).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    #[arg(long)]
    mask_unlabeled: bool,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Generator parameters (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    bands: Option<usize>,
    #[arg(long)]
    lidar_channels: Option<usize>,
    #[arg(long)]
    train_pixels: Option<usize>,
    #[arg(long)]
    test_pixels: Option<usize>,
    /// Width of the generated text embeddings.
    #[arg(long, default_value_t = 512)]
    embed_dim: usize,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.is_usage() { 2 } else { 1 };
            let body = serde_json::json!({
                "error": { "kind": e.kind(), "message": e.to_string() },
                "exit_code": code,
            });
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => {
            let overrides = EvalOptions {
                split: args.split.unwrap_or_default(),
                map: args.map,
                mask_unlabeled: args.mask_unlabeled,
                report: args.report,
            };
            cmd_eval(
                &args.config,
                args.checkpoint,
                args.split.is_some(),
                overrides,
                args.threads,
            )
        }
        Command::Map(args) => {
            let overrides = EvalOptions {
                split: args.split.unwrap_or_default(),
                map: Some(args.out),
                mask_unlabeled: args.mask_unlabeled,
                report: args.report,
            };
            cmd_eval(
                &args.config,
                args.checkpoint,
                args.split.is_some(),
                overrides,
                args.threads,
            )
        }
        Command::Synth(args) => cmd_synth(args),
        Command::Inspect(args) => cmd_inspect(&args.path),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    let body = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, body).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = match (&args.config, &args.from_header) {
        (_, Some(header)) => {
            let header = RunHeader::load(header)?;
            header.check_inputs()?;
            header.config
        }
        (Some(path), None) => {
            let mut cfg = RunConfig::load(path)?;
            args.overrides.apply(&mut cfg);
            cfg
        }
        (None, None) => unreachable!("clap requires one of the two"),
    };
    cfg.validate()?;
    set_threads(cfg.threads);
    let scene = SceneDataset::load(&cfg.scene)?;
    let table = load_text_table(&cfg.text_table, Some(cfg.train.embed_dim))?;
    create_dir(&cfg.output_dir)?;
    RunHeader::new("train", &cfg)?.save(&cfg.output_dir.join("run_header.json"))?;
    match cfg.train.precision {
        Precision::F32 => train_with::<f32>(&cfg, &scene, &table, args.resume),
        Precision::F64 => train_with::<f64>(&cfg, &scene, &table, args.resume),
    }
}

fn train_with<T: Scalar>(
    cfg: &RunConfig,
    scene: &SceneDataset,
    table: &geoalign_core::alignment::TextTable,
    resume: bool,
) -> Result<()> {
    let out = &cfg.output_dir;
    let last_path = out.join("last.mmck");
    let best_path = out.join("best.mmck");
    let mut trainer = if resume && last_path.exists() {
        let last = Checkpoint::<T>::load(&last_path)?;
        let best = Checkpoint::<T>::load(&best_path)?;
        last.check_digest(&cfg.train.digest());
        log::info!("resuming after epoch {}", last.epoch);
        Trainer::resume(scene, table, cfg.train.clone(), last, best)?
    } else {
        Trainer::new(scene, table, cfg.train.clone())?
    };
    while !trainer.finished() {
        let epoch = trainer.run_epoch()?.epoch;
        trainer.checkpoint().save(&last_path)?;
        if let Some(best) = trainer.best().filter(|b| b.epoch == epoch) {
            best.save(&best_path)?;
        }
        write_json(&out.join("history.json"), &trainer.history())?;
    }
    if !best_path.exists() {
        trainer.checkpoint().save(&best_path)?;
    }
    let best = trainer.best().map(|b| (b.epoch, b.best_loss));
    let summary = serde_json::json!({
        "epochs": trainer.epoch(),
        "best_epoch": best.map(|b| b.0),
        "best_loss": best.map(|b| b.1),
        "checkpoint": best_path,
        "history": out.join("history.json"),
    });
    emit(&format!("{summary}\n"));
    Ok(())
}

fn cmd_eval(
    config: &Path,
    checkpoint: Option<PathBuf>,
    split_given: bool,
    flags: EvalOptions,
    threads: Option<usize>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if split_given {
        cfg.eval.split = flags.split;
    }
    if flags.map.is_some() {
        cfg.eval.map = flags.map;
    }
    if flags.report.is_some() {
        cfg.eval.report = flags.report;
    }
    cfg.eval.mask_unlabeled |= flags.mask_unlabeled;
    if let Some(t) = threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    set_threads(cfg.threads);
    let ckpt_path = checkpoint.unwrap_or_else(|| cfg.output_dir.join("best.mmck"));
    let scene = SceneDataset::load(&cfg.scene)?;
    match AnyCheckpoint::load(&ckpt_path)? {
        AnyCheckpoint::F32(c) => eval_with(&cfg, &scene, &c),
        AnyCheckpoint::F64(c) => eval_with(&cfg, &scene, &c),
    }
}

fn eval_with<T: Scalar>(cfg: &RunConfig, scene: &SceneDataset, ckpt: &Checkpoint<T>) -> Result<()> {
    ckpt.check_digest(&cfg.train.digest());
    let table = load_text_table(&cfg.text_table, Some(ckpt.params.arch.embed_dim))?;
    let opts = &cfg.eval;
    let report = evaluate(scene, ckpt, &table, opts.split)?;
    let split_name = match opts.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let report_path = opts
        .report
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(format!("eval_{split_name}.json")));
    if let Some(parent) = report_path.parent() {
        create_dir(parent)?;
    }
    write_json(&report_path, &report)?;
    emit(&report.render_table(table.names()));
    if let Some(map_path) = &opts.map {
        let map = render_class_map(scene, ckpt, &table, &DEFAULT_PALETTE, opts.mask_unlabeled)?;
        map.save_ppm(map_path)?;
        log::info!("class map written to {}", map_path.display());
    }
    log::info!("report written to {}", report_path.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut synth = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => SynthConfig::default(),
    };
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut synth.classes, args.classes);
    set(&mut synth.height, args.height);
    set(&mut synth.width, args.width);
    set(&mut synth.bands, args.bands);
    set(&mut synth.lidar_channels, args.lidar_channels);
    set(&mut synth.train_pixels, args.train_pixels);
    set(&mut synth.test_pixels, args.test_pixels);
    if let Some(seed) = args.seed {
        synth.seed = seed;
    }
    let scene = generate_synthetic_scene(&synth)?;
    let manifest = scene.save(&args.out)?;
    let names = (1..=synth.classes).map(|c| format!("class {c}")).collect();
    let table = random_text_table(names, args.embed_dim, synth.seed)?;
    let table_path = args.out.join("text.mmte");
    write_text_table(&table, &table_path)?;
    let mut run = RunConfig::new("scene.json".into(), "text.mmte".into());
    run.train.embed_dim = args.embed_dim;
    let run_path = args.out.join("run.json");
    write_json(&run_path, &run)?;
    write_json(&args.out.join("synth.json"), &synth)?;
    let summary = serde_json::json!({
        "manifest": manifest,
        "text_table": table_path,
        "config": run_path,
        "train_pixels": scene.train_indices.len(),
        "test_pixels": scene.test_indices.len(),
    });
    emit(&format!("{summary}\n"));
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let mut magic = [0u8; 4];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => {
                Error::Format(format!("{}: too short to hold a header", path.display()))
            }
            _ => Error::Io {
                path: path.to_path_buf(),
                source: e,
            },
        })?;
    let mut out = Vec::new();
    match &magic {
        m if m == CUBE_MAGIC || m == ELEVATION_MAGIC => {
            let h = read_grid_header(path)?;
            let depth = if m == CUBE_MAGIC { "bands" } else { "channels" };
            out.push(format!("format: {}", String::from_utf8_lossy(m)));
            out.push(format!("height: {}", h.height));
            out.push(format!("width: {}", h.width));
            out.push(format!("{depth}: {}", h.depth));
        }
        m if m == LABEL_MAGIC => {
            let h = read_label_header(path)?;
            out.push("format: MMLB".to_string());
            out.push(format!("height: {}", h.height));
            out.push(format!("width: {}", h.width));
            out.push(format!("classes: {}", h.class_count));
        }
        m if m == TEXT_MAGIC => {
            let h = read_text_header(path)?;
            out.push("format: MMTE".to_string());
            out.push(format!("classes: {}", h.class_count));
            out.push(format!("dim: {}", h.dim));
            out.push(format!("template: {}", h.template));
            for (i, name) in h.names.iter().enumerate() {
                out.push(format!("class {}: {name}", i + 1));
            }
        }
        m if m == CHECKPOINT_MAGIC => {
            let h = read_checkpoint_header(path)?;
            out.push("format: MMCK".to_string());
            out.push(format!("precision: {:?}", h.precision));
            out.push(format!("epoch: {}", h.epoch));
            out.push(format!("best_loss: {}", h.best_loss));
            out.push(format!(
                "epochs_since_improvement: {}",
                h.epochs_since_improvement
            ));
            out.push(format!("adam_step: {}", h.adam_step));
            out.push(format!("config_digest: {}", hex::encode(h.config_digest)));
            out.push(format!(
                "arch: {}",
                serde_json::to_string(&h.arch).expect("arch serializes")
            ));
            for t in &h.tensors {
                out.push(format!("tensor {} {:?} {:?}", t.name, t.precision, t.shape));
            }
        }
        other => {
            return Err(Error::Format(format!(
                "{}: unknown magic {:?}",
                path.display(),
                String::from_utf8_lossy(other)
            )))
        }
    }
    emit(&(out.join("\n") + "\n"));
    Ok(())
}
