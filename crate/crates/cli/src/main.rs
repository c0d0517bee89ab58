use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;

use slwsr::eval::bench::{comparison_strip, dataset_files, evaluate_file, EvalReport};
use slwsr::eval::{upscale, Bicubic, Upscaler};
use slwsr::gradcheck::{self, GradcheckConfig};
use slwsr::imageio::{file_stem, list_pngs, read_png, write_png};
use slwsr::model::checkpoint;
use slwsr::profiler::{cost_sweep, sweep_csv, sweep_table};
use slwsr::train::{train_loop, RunFiles, TrainConfig, Trainer, TrainingSet};
use slwsr::{Error, Model, ModelConfig, OpKind, Result};

/// Exit code when a gradient check fails.
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser, Debug)]
#[command(
    name = "slwsr",
    version,
    about = "Train, evaluate, run and profile lightweight super-resolution networks",
    after_help = "Exit codes: 0 success, 2 configuration or usage error, 3 data or I/O error, \
                  4 numeric failure, 5 gradient check failure."
)]
struct Cli {
    /// Seed for every randomized step
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Log filter (error, warn, info, debug, trace)
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a directory of HR images
    Train(TrainArgs),
    /// Score a checkpoint or plain bicubic on a benchmark set
    Eval(EvalArgs),
    /// Upscale one PNG or every PNG of a directory
    Infer(InferArgs),
    /// Print parameter and multi-add counts
    Count(CountArgs),
    /// Verify backward passes against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Architecture file with `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override the feature width
    #[arg(long)]
    n_feats: Option<usize>,

    /// Override the upscaling factor
    #[arg(long)]
    scale: Option<usize>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                ModelConfig::parse(&text)?
            }
            None => ModelConfig::default(),
        };
        if let Some(n) = self.n_feats {
            cfg.n_feats = n;
        }
        if let Some(s) = self.scale {
            cfg.scale = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn given(&self) -> bool {
        self.config.is_some() || self.n_feats.is_some() || self.scale.is_some()
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,

    /// Directory of HR training PNGs
    #[arg(long)]
    data: PathBuf,

    /// Directory of matching `<name>x<scale>.png` LR inputs
    #[arg(long)]
    lr_data: Option<PathBuf>,

    /// Output directory for the log and checkpoints
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,

    /// Optimizer steps to run
    #[arg(long, default_value_t = 1000)]
    steps: u64,

    /// Continue from a checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,

    #[arg(long, default_value_t = 1e-4)]
    lr: f64,

    #[arg(long, default_value_t = 16)]
    batch_size: usize,

    /// LR patch side
    #[arg(long, default_value_t = 48)]
    patch: usize,

    /// Batches per epoch
    #[arg(long, default_value_t = 1000)]
    steps_per_epoch: usize,

    /// Epochs between learning-rate halvings
    #[arg(long, default_value_t = 200)]
    halving_period: usize,

    /// Clip the global gradient norm to this value
    #[arg(long)]
    clip_norm: Option<f64>,

    /// Disable flip and transpose augmentation
    #[arg(long)]
    no_augment: bool,

    /// Epochs between checkpoints (0 keeps only the final one)
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Trained checkpoint
    #[arg(long, conflicts_with = "bicubic", required_unless_present = "bicubic")]
    checkpoint: Option<PathBuf>,

    /// Score plain bicubic upscaling instead of a model
    #[arg(long)]
    bicubic: bool,

    /// Architecture the checkpoint must match
    #[arg(long)]
    config: Option<PathBuf>,

    /// Dataset directory, or a name under the data root
    #[arg(long)]
    dataset: String,

    /// Root holding benchmark sets
    #[arg(long, env = "SLWSR_DATA_ROOT")]
    data_root: Option<PathBuf>,

    /// Upscaling factor for bicubic mode, checked against the checkpoint otherwise
    #[arg(long)]
    scale: Option<usize>,

    /// Average over the eight flips and transposes
    #[arg(long)]
    ensemble: bool,

    /// Directory for report.csv and comparison crops
    #[arg(long)]
    out: Option<PathBuf>,

    /// Write a bicubic | output | ground-truth crop per image
    #[arg(long)]
    crops: bool,

    /// Images evaluated in parallel
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    /// PNG file or directory of PNGs
    #[arg(long)]
    input: PathBuf,

    /// Output directory
    #[arg(long)]
    output: PathBuf,

    #[arg(long)]
    ensemble: bool,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    model: ModelArgs,

    /// Widths to compare, one row each
    #[arg(long, value_delimiter = ',')]
    widths: Vec<usize>,

    /// Compare baseline, depth and width variants
    #[arg(long)]
    sweep: bool,

    /// HR reference width
    #[arg(long, default_value_t = 1280)]
    hr_width: usize,

    /// HR reference height
    #[arg(long, default_value_t = 720)]
    hr_height: usize,

    /// Print CSV instead of a table
    #[arg(long)]
    csv: bool,

    /// Also print every layer
    #[arg(long)]
    layers: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Only check this op or composite
    #[arg(long)]
    op: Option<String>,

    /// Negate the backward pass of this op to prove failures are caught
    #[arg(long, value_parser = parse_op_kind)]
    inject_fault: Option<OpKind>,

    #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
    eps: f64,

    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
}

fn parse_op_kind(s: &str) -> std::result::Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| format!("unknown op {s}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    info!("seed {}", cli.seed);
    match cli.command {
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Count(a) => cmd_count(a),
        Command::Gradcheck(a) => cmd_gradcheck(a, cli.seed),
    }
}

fn log_config(cfg: &ModelConfig) {
    for line in cfg.to_text().lines() {
        info!("config: {line}");
    }
}

fn cmd_train(a: TrainArgs, seed: u64) -> Result<u8> {
    let tcfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        patch: a.patch,
        steps_per_epoch: a.steps_per_epoch,
        halving_period: a.halving_period,
        seed,
        clip_norm: a.clip_norm,
        augment: !a.no_augment,
        checkpoint_every: a.checkpoint_every,
        ..Default::default()
    };
    tcfg.validate()?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if a.model.given() && a.model.resolve()? != *ck.model.config() {
                return Err(Error::config("--resume checkpoint does not match the given architecture"));
            }
            info!("resuming from {} at step {}", path.display(), ck.step);
            Trainer::resume(ck, tcfg.clone())?
        }
        None => Trainer::new(Model::new(a.model.resolve()?, seed)?, tcfg.clone())?,
    };
    log_config(trainer.model().config());
    info!("training: {tcfg:?}");
    info!("parameters: {}", trainer.model().num_params());
    let set = TrainingSet::load(&a.data, a.lr_data.as_deref(), trainer.model().scale(), tcfg.patch)?;
    info!("{} training images from {}", set.images.len(), a.data.display());
    let files = RunFiles { dir: a.out.clone() };
    let history = train_loop(&mut trainer, &set, a.steps, &files)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        info!("loss {:.5} -> {:.5} over {} steps", first.loss, last.loss, history.len());
    }
    println!("{}", files.final_checkpoint().display());
    Ok(0)
}

fn dataset_dir(name: &str, root: Option<&Path>) -> Result<PathBuf> {
    let direct = PathBuf::from(name);
    if direct.is_dir() {
        return Ok(direct);
    }
    match root {
        Some(root) => Ok(root.join(name)),
        None => Err(Error::data(format!(
            "dataset {name} is not a directory and SLWSR_DATA_ROOT is not set"
        ))),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<u8> {
    let (up, model_id): (Box<dyn Upscaler>, String) = if a.bicubic {
        (Box::new(Bicubic { scale: a.scale.unwrap_or(4) }), "bicubic".into())
    } else {
        let path = a.checkpoint.as_ref().expect("clap requires a checkpoint");
        let ck = checkpoint::load(path)?;
        let cfg = ck.model.config();
        if let Some(cpath) = &a.config {
            let text = fs::read_to_string(cpath).map_err(|e| Error::io(cpath, e))?;
            if ModelConfig::parse(&text)? != *cfg {
                return Err(Error::config(format!(
                    "checkpoint {} does not match architecture {}",
                    path.display(),
                    cpath.display()
                )));
            }
        }
        if let Some(s) = a.scale.filter(|&s| s != cfg.scale) {
            return Err(Error::config(format!("checkpoint is x{} but --scale {s} was given", cfg.scale)));
        }
        log_config(cfg);
        (Box::new(ck.model), file_stem(path))
    };
    let dir = dataset_dir(&a.dataset, a.data_root.as_deref())?;
    let files = dataset_files(&dir)?;
    let dataset = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| a.dataset.clone());
    info!("evaluating {} images of {dataset} with {model_id}", files.len());

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start {} workers: {e}", a.jobs)))?;
    let up = up.as_ref();
    let images = pool.install(|| {
        files
            .par_iter()
            .map(|p| evaluate_file(up, p, a.ensemble))
            .collect::<Result<Vec<_>>>()
    })?;
    let report = EvalReport {
        dataset,
        model_id,
        scale: up.scale(),
        ensemble: a.ensemble,
        images,
    };
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let csv = out.join("report.csv");
        fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
        if a.crops {
            for p in &files {
                let strip = comparison_strip(up, &read_png(p)?, a.ensemble, 96)?;
                write_png(&out.join(format!("{}_compare.png", file_stem(p))), &strip)?;
            }
        }
    }
    Ok(0)
}

fn cmd_infer(a: InferArgs) -> Result<u8> {
    let ck = checkpoint::load(&a.checkpoint)?;
    log_config(ck.model.config());
    let inputs = if a.input.is_dir() {
        list_pngs(&a.input)?
    } else {
        vec![a.input.clone()]
    };
    if inputs.is_empty() {
        warn!("no PNG images in {}", a.input.display());
    }
    let scale = ck.model.scale();
    for path in &inputs {
        let lr = read_png(path)?;
        let sr = upscale(&ck.model, &lr, a.ensemble)?;
        let out = a.output.join(format!("{}_x{scale}.png", file_stem(path)));
        write_png(&out, &sr)?;
        println!("{}", out.display());
    }
    Ok(0)
}

fn cmd_count(a: CountArgs) -> Result<u8> {
    let base = a.model.resolve()?;
    let configs: Vec<(String, ModelConfig)> = if a.sweep {
        vec![
            ("baseline b32".into(), ModelConfig::with_width(32)),
            ("depth variant b32".into(), ModelConfig::depth_variant(32)),
            ("width variant b16".into(), ModelConfig::with_width(16)),
            ("compressed b32".into(), ModelConfig::with_width(32).fully_compressed(base.expansion)),
        ]
    } else if !a.widths.is_empty() {
        a.widths
            .iter()
            .map(|&w| {
                (
                    format!("b{w}"),
                    ModelConfig {
                        n_feats: w,
                        ..base.clone()
                    },
                )
            })
            .collect()
    } else {
        log_config(&base);
        vec![(format!("b{}", base.n_feats), base)]
    };
    let reports = cost_sweep(&configs, a.hr_width, a.hr_height)?;
    for (r, (_, cfg)) in reports.iter().zip(&configs) {
        r.check_against(Model::<f32>::new(cfg.clone(), 0)?.params())?;
    }
    if a.layers {
        for r in &reports {
            print!("{}", if a.csv { r.to_csv() } else { r.to_table() });
        }
    }
    print!("{}", if a.csv { sweep_csv(&reports) } else { sweep_table(&reports) });
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs, seed: u64) -> Result<u8> {
    let cfg = GradcheckConfig {
        eps: a.eps,
        tolerance: a.tolerance,
        seed,
        fault: a.inject_fault,
        only: a.op,
    };
    if let Some(kind) = cfg.fault {
        warn!("fault injected: {kind} backward is negated");
    }
    let results = gradcheck::run(&cfg)?;
    for r in &results {
        info!(
            "{} [{}]: {} elements, max rel error {:.3e}",
            r.op, r.case, r.elements, r.max_rel_error
        );
    }
    let summary = gradcheck::summarize(&results);
    let width = summary.iter().map(|s| s.0.len()).max().unwrap_or(2);
    let mut failed = Vec::new();
    for (op, err, ok) in &summary {
        println!("{op:<width$}  max rel error {err:.3e}  {}", if *ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(*op);
        }
    }
    if failed.is_empty() {
        Ok(0)
    } else {
        eprintln!("gradient check failed for: {}", failed.join(", "));
        Ok(EXIT_GRADCHECK)
    }
}
