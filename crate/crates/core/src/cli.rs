//! Command-line front end. Every flag can also be set through an environment
//! variable with the `PROMPTSEG_` prefix (e.g. `PROMPTSEG_FOLD=2`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::check::{run_checks, CheckLevel, CheckOptions, Fault};
use crate::config::RunConfig;
use crate::data::{gen_synthetic_dataset, make_folds, Dataset};
use crate::error::{Error, Result};
use crate::eval::{cross_domain_eval, evaluate_fold, EvalReport, PipelineModel};
use crate::model::{base_vocab, Ablation, Pipeline};
use crate::train::{Checkpoint, Trainer, LATEST_CHECKPOINT};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_NUMERICAL: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "promptseg", version, about = "Few-shot segmentation with semantic and visual prompts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic shapes dataset.
    Synth(SynthArgs),
    /// Episodic training on one fold.
    Train(TrainArgs),
    /// Multi-seed evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Oracle and finite-difference self-checks.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, env = "PROMPTSEG_OUT")]
    pub out: PathBuf,
    /// Optional run config; its `[synth]` section is used.
    #[arg(long, env = "PROMPTSEG_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "PROMPTSEG_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "PROMPTSEG_SIZE")]
    pub size: Option<usize>,
    #[arg(long, env = "PROMPTSEG_PER_CLASS")]
    pub per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "PROMPTSEG_CONFIG")]
    pub config: PathBuf,
    #[arg(long, env = "PROMPTSEG_FOLD", default_value_t = 0)]
    pub fold: usize,
    #[arg(long, env = "PROMPTSEG_SEED")]
    pub seed: u64,
    #[arg(long, env = "PROMPTSEG_ABLATION")]
    pub ablation: Option<Ablation>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long, env = "PROMPTSEG_OUT")]
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long, env = "PROMPTSEG_RESUME")]
    pub resume: Option<PathBuf>,
    #[arg(long, env = "PROMPTSEG_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "PROMPTSEG_STEPS_PER_EPOCH")]
    pub steps_per_epoch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "PROMPTSEG_CONFIG")]
    pub config: PathBuf,
    #[arg(long, env = "PROMPTSEG_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "PROMPTSEG_FOLD", default_value_t = 0)]
    pub fold: usize,
    #[arg(long, env = "PROMPTSEG_K")]
    pub k: Option<usize>,
    /// Number of seeds; seeds run from `--seed` upwards.
    #[arg(long, env = "PROMPTSEG_SEEDS")]
    pub seeds: Option<usize>,
    #[arg(long, env = "PROMPTSEG_EPISODES")]
    pub episodes: Option<usize>,
    /// First evaluation seed.
    #[arg(long, env = "PROMPTSEG_SEED")]
    pub seed: u64,
    #[arg(long, env = "PROMPTSEG_ABLATION")]
    pub ablation: Option<Ablation>,
    /// Root of another dataset to evaluate on without fine-tuning.
    #[arg(long, env = "PROMPTSEG_CROSS_DOMAIN")]
    pub cross_domain: Option<PathBuf>,
    /// Write a per-episode CSV trace here.
    #[arg(long, env = "PROMPTSEG_TRACE")]
    pub trace: Option<PathBuf>,
    /// Report path (default: `eval_report.json` next to the checkpoint).
    #[arg(long, env = "PROMPTSEG_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, env = "PROMPTSEG_LEVEL", default_value = "quick")]
    pub level: CheckLevel,
    #[arg(long, env = "PROMPTSEG_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Corrupt the center-pivot kernel to confirm the oracle check fails.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_VALIDATION
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Check(a) => cmd_check(&a),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<u8> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?.synth,
        None => Default::default(),
    };
    if let Some(s) = a.size {
        cfg.image_size = s;
    }
    if let Some(n) = a.per_class {
        cfg.per_class = n;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let data = gen_synthetic_dataset(&cfg, &a.out, &mut rng)?;
    data.write()?;
    println!(
        "wrote {} classes x {} images at {}x{} to {}",
        cfg.classes.len(),
        cfg.per_class,
        cfg.image_size,
        cfg.image_size,
        a.out.display()
    );
    Ok(EXIT_OK)
}

fn load_config(path: &Path, ablation: Option<Ablation>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(ab) = ablation {
        cfg.apply_ablation(ab);
    }
    Ok(cfg)
}

fn open_dataset(cfg: &RunConfig, root: &Path, descriptions: Option<&Path>) -> Result<Dataset> {
    let default_desc = root.join(crate::data::meta::DESCRIPTIONS_FILE);
    Dataset::open(root, Some(descriptions.unwrap_or(&default_desc)), cfg.data.resolution)
}

pub fn cmd_train(a: &TrainArgs) -> Result<u8> {
    let mut cfg = load_config(&a.config, a.ablation)?;
    cfg.train.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.steps_per_epoch {
        cfg.train.steps_per_epoch = s;
    }
    cfg.validate()?;
    let out = a
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    let dataset = open_dataset(&cfg, &cfg.data.root, Some(&cfg.data.descriptions_path()))?;
    let fold = make_folds(&dataset.meta, a.fold)?;
    let (pipeline, mut trainer) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut pipeline = ckpt.to_pipeline()?;
            if let Some(ab) = a.ablation {
                pipeline.set_ablation(ab);
            }
            let trainer = Trainer::resume(cfg.train.clone(), &ckpt, Some(&out))?;
            log::info!("resuming at step {} (epoch {})", ckpt.step, ckpt.epoch);
            (pipeline, trainer)
        }
        None => {
            let pipeline = Pipeline::new(
                cfg.model.clone(),
                base_vocab(&dataset.classes),
                a.seed,
                candle_core::DType::F32,
            )?;
            (pipeline, Trainer::new(cfg.train.clone(), Some(&out))?)
        }
    };
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(&out, e))?;
    let history = trainer.run(&pipeline, &dataset, &fold)?;
    if let Some(last) = history.last() {
        println!(
            "trained to step {}: total {:.4} (text {:.4}, bce {:.4}, dice {:.4})",
            last.step, last.total, last.l_text, last.l_bce, last.l_dice
        );
    } else {
        println!("nothing to do: checkpoint already at epoch {}", cfg.train.epochs);
    }
    println!("checkpoint: {}", out.join(LATEST_CHECKPOINT).display());
    Ok(EXIT_OK)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<u8> {
    let mut cfg = load_config(&a.config, a.ablation)?;
    if let Some(k) = a.k {
        cfg.eval.k = k;
    }
    if let Some(s) = a.seeds {
        cfg.eval.seeds = s;
    }
    if let Some(n) = a.episodes {
        cfg.eval.episodes = n;
    }
    cfg.eval.base_seed = a.seed;
    cfg.validate()?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut pipeline = ckpt.to_pipeline()?;
    if let Some(ab) = a.ablation {
        pipeline.set_ablation(ab);
    }
    let snapshot = cfg.snapshot();
    let report: EvalReport = match &a.cross_domain {
        Some(root) => {
            let dataset = open_dataset(&cfg, root, None)?;
            let fold = make_folds(&dataset.meta, a.fold)?;
            let source = ckpt.dataset.clone().unwrap_or_else(|| "unknown".into());
            cross_domain_eval(&pipeline, &source, &dataset, &fold, &cfg.eval, snapshot)?
        }
        None => {
            let dataset = open_dataset(&cfg, &cfg.data.root, Some(&cfg.data.descriptions_path()))?;
            let fold = make_folds(&dataset.meta, a.fold)?;
            let mut model = PipelineModel::new(&pipeline);
            let mut r = evaluate_fold(&mut model, &dataset, &fold, &cfg.eval, snapshot)?;
            r.sem_emission_rate = model.sem_emission_rate();
            r
        }
    };
    let out = a.out.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("eval_report.json")
    });
    report.write_json(&out)?;
    if let Some(t) = &a.trace {
        report.write_trace_csv(t)?;
    }
    println!(
        "fold {} {}-shot: mIoU {:.4} over {} seeds ({} fallbacks) -> {}",
        report.fold,
        report.k,
        report.mean_miou,
        report.seeds.len(),
        report.fallback_events,
        out.display()
    );
    Ok(EXIT_OK)
}

pub fn cmd_check(a: &CheckArgs) -> Result<u8> {
    let opts = CheckOptions {
        level: a.level,
        fault: a.inject_fault.then_some(Fault::Cp4dSignFlip),
        seed: a.seed,
    };
    let report = run_checks(&opts)?;
    println!("{}", report.summary());
    Ok(if report.passed() { EXIT_OK } else { EXIT_NUMERICAL })
}
