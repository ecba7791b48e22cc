//! Command-line surface: dataset generation, staged training, evaluation,
//! attention export, and gradient verification.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error, 3 verification
//! failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::encoders::ModelParams;
use crate::export::{write_scores_csv, write_scores_svg};
use crate::fusion::{attention_profile, Strategy};
use crate::synth::{generate_dataset, Dataset, GenConfig, TaskKind, Vocab};
use crate::train::{
    gradcheck, run_eval, train_stage, write_eval_report, write_loss_csv, Stage, GRADCHECK_TOL,
};
use crate::volume::Volume;

const EXIT_OK: i32 = 0;
const EXIT_USAGE: i32 = 1;
const EXIT_RUNTIME: i32 = 2;
const EXIT_VERIFICATION: i32 = 3;

#[derive(Parser)]
#[command(
    name = "slicewise",
    about = "Text-guided dual 3D-2D volume pipeline: data, training, evaluation, attention export",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task dataset.
    GenData(GenDataArgs),
    /// Train one stage and write a checkpoint plus loss trace.
    Train(TrainArgs),
    /// Greedy-decode a dataset and write an evaluation report.
    Eval(EvalArgs),
    /// Export the attention profile of one volume and instruction.
    Score(ScoreArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Master generation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of samples to generate.
    #[arg(long)]
    n: usize,
    /// Output directory for volumes, manifest, and vocabulary.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Training stage; overrides the config file.
    #[arg(long)]
    stage: Option<String>,
    /// Fusion strategy; overrides the config file.
    #[arg(long)]
    strategy: Option<String>,
    /// Output directory for the checkpoint and loss trace.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or manifest path.
    #[arg(long)]
    data: PathBuf,
    /// Where the JSON-lines report goes.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to score with.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Volume file (MVOL, raw intensity values).
    #[arg(long)]
    volume: PathBuf,
    /// Instruction text, whitespace-separated words.
    #[arg(long)]
    instruction: String,
    /// Output directory for scores.csv and scores.svg.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Seed for the probe model and sample.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parse arguments from the process environment and run.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successes; real parse errors are
            // usage errors.
            let code = if err.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(CmdError { message, code }) => {
            eprintln!("error: {message}");
            code
        }
    }
}

struct CmdError {
    message: String,
    code: i32,
}

impl CmdError {
    fn usage(message: impl Into<String>) -> CmdError {
        CmdError { message: message.into(), code: EXIT_USAGE }
    }

    fn runtime(message: impl std::fmt::Display) -> CmdError {
        CmdError { message: message.to_string(), code: EXIT_RUNTIME }
    }
}

fn dispatch(command: Command) -> Result<i32, CmdError> {
    match command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Score(args) => cmd_score(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<i32, CmdError> {
    if args.n == 0 {
        return Err(CmdError::usage("n must be ≥ 1"));
    }
    if args.n % 2 != 0 {
        return Err(CmdError::usage("n must be even (samples come in pairs)"));
    }
    let desk = crate::encoders::ModelConfig::desk();
    let gen = GenConfig {
        n_samples: args.n,
        depth: desk.n,
        height: desk.h,
        width: desk.w,
        seed: args.seed,
    };
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CmdError::runtime(format!("cannot create {}: {e}", args.out.display())))?;
    let summary = generate_dataset(&gen, &args.out).map_err(CmdError::runtime)?;
    println!("wrote {} samples ({} volumes) to {}", summary.samples, summary.volumes, args.out.display());
    for (kind, count) in TaskKind::all().iter().zip(summary.per_kind) {
        println!("  {}: {count}", kind.as_str());
    }
    Ok(EXIT_OK)
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.jsonl")
    } else {
        data.to_owned()
    }
}

fn cmd_train(args: TrainArgs) -> Result<i32, CmdError> {
    let cfg = RunConfig::load(&args.config).map_err(CmdError::runtime)?;
    let stage = match &args.stage {
        Some(name) => Stage::parse(name)
            .ok_or_else(|| CmdError::usage(format!("unknown stage '{name}'")))?,
        None => cfg.stage.ok_or_else(|| {
            CmdError::usage("no stage given: pass --stage or set stage= in the config")
        })?,
    };
    let strategy = match &args.strategy {
        Some(name) => name
            .parse::<Strategy>()
            .map_err(|e| CmdError::usage(e.to_string()))?,
        None => cfg.strategy,
    };
    let data_dir = cfg.data_dir.as_ref().ok_or_else(|| {
        CmdError::usage("the config must set data_dir= for training")
    })?;
    let data = Dataset::load(&manifest_path(data_dir)).map_err(CmdError::runtime)?;

    let mut params = match &cfg.checkpoint {
        Some(path) => {
            let params = checkpoint::load(path).map_err(CmdError::runtime)?;
            if params.cfg() != &cfg.model {
                return Err(CmdError::runtime(format!(
                    "checkpoint {} was built for a different model configuration",
                    path.display()
                )));
            }
            params
        }
        None => ModelParams::init(cfg.model.clone(), cfg.seed).map_err(CmdError::runtime)?,
    };

    let mut tcfg = cfg.train_config(stage);
    tcfg.strategy = strategy;
    if args.stage.is_some() && cfg.epochs.is_none() {
        tcfg.epochs = stage.default_epochs();
    }
    let trace = train_stage(&data, &mut params, &tcfg).map_err(CmdError::runtime)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CmdError::runtime(format!("cannot create {}: {e}", args.out.display())))?;
    let ckpt_path = args.out.join("model.swcp");
    checkpoint::save(&params, &ckpt_path).map_err(CmdError::runtime)?;
    let loss_path = args.out.join("loss.csv");
    write_loss_csv(&loss_path, &trace).map_err(CmdError::runtime)?;

    let last = trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "{} ({strategy}) finished: {} steps, final loss {last:.6}",
        stage.as_str(),
        trace.len()
    );
    println!("checkpoint: {}", ckpt_path.display());
    println!("loss trace: {}", loss_path.display());
    Ok(EXIT_OK)
}

fn cmd_eval(args: EvalArgs) -> Result<i32, CmdError> {
    let cfg = RunConfig::load(&args.config).map_err(CmdError::runtime)?;
    let params = checkpoint::load(&args.checkpoint).map_err(CmdError::runtime)?;
    let data = Dataset::load(&manifest_path(&args.data)).map_err(CmdError::runtime)?;
    let records = run_eval(&data, &params, cfg.strategy).map_err(CmdError::runtime)?;
    write_eval_report(&args.report, &records).map_err(CmdError::runtime)?;
    for r in &records {
        println!(
            "{:8} {:9} {:8} {:6.2}  (n={})",
            r.task_kind.as_str(),
            r.format_kind.as_str(),
            r.metric,
            r.value,
            r.n_samples
        );
    }
    println!("report: {}", args.report.display());
    Ok(EXIT_OK)
}

fn cmd_score(args: ScoreArgs) -> Result<i32, CmdError> {
    let _cfg = RunConfig::load(&args.config).map_err(CmdError::runtime)?;
    let params = checkpoint::load(&args.checkpoint).map_err(CmdError::runtime)?;
    let cfg = params.cfg().clone();
    let raw = Volume::read_mvol(&args.volume).map_err(CmdError::runtime)?;
    let mut vol = raw.hu_window().map_err(CmdError::runtime)?;
    if vol.dims() != (cfg.n, cfg.h, cfg.w) {
        vol = vol.resize(cfg.n, cfg.h, cfg.w).map_err(CmdError::runtime)?;
    }

    let vocab = Vocab::builtin();
    let instruction = vocab
        .encode(&args.instruction)
        .map_err(CmdError::runtime)?;
    let scores = attention_profile(&params, &vol, &instruction).map_err(CmdError::runtime)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CmdError::runtime(format!("cannot create {}: {e}", args.out.display())))?;
    let csv_path = args.out.join("scores.csv");
    let svg_path = args.out.join("scores.svg");
    write_scores_csv(&csv_path, &scores).map_err(CmdError::runtime)?;
    write_scores_svg(&svg_path, &scores).map_err(CmdError::runtime)?;
    let peak = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    println!("{} slices scored; peak at slice {peak}", scores.len());
    println!("csv: {}", csv_path.display());
    println!("svg: {}", svg_path.display());
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32, CmdError> {
    let cfg = RunConfig::load(&args.config).map_err(CmdError::runtime)?;
    let report = gradcheck(&cfg.model, args.seed).map_err(CmdError::runtime)?;
    println!("checked {} parameter entries", report.checked);
    println!("max relative error: {:e}", report.max_rel_err);
    if let Some(worst) = &report.worst {
        println!("worst entry: {worst}");
    }
    if report.passed() {
        println!("pass (tolerance {GRADCHECK_TOL:e})");
        Ok(EXIT_OK)
    } else {
        eprintln!("verification failed: tolerance {GRADCHECK_TOL:e} exceeded");
        Ok(EXIT_VERIFICATION)
    }
}
