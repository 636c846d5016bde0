//! Command-line driver for longitudinal registration and response analysis.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use longreg::pipeline::{
    run_analyze, run_eval, run_phantom, run_register, EvalConfig, PhantomCmdConfig,
    PipelineConfig,
};
use longreg::{Error, Result};

#[derive(Parser)]
#[command(
    name = "longreg",
    version,
    about = "Deformable longitudinal CT registration and lesion response reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// Seed override
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Register the configured baseline/follow-up pair and write the fields
    Register(CommonArgs),
    /// Turn registration outputs into lesion statistics and reports
    Analyze(CommonArgs),
    /// Generate a synthetic phantom pair with known ground truth
    Phantom(CommonArgs),
    /// Compare an estimated field against a ground-truth field
    Eval(CommonArgs),
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn require_config<'a>(args: &'a CommonArgs, cmd: &str) -> Result<&'a PathBuf> {
    args.config
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{cmd} requires --config <path>")))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn pipeline_config(args: &CommonArgs, cmd: &str) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = load_json(require_config(args, cmd)?)?;
    if let Some(out) = &args.out {
        cfg.io.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.registration.seed = seed;
        cfg.analysis.fcm.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_register(args: &CommonArgs) -> Result<()> {
    let cfg = pipeline_config(args, "register")?;
    let result = run_register(&cfg)?;
    eprintln!(
        "registered pair in {:.1}s, outputs in {}",
        result.runtime_seconds,
        cfg.io.out_dir.display()
    );
    Ok(())
}

fn cmd_analyze(args: &CommonArgs) -> Result<()> {
    let cfg = pipeline_config(args, "analyze")?;
    let report = run_analyze(&cfg)?;
    eprintln!(
        "analyzed {} report rows, outputs in {}",
        report.rows.len(),
        cfg.io.out_dir.display()
    );
    Ok(())
}

fn cmd_phantom(args: &CommonArgs) -> Result<()> {
    let mut cfg: PhantomCmdConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => PhantomCmdConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.phantom.seed = seed;
    }
    let out = args
        .out
        .as_ref()
        .ok_or_else(|| Error::Config("phantom requires --out <dir>".into()))?;
    let outputs = run_phantom(&cfg, out)?;
    eprintln!(
        "phantom pair with {} tumour voxels written to {}",
        outputs.tumour_baseline.count_nonzero(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: &CommonArgs) -> Result<()> {
    let cfg: EvalConfig = load_json(require_config(args, "eval")?)?;
    let summary = run_eval(&cfg)?;
    let mut text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Numeric(format!("eval summary: {e}")))?;
    text.push('\n');
    print!("{text}");
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
        let path = out.join("eval.json");
        std::fs::write(&path, &text).map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let args = match &cli.command {
        Command::Register(a) | Command::Analyze(a) | Command::Phantom(a) | Command::Eval(a) => a,
    };
    init_threads(args.threads)?;
    match &cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Phantom(a) => cmd_phantom(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
