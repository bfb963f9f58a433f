use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use incrseg_core::data::{holdout_split, save_dataset, synth_dataset, DatasetManifest, IrLabel, SynthSpec};
use incrseg_core::experiment::{self, DatasetSource, ExperimentConfig, PRESETS};
use incrseg_core::report;
use incrseg_core::trainer::Strategy;
use incrseg_core::Error;

const OUT_ENV: &str = "INCRSEG_OUT";

#[derive(Parser)]
#[command(name = "incrseg", version, about = "Class-incremental segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every (split, seed, strategy) cell of an experiment.
    Run(RunArgs),
    /// Summary table and box plots for a run directory.
    Report {
        dir: PathBuf,
    },
    /// Print the volume partition of a holdout and IR as JSON.
    Split {
        #[arg(long)]
        holdout: u32,
        #[arg(long)]
        ir: IrLabel,
    },
    /// Write the synthetic dataset to disk as .npy slices.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        volumes: usize,
        #[arg(long, default_value_t = 8)]
        slices: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.4)]
        spacing: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named experiment grid (default: paper-table2-desk).
    #[arg(long)]
    preset: Option<String>,
    /// `synthetic` or a dataset directory.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, value_delimiter = ',')]
    holdout: Vec<u32>,
    #[arg(long, value_delimiter = ',')]
    ir: Vec<IrLabel>,
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<Strategy>,
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory; the INCRSEG_OUT environment variable takes precedence.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved plan and exit without writing anything.
    #[arg(long)]
    dry_run: bool,
    /// Skip cells whose checkpoint and outcome already exist.
    #[arg(long)]
    resume: bool,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Usage(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn resolve(args: &RunArgs) -> Result<(ExperimentConfig, String), Failure> {
    let (mut cfg, text) = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
            (ExperimentConfig::parse(&text)?, text)
        }
        (None, preset) => {
            let name = preset.as_deref().unwrap_or(PRESETS[0]);
            let cfg = ExperimentConfig::preset(name)?;
            let text = cfg.to_toml()?;
            (cfg, text)
        }
    };
    match args.dataset.as_deref() {
        None => {}
        Some("synthetic") => {
            cfg.dataset.source = DatasetSource::Synthetic;
            cfg.dataset.path = None;
        }
        Some(path) => {
            cfg.dataset.source = DatasetSource::Directory;
            cfg.dataset.path = Some(PathBuf::from(path));
        }
    }
    if !args.holdout.is_empty() {
        cfg.split.holdouts = args.holdout.clone();
    }
    if !args.ir.is_empty() {
        cfg.split.irs = args.ir.clone();
    }
    if !args.strategy.is_empty() {
        cfg.strategies = args.strategy.clone();
    }
    if !args.seed.is_empty() {
        cfg.seeds = args.seed.clone();
    }
    if let Some(out) = std::env::var_os(OUT_ENV).map(PathBuf::from).or_else(|| args.out.clone()) {
        cfg.out = out;
    }
    cfg.validate()?;
    Ok((cfg, text))
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let (cfg, text) = resolve(&args)?;
    if args.dry_run {
        print!("{}", experiment::plan(&cfg)?);
        return Ok(());
    }
    let summary = experiment::run(&cfg, &text, args.resume)?;
    log::info!("trained {} models, resumed {}", summary.trained, summary.resumed);
    if !summary.metrics.is_empty() {
        let out = report::report(&cfg.out)?;
        print!("{}", out.text);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::Report { dir } => {
            let out = report::report(&dir)?;
            print!("{}", out.text);
            Ok(())
        }
        Command::Split { holdout, ir } => {
            println!("{}", holdout_split(holdout, ir)?.to_json()?);
            Ok(())
        }
        Command::Synth {
            out,
            seed,
            volumes,
            slices,
            size,
            spacing,
        } => {
            let spec = SynthSpec {
                seed,
                n_volumes: volumes,
                slices_per_volume: slices,
                image_size: size,
            };
            let records = synth_dataset(&spec)?;
            let manifest = DatasetManifest {
                classes: records.iter().flat_map(|r| r.class_set.iter().copied()).chain([0]).collect(),
                spacing_mm: spacing,
                volume_count: volumes,
            };
            if !(spacing > 0.0) {
                return Err(Failure::Config("--spacing must be positive".into()));
            }
            save_dataset(&out, &records, &manifest)?;
            println!("wrote {} slices to {}", records.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
