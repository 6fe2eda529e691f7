use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedpart::harness::{self, ExperimentConfig, Method};
use fedpart::metrics::{self, ReportEntry};
use fedpart::nets::Architecture;
use fedpart::synthdata;

#[derive(Parser)]
#[command(name = "fedpart", about = "Federated multi-region segmentation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-site dataset and its manifest.
    Generate(Common),
    /// Run one experiment.
    Run(Common),
    /// Run the architecture × method benchmark grid.
    Grid(Common),
    /// Re-run a stored run directory and compare; exits with status 1 on any difference.
    Replay { dir: PathBuf },
    /// Score a predicted label file against a ground-truth label file.
    Metrics { pred: PathBuf, gt: PathBuf },
}

fn load(common: &Common) -> fedpart::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> fedpart::Result<ExitCode> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = load(&c)?;
            let dir = out_dir(&cfg);
            let sites = synthdata::generate_cohort(&cfg.sites, cfg.seed)?;
            let m = synthdata::export_dataset(&dir, &sites, &cfg.sites, cfg.seed)?;
            println!("wrote {} samples to {}", m.entries.len(), dir.display());
        }
        Command::Run(c) => {
            let mut cfg = load(&c)?;
            cfg.out_dir = Some(out_dir(&cfg));
            let record = harness::run_experiment(&cfg)?;
            print!("{}", record.csv());
            println!(
                "best round {} (val dice {:.4}), test dice {:.4}; artifacts in {}",
                record.best_round,
                record.best_val_dice,
                record.test_dice(),
                out_dir(&cfg).display()
            );
        }
        Command::Grid(c) => {
            let mut cfg = load(&c)?;
            cfg.out_dir = Some(out_dir(&cfg));
            let archs = [Architecture::TinyUnet, Architecture::AttentionTinyUnet];
            let methods: Vec<Method> = harness::default_methods();
            let grid = harness::run_grid(&cfg, &archs, &methods)?;
            print!("{}", grid.csv());
            for (label, err) in grid.failures() {
                eprintln!("cell {label} failed: {err}");
            }
        }
        Command::Replay { dir } => {
            let verdict = harness::replay(&dir)?;
            println!("{}", verdict.to_string().trim_end());
            if !verdict.is_identical() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Metrics { pred, gt } => {
            let report = metrics::evaluate_files(&pred, &gt)?;
            let entry = ReportEntry {
                method: pred.display().to_string(),
                modality: "n/a".into(),
                report,
            };
            print!("{}", metrics::report_csv(&[entry]));
        }
    }
    Ok(ExitCode::SUCCESS)
}
