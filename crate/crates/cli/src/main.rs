use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uise::harness::{
    bench_timing, check_detect, emit_plot_data, horizons, run_experiment, simulate_truth, write_atomic,
    ExperimentConfig, HarnessError, NoiseRegime, RunArtifacts,
};

#[derive(Parser)]
#[command(name = "uise", about = "Moving-horizon unknown-input state estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the true trajectory and write truth.csv.
    Simulate(Common),
    /// Run every configured estimator and write the run artifacts.
    Estimate(Common),
    /// Per-step timing in both noise regimes.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Linear strong-detectability test and certificate falsifiers.
    CheckDetect(Common),
    /// Minimal horizons of the configured estimators.
    Horizon(Common),
    /// Long-format plot data from the artifacts in `--out` (or `run.out`).
    PlotData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_SOLVER: u8 = 2;
const EXIT_IO: u8 = 3;

fn load(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = load(&c)?;
            let truth = simulate_truth(&cfg, cfg.regime, cfg.seed)?;
            let mut buf = Vec::new();
            let path = cfg.out_dir.join("truth.csv");
            truth.write_csv(&mut buf, &cfg.labels).map_err(|e| HarnessError::io(&path, e))?;
            write_atomic(&path, &buf)?;
            for w in &truth.warnings {
                eprintln!("warning: {} left its domain at step {}", w.what, w.step);
            }
            println!("{}", path.display());
        }
        Command::Estimate(c) => {
            let cfg = load(&c)?;
            let art = run_experiment(&cfg)?;
            println!("{}", json(&art.summary));
            if art.failures_exceed(cfg.failure_threshold) {
                eprintln!("solver failures exceed {} of the steps", cfg.failure_threshold);
                return Ok(ExitCode::from(EXIT_SOLVER));
            }
        }
        Command::Bench { common, repeats } => {
            let cfg = load(&common)?;
            let regimes: &[NoiseRegime] = if cfg.seed.is_some() {
                &[NoiseRegime::Noiseless, NoiseRegime::Noisy]
            } else {
                eprintln!("no seed configured; timing the noiseless regime only");
                &[NoiseRegime::Noiseless]
            };
            let table = bench_timing(&cfg, regimes, repeats)?;
            table.write(&cfg.out_dir)?;
            print!("{}", table.to_markdown());
        }
        Command::CheckDetect(c) => {
            let cfg = load(&c)?;
            println!("{}", json(&check_detect(&cfg)?));
        }
        Command::Horizon(c) => {
            let cfg = load(&c)?;
            println!("{}", json(&horizons(&cfg)?));
        }
        Command::PlotData { config, out } => {
            let dir = match (out, config) {
                (Some(o), _) => o,
                (None, Some(c)) => ExperimentConfig::load(c)?.out_dir,
                (None, None) => return Err(HarnessError::Config("give --out or --config".into())),
            };
            let art = RunArtifacts::load(&dir)?;
            println!("{}", emit_plot_data(&art)?.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                HarnessError::Io { .. } => EXIT_IO,
                HarnessError::Config(_) | HarnessError::Model(_) => EXIT_CONFIG,
            })
        }
    }
}
