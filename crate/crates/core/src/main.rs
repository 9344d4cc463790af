use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eigenritz::config::ExperimentConfig;
use eigenritz::driver::{
    parse_series, run_approx_study, run_compare_penalty, run_diagnose, run_reference, run_solve,
    Construction,
};

/// Variational eigensolver for Schrödinger operators with exact Dirichlet
/// boundary enforcement.
#[derive(Parser)]
#[command(name = "eigenritz", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the first K eigenpairs described by a config file.
    Solve {
        /// Experiment configuration (TOML).
        #[arg(long)]
        config: PathBuf,
    },
    /// Emit the spectral reference eigenvalues as CSV.
    Reference {
        #[arg(long)]
        config: PathBuf,
        /// How many eigenvalues to list (defaults to run.eigencount).
        #[arg(long)]
        count: Option<usize>,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep a constructive two-layer approximation over network widths.
    ApproxStudy {
        /// Series file: one `k1 … kd coefficient` line per term.
        #[arg(long)]
        series: PathBuf,
        /// maurey | relu | softplus.
        #[arg(long)]
        construction: String,
        /// Barron-space order s of the construction.
        #[arg(long, default_value_t = 3.0)]
        order: f64,
        /// Comma-separated list of widths m.
        #[arg(long, default_value = "8,16,32,64,128,256,512")]
        m: String,
        /// Seeds per width.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the exact-BC run against a boundary-penalty γ sweep.
    ComparePenalty {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated penalty weights.
        #[arg(long, default_value = "100,500,2000,10000")]
        gammas: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run diagnostics on a persisted run directory.
    Diagnose {
        #[arg(long)]
        run: PathBuf,
    },
}

fn emit(out: Option<PathBuf>, contents: &str) -> Result<(), String> {
    match out {
        Some(path) => std::fs::write(&path, contents)
            .map_err(|e| format!("writing {}: {e}", path.display())),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|t| t.trim().parse::<T>().map_err(|e| format!("bad {what} entry {t:?}: {e}")))
        .collect()
}

fn run() -> Result<(), String> {
    let cli = Cli::parse();
    match cli.command {
        Command::Solve { config } => {
            let cfg = ExperimentConfig::load(&config).map_err(|e| e.to_string())?;
            let dir = run_solve(&cfg).map_err(|e| e.to_string())?;
            println!("run directory: {}", dir.display());
            let results = std::fs::read_to_string(dir.join("results.csv"))
                .map_err(|e| e.to_string())?;
            print!("{results}");
            Ok(())
        }
        Command::Reference { config, count, out } => {
            let cfg = ExperimentConfig::load(&config).map_err(|e| e.to_string())?;
            let count = count.unwrap_or(cfg.run.eigencount);
            let csv = run_reference(&cfg, count).map_err(|e| e.to_string())?;
            emit(out, &csv)
        }
        Command::ApproxStudy { series, construction, order, m, seeds, out } => {
            let text = std::fs::read_to_string(&series)
                .map_err(|e| format!("reading {}: {e}", series.display()))?;
            let u = parse_series(&text).map_err(|e| e.to_string())?;
            let construction = Construction::parse(&construction).map_err(|e| e.to_string())?;
            let ms: Vec<usize> = parse_list(&m, "width")?;
            let csv = run_approx_study(&u, construction, order, &ms, seeds)
                .map_err(|e| e.to_string())?;
            emit(out, &csv)
        }
        Command::ComparePenalty { config, gammas, out } => {
            let cfg = ExperimentConfig::load(&config).map_err(|e| e.to_string())?;
            let gammas: Vec<f64> = parse_list(&gammas, "gamma")?;
            let (csv, _) = run_compare_penalty(&cfg, &gammas).map_err(|e| e.to_string())?;
            emit(out, &csv)
        }
        Command::Diagnose { run } => {
            let (csv, summary, all_ok) = run_diagnose(&run).map_err(|e| e.to_string())?;
            let path = run.join("diagnostics.csv");
            std::fs::write(&path, &csv).map_err(|e| format!("writing {}: {e}", path.display()))?;
            print!("{summary}");
            if all_ok {
                println!("diagnostics: PASS ({})", path.display());
                Ok(())
            } else {
                Err("diagnostics: FAIL (asserted inequality violated)".into())
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
