use std::path::PathBuf;
use std::process::ExitCode;

use calm_cli::commands::{cmd_eval, cmd_gen, cmd_sweep, cmd_train};
use calm_cli::error::{CliError, Result};
use calm_core::eval::{EvalConfig, NegativeSampling};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

/// Calibration metrics and margin regularizers for embedding spaces.
#[derive(Debug, Parser)]
#[command(name = "calm", version)]
struct Cli {
    /// Worker threads; defaults to the available cores. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log verbosity on standard error (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic embedding file from a JSON configuration.
    Gen {
        config: PathBuf,
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute OPIS, epsilon-OPIS and recall@k for an embedding file.
    Eval(EvalArgs),
    /// Train from a run configuration and write checkpoint, history and report.
    Train {
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate once per (m_plus, m_minus) pair, plus a baseline without CAM.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        m_plus: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        m_minus: Vec<f64>,
        /// Sweep CSV path; defaults to sweep.csv in the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Negatives {
    Sampled,
    Exhaustive,
}

#[derive(Debug, Args)]
struct EvalArgs {
    input: PathBuf,
    /// False-acceptance band `lo:hi` defining the calibration range.
    #[arg(long, default_value = "1e-2:1e-1")]
    far: String,
    #[arg(long, default_value_t = 512)]
    grid: usize,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// Percentages of worst-versus-best classes to compare.
    #[arg(long, value_delimiter = ',', default_value = "10,20,50")]
    epsilon: Vec<f64>,
    /// Negative pairs sampled per positive pair.
    #[arg(long, default_value_t = 10)]
    ratio: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "sampled")]
    negatives: Negatives,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    recall_k: Vec<usize>,
    /// Report JSON path; the report goes to standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Utility curves CSV path; defaults to `<out>` with a `.curves.csv` extension.
    #[arg(long)]
    curves: Option<PathBuf>,
}

impl EvalArgs {
    fn config(&self) -> Result<EvalConfig> {
        let (lo, hi) = self
            .far
            .split_once(':')
            .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
            .ok_or_else(|| CliError::InvalidConfig(format!("--far expects lo:hi, got {:?}", self.far)))?;
        Ok(EvalConfig {
            far_lo: lo,
            far_hi: hi,
            grid: self.grid,
            c: self.c,
            epsilon: self.epsilon.clone(),
            ratio: self.ratio,
            seed: self.seed,
            negatives: match self.negatives {
                Negatives::Sampled => NegativeSampling::Sampled,
                Negatives::Exhaustive => NegativeSampling::Exhaustive,
            },
            recall_k: self.recall_k.clone(),
        })
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::InvalidConfig(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Gen { config, output, seed } => {
            println!("{}", cmd_gen(&config, &output, seed)?);
        }
        Command::Eval(args) => {
            let cfg = args.config()?;
            let curves = args.curves.clone().or_else(|| args.out.as_ref().map(|o| o.with_extension("curves.csv")));
            let report = cmd_eval(&args.input, &cfg, args.out.as_deref(), curves.as_deref())?;
            if args.out.is_some() {
                let summary = json!({
                    "recall1": report.recall_at(1),
                    "opis": report.opis,
                    "epsilon_opis": report.epsilon_opis,
                });
                println!("{summary}");
            } else {
                print!("{}", report.to_json());
            }
        }
        Command::Train { config, out_dir, seed } => {
            println!("{}", cmd_train(&config, out_dir.as_deref(), seed)?);
        }
        Command::Sweep {
            config,
            m_plus,
            m_minus,
            out,
            seed,
        } => {
            let rows = cmd_sweep(&config, &m_plus, &m_minus, out.as_deref(), seed)?;
            println!("{}", json!({ "rows": rows }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
