use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deal_core::app::{
    gradcheck_suite, read_records, run_experiment, summary_table, theorem1_samples, ExperimentConfig,
};
use deal_core::app::diagnostics::GRADCHECK_TOLERANCE;
use deal_core::grad::Primitive;

/// Environment variable that overrides `output_dir` from the config.
const OUT_DIR_ENV: &str = "DEAL_OUT_DIR";

#[derive(Parser)]
#[command(name = "deal", version, about = "Continual low-rank adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment grid.
    Run { config: PathBuf },
    /// Sample principal angles between clean and perturbed subspaces.
    Theorem1 {
        #[arg(long, default_value_t = 12)]
        n_x: usize,
        #[arg(long, default_value_t = 8)]
        r: usize,
        #[arg(long, default_value_t = 3)]
        rank_x: usize,
        /// Comma-separated noise standard deviations.
        #[arg(long, value_delimiter = ',', default_value = "0,0.5")]
        noise: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare reverse-mode gradients with finite differences on the full model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale the adjoint of this primitive (negative control).
        #[arg(long)]
        corrupt_adjoint: Option<String>,
    },
    /// Print the summary table of a results file.
    Report { results: PathBuf },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn run(path: PathBuf) -> ExitCode {
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => return fail(2, format!("{}: {e}", path.display())),
    };
    let cfg = match ExperimentConfig::parse(&text) {
        Ok(c) => c,
        Err(e) => return fail(2, e),
    };
    let out_dir = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from(&cfg.output_dir), PathBuf::from);
    for (a, b) in cfg.expand().skipped {
        eprintln!("skipping a = {a}, b = {b}: a must be >= b");
    }
    match run_experiment(&cfg, &out_dir) {
        Ok(out) => {
            print!("{}", std::fs::read_to_string(&out.summary_path).unwrap_or_default());
            eprintln!("{} records -> {}", out.records.len(), out.results_path.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.exit_code() as u8, e),
    }
}

fn theorem1(n_x: usize, r: usize, rank_x: usize, noise: &[f64], trials: usize, seed: u64) -> ExitCode {
    match theorem1_samples(n_x, r, rank_x, noise, trials, seed) {
        Ok(samples) => {
            for s in samples {
                println!("{}", serde_json::to_string(&s).expect("sample serializes"));
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(2, e),
    }
}

fn gradcheck(seed: u64, corrupt: Option<String>) -> ExitCode {
    let corrupt = match corrupt.as_deref().map(|n| (n, Primitive::from_name(n))) {
        None => None,
        Some((_, Some(p))) => Some(p),
        Some((name, None)) => {
            let known: Vec<_> = Primitive::ALL.iter().map(|p| p.name()).collect();
            return fail(2, format!("unknown primitive `{name}`; expected one of {}", known.join(", ")));
        }
    };
    let report = match gradcheck_suite(seed, corrupt) {
        Ok(r) => r,
        Err(e) => return fail(1, e),
    };
    println!("{:>4} {:>4} {:>6} {:>5} {:>7} {:>12}  worst parameter", "n", "r", "layers", "seed", "params", "rel_error");
    for c in &report.cases {
        println!(
            "{:>4} {:>4} {:>6} {:>5} {:>7} {:>12.3e}  {}[{}]",
            c.rows, c.rank, c.layers, c.seed, c.params, c.worst.max_relative_error, c.worst.parameter, c.worst.index
        );
    }
    let w = report.worst();
    println!(
        "worst offender: {}[{}] (n={} r={} layers={} seed={}) rel_error={:.3e} analytic={:e} numeric={:e}",
        w.worst.parameter, w.worst.index, w.rows, w.rank, w.layers, w.seed, w.worst.max_relative_error, w.worst.analytic, w.worst.numeric
    );
    if report.passed() {
        println!("gradcheck passed (tolerance {GRADCHECK_TOLERANCE:e})");
        ExitCode::SUCCESS
    } else {
        fail(1, format!("gradcheck failed: relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}", w.worst.max_relative_error))
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config } => run(config),
        Command::Theorem1 { n_x, r, rank_x, noise, trials, seed } => theorem1(n_x, r, rank_x, &noise, trials, seed),
        Command::Gradcheck { seed, corrupt_adjoint } => gradcheck(seed, corrupt_adjoint),
        Command::Report { results } => match read_records(&results) {
            Ok(records) => {
                print!("{}", summary_table(&records));
                ExitCode::SUCCESS
            }
            Err(e) => fail(3, e),
        },
    }
}
