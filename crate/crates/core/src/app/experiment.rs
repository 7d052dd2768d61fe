//! Grid execution: one job per cell on a bounded worker pool, results
//! appended to a JSON Lines log in cell order by a single writer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::checkpoint::{save_checkpoint, Checkpoint, CheckpointError};
use super::config::{Cell, ConfigError, ExperimentConfig};
use crate::bench::{run_continual, BenchError, Method};
use crate::tasks::make_sequence;
use crate::training::{TrainError, UpdateStrategy};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{cell} failed: {source}")]
    Cell { cell: String, source: BenchError },
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl ExperimentError {
    /// 2 for configuration problems, 3 for everything found at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            _ => 3,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io(format!("{}: {e}", path.display()))
}

/// One line of `results.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub run: String,
    pub cell: usize,
    pub method: Method,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub strategy: Option<UpdateStrategy>,
    pub rank: usize,
    pub order: Vec<usize>,
    pub seed: u64,
    pub average_accuracy: f64,
    pub accuracy_matrix: Vec<Vec<Option<f64>>>,
    pub rouge1: Option<f64>,
    /// Last recorded training loss of each task.
    pub final_losses: Vec<Option<f64>>,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
    /// Everything needed to rerun this cell alone.
    pub config: serde_json::Value,
    pub wall_time_secs: f64,
}

pub fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

/// Runs one cell; with `checkpoint_dir`, also saves its trained state.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell, checkpoint_dir: Option<&Path>) -> Result<CellRecord, ExperimentError> {
    let (spec, train, setup) = cfg.cell_settings(cell);
    let fail = |source: BenchError| ExperimentError::Cell {
        cell: cell.label(),
        source,
    };
    let sequence = make_sequence(&spec).map_err(|e| fail(BenchError::Train(TrainError::InvalidConfig(e.to_string()))))?;
    let report = run_continual(cell.method, &sequence, &setup, &train).map_err(fail)?;
    let config = serde_json::json!({
        "method": cell.method,
        "sequence": spec,
        "train": train,
        "setup": setup,
    });
    let hash = config_hash(&config);
    if let Some(dir) = checkpoint_dir {
        let ckpt = Checkpoint {
            seed: cell.seed,
            config: config.to_string(),
            entries: report.final_state.clone(),
        };
        save_checkpoint(&dir.join(format!("cell-{:04}.ckpt", cell.index)), &ckpt)?;
    }
    Ok(CellRecord {
        run: cfg.name.clone(),
        cell: cell.index,
        method: cell.method,
        a: cell.a,
        b: cell.b,
        strategy: cell.strategy,
        rank: cell.rank,
        order: cell.order.clone(),
        seed: cell.seed,
        average_accuracy: report.average_accuracy,
        accuracy_matrix: report.accuracy_matrix,
        rouge1: report.rouge1,
        final_losses: report.loss_curves.iter().map(|c| c.last().copied()).collect(),
        config_hash: hash,
        config,
        wall_time_secs: report.wall_time_secs,
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub records: Vec<CellRecord>,
    /// (a, b) pairs dropped by the `a >= b` rule.
    pub skipped: Vec<(f64, f64)>,
    pub results_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Runs the whole grid into `out_dir` (created if missing).
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome, ExperimentError> {
    cfg.validate()?;
    let grid = cfg.expand();
    let cell_dir = out_dir.join("cells");
    let ckpt_dir = out_dir.join("checkpoints");
    for dir in [&cell_dir, &ckpt_dir] {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| ExperimentError::Io(format!("worker pool: {e}")))?;
    let results: Vec<Result<CellRecord, ExperimentError>> = pool.install(|| {
        grid.cells
            .par_iter()
            .map(|cell| {
                let rec = run_cell(cfg, cell, Some(&ckpt_dir))?;
                let path = cell_dir.join(format!("cell-{:04}.json", cell.index));
                let line = serde_json::to_string(&rec).map_err(|e| io_err(&path, e))?;
                fs::write(&path, line).map_err(|e| io_err(&path, e))?;
                Ok(rec)
            })
            .collect()
    });

    let results_path = out_dir.join(RESULTS_FILE);
    let mut log = fs::File::create(&results_path).map_err(|e| io_err(&results_path, e))?;
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        let rec = r?;
        let line = serde_json::to_string(&rec).map_err(|e| io_err(&results_path, e))?;
        writeln!(log, "{line}").map_err(|e| io_err(&results_path, e))?;
        records.push(rec);
    }

    let summary_path = out_dir.join(SUMMARY_FILE);
    fs::write(&summary_path, summary_table(&records)).map_err(|e| io_err(&summary_path, e))?;
    Ok(ExperimentOutcome {
        records,
        skipped: grid.skipped,
        results_path,
        summary_path,
    })
}

pub fn read_records(path: &Path) -> Result<Vec<CellRecord>, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| io_err(path, format!("line {}: {e}", i + 1))))
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| x.to_string())
}

/// method, strategy, a, b, rank, order
type GroupKey = (String, String, String, String, usize, String);

/// Mean and spread of AA over seeds for each distinct setting.
pub fn summary_table(records: &[CellRecord]) -> String {
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for r in records {
        let key = (
            r.method.name().to_string(),
            r.strategy.map_or("-", UpdateStrategy::name).to_string(),
            opt(r.a),
            opt(r.b),
            r.rank,
            if r.order.is_empty() { "-".into() } else { format!("{:?}", r.order) },
        );
        groups.entry(key).or_default().push(r.average_accuracy);
    }
    let mut out = format!(
        "{:<10} {:<8} {:>5} {:>5} {:>5} {:<14} {:>5} {:>8} {:>7} {:>8} {:>8}\n",
        "method", "strategy", "a", "b", "rank", "order", "seeds", "mean_aa", "std", "min", "max"
    );
    for ((method, strategy, a, b, rank, order), aa) in &groups {
        let n = aa.len() as f64;
        let mean = aa.iter().sum::<f64>() / n;
        let std = (aa.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let min = aa.iter().copied().fold(f64::INFINITY, f64::min);
        let max = aa.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            out,
            "{method:<10} {strategy:<8} {a:>5} {b:>5} {rank:>5} {order:<14} {:>5} {mean:>8.2} {std:>7.2} {min:>8.2} {max:>8.2}",
            aa.len()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::checkpoint::load_checkpoint;

    const SMALL: &str = r#"
        name = "small"
        methods = ["deal", "seq_lora"]
        a = [1.0, 10.0]
        b = [2.0]
        seeds = [1, 2]
        task_count = 2
        train_samples = 64
        test_samples = 32
        input_dim = 8
        output_dim = 4
        rank = [2]
        classes_per_task = 4
        learning_rate = 0.01
        optimizer = "adam"
        threads = 2
    "#;

    fn strip_time(text: &str) -> Vec<serde_json::Value> {
        text.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_time_secs");
                v
            })
            .collect()
    }

    #[test]
    fn grid_runs_and_reruns_identically() {
        let cfg = ExperimentConfig::parse(SMALL).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let out = run_experiment(&cfg, d1.path()).unwrap();
        assert_eq!(out.skipped, vec![(1.0, 2.0)]);
        assert_eq!(out.records.len(), 4);
        assert!(out.records.iter().enumerate().all(|(i, r)| r.cell == i));
        run_experiment(&cfg, d2.path()).unwrap();

        let t1 = fs::read_to_string(&out.results_path).unwrap();
        let t2 = fs::read_to_string(d2.path().join(RESULTS_FILE)).unwrap();
        assert_eq!(strip_time(&t1), strip_time(&t2));
        assert_eq!(read_records(&out.results_path).unwrap(), out.records);

        let rec = &out.records[0];
        assert_eq!(rec.config_hash, config_hash(&rec.config));
        assert_eq!(rec.config_hash.len(), 64);
        let ckpt = load_checkpoint(&d1.path().join("checkpoints/cell-0000.ckpt")).unwrap();
        assert_eq!(ckpt.seed, rec.seed);
        assert!(ckpt.get("adapter.a").is_some());

        let summary = fs::read_to_string(&out.summary_path).unwrap();
        assert!(summary.lines().count() == 3, "{summary}");
    }

    #[test]
    fn record_reproduces_in_isolation() {
        let cfg = ExperimentConfig::parse(SMALL).unwrap();
        let grid = cfg.expand();
        let a = run_cell(&cfg, &grid.cells[1], None).unwrap();
        let b = run_cell(&cfg, &grid.cells[1], None).unwrap();
        assert_eq!(a.average_accuracy.to_bits(), b.average_accuracy.to_bits());
        assert_eq!(a.accuracy_matrix, b.accuracy_matrix);
    }

    #[test]
    fn errors_map_to_exit_codes() {
        let cfg = ExperimentConfig::parse("name = \"x\"\n").unwrap();
        let bad = ExperimentConfig { a: vec![1.0], b: vec![5.0], ..cfg };
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run_experiment(&bad, dir.path()).unwrap_err().exit_code(), 2);
    }
}
