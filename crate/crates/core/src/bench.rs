//! Continual-learning protocol runner and its metrics.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lora::{forward, FrozenBackbone, LoraAdapter};
use crate::numerics::{gaussian_matrix, DenseMatrix, Rng};
use crate::tasks::{accuracy, argmax_class, TaskDataset};
use crate::training::{
    initial_adapter, train_deal, train_seq_lora, Architecture, DealModel, TrainConfig, TrainError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("accuracy column {column} is incomplete")]
    IncompleteMatrix { column: usize },
    #[error("task sequence is empty")]
    EmptySequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Deal,
    SeqLora,
    PerTask,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Deal, Method::SeqLora, Method::PerTask];

    pub fn name(self) -> &'static str {
        match self {
            Method::Deal => "deal",
            Method::SeqLora => "seq_lora",
            Method::PerTask => "per_task",
        }
    }
}

/// How the DEAL pipeline is carried from one task to the next.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DealProtocol {
    /// Base factors stay those learned on the first task; the retention and
    /// updater learnables keep training across later tasks.
    #[default]
    CarryOver,
    /// Each later task materializes the previous adapter as the new frozen
    /// base and starts a fresh pipeline from identity.
    Rebase,
}

/// Model-side settings shared by every method of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinualSetup {
    pub rank: usize,
    /// Standard deviation of the frozen backbone's entries.
    pub backbone_std: f64,
    pub architecture: Architecture,
    pub deal_protocol: DealProtocol,
    /// Also score predictions as label-word token lists.
    pub token_mode: bool,
}

impl Default for ContinualSetup {
    fn default() -> Self {
        Self {
            rank: 4,
            backbone_std: 0.01,
            architecture: Architecture::default(),
            deal_protocol: DealProtocol::CarryOver,
            token_mode: false,
        }
    }
}

/// Frozen backbone for a run, keyed by the run seed only.
pub fn backbone_for(output_dim: usize, input_dim: usize, std: f64, seed: u64) -> FrozenBackbone {
    const BACKBONE_STREAM: u64 = 5_000;
    let mut rng = Rng::new(seed).fork(BACKBONE_STREAM);
    FrozenBackbone::new(gaussian_matrix(output_dim, input_dim, 0.0, std, &mut rng))
}

/// Protocol step reported to an observer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtocolEvent {
    /// Training on this task's data begins; earlier tasks' data is gone.
    Train(usize),
    /// Test-set evaluation of `task` after finishing `after`.
    Evaluate { task: usize, after: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    /// `accuracy_matrix[i][t]`: percent accuracy on task i after task t.
    pub accuracy_matrix: Vec<Vec<Option<f64>>>,
    pub average_accuracy: f64,
    pub rouge1: Option<f64>,
    pub loss_curves: Vec<Vec<f64>>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub wall_time_secs: f64,
    /// Named matrices of the final trained state, for checkpointing.
    #[serde(skip)]
    pub final_state: Vec<(String, DenseMatrix)>,
}

/// Mean of column `t - 1` (1-based task count `t`).
pub fn average_accuracy(matrix: &[Vec<Option<f64>>], t: usize) -> Result<f64, BenchError> {
    if t == 0 || matrix.len() < t {
        return Err(BenchError::IncompleteMatrix { column: t });
    }
    let mut sum = 0.0;
    for row in &matrix[..t] {
        sum += row
            .get(t - 1)
            .copied()
            .flatten()
            .ok_or(BenchError::IncompleteMatrix { column: t })?;
    }
    Ok(sum / t as f64)
}

/// Unigram F₁ with clipped (multiset) overlap counts.
pub fn rouge1<S: AsRef<str>>(pred: &[S], reference: &[S]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in reference {
        *counts.entry(tok.as_ref()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for tok in pred {
        if let Some(c) = counts.get_mut(tok.as_ref()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Label words a class is emitted as in token mode.
pub fn label_tokens(class: usize) -> Vec<String> {
    const WORDS: [&str; 8] = ["world", "sports", "business", "science", "health", "travel", "music", "film"];
    vec![
        "category".to_string(),
        WORDS.get(class).map_or_else(|| format!("class{class}"), |w| w.to_string()),
    ]
}

fn task_rouge(pred: &DenseMatrix, task: &TaskDataset) -> f64 {
    let labels = task.test_labels();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(j, &l)| rouge1(&label_tokens(argmax_class(pred, j, task.class_count)), &label_tokens(l)))
        .sum();
    total / labels.len() as f64
}

fn evaluate(backbone: &FrozenBackbone, adapter: &LoraAdapter, task: &TaskDataset) -> Result<f64, BenchError> {
    let pred = forward(backbone, adapter, &task.q_test).map_err(TrainError::from)?;
    Ok(accuracy(&pred, &task.test_labels(), task.class_count))
}

/// Trains `method` over `sequence` in order, filling the accuracy matrix
/// after each task.
pub fn run_continual(
    method: Method,
    sequence: &[TaskDataset],
    setup: &ContinualSetup,
    cfg: &TrainConfig,
) -> Result<RunReport, BenchError> {
    run_continual_observed(method, sequence, setup, cfg, &mut |_| {})
}

pub fn run_continual_observed(
    method: Method,
    sequence: &[TaskDataset],
    setup: &ContinualSetup,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(ProtocolEvent),
) -> Result<RunReport, BenchError> {
    let first = sequence.first().ok_or(BenchError::EmptySequence)?;
    cfg.validate()?;
    let started = Instant::now();
    let t_count = sequence.len();
    let backbone = backbone_for(first.g_train.rows(), first.q_train.rows(), setup.backbone_std, cfg.seed);
    let start = initial_adapter(&backbone, setup.rank, cfg.seed)?;

    let mut matrix = vec![vec![None; t_count]; t_count];
    let mut curves = Vec::with_capacity(t_count);
    // Adapter used to evaluate each task; only per_task keeps several.
    let mut adapters: Vec<LoraAdapter> = Vec::with_capacity(t_count);
    let mut current = start.clone();
    let mut deal: Option<DealModel> = None;

    for (t, task) in sequence.iter().enumerate() {
        observer(ProtocolEvent::Train(t));
        let curve = match method {
            Method::SeqLora => {
                let (ad, hist) = train_seq_lora(&backbone, &current, task, cfg)?;
                current = ad;
                hist
            }
            Method::PerTask => {
                let (ad, hist) = train_seq_lora(&backbone, &start, task, cfg)?;
                adapters.push(ad);
                hist
            }
            Method::Deal if t == 0 => {
                let (ad, hist) = train_seq_lora(&backbone, &current, task, cfg)?;
                current = ad;
                hist
            }
            Method::Deal => {
                let model = match (deal.take(), setup.deal_protocol) {
                    (Some(m), DealProtocol::CarryOver) => m,
                    _ => DealModel::new(backbone.clone(), current.clone(), cfg.update_strategy, &setup.architecture)?,
                };
                let (trained, hist) = train_deal(&model, task, cfg)?;
                current = trained.materialize()?;
                deal = Some(trained);
                hist
            }
        };
        curves.push(curve);
        for (i, done) in sequence.iter().enumerate().take(t + 1) {
            observer(ProtocolEvent::Evaluate { task: i, after: t });
            let ad = if method == Method::PerTask { &adapters[i] } else { &current };
            matrix[i][t] = Some(evaluate(&backbone, ad, done)?);
        }
    }

    let rouge = if setup.token_mode {
        let mut total = 0.0;
        for (i, task) in sequence.iter().enumerate() {
            let ad = if method == Method::PerTask { &adapters[i] } else { &current };
            let pred = forward(&backbone, ad, &task.q_test).map_err(TrainError::from)?;
            total += task_rouge(&pred, task);
        }
        Some(total / t_count as f64)
    } else {
        None
    };

    let mut final_state = Vec::new();
    let mut push_adapter = |prefix: String, ad: &LoraAdapter| {
        final_state.push((format!("{prefix}adapter.a"), ad.a().clone()));
        final_state.push((format!("{prefix}adapter.b"), ad.b().clone()));
    };
    if method == Method::PerTask {
        for (i, ad) in adapters.iter().enumerate() {
            push_adapter(format!("task{}.", i + 1), ad);
        }
    } else {
        push_adapter(String::new(), &current);
    }
    if let Some(model) = &deal {
        push_adapter("base.".into(), model.base());
        final_state.extend(model.params().iter().map(|p| (p.name.clone(), p.value.clone())));
    }

    Ok(RunReport {
        method,
        average_accuracy: average_accuracy(&matrix, t_count)?,
        accuracy_matrix: matrix,
        rouge1: rouge,
        loss_curves: curves,
        config: serde_json::json!({ "setup": setup, "train": cfg }),
        seed: cfg.seed,
        wall_time_secs: started.elapsed().as_secs_f64(),
        final_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{make_sequence, SequenceSpec};

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 2,
            seed,
            ..TrainConfig::default()
        }
    }

    fn spec(tasks: usize, seed: u64) -> SequenceSpec {
        SequenceSpec {
            task_count: tasks,
            train_samples: 128,
            test_samples: 64,
            seed,
            ..SequenceSpec::default()
        }
    }

    #[test]
    fn average_accuracy_examples() {
        let m = vec![
            vec![Some(95.0), Some(92.0), Some(90.0)],
            vec![None, Some(85.0), Some(80.0)],
            vec![None, None, Some(70.0)],
        ];
        assert_eq!(average_accuracy(&m, 3).unwrap(), 80.0);
        assert_eq!(average_accuracy(&[vec![Some(55.0)]], 1).unwrap(), 55.0);
        assert!(matches!(average_accuracy(&m, 4), Err(BenchError::IncompleteMatrix { .. })));
        let holed = vec![vec![Some(1.0), None], vec![None, Some(2.0)]];
        assert!(average_accuracy(&holed, 2).is_err());
    }

    /// Brute force: every pairing of equal tokens, maximal matching size.
    fn multiset_overlap(pred: &[&str], reference: &[&str]) -> usize {
        let mut used = vec![false; reference.len()];
        let mut n = 0;
        for p in pred {
            if let Some(k) = (0..reference.len()).find(|&k| !used[k] && reference[k] == *p) {
                used[k] = true;
                n += 1;
            }
        }
        n
    }

    #[test]
    fn rouge1_examples() {
        assert_eq!(rouge1(&["a", "b"], &["a", "b"]), 1.0);
        assert_eq!(rouge1(&["a", "b"], &["c", "d"]), 0.0);
        let (pred, reference) = (["a", "b", "b"], ["a", "b", "c"]);
        assert_eq!(multiset_overlap(&pred, &reference), 2);
        assert!((rouge1(&pred, &reference) - 2.0 / 3.0).abs() < 1e-12);
        let empty: [&str; 0] = [];
        assert_eq!(rouge1(&empty, &["a"]), 0.0);
        assert_eq!(rouge1(&["a"], &empty), 0.0);
    }

    #[test]
    fn single_task_methods_coincide() {
        let seq = make_sequence(&spec(1, 2)).unwrap();
        let setup = ContinualSetup::default();
        let reports: Vec<RunReport> = Method::ALL
            .iter()
            .map(|&m| run_continual(m, &seq, &setup, &quick_cfg(2)).unwrap())
            .collect();
        for r in &reports {
            assert_eq!(r.average_accuracy, r.accuracy_matrix[0][0].unwrap());
            assert_eq!(r.average_accuracy, reports[0].average_accuracy);
        }
    }

    #[test]
    fn matrix_is_lower_triangular_and_aa_recomputes() {
        let seq = make_sequence(&spec(3, 4)).unwrap();
        for method in Method::ALL {
            let r = run_continual(method, &seq, &ContinualSetup::default(), &quick_cfg(4)).unwrap();
            for (i, row) in r.accuracy_matrix.iter().enumerate() {
                for (t, cell) in row.iter().enumerate() {
                    assert_eq!(cell.is_some(), i <= t);
                    if let Some(v) = cell {
                        assert!((0.0..=100.0).contains(v));
                    }
                }
            }
            assert!((r.average_accuracy - average_accuracy(&r.accuracy_matrix, 3).unwrap()).abs() <= 1e-12);
            assert_eq!(r.loss_curves.len(), 3);
        }
    }

    #[test]
    fn protocol_never_revisits_training_data() {
        let seq = make_sequence(&spec(3, 5)).unwrap();
        for method in Method::ALL {
            let mut events = Vec::new();
            run_continual_observed(method, &seq, &ContinualSetup::default(), &quick_cfg(5), &mut |e| events.push(e)).unwrap();
            let trained: Vec<usize> = events
                .iter()
                .filter_map(|e| match e {
                    ProtocolEvent::Train(t) => Some(*t),
                    _ => None,
                })
                .collect();
            assert_eq!(trained, vec![0, 1, 2]);
            let mut latest = None;
            for e in &events {
                match *e {
                    ProtocolEvent::Train(t) => latest = Some(t),
                    ProtocolEvent::Evaluate { task, after } => {
                        assert_eq!(Some(after), latest);
                        assert!(task <= after);
                    }
                }
            }
        }
    }

    #[test]
    fn per_task_final_column_ignores_order() {
        let base = spec(3, 6);
        let forward_order = run_continual(Method::PerTask, &make_sequence(&base).unwrap(), &ContinualSetup::default(), &quick_cfg(6)).unwrap();
        let reversed = SequenceSpec {
            order: vec![3, 2, 1],
            ..base
        };
        let backward = run_continual(Method::PerTask, &make_sequence(&reversed).unwrap(), &ContinualSetup::default(), &quick_cfg(6)).unwrap();
        for i in 0..3 {
            assert_eq!(forward_order.accuracy_matrix[i][2], backward.accuracy_matrix[2 - i][2]);
        }
    }

    #[test]
    fn token_mode_reports_rouge() {
        let seq = make_sequence(&spec(2, 7)).unwrap();
        let setup = ContinualSetup {
            token_mode: true,
            ..ContinualSetup::default()
        };
        let r = run_continual(Method::SeqLora, &seq, &setup, &quick_cfg(7)).unwrap();
        let rouge = r.rouge1.unwrap();
        // A wrong label still shares the "category" token.
        assert!((0.5..=1.0).contains(&rouge));
        assert!(run_continual(Method::SeqLora, &seq, &ContinualSetup::default(), &quick_cfg(7)).unwrap().rouge1.is_none());
    }

    #[test]
    fn empty_sequence_is_rejected() {
        assert!(matches!(
            run_continual(Method::Deal, &[], &ContinualSetup::default(), &TrainConfig::default()),
            Err(BenchError::EmptySequence)
        ));
    }
}
