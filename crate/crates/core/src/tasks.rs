//! Synthetic continual classification tasks.
//!
//! Task t labels Gaussian inputs with a hidden linear map that drifts from
//! task to task: `T_t = s T_{t-1} + (1 - s) F_t` with fresh Gaussian `F_t`.
//! Labels are the argmax of `L_t x + noise`, where `L_t` is `T_t` with its
//! rows orthonormalized so every class is equally likely.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{gaussian_matrix, DenseMatrix, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TasksError {
    #[error("invalid sequence spec: {0}")]
    InvalidSpec(String),
    #[error("order {0:?} is not a permutation of 1..={1}")]
    InvalidPermutation(Vec<usize>, usize),
}

const MAP_STREAM: u64 = 1_000;
const TRAIN_STREAM: u64 = 2_000;
const TEST_STREAM: u64 = 3_000;
const ATTEMPT_STRIDE: u64 = 100_000;
/// Redraws allowed when a split fails the class-balance audit.
const BALANCE_ATTEMPTS: u64 = 64;
/// Allowed relative deviation of any class count from a balanced split.
pub const BALANCE_TOLERANCE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceSpec {
    pub task_count: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub classes_per_task: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Weight of the previous task's map in the next one, in `[0, 1]`.
    pub similarity: f64,
    /// Label noise relative to the unit logit scale.
    pub noise_std: f64,

    /// 1-based task order; empty means generation order.
    pub order: Vec<usize>,
    pub seed: u64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            task_count: 3,
            input_dim: 16,
            output_dim: 8,
            classes_per_task: 4,
            train_samples: 512,
            test_samples: 256,
            similarity: 0.5,
            noise_std: 0.05,
            order: Vec::new(),
            seed: 0,
        }
    }
}

impl SequenceSpec {
    pub fn validate(&self) -> Result<(), TasksError> {
        let bad = |m: String| Err(TasksError::InvalidSpec(m));
        if self.task_count == 0 {
            return bad("task_count must be at least 1".into());
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.classes_per_task < 2 || self.classes_per_task > self.output_dim {
            return bad(format!(
                "classes_per_task {} must lie in 2..={}",
                self.classes_per_task, self.output_dim
            ));
        }
        if self.classes_per_task > self.input_dim {
            return bad("classes_per_task cannot exceed input_dim".into());
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return bad("sample counts must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.similarity) {
            return bad(format!("similarity {} outside [0, 1]", self.similarity));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and >= 0", self.noise_std));
        }
        self.resolved_order().map(|_| ())
    }

    /// 0-based task order.
    pub fn resolved_order(&self) -> Result<Vec<usize>, TasksError> {
        let t = self.task_count;
        if self.order.is_empty() {
            return Ok((0..t).collect());
        }
        let mut seen = vec![false; t];
        for &o in &self.order {
            if o == 0 || o > t || seen[o - 1] {
                return Err(TasksError::InvalidPermutation(self.order.clone(), t));
            }
            seen[o - 1] = true;
        }
        if self.order.len() != t {
            return Err(TasksError::InvalidPermutation(self.order.clone(), t));
        }
        Ok(self.order.iter().map(|o| o - 1).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    /// n x N inputs.
    pub q_train: DenseMatrix,
    /// m x N one-hot targets.
    pub g_train: DenseMatrix,
    pub q_test: DenseMatrix,
    pub g_test: DenseMatrix,
    pub class_count: usize,
    pub generator_seed: u64,
    /// Orthonormal-row labelling map (classes x n).
    pub label_map: DenseMatrix,
}

impl TaskDataset {
    pub fn train_labels(&self) -> Vec<usize> {
        labels_of(&self.g_train, self.class_count)
    }

    pub fn test_labels(&self) -> Vec<usize> {
        labels_of(&self.g_test, self.class_count)
    }
}

/// Index of the largest of the first `class_count` entries of column `j`;
/// ties go to the lowest index.
pub fn argmax_class(m: &DenseMatrix, j: usize, class_count: usize) -> usize {
    let mut best = 0;
    for k in 1..class_count.min(m.rows()) {
        if m.get(k, j) > m.get(best, j) {
            best = k;
        }
    }
    best
}

pub fn labels_of(m: &DenseMatrix, class_count: usize) -> Vec<usize> {
    (0..m.cols()).map(|j| argmax_class(m, j, class_count)).collect()
}

/// Percentage of columns of `pred` whose argmax matches `labels`.
pub fn accuracy(pred: &DenseMatrix, labels: &[usize], class_count: usize) -> f64 {
    assert_eq!(pred.cols(), labels.len(), "prediction count mismatch");
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(j, &l)| argmax_class(pred, *j, class_count) == l)
        .count();
    100.0 * hits as f64 / labels.len() as f64
}

/// Raw drifting maps `T_0 .. T_count-1`.
pub fn hidden_maps(spec: &SequenceSpec, count: usize, rng: &Rng) -> Vec<DenseMatrix> {
    let (k, n, s) = (spec.classes_per_task, spec.input_dim, spec.similarity);
    let mut maps: Vec<DenseMatrix> = Vec::with_capacity(count);
    for t in 0..count {
        let fresh = gaussian_matrix(k, n, 0.0, 1.0, &mut rng.fork(MAP_STREAM + t as u64));
        let next = match maps.last() {
            None => fresh,
            Some(prev) => prev.scale(s).add(&fresh.scale(1.0 - s)).expect("maps share a shape"),
        };
        maps.push(next);
    }
    maps
}

/// Modified Gram-Schmidt over rows.
fn orthonormal_rows(t: &DenseMatrix) -> DenseMatrix {
    let (k, n) = t.shape();
    let mut rows: Vec<Vec<f64>> = (0..k).map(|i| (0..n).map(|j| t.get(i, j)).collect()).collect();
    for i in 0..k {
        for p in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[p]).map(|(a, b)| a * b).sum();
            let prev = rows[p].clone();
            for (v, q) in rows[i].iter_mut().zip(&prev) {
                *v -= dot * q;
            }
        }
        let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "degenerate hidden map");
        rows[i].iter_mut().for_each(|v| *v /= norm);
    }
    DenseMatrix::from_rows(&rows)
}

fn sample_split(spec: &SequenceSpec, label_map: &DenseMatrix, count: usize, rng: &mut Rng) -> (DenseMatrix, DenseMatrix) {
    let q = gaussian_matrix(spec.input_dim, count, 0.0, 1.0, rng);
    let noise = gaussian_matrix(spec.classes_per_task, count, 0.0, spec.noise_std, rng);
    let logits = label_map.matmul(&q).expect("label map matches input dim").add(&noise).expect("same shape");
    let mut g = DenseMatrix::zeros(spec.output_dim, count);
    for j in 0..count {
        g.set(argmax_class(&logits, j, spec.classes_per_task), j, 1.0);
    }
    (q, g)
}

/// Worst relative deviation of a class count from `count / classes`.
pub fn class_imbalance(g: &DenseMatrix, classes: usize) -> f64 {
    let expect = g.cols() as f64 / classes as f64;
    let labels = labels_of(g, classes);
    (0..classes)
        .map(|c| (labels.iter().filter(|&&l| l == c).count() as f64 - expect).abs() / expect)
        .fold(0.0, f64::max)
}

/// Draws a split, redrawing on a fresh stream while the class balance audit
/// fails. Keeps the best draw if no attempt passes.
fn balanced_split(
    spec: &SequenceSpec,
    label_map: &DenseMatrix,
    count: usize,
    rng: &Rng,
    stream: u64,
) -> (DenseMatrix, DenseMatrix) {
    let mut best: Option<(f64, (DenseMatrix, DenseMatrix))> = None;
    for attempt in 0..BALANCE_ATTEMPTS {
        let split = sample_split(spec, label_map, count, &mut rng.fork(stream + attempt * ATTEMPT_STRIDE));
        let score = class_imbalance(&split.1, spec.classes_per_task);
        if score <= BALANCE_TOLERANCE {
            return split;
        }
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, split));
        }
    }
    best.expect("at least one attempt").1
}

/// Task `task_index` (generation order) of the sequence seeded by `rng`.
pub fn gen_task(spec: &SequenceSpec, task_index: usize, rng: &Rng) -> Result<TaskDataset, TasksError> {
    spec.validate()?;
    if task_index >= spec.task_count {
        return Err(TasksError::InvalidSpec(format!(
            "task {task_index} out of range for {} tasks",
            spec.task_count
        )));
    }
    let maps = hidden_maps(spec, task_index + 1, rng);
    let label_map = orthonormal_rows(&maps[task_index]);
    let t = task_index as u64;
    let (q_train, g_train) = balanced_split(spec, &label_map, spec.train_samples, rng, TRAIN_STREAM + t);
    let (q_test, g_test) = balanced_split(spec, &label_map, spec.test_samples, rng, TEST_STREAM + t);
    Ok(TaskDataset {
        name: format!("task{}", task_index + 1),
        q_train,
        g_train,
        q_test,
        g_test,
        class_count: spec.classes_per_task,
        generator_seed: rng.seed(),
        label_map,
    })
}

/// All tasks, arranged by `spec.order`.
pub fn make_sequence(spec: &SequenceSpec) -> Result<Vec<TaskDataset>, TasksError> {
    spec.validate()?;
    let rng = Rng::new(spec.seed);
    let mut tasks: Vec<Option<TaskDataset>> = (0..spec.task_count)
        .map(|t| gen_task(spec, t, &rng).map(Some))
        .collect::<Result<_, _>>()?;
    Ok(spec
        .resolved_order()?
        .into_iter()
        .map(|i| tasks[i].take().expect("permutation visits each task once"))
        .collect())
}

/// Task orders over four tasks, in the style of the usual
/// (DBpedia, Amazon, Yahoo, AG News) permutations.
pub const FOUR_TASK_ORDERS: [[usize; 4]; 3] = [[1, 2, 3, 4], [1, 2, 4, 3], [3, 2, 4, 1]];
