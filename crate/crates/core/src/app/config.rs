//! Flat TOML experiment configuration and grid expansion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{ContinualSetup, DealProtocol, Method};
use crate::retention::DEFAULT_SIGMA0_SQ;
use crate::tasks::SequenceSpec;
use crate::training::{Architecture, OptimizerKind, PipelineInput, TrainConfig, TrainError, UpdateStrategy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config does not parse: {0}")]
    Parse(String),
    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Every key is optional except `name`; lists define the grid axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub rank: Vec<usize>,
    pub strategy: Vec<UpdateStrategy>,
    /// 1-based task orders; an empty list means generation order only.
    pub orders: Vec<Vec<usize>>,

    pub task_count: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub classes_per_task: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub similarity: f64,
    pub noise_std: f64,

    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub pipeline_input: PipelineInput,

    pub backbone_std: f64,
    pub retention_layers: usize,
    /// 0 means one kernel per adapter column.
    pub kernels: usize,
    pub sigma0_sq: f64,
    pub updater_depth: usize,
    pub deal_protocol: DealProtocol,
    pub token_mode: bool,

    pub output_dir: String,
    /// Worker threads; 0 picks the number of cores.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let seq = SequenceSpec::default();
        let train = TrainConfig::default();
        let setup = ContinualSetup::default();
        Self {
            name: String::new(),
            methods: Method::ALL.to_vec(),
            seeds: vec![0],
            a: vec![train.a],
            b: vec![train.b],
            rank: vec![setup.rank],
            strategy: vec![train.update_strategy],
            orders: Vec::new(),
            task_count: seq.task_count,
            input_dim: seq.input_dim,
            output_dim: seq.output_dim,
            classes_per_task: seq.classes_per_task,
            train_samples: seq.train_samples,
            test_samples: seq.test_samples,
            similarity: seq.similarity,
            noise_std: seq.noise_std,
            lambda1: train.lambda1,
            lambda2: train.lambda2,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            batch_size: train.batch_size,
            optimizer: train.optimizer,
            pipeline_input: train.pipeline_input,
            backbone_std: setup.backbone_std,
            retention_layers: 1,
            kernels: 0,
            sigma0_sq: DEFAULT_SIGMA0_SQ,
            updater_depth: 1,
            deal_protocol: setup.deal_protocol,
            token_mode: false,
            output_dir: "deal-out".into(),
            threads: 0,
        }
    }
}

/// One (method, hyperparameter, order, seed) job of the grid. Fields that
/// do not affect a baseline are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub method: Method,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub strategy: Option<UpdateStrategy>,
    pub rank: usize,
    pub order: Vec<usize>,
    pub seed: u64,
}

impl Cell {
    pub fn label(&self) -> String {
        let mut s = format!("cell {} [{} rank={} seed={}", self.index, self.method.name(), self.rank, self.seed);
        if let (Some(a), Some(b), Some(st)) = (self.a, self.b, self.strategy) {
            s += &format!(" a={a} b={b} strategy={}", st.name());
        }
        if !self.order.is_empty() {
            s += &format!(" order={:?}", self.order);
        }
        s + "]"
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub cells: Vec<Cell>,
    /// (a, b) pairs dropped because a < b.
    pub skipped: Vec<(f64, f64)>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must be a non-empty string"));
        }
        for (key, empty) in [
            ("methods", self.methods.is_empty()),
            ("seeds", self.seeds.is_empty()),
            ("a", self.a.is_empty()),
            ("b", self.b.is_empty()),
            ("rank", self.rank.is_empty()),
            ("strategy", self.strategy.is_empty()),
        ] {
            if empty {
                return Err(invalid(key, "list must not be empty"));
            }
        }
        if let Some(v) = self.a.iter().chain(&self.b).find(|v| !(**v >= 1.0 && v.is_finite())) {
            return Err(invalid(if self.a.contains(v) { "a" } else { "b" }, format!("order {v} must be >= 1")));
        }
        if self.valid_orders().is_empty() {
            return Err(invalid("a", "every (a, b) pair violates a >= b"));
        }
        let max_rank = crate::lora::max_rank(self.output_dim, self.input_dim);
        if let Some(r) = self.rank.iter().find(|&&r| r == 0 || r > max_rank) {
            return Err(invalid("rank", format!("{r} outside 1..={max_rank}")));
        }
        if self.retention_layers == 0 {
            return Err(invalid("retention_layers", "must be at least 1"));
        }
        if self.updater_depth == 0 {
            return Err(invalid("updater_depth", "must be at least 1"));
        }
        if let Some(r) = self.rank.iter().find(|&&r| self.kernels > r) {
            return Err(invalid("kernels", format!("{} kernels exceed rank {r}", self.kernels)));
        }
        if !(self.sigma0_sq > 0.0 && self.sigma0_sq.is_finite()) {
            return Err(invalid("sigma0_sq", "must be positive"));
        }
        if !(self.backbone_std >= 0.0 && self.backbone_std.is_finite()) {
            return Err(invalid("backbone_std", "must be finite and >= 0"));
        }
        for order in self.orders_or_identity() {
            self.sequence_spec(&order, 0).validate().map_err(|e| {
                let key = match e {
                    crate::tasks::TasksError::InvalidPermutation(..) => "orders",
                    _ => "task_count",
                };
                invalid(key, e.to_string())
            })?;
        }
        let probe = self.train_config(self.valid_orders()[0], UpdateStrategy::AOnly, 0);
        probe.validate().map_err(|e| match e {
            TrainError::InvalidConfig(m) => invalid(m.split(' ').next().unwrap_or("train"), m.clone()),
            other => invalid("train", other.to_string()),
        })?;
        Ok(())
    }

    /// (a, b) pairs honoring `a >= b`, in grid order.
    pub fn valid_orders(&self) -> Vec<(f64, f64)> {
        self.a
            .iter()
            .flat_map(|&a| self.b.iter().map(move |&b| (a, b)))
            .filter(|(a, b)| a >= b)
            .collect()
    }

    fn orders_or_identity(&self) -> Vec<Vec<usize>> {
        if self.orders.is_empty() {
            vec![Vec::new()]
        } else {
            self.orders.clone()
        }
    }

    pub fn expand(&self) -> Grid {
        let skipped = self
            .a
            .iter()
            .flat_map(|&a| self.b.iter().map(move |&b| (a, b)))
            .filter(|(a, b)| a < b)
            .collect();
        let pairs = self.valid_orders();
        let mut cells = Vec::new();
        let mut push = |method, ab: Option<(f64, f64)>, strategy, rank, order: &Vec<usize>, seed| {
            cells.push(Cell {
                index: cells.len(),
                method,
                a: ab.map(|p| p.0),
                b: ab.map(|p| p.1),
                strategy,
                rank,
                order: order.clone(),
                seed,
            });
        };
        for &seed in &self.seeds {
            for order in self.orders_or_identity() {
                for &rank in &self.rank {
                    for &method in &self.methods {
                        if method == Method::Deal {
                            for &ab in &pairs {
                                for &st in &self.strategy {
                                    push(method, Some(ab), Some(st), rank, &order, seed);
                                }
                            }
                        } else {
                            push(method, None, None, rank, &order, seed);
                        }
                    }
                }
            }
        }
        Grid { cells, skipped }
    }

    pub fn sequence_spec(&self, order: &[usize], seed: u64) -> SequenceSpec {
        SequenceSpec {
            task_count: self.task_count,
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            classes_per_task: self.classes_per_task,
            train_samples: self.train_samples,
            test_samples: self.test_samples,
            similarity: self.similarity,
            noise_std: self.noise_std,
            order: order.to_vec(),
            seed,
        }
    }

    pub fn train_config(&self, (a, b): (f64, f64), strategy: UpdateStrategy, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            a,
            b,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            optimizer: self.optimizer,
            update_strategy: strategy,
            pipeline_input: self.pipeline_input,
        }
    }

    pub fn setup(&self, rank: usize) -> ContinualSetup {
        ContinualSetup {
            rank,
            backbone_std: self.backbone_std,
            architecture: Architecture {
                retention_layers: self.retention_layers,
                kernels: (self.kernels > 0).then_some(self.kernels),
                sigma0_sq: self.sigma0_sq,
                updater_depth: self.updater_depth,
                ..Architecture::default()
            },
            deal_protocol: self.deal_protocol,
            token_mode: self.token_mode,
        }
    }

    /// Effective settings of one cell. Baselines use the first valid (a, b)
    /// pair, which they ignore.
    pub fn cell_settings(&self, cell: &Cell) -> (SequenceSpec, TrainConfig, ContinualSetup) {
        let ab = match (cell.a, cell.b) {
            (Some(a), Some(b)) => (a, b),
            _ => self.valid_orders()[0],
        };
        (
            self.sequence_spec(&cell.order, cell.seed),
            self.train_config(ab, cell.strategy.unwrap_or_default(), cell.seed),
            self.setup(cell.rank),
        )
    }
}
