//! DEAL objective and training loop, the sequential and per-task LoRA
//! baselines, and a small SGD/Adam optimizer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{grad_of, gradients, leaves, GradError, ParamGroup, ParamSet, Tape, Var};
use crate::lora::{init_adapter, FrozenBackbone, LoraAdapter, LoraError};
use crate::numerics::{DenseMatrix, NumericsError, Rng};
use crate::retention::{Activation, RetentionError, WaveletBank, DEFAULT_SIGMA0_SQ};
use crate::tasks::TaskDataset;
use crate::updater::{UpdaterError, UpdaterNet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Retention(#[from] RetentionError),
    #[error(transparent)]
    Updater(#[from] UpdaterError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("regularization orders must satisfy a >= b, got a = {a}, b = {b}")]
    OrderConstraint { a: f64, b: f64 },
    #[error("loss became non-finite ({loss}) at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("empty dataset")]
    EmptyDataset,
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        Self::Grad(e.into())
    }
}

/// Which LoRA factor(s) the retention/updater pipeline rewrites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateStrategy {
    #[default]
    AOnly,
    BOnly,
    Both,
}

impl UpdateStrategy {
    pub const ALL: [UpdateStrategy; 3] = [UpdateStrategy::AOnly, UpdateStrategy::BOnly, UpdateStrategy::Both];

    pub fn updates_a(self) -> bool {
        matches!(self, UpdateStrategy::AOnly | UpdateStrategy::Both)
    }

    pub fn updates_b(self) -> bool {
        matches!(self, UpdateStrategy::BOnly | UpdateStrategy::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            UpdateStrategy::AOnly => "a_only",
            UpdateStrategy::BOnly => "b_only",
            UpdateStrategy::Both => "both",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// What the pipeline consumes on each batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PipelineInput {
    /// The frozen base factors, every batch.
    #[default]
    Original,
    /// The previous batch's output factors.
    Iterated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub a: f64,
    pub b: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub update_strategy: UpdateStrategy,
    pub pipeline_input: PipelineInput,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.001,
            a: 10.0,
            b: 2.0,
            learning_rate: 1e-3,
            epochs: 1,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            update_strategy: UpdateStrategy::AOnly,
            pipeline_input: PipelineInput::Original,
        }
    }
}

impl TrainConfig {
    /// Sets the regularization orders, enforcing `a >= b >= 1`.
    pub fn with_orders(mut self, a: f64, b: f64) -> Result<Self, TrainError> {
        self.a = a;
        self.b = b;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        for (name, v) in [("a", self.a), ("b", self.b)] {
            if !(v >= 1.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and >= 1"));
            }
        }
        if self.a < self.b {
            return Err(TrainError::OrderConstraint { a: self.a, b: self.b });
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate = {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Shape of the retention and updater networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub retention_layers: usize,
    /// Kernel count; `None` means one per adapter column.
    pub kernels: Option<usize>,
    pub sigma0_sq: f64,
    pub retention_activation: Activation,
    pub updater_depth: usize,
    pub updater_activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            retention_layers: 1,
            kernels: None,
            sigma0_sq: DEFAULT_SIGMA0_SQ,
            retention_activation: Activation::Tanh,
            updater_depth: 1,
            updater_activation: Activation::Identity,
        }
    }
}

/// One side (A or B) of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorPath {
    pub retention: WaveletBank,
    pub updater: UpdaterNet,
}

impl FactorPath {
    fn identity_init(rows: usize, rank: usize, arch: &Architecture) -> Result<Self, TrainError> {
        let kernels = arch.kernels.unwrap_or(rank);
        Ok(Self {
            retention: WaveletBank::identity_init(
                rows,
                rank,
                arch.retention_layers,
                kernels,
                arch.sigma0_sq,
                arch.retention_activation,
            )?,
            updater: UpdaterNet::identity_init(rows, arch.updater_depth, arch.updater_activation)?,
        })
    }

    fn push_params(&self, side: char, params: &mut ParamSet) -> Result<(), GradError> {
        self.retention.push_params(&format!("retention_{side}"), params)?;
        self.updater.push_params(&format!("updater_{side}"), params)
    }

    fn load_params(&mut self, side: char, params: &ParamSet) -> Result<(), TrainError> {
        self.retention.load_params(&format!("retention_{side}"), params)?;
        self.updater.load_params(&format!("updater_{side}"), params)?;
        Ok(())
    }

    /// `updater(retention(y))` with learnables taken from `vars`, or placed
    /// as constants when `vars` is `None`.
    fn on_tape(&self, side: char, tape: &mut Tape, y: Var, vars: Option<(&ParamSet, &[Var])>) -> Result<Var, TrainError> {
        let (rv, uv) = match vars {
            Some((params, v)) => (
                self.retention.lookup_vars(&format!("retention_{side}"), params, v)?,
                self.updater.lookup_vars(&format!("updater_{side}"), params, v)?,
            ),
            None => (self.retention.place_constants(tape), self.updater.place_constants(tape)),
        };
        let h = self.retention.forward_on_tape(tape, y, &rv)?;
        Ok(self.updater.forward_on_tape(tape, h, &uv)?)
    }
}

/// Frozen backbone and base adapter plus the learnable pipeline that maps
/// `(A, B)` to `(A', B')`. Inactive sides pass their factor through.
#[derive(Clone, Debug, PartialEq)]
pub struct DealModel {
    backbone: FrozenBackbone,
    base: LoraAdapter,
    path_a: Option<FactorPath>,
    path_b: Option<FactorPath>,
    strategy: UpdateStrategy,
}

impl DealModel {
    pub fn new(
        backbone: FrozenBackbone,
        base: LoraAdapter,
        strategy: UpdateStrategy,
        arch: &Architecture,
    ) -> Result<Self, TrainError> {
        if base.output_dim() != backbone.output_dim() || base.input_dim() != backbone.input_dim() {
            return Err(NumericsError::ShapeMismatch {
                op: "deal model",
                left: backbone.weight().shape(),
                right: (base.output_dim(), base.input_dim()),
            }
            .into());
        }
        let r = base.rank();
        let path_a = strategy
            .updates_a()
            .then(|| FactorPath::identity_init(base.output_dim(), r, arch))
            .transpose()?;
        let path_b = strategy
            .updates_b()
            .then(|| FactorPath::identity_init(base.input_dim(), r, arch))
            .transpose()?;
        Ok(Self {
            backbone,
            base,
            path_a,
            path_b,
            strategy,
        })
    }

    pub fn backbone(&self) -> &FrozenBackbone {
        &self.backbone
    }

    pub fn base(&self) -> &LoraAdapter {
        &self.base
    }

    pub fn strategy(&self) -> UpdateStrategy {
        self.strategy
    }

    pub fn path_a(&self) -> Option<&FactorPath> {
        self.path_a.as_ref()
    }

    pub fn path_b(&self) -> Option<&FactorPath> {
        self.path_b.as_ref()
    }

    /// Learnables of the active sides: θ₁ (retention) and θ₂ (updater).
    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        if let Some(path) = &self.path_a {
            path.push_params('a', &mut p).expect("names are unique per side");
        }
        if let Some(path) = &self.path_b {
            path.push_params('b', &mut p).expect("names are unique per side");
        }
        p
    }

    pub fn set_params(&mut self, params: &ParamSet) -> Result<(), TrainError> {
        if let Some(path) = &mut self.path_a {
            path.load_params('a', params)?;
        }
        if let Some(path) = &mut self.path_b {
            path.load_params('b', params)?;
        }
        Ok(())
    }

    /// Records `A'` and `B'` on `tape`.
    pub fn factors_on_tape(&self, tape: &mut Tape, vars: Option<(&ParamSet, &[Var])>) -> Result<(Var, Var), TrainError> {
        let a = tape.constant(self.base.a().clone());
        let b = tape.constant(self.base.b().clone());
        let a_new = match &self.path_a {
            Some(path) => path.on_tape('a', tape, a, vars)?,
            None => a,
        };
        let b_new = match &self.path_b {
            Some(path) => path.on_tape('b', tape, b, vars)?,
            None => b,
        };
        Ok((a_new, b_new))
    }

    /// `W Q + A' (B'ᵀ Q)`, the same arithmetic as [`crate::lora::forward`].
    pub fn predict_on_tape(&self, tape: &mut Tape, q: Var, vars: Option<(&ParamSet, &[Var])>) -> Result<Var, TrainError> {
        let (a_new, b_new) = self.factors_on_tape(tape, vars)?;
        let w = tape.constant(self.backbone.weight().clone());
        let base = tape.matmul(w, q)?;
        let bt = tape.transpose(b_new);
        let projected = tape.matmul(bt, q)?;
        let update = tape.matmul(a_new, projected)?;
        Ok(tape.add(base, update)?)
    }

    /// `(A', B')` from the current pipeline.
    pub fn factors(&self) -> Result<(DenseMatrix, DenseMatrix), TrainError> {
        let mut tape = Tape::new();
        let (a, b) = self.factors_on_tape(&mut tape, None)?;
        Ok((tape.value(a).clone(), tape.value(b).clone()))
    }

    /// Collapses the pipeline into a plain adapter for inference.
    pub fn materialize(&self) -> Result<LoraAdapter, TrainError> {
        let (a, b) = self.factors()?;
        Ok(crate::lora::materialize(a, b)?)
    }

    /// Pipeline forward, evaluated without materializing first.
    pub fn pipeline_forward(&self, q: &DenseMatrix) -> Result<DenseMatrix, TrainError> {
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let out = self.predict_on_tape(&mut tape, qv, None)?;
        Ok(tape.value(out).clone())
    }

    /// Replaces the frozen base factors.
    fn rebase(&mut self, adapter: LoraAdapter) {
        self.base = adapter;
    }
}

/// Sum over the parameters of `group` of `Σ |θ|^p`, recorded on `tape`.
fn group_penalty(tape: &mut Tape, params: &ParamSet, vars: &[Var], group: ParamGroup, p: f64) -> Result<Option<Var>, GradError> {
    let mut total: Option<Var> = None;
    for (param, &v) in params.iter().zip(vars) {
        if param.group != group {
            continue;
        }
        let term = tape.p_norm_pow(v, p)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total)
}

/// `MSE(W Q + A'(B'ᵀQ), G) + λ₁ Σ‖θ₁‖_a^a + λ₂ Σ‖θ₂‖_b^b` on `tape`.
pub fn deal_loss_on_tape(
    model: &DealModel,
    tape: &mut Tape,
    params: &ParamSet,
    vars: &[Var],
    q: &DenseMatrix,
    g: &DenseMatrix,
    cfg: &TrainConfig,
) -> Result<Var, TrainError> {
    let qv = tape.constant(q.clone());
    let gv = tape.constant(g.clone());
    let pred = model.predict_on_tape(tape, qv, Some((params, vars)))?;
    let mut loss = tape.mse(pred, gv)?;
    for (group, lambda, order) in [
        (ParamGroup::Retention, cfg.lambda1, cfg.a),
        (ParamGroup::Updater, cfg.lambda2, cfg.b),
    ] {
        if let Some(pen) = group_penalty(tape, params, vars, group, order)? {
            let scaled = tape.scale(pen, lambda);
            loss = tape.add(loss, scaled)?;
        }
    }
    Ok(loss)
}

pub fn deal_loss(model: &DealModel, q: &DenseMatrix, g: &DenseMatrix, cfg: &TrainConfig) -> Result<f64, TrainError> {
    cfg.validate()?;
    let params = model.params();
    let mut tape = Tape::new();
    let vars = leaves(&mut tape, &params);
    let loss = deal_loss_on_tape(model, &mut tape, &params, &vars, q, g, cfg)?;
    Ok(tape.scalar(loss))
}

/// First-order optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    moments: Option<(ParamSet, ParamSet)>,
    t: i32,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            moments: None,
            t: 0,
        }
    }

    /// One in-place update of `params` along `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        assert!(params.congruent(grads), "gradient does not match parameters");
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads.iter()) {
                    for (x, d) in p.value.as_mut_slice().iter_mut().zip(g.value.as_slice()) {
                        *x -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (m, v) = self.moments.get_or_insert_with(|| (params.zeros_like(), params.zeros_like()));
                self.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                let layers = params.iter_mut().zip(grads.iter()).zip(m.iter_mut().zip(v.iter_mut()));
                for ((p, g), (mp, vp)) in layers {
                    let slots = p
                        .value
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.value.as_slice())
                        .zip(mp.value.as_mut_slice().iter_mut().zip(vp.value.as_mut_slice()));
                    for ((x, &d), (mi, vi)) in slots {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * d;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * d * d;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *x -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Stateless single step, for callers without an optimizer in hand.
pub fn step(params: &ParamSet, grads: &ParamSet, cfg: &TrainConfig) -> ParamSet {
    let mut out = params.clone();
    Optimizer::new(cfg.optimizer, cfg.learning_rate).step(&mut out, grads);
    out
}

/// Mini-batch schedule: a seeded shuffle per epoch, split sequentially.
fn batches(samples: usize, cfg: &TrainConfig) -> Vec<Vec<usize>> {
    let rng = Rng::new(cfg.seed);
    let mut out = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = rng.fork(epoch as u64).permutation(samples);
        out.extend(order.chunks(cfg.batch_size).map(<[usize]>::to_vec));
    }
    out
}

fn check_dataset(ds: &TaskDataset) -> Result<(), TrainError> {
    if ds.q_train.cols() == 0 || ds.q_train.cols() != ds.g_train.cols() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(())
}

fn check_loss(step: usize, loss: f64) -> Result<(), TrainError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFiniteLoss { step, loss })
    }
}

/// Trains θ₁ and θ₂ with the backbone and base adapter frozen. Returns the
/// trained model and the per-step loss.
pub fn train_deal(model: &DealModel, dataset: &TaskDataset, cfg: &TrainConfig) -> Result<(DealModel, Vec<f64>), TrainError> {
    cfg.validate()?;
    check_dataset(dataset)?;
    let mut model = model.clone();
    let mut params = model.params();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut history = Vec::new();
    for (step, idx) in batches(dataset.q_train.cols(), cfg).into_iter().enumerate() {
        let q = dataset.q_train.select_columns(&idx);
        let g = dataset.g_train.select_columns(&idx);
        let mut tape = Tape::new();
        let vars = leaves(&mut tape, &params);
        let loss_var = deal_loss_on_tape(&model, &mut tape, &params, &vars, &q, &g, cfg)?;
        let loss = tape.scalar(loss_var);
        check_loss(step, loss)?;
        let grads = gradients(&tape, loss_var, &vars, &params)?;
        history.push(loss);
        opt.step(&mut params, &grads);
        model.set_params(&params)?;
        if cfg.pipeline_input == PipelineInput::Iterated {
            let next = model.materialize()?;
            model.rebase(next);
        }
    }
    Ok((model, history))
}

/// Plain MSE on `A`, `B` directly.
pub fn train_seq_lora(
    backbone: &FrozenBackbone,
    adapter: &LoraAdapter,
    dataset: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<(LoraAdapter, Vec<f64>), TrainError> {
    cfg.validate()?;
    check_dataset(dataset)?;
    let mut params = ParamSet::new();
    params.push("adapter.a", ParamGroup::Adapter, adapter.a().clone())?;
    params.push("adapter.b", ParamGroup::Adapter, adapter.b().clone())?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut history = Vec::new();
    for (step, idx) in batches(dataset.q_train.cols(), cfg).into_iter().enumerate() {
        let q = dataset.q_train.select_columns(&idx);
        let g = dataset.g_train.select_columns(&idx);
        let (loss, grads) = grad_of(&params, |t: &mut Tape, v: &[Var]| {
            let w = t.constant(backbone.weight().clone());
            let qv = t.constant(q.clone());
            let gv = t.constant(g.clone());
            let base = t.matmul(w, qv)?;
            let bt = t.transpose(v[1]);
            let projected = t.matmul(bt, qv)?;
            let update = t.matmul(v[0], projected)?;
            let pred = t.add(base, update)?;
            t.mse(pred, gv)
        })?;
        check_loss(step, loss)?;
        history.push(loss);
        opt.step(&mut params, &grads);
    }
    let mut values = params.values().cloned();
    let a = values.next().expect("a");
    let b = values.next().expect("b");
    Ok((LoraAdapter::new(a, b)?, history))
}

/// Fresh adapter for `backbone`, seeded independently of the batch order.
pub fn initial_adapter(backbone: &FrozenBackbone, rank: usize, seed: u64) -> Result<LoraAdapter, TrainError> {
    const INIT_STREAM: u64 = 7_000;
    Ok(init_adapter(
        backbone.output_dim(),
        backbone.input_dim(),
        rank,
        &mut Rng::new(seed).fork(INIT_STREAM),
    )?)
}

/// One independent adapter per task, each started from the same seed.
pub fn train_per_task(
    backbone: &FrozenBackbone,
    datasets: &[TaskDataset],
    rank: usize,
    cfg: &TrainConfig,
) -> Result<Vec<(LoraAdapter, Vec<f64>)>, TrainError> {
    datasets
        .iter()
        .map(|ds| {
            let start = initial_adapter(backbone, rank, cfg.seed)?;
            train_seq_lora(backbone, &start, ds, cfg)
        })
        .collect()
}

/// Closed-form regularizer of a freshly built model, matching the
/// identity initialization: per retention layer `J` unit gains per row plus
/// `J` unit mixing entries, per updater layer `n` unit diagonal entries.
pub fn init_regularizer(model: &DealModel, cfg: &TrainConfig) -> f64 {
    let mut total = 0.0;
    for path in [model.path_a(), model.path_b()].into_iter().flatten() {
        let (n, j, k) = (path.retention.rows(), path.retention.kernels(), path.retention.depth());
        total += cfg.lambda1 * (k * (n * j + j)) as f64;
        total += cfg.lambda2 * (path.updater.depth() * path.updater.side()) as f64;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{compare_gradients, finite_diff};
    use crate::lora::{forward, merge};
    use crate::numerics::gaussian_matrix;

    fn dataset(q: DenseMatrix, g: DenseMatrix) -> TaskDataset {
        TaskDataset {
            name: "toy".into(),
            q_test: q.clone(),
            g_test: g.clone(),
            class_count: g.rows(),
            generator_seed: 0,
            label_map: DenseMatrix::zeros(1, 1),
            q_train: q,
            g_train: g,
        }
    }

    fn random_model(m: usize, n: usize, r: usize, strategy: UpdateStrategy, arch: &Architecture, seed: u64) -> DealModel {
        let mut rng = Rng::new(seed);
        let bb = FrozenBackbone::new(gaussian_matrix(m, n, 0.0, 0.3, &mut rng));
        let base = LoraAdapter::new(
            gaussian_matrix(m, r, 0.0, 0.5, &mut rng),
            gaussian_matrix(n, r, 0.0, 0.5, &mut rng),
        )
        .unwrap();
        DealModel::new(bb, base, strategy, arch).unwrap()
    }

    /// Moves every learnable off its initial value so no gradient is
    /// trivially symmetric.
    fn perturb(model: &mut DealModel, seed: u64) {
        let mut rng = Rng::new(seed);
        let p = model.params().map(|p| {
            let noise = gaussian_matrix(p.value.rows(), p.value.cols(), 0.0, 0.1, &mut rng);
            p.value.add(&noise).unwrap()
        });
        model.set_params(&p).unwrap();
    }

    fn loss_closure<'a>(
        model: &'a DealModel,
        params: &'a ParamSet,
        q: &'a DenseMatrix,
        g: &'a DenseMatrix,
        cfg: &'a TrainConfig,
    ) -> impl Fn(&mut Tape, &[Var]) -> Result<Var, GradError> + 'a {
        move |t, v| {
            deal_loss_on_tape(model, t, params, v, q, g, cfg).map_err(|e| match e {
                TrainError::Grad(g) => g,
                other => panic!("{other}"),
            })
        }
    }

    #[test]
    fn config_enforces_order_constraint() {
        assert!(matches!(
            TrainConfig::default().with_orders(1.0, 5.0),
            Err(TrainError::OrderConstraint { .. })
        ));
        assert!(TrainConfig::default().with_orders(5.0, 5.0).is_ok());
        let cfg = TrainConfig::default();
        assert_eq!((cfg.lambda1, cfg.lambda2, cfg.a, cfg.b), (0.01, 0.001, 10.0, 2.0));
        assert!(TrainConfig { a: 0.5, b: 0.5, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn loss_without_regularizers_is_plain_mse() {
        let model = random_model(6, 8, 2, UpdateStrategy::Both, &Architecture::default(), 1);
        let mut rng = Rng::new(2);
        let q = gaussian_matrix(8, 10, 0.0, 1.0, &mut rng);
        let g = gaussian_matrix(6, 10, 0.0, 1.0, &mut rng);
        let cfg = TrainConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..TrainConfig::default()
        };
        let pred = forward(model.backbone(), &model.materialize().unwrap(), &q).unwrap();
        let diff = pred.sub(&g).unwrap();
        let mse = diff.hadamard(&diff).unwrap().sum() / diff.len() as f64;
        assert!((deal_loss(&model, &q, &g, &cfg).unwrap() - mse).abs() <= 1e-12);
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let model = random_model(6, 8, 2, UpdateStrategy::AOnly, &Architecture::default(), 5);
        let q = gaussian_matrix(8, 4, 0.0, 1.0, &mut Rng::new(1));
        let g = model.pipeline_forward(&q).unwrap();
        let cfg = TrainConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..TrainConfig::default()
        };
        assert_eq!(deal_loss(&model, &q, &g, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn init_loss_on_zero_input_is_the_closed_form_regularizer() {
        let arch = Architecture {
            retention_layers: 2,
            ..Architecture::default()
        };
        for strategy in UpdateStrategy::ALL {
            let model = random_model(8, 12, 3, strategy, &arch, 3);
            let q = DenseMatrix::zeros(12, 5);
            let g = DenseMatrix::zeros(8, 5);
            let cfg = TrainConfig::default();
            let loss = deal_loss(&model, &q, &g, &cfg).unwrap();
            let expect = init_regularizer(&model, &cfg);
            // J = r = 3: λ₁·k·(n·J + J) per side plus λ₂·n per side.
            assert!((loss - expect).abs() <= 1e-12, "{strategy:?}: {loss} vs {expect}");
        }
        let model = random_model(8, 12, 3, UpdateStrategy::AOnly, &Architecture::default(), 3);
        assert!((init_regularizer(&model, &TrainConfig::default()) - (0.01 * 27.0 + 0.001 * 8.0)).abs() < 1e-15);
    }

    #[test]
    fn init_pipeline_squashes_factors() {
        let model = random_model(8, 10, 3, UpdateStrategy::Both, &Architecture::default(), 9);
        let merged = merge(&model.materialize().unwrap());
        let expect = merge(
            &LoraAdapter::new(model.base().a().map(f64::tanh), model.base().b().map(f64::tanh)).unwrap(),
        );
        assert!(merged.max_abs_diff(&expect) <= 1e-6);
    }

    #[test]
    fn strategy_keeps_inactive_factor() {
        let mut model = random_model(6, 8, 2, UpdateStrategy::AOnly, &Architecture::default(), 4);
        perturb(&mut model, 1);
        let (a, b) = model.factors().unwrap();
        assert_eq!(&b, model.base().b());
        assert_ne!(&a, model.base().a());
        assert!(model.params().iter().all(|p| p.name.contains("_a.")));

        let mut model = random_model(6, 8, 2, UpdateStrategy::BOnly, &Architecture::default(), 4);
        perturb(&mut model, 1);
        let (a, _) = model.factors().unwrap();
        assert_eq!(&a, model.base().a());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let arch = Architecture::default();
        let mut model = random_model(4, 4, 2, UpdateStrategy::Both, &arch, 11);
        perturb(&mut model, 11);
        let mut rng = Rng::new(11);
        let q = gaussian_matrix(4, 6, 0.0, 1.0, &mut rng);
        let g = gaussian_matrix(4, 6, 0.0, 1.0, &mut rng);
        let cfg = TrainConfig::default();
        let params = model.params();
        let f = loss_closure(&model, &params, &q, &g, &cfg);
        let (_, ad) = grad_of(&params, &f).unwrap();
        let fd = finite_diff(&params, &f, 1e-5).unwrap();
        let worst = compare_gradients(&ad, &fd);
        assert!(worst.max_relative_error <= 1e-4, "{worst:?}");
    }

    #[test]
    fn step_examples() {
        let mut p = ParamSet::new();
        p.push("x", ParamGroup::Adapter, DenseMatrix::filled(1, 1, 1.0)).unwrap();
        let g = p.map(|_| DenseMatrix::filled(1, 1, 2.0));
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        assert!((step(&p, &g, &cfg).get("x").unwrap().get(0, 0) - 0.8).abs() < 1e-15);
        assert_eq!(step(&p, &p.zeros_like(), &cfg), p);

        let adam = TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        for gv in [2.0, -0.3, 1e-2] {
            let g = p.map(|_| DenseMatrix::filled(1, 1, gv));
            let moved = step(&p, &g, &adam).get("x").unwrap().get(0, 0) - 1.0;
            assert!((moved.abs() - 1e-3).abs() <= 1e-6, "{gv}: {moved}");
            assert!(moved.signum() == -gv.signum());
        }
        assert_eq!(step(&p, &p.zeros_like(), &adam), p);
    }

    #[test]
    fn zero_epochs_leave_everything_unchanged() {
        let model = random_model(6, 8, 2, UpdateStrategy::AOnly, &Architecture::default(), 2);
        let ds = dataset(gaussian_matrix(8, 16, 0.0, 1.0, &mut Rng::new(1)), DenseMatrix::zeros(6, 16));
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (trained, hist) = train_deal(&model, &ds, &cfg).unwrap();
        assert_eq!(trained, model);
        assert!(hist.is_empty());
        let (ad, hist) = train_seq_lora(model.backbone(), model.base(), &ds, &cfg).unwrap();
        assert_eq!(&ad, model.base());
        assert!(hist.is_empty());
    }

    /// Regression targets reachable by the pipeline: `G = (W + A* Bᵀ) Q`.
    fn regression_task(model: &DealModel, seed: u64) -> TaskDataset {
        let mut rng = Rng::new(seed);
        let q = gaussian_matrix(model.backbone().input_dim(), 128, 0.0, 1.0, &mut rng);
        let target_a = gaussian_matrix(model.base().output_dim(), model.base().rank(), 0.0, 0.5, &mut rng);
        let target = LoraAdapter::new(target_a, model.base().b().clone()).unwrap();
        let g = forward(model.backbone(), &target, &q).unwrap();
        dataset(q, g)
    }

    #[test]
    fn deal_training_converges_and_keeps_frozen_parts() {
        let model = random_model(6, 8, 2, UpdateStrategy::AOnly, &Architecture::default(), 3);
        let ds = regression_task(&model, 3);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 50,
            batch_size: 32,
            seed: 3,
            ..TrainConfig::default()
        };
        let initial = deal_loss(&model, &ds.q_train, &ds.g_train, &TrainConfig { lambda1: 0.0, lambda2: 0.0, ..cfg.clone() }).unwrap();
        let (trained, hist) = train_deal(&model, &ds, &cfg).unwrap();
        assert_eq!(hist.len(), 200);
        let fin = deal_loss(&trained, &ds.q_train, &ds.g_train, &TrainConfig { lambda1: 0.0, lambda2: 0.0, ..cfg.clone() }).unwrap();
        assert!(fin <= 0.1 * initial, "{initial} -> {fin}");
        assert_eq!(trained.backbone(), model.backbone());
        assert_eq!(trained.base(), model.base());

        let (again, hist2) = train_deal(&model, &ds, &cfg).unwrap();
        assert_eq!(again, trained);
        assert_eq!(hist2, hist);
    }

    #[test]
    fn seq_lora_converges() {
        let model = random_model(6, 8, 2, UpdateStrategy::AOnly, &Architecture::default(), 3);
        let ds = regression_task(&model, 3);
        let start = initial_adapter(model.backbone(), 2, 3).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.2,
            epochs: 50,
            seed: 3,
            ..TrainConfig::default()
        };
        let (trained, hist) = train_seq_lora(model.backbone(), &start, &ds, &cfg).unwrap();
        assert_eq!(hist.len(), 200);
        let mse = |ad: &LoraAdapter| {
            let d = forward(model.backbone(), ad, &ds.q_train).unwrap().sub(&ds.g_train).unwrap();
            d.hadamard(&d).unwrap().sum() / d.len() as f64
        };
        assert!(mse(&trained) <= 0.1 * mse(&start), "{} -> {}", mse(&start), mse(&trained));
    }

    #[test]
    fn per_task_matches_seq_lora_on_one_task() {
        let model = random_model(6, 8, 2, UpdateStrategy::AOnly, &Architecture::default(), 8);
        let ds = regression_task(&model, 8);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 2,
            seed: 8,
            ..TrainConfig::default()
        };
        let per = train_per_task(model.backbone(), std::slice::from_ref(&ds), 2, &cfg).unwrap();
        let start = initial_adapter(model.backbone(), 2, 8).unwrap();
        let seq = train_seq_lora(model.backbone(), &start, &ds, &cfg).unwrap();
        assert_eq!(per, vec![seq]);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let model = random_model(6, 8, 2, UpdateStrategy::AOnly, &Architecture::default(), 2);
        let ds = dataset(
            DenseMatrix::filled(8, 4, 1e200),
            DenseMatrix::zeros(6, 4),
        );
        assert!(matches!(
            train_deal(&model, &ds, &TrainConfig::default()),
            Err(TrainError::NonFiniteLoss { step: 0, .. })
        ));
    }
}
