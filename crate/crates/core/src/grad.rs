//! Reverse-mode differentiation over a fixed set of matrix primitives.
//!
//! A [`Tape`] evaluates eagerly and records each node's inputs. Calling
//! [`Tape::backward`] on a 1x1 node walks the record in reverse and returns
//! adjoints for every trainable leaf. [`finite_diff`] is the independent
//! central-difference oracle used to validate it.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::numerics::{abs_pow, DenseMatrix, NumericsError};

/// Exponents fed to [`Tape::exp_clamped`] are clipped to this range.
pub const EXP_CLAMP: f64 = 40.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("primitive `{0}` has no registered adjoint")]
    UnregisteredPrimitive(String),
    #[error("loss must be a 1x1 node, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("finite-difference step {0} outside [1e-8, 1e-3]")]
    InvalidEpsilon(f64),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("column {index} out of range for {cols} columns")]
    ColumnOutOfRange { index: usize, cols: usize },
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Primitive kinds, used for adjoint fault injection and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Hadamard,
    Scale,
    AddScalar,
    AddColumn,
    Square,
    ExpClamped,
    Tanh,
    Transpose,
    Column,
    HStack,
    Mse,
    PNormPow,
}

impl Primitive {
    pub const ALL: [Primitive; 15] = [
        Primitive::MatMul,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Hadamard,
        Primitive::Scale,
        Primitive::AddScalar,
        Primitive::AddColumn,
        Primitive::Square,
        Primitive::ExpClamped,
        Primitive::Tanh,
        Primitive::Transpose,
        Primitive::Column,
        Primitive::HStack,
        Primitive::Mse,
        Primitive::PNormPow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Hadamard => "hadamard",
            Primitive::Scale => "scale",
            Primitive::AddScalar => "add_scalar",
            Primitive::AddColumn => "add_column",
            Primitive::Square => "square",
            Primitive::ExpClamped => "exp",
            Primitive::Tanh => "tanh",
            Primitive::Transpose => "transpose",
            Primitive::Column => "column",
            Primitive::HStack => "hstack",
            Primitive::Mse => "mse",
            Primitive::PNormPow => "p_norm_pow",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, Var),
    AddColumn(Var, Var),
    Square(Var),
    ExpClamped(Var),
    Tanh(Var),
    Transpose(Var),
    Column(Var, usize),
    HStack(Vec<Var>),
    Mse(Var, Var),
    PNormPow(Var, f64),
    Opaque(String),
}

#[derive(Clone, Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    faults: HashMap<Primitive, f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales every adjoint contribution of `primitive` by `factor` during
    /// [`Tape::backward`]. Only meant for negative-control fixtures.
    pub fn inject_adjoint_fault(&mut self, primitive: Primitive, factor: f64) {
        self.faults.insert(primitive, factor);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    fn push(&mut self, value: DenseMatrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: DenseMatrix, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives an adjoint.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.derived(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.derived(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.derived(v, Op::Hadamard(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.derived(v, Op::Scale(a, s), &[a])
    }

    /// `a + s` with `s` a 1x1 node broadcast over every entry.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var, GradError> {
        let sm = self.value(s);
        if sm.shape() != (1, 1) {
            return Err(NumericsError::ShapeMismatch {
                op: "add_scalar",
                left: self.value(a).shape(),
                right: sm.shape(),
            }
            .into());
        }
        let sv = sm.get(0, 0);
        let v = self.value(a).map(|x| x + sv);
        Ok(self.derived(v, Op::AddScalar(a, s), &[a, s]))
    }

    /// `a + c 1ᵀ`: an n x 1 column broadcast across the columns of `a`.
    pub fn add_column(&mut self, a: Var, c: Var) -> Result<Var, GradError> {
        let (am, cm) = (self.value(a), self.value(c));
        if cm.cols() != 1 || cm.rows() != am.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_column",
                left: am.shape(),
                right: cm.shape(),
            }
            .into());
        }
        let v = DenseMatrix::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) + cm.get(i, 0));
        Ok(self.derived(v, Op::AddColumn(a, c), &[a, c]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.derived(v, Op::Square(a), &[a])
    }

    /// Elementwise `exp(clamp(x, -40, 40))`.
    pub fn exp_clamped(&mut self, a: Var) -> Var {
        let v = self.value(a).map(clamped_exp);
        self.derived(v, Op::ExpClamped(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.derived(v, Op::Tanh(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.derived(v, Op::Transpose(a), &[a])
    }

    pub fn column(&mut self, a: Var, j: usize) -> Result<Var, GradError> {
        let m = self.value(a);
        if j >= m.cols() {
            return Err(GradError::ColumnOutOfRange {
                index: j,
                cols: m.cols(),
            });
        }
        let v = DenseMatrix::column_vector(&m.column(j));
        Ok(self.derived(v, Op::Column(a, j), &[a]))
    }

    /// Concatenates nodes with equal row counts side by side.
    pub fn hstack(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let first = parts.first().expect("hstack of nothing");
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let m = self.value(*p);
            if m.rows() != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "hstack",
                    left: (rows, cols),
                    right: m.shape(),
                }
                .into());
            }
            cols += m.cols();
        }
        let mut out = DenseMatrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            for i in 0..rows {
                for j in 0..m.cols() {
                    out.set(i, offset + j, m.get(i, j));
                }
            }
            offset += m.cols();
        }
        Ok(self.derived(out, Op::HStack(parts.to_vec()), parts))
    }

    /// Mean of squared differences over every entry; 1x1 result.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, GradError> {
        let diff = self.value(pred).sub(self.value(target))?;
        let mse = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
        Ok(self.derived(DenseMatrix::filled(1, 1, mse), Op::Mse(pred, target), &[pred, target]))
    }

    /// `Σ |x|^p` over every entry; 1x1 result.
    pub fn p_norm_pow(&mut self, a: Var, p: f64) -> Result<Var, GradError> {
        let s = crate::numerics::p_norm_pow(self.value(a).as_slice(), p)?;
        Ok(self.derived(DenseMatrix::filled(1, 1, s), Op::PNormPow(a, p), &[a]))
    }

    /// A forward-only node with no adjoint rule. Differentiating through it
    /// fails with [`GradError::UnregisteredPrimitive`].
    pub fn opaque(&mut self, name: &str, inputs: &[Var], value: DenseMatrix) -> Var {
        self.derived(value, Op::Opaque(name.to_string()), inputs)
    }

    /// Adjoints of `loss` with respect to every trainable leaf, indexed by
    /// node. Constant leaves and nodes not reaching `loss` get `None`.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<DenseMatrix>>, GradError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(GradError::NonScalarLoss(shape.0, shape.1));
        }
        let mut adj: Vec<Option<DenseMatrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(DenseMatrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if let Op::Leaf = node.op {
                adj[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut adj)?;
        }
        // Keep only leaf adjoints.
        for (i, a) in adj.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *a = None;
            }
        }
        adj.resize(self.nodes.len(), None);
        Ok(adj)
    }

    fn fault(&self, p: Primitive) -> f64 {
        self.faults.get(&p).copied().unwrap_or(1.0)
    }

    fn accumulate(&self, adj: &mut [Option<DenseMatrix>], target: Var, contrib: DenseMatrix, p: Primitive) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let f = self.fault(p);
        let contrib = if f == 1.0 { contrib } else { contrib.scale(f) };
        match &mut adj[target.0] {
            Some(existing) => {
                for (e, c) in existing.as_mut_slice().iter_mut().zip(contrib.as_slice()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &DenseMatrix, adj: &mut [Option<DenseMatrix>]) -> Result<(), GradError> {
        use Primitive as P;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(adj, *a, g.matmul(&bv.transpose())?, P::MatMul);
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(adj, *b, av.transpose().matmul(g)?, P::MatMul);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone(), P::Add);
                self.accumulate(adj, *b, g.clone(), P::Add);
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone(), P::Sub);
                self.accumulate(adj, *b, g.scale(-1.0), P::Sub);
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(adj, *a, g.hadamard(bv)?, P::Hadamard);
                self.accumulate(adj, *b, g.hadamard(av)?, P::Hadamard);
            }
            Op::Scale(a, s) => self.accumulate(adj, *a, g.scale(*s), P::Scale),
            Op::AddScalar(a, s) => {
                self.accumulate(adj, *a, g.clone(), P::AddScalar);
                self.accumulate(adj, *s, DenseMatrix::filled(1, 1, g.sum()), P::AddScalar);
            }
            Op::AddColumn(a, c) => {
                self.accumulate(adj, *a, g.clone(), P::AddColumn);
                let col: Vec<f64> = (0..g.rows())
                    .map(|i| (0..g.cols()).map(|j| g.get(i, j)).sum())
                    .collect();
                self.accumulate(adj, *c, DenseMatrix::column_vector(&col), P::AddColumn);
            }
            Op::Square(a) => {
                let d = self.value(*a).map(|x| 2.0 * x).hadamard(g)?;
                self.accumulate(adj, *a, d, P::Square);
            }
            Op::ExpClamped(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let d = DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| {
                    let xv = x.get(i, j);
                    if xv > -EXP_CLAMP && xv < EXP_CLAMP {
                        y.get(i, j) * g.get(i, j)
                    } else {
                        0.0
                    }
                });
                self.accumulate(adj, *a, d, P::ExpClamped);
            }
            Op::Tanh(a) => {
                let d = node.value.map(|y| 1.0 - y * y).hadamard(g)?;
                self.accumulate(adj, *a, d, P::Tanh);
            }
            Op::Transpose(a) => self.accumulate(adj, *a, g.transpose(), P::Transpose),
            Op::Column(a, j) => {
                let (r, c) = self.value(*a).shape();
                let mut d = DenseMatrix::zeros(r, c);
                for i in 0..r {
                    d.set(i, *j, g.get(i, 0));
                }
                self.accumulate(adj, *a, d, P::Column);
            }
            Op::HStack(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.value(*p).shape();
                    let d = DenseMatrix::from_fn(r, c, |i, j| g.get(i, offset + j));
                    self.accumulate(adj, *p, d, P::HStack);
                    offset += c;
                }
            }
            Op::Mse(pred, target) => {
                let diff = self.value(*pred).sub(self.value(*target))?;
                let k = 2.0 * g.get(0, 0) / diff.len() as f64;
                self.accumulate(adj, *pred, diff.scale(k), P::Mse);
                self.accumulate(adj, *target, diff.scale(-k), P::Mse);
            }
            Op::PNormPow(a, p) => {
                let gs = g.get(0, 0);
                let d = self.value(*a).map(|x| gs * abs_pow_grad(x, *p));
                self.accumulate(adj, *a, d, P::PNormPow);
            }
            Op::Opaque(name) => return Err(GradError::UnregisteredPrimitive(name.clone())),
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn clamped_exp(x: f64) -> f64 {
    x.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
}

/// d|x|^p/dx, taken as 0 at x = 0 for every p (subgradient 0 when p = 1).
#[inline]
fn abs_pow_grad(x: f64, p: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        p * abs_pow(x, p - 1.0) * x.signum()
    }
}

/// Which regularization group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// θ₁: wavelet retention learnables.
    Retention,
    /// θ₂: updater learnables.
    Updater,
    /// Raw LoRA factors, trained directly by the baselines.
    Adapter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: DenseMatrix,
}

/// Ordered, uniquely named collection of matrix parameters. Scalars are 1x1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, value: DenseMatrix) -> Result<(), GradError> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(GradError::DuplicateName(name));
        }
        self.params.push(Param { name, group, value });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn values(&self) -> impl Iterator<Item = &DenseMatrix> {
        self.params.iter().map(|p| &p.value)
    }

    /// Same names and groups, new values from `f`.
    pub fn map(&self, mut f: impl FnMut(&Param) -> DenseMatrix) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: f(p),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|p| DenseMatrix::zeros(p.value.rows(), p.value.cols()))
    }

    /// True when both sets have the same names, groups and shapes in order.
    pub fn congruent(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.group == b.group && a.value.shape() == b.value.shape())
    }
}

/// Places every parameter on `tape` as a trainable leaf, in order.
pub fn leaves(tape: &mut Tape, params: &ParamSet) -> Vec<Var> {
    params.iter().map(|p| tape.param(p.value.clone())).collect()
}

/// Evaluates a loss graph without differentiating it.
pub fn evaluate<F>(params: &ParamSet, loss_fn: F) -> Result<f64, GradError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, GradError>,
{
    let mut tape = Tape::new();
    let vars = leaves(&mut tape, params);
    let loss = loss_fn(&mut tape, &vars)?;
    let shape = tape.value(loss).shape();
    if shape != (1, 1) {
        return Err(GradError::NonScalarLoss(shape.0, shape.1));
    }
    Ok(tape.scalar(loss))
}

/// Loss value and exact reverse-mode gradients, shaped like `params`.
pub fn grad_of<F>(params: &ParamSet, loss_fn: F) -> Result<(f64, ParamSet), GradError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, GradError>,
{
    grad_of_with(Tape::new(), params, loss_fn)
}

/// Like [`grad_of`] but on a caller-prepared tape (e.g. with faults).
pub fn grad_of_with<F>(mut tape: Tape, params: &ParamSet, loss_fn: F) -> Result<(f64, ParamSet), GradError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, GradError>,
{
    let vars = leaves(&mut tape, params);
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = gradients(&tape, loss, &vars, params)?;
    Ok((tape.scalar(loss), grads))
}

/// Adjoints of `loss` at the leaves `vars`, which must have been created
/// from `params` by [`leaves`].
pub fn gradients(tape: &Tape, loss: Var, vars: &[Var], params: &ParamSet) -> Result<ParamSet, GradError> {
    let mut adj = tape.backward(loss)?;
    let mut i = 0;
    Ok(params.map(|p| {
        let g = adj[vars[i].0]
            .take()
            .unwrap_or_else(|| DenseMatrix::zeros(p.value.rows(), p.value.cols()));
        i += 1;
        g
    }))
}

/// Central differences `(f(x+ε) - f(x-ε)) / 2ε`, one coordinate at a time.
pub fn finite_diff<F>(params: &ParamSet, loss_fn: F, epsilon: f64) -> Result<ParamSet, GradError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, GradError>,
{
    if !(1e-8..=1e-3).contains(&epsilon) {
        return Err(GradError::InvalidEpsilon(epsilon));
    }
    let mut work = params.clone();
    let mut out = params.zeros_like();
    for pi in 0..params.len() {
        for k in 0..params.params[pi].value.len() {
            let x = params.params[pi].value.as_slice()[k];
            work.params[pi].value.as_mut_slice()[k] = x + epsilon;
            let fp = evaluate(&work, &loss_fn)?;
            work.params[pi].value.as_mut_slice()[k] = x - epsilon;
            let fm = evaluate(&work, &loss_fn)?;
            work.params[pi].value.as_mut_slice()[k] = x;
            out.params[pi].value.as_mut_slice()[k] = (fp - fm) / (2.0 * epsilon);
        }
    }
    Ok(out)
}

/// Denominator floor for [`compare_gradients`]; coordinates whose true
/// gradient is below it are judged on absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Worst coordinate of a gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientDiscrepancy {
    pub max_relative_error: f64,
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Max over coordinates of `|a - n| / max(|a|, |n|, floor)`.
pub fn compare_gradients(analytic: &ParamSet, numeric: &ParamSet) -> GradientDiscrepancy {
    assert!(analytic.congruent(numeric), "gradient sets are not congruent");
    let mut worst = GradientDiscrepancy {
        max_relative_error: 0.0,
        parameter: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        for (k, (&x, &y)) in a.value.as_slice().iter().zip(n.value.as_slice()).enumerate() {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(RELATIVE_ERROR_FLOOR);
            if rel > worst.max_relative_error || worst.parameter.is_empty() {
                worst = GradientDiscrepancy {
                    max_relative_error: rel,
                    parameter: a.name.clone(),
                    index: k,
                    analytic: x,
                    numeric: y,
                };
            }
        }
    }
    worst
}
