//! Wavelet-kernel retention network.
//!
//! Each layer filters every column of its input through a bank of heat
//! kernels and their sign-flipped counterparts, applies per-kernel diagonal
//! gains, mixes the filtered columns and squashes:
//!
//! ```text
//! f_j  = φ_j(h_j) ⊙ g_j ⊙ φ_j⁻(h_j) ⊙ h_j        h_j = H[:, j]
//! H'   = δ(F Mᵀ + bias)                          F = [f_1 .. f_J]
//! ```
//!
//! Kernels are evaluated entrywise. `φ_j(x) = exp(-(x - c_j)² / 2σ_j²)` and
//! `φ_j⁻` flips the sign of the exponent; both exponents are clamped to
//! `[-40, 40]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{clamped_exp, GradError, ParamGroup, ParamSet, Tape, Var};
use crate::numerics::{DenseMatrix, NumericsError};

/// Base width of the dyadic ladder `σ_j² = 2^j σ₀²`.
pub const DEFAULT_SIGMA0_SQ: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetentionError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("invalid wavelet bank: {0}")]
    InvalidBank(String),
}

impl From<NumericsError> for RetentionError {
    fn from(e: NumericsError) -> Self {
        Self::Grad(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub(crate) fn on_tape(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(v),
            Activation::Identity => v,
        }
    }
}

/// Elementwise heat kernel `exp(-(x - c)² / 2σ²)`.
pub fn heat_kernel(x: &DenseMatrix, c: f64, sigma_sq: f64) -> DenseMatrix {
    assert!(sigma_sq > 0.0, "kernel width must be positive");
    let k = -1.0 / (2.0 * sigma_sq);
    x.map(|v| {
        let d = v + (-c);
        clamped_exp(d * d * k)
    })
}

/// Elementwise `exp(+(x - c)² / 2σ²)`, the sign-flipped kernel.
pub fn inverse_kernel(x: &DenseMatrix, c: f64, sigma_sq: f64) -> DenseMatrix {
    assert!(sigma_sq > 0.0, "kernel width must be positive");
    let k = 1.0 / (2.0 * sigma_sq);
    x.map(|v| {
        let d = v + (-c);
        clamped_exp(d * d * k)
    })
}

/// Learnables of one wavelet layer.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletLayer {
    /// 1 x J kernel centers.
    pub centers: DenseMatrix,
    /// n x J, column j is the diagonal of g_j.
    pub gains: DenseMatrix,
    /// r x J column mixing.
    pub mix: DenseMatrix,
    pub bias: f64,
}

impl WaveletLayer {
    pub fn kernels(&self) -> usize {
        self.centers.cols()
    }
}

/// K stacked wavelet layers sharing a fixed width schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBank {
    layers: Vec<WaveletLayer>,
    widths: Vec<f64>,
    activation: Activation,
}

/// Dyadic ladder `σ_j² = 2^j σ₀²`, j = 0..J.
pub fn dyadic_widths(kernels: usize, sigma0_sq: f64) -> Vec<f64> {
    (0..kernels).map(|j| sigma0_sq * 2f64.powi(j as i32)).collect()
}

impl WaveletBank {
    pub fn new(layers: Vec<WaveletLayer>, widths: Vec<f64>, activation: Activation) -> Result<Self, RetentionError> {
        let first = layers
            .first()
            .ok_or_else(|| RetentionError::InvalidBank("at least one layer is required".into()))?;
        let (n, r, j) = (first.gains.rows(), first.mix.rows(), first.kernels());
        if j == 0 || widths.len() != j {
            return Err(RetentionError::InvalidBank(format!("{} widths for {j} kernels", widths.len())));
        }
        if let Some(w) = widths.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(RetentionError::InvalidBank(format!("kernel width {w} must be positive")));
        }
        if j > r {
            return Err(RetentionError::InvalidBank(format!("{j} kernels exceed {r} input columns")));
        }
        for (k, l) in layers.iter().enumerate() {
            let ok = l.centers.shape() == (1, j)
                && l.gains.shape() == (n, j)
                && l.mix.shape() == (r, j)
                && l.bias.is_finite();
            if !ok {
                return Err(RetentionError::InvalidBank(format!("layer {k} has inconsistent shapes")));
            }
        }
        Ok(Self {
            layers,
            widths,
            activation,
        })
    }

    /// Near-identity start: `c = 0`, `g = 1`, `M = I`, `bias = 0`.
    pub fn identity_init(
        n: usize,
        r: usize,
        layers: usize,
        kernels: usize,
        sigma0_sq: f64,
        activation: Activation,
    ) -> Result<Self, RetentionError> {
        if layers == 0 {
            return Err(RetentionError::InvalidBank("at least one layer is required".into()));
        }
        let layer = WaveletLayer {
            centers: DenseMatrix::zeros(1, kernels.max(1)),
            gains: DenseMatrix::filled(n, kernels.max(1), 1.0),
            mix: DenseMatrix::from_fn(r, kernels.max(1), |i, j| if i == j { 1.0 } else { 0.0 }),
            bias: 0.0,
        };
        Self::new(vec![layer; layers], dyadic_widths(kernels, sigma0_sq), activation)
    }

    pub fn layers(&self) -> &[WaveletLayer] {
        &self.layers
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn kernels(&self) -> usize {
        self.widths.len()
    }

    pub fn rows(&self) -> usize {
        self.layers[0].gains.rows()
    }

    pub fn cols(&self) -> usize {
        self.layers[0].mix.rows()
    }

    /// Appends every learnable as a θ₁ parameter named `{prefix}.layer{k}.*`.
    pub fn push_params(&self, prefix: &str, params: &mut ParamSet) -> Result<(), GradError> {
        for (k, l) in self.layers.iter().enumerate() {
            params.push(format!("{prefix}.layer{k}.centers"), ParamGroup::Retention, l.centers.clone())?;
            params.push(format!("{prefix}.layer{k}.gains"), ParamGroup::Retention, l.gains.clone())?;
            params.push(format!("{prefix}.layer{k}.mix"), ParamGroup::Retention, l.mix.clone())?;
            params.push(
                format!("{prefix}.layer{k}.bias"),
                ParamGroup::Retention,
                DenseMatrix::filled(1, 1, l.bias),
            )?;
        }
        Ok(())
    }

    /// Reads learnables written by [`WaveletBank::push_params`].
    pub fn load_params(&mut self, prefix: &str, params: &ParamSet) -> Result<(), RetentionError> {
        for (k, l) in self.layers.iter_mut().enumerate() {
            let fetch = |field: &str, shape: (usize, usize)| -> Result<DenseMatrix, RetentionError> {
                let name = format!("{prefix}.layer{k}.{field}");
                let v = params
                    .get(&name)
                    .ok_or_else(|| RetentionError::InvalidBank(format!("missing parameter {name}")))?;
                if v.shape() != shape {
                    return Err(RetentionError::InvalidBank(format!("{name} has shape {:?}", v.shape())));
                }
                Ok(v.clone())
            };
            l.centers = fetch("centers", l.centers.shape())?;
            l.gains = fetch("gains", l.gains.shape())?;
            l.mix = fetch("mix", l.mix.shape())?;
            l.bias = fetch("bias", (1, 1))?.get(0, 0);
        }
        Ok(())
    }

    /// Places the learnables on `tape` as constants.
    pub fn place_constants(&self, tape: &mut Tape) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                centers: tape.constant(l.centers.clone()),
                gains: tape.constant(l.gains.clone()),
                mix: tape.constant(l.mix.clone()),
                bias: tape.constant(DenseMatrix::filled(1, 1, l.bias)),
            })
            .collect()
    }

    /// Tape handles for parameters pushed under `prefix`.
    pub fn lookup_vars(&self, prefix: &str, params: &ParamSet, vars: &[Var]) -> Result<Vec<LayerVars>, RetentionError> {
        (0..self.layers.len())
            .map(|k| {
                let find = |field: &str| -> Result<Var, RetentionError> {
                    let name = format!("{prefix}.layer{k}.{field}");
                    params
                        .iter()
                        .position(|p| p.name == name)
                        .map(|i| vars[i])
                        .ok_or_else(|| RetentionError::InvalidBank(format!("missing parameter {name}")))
                };
                Ok(LayerVars {
                    centers: find("centers")?,
                    gains: find("gains")?,
                    mix: find("mix")?,
                    bias: find("bias")?,
                })
            })
            .collect()
    }

    /// Records the full K-layer pass on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, y: Var, layers: &[LayerVars]) -> Result<Var, RetentionError> {
        let mut h = y;
        for lv in layers {
            h = layer_on_tape(tape, h, lv, &self.widths, self.activation)?;
        }
        Ok(h)
    }
}

/// Tape handles for one layer's learnables.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub centers: Var,
    pub gains: Var,
    pub mix: Var,
    pub bias: Var,
}

/// One wavelet layer recorded on `tape`.
pub fn layer_on_tape(
    tape: &mut Tape,
    h: Var,
    layer: &LayerVars,
    widths: &[f64],
    activation: Activation,
) -> Result<Var, RetentionError> {
    let (n, r) = tape.value(h).shape();
    let gains_shape = tape.value(layer.gains).shape();
    let mix_shape = tape.value(layer.mix).shape();
    if gains_shape != (n, widths.len()) || mix_shape != (r, widths.len()) || widths.len() > r {
        return Err(NumericsError::ShapeMismatch {
            op: "wavelet layer",
            left: (n, r),
            right: gains_shape,
        }
        .into());
    }
    let mut filtered = Vec::with_capacity(widths.len());
    for (j, &sigma_sq) in widths.iter().enumerate() {
        let col = tape.column(h, j)?;
        let c = tape.column(layer.centers, j)?;
        let neg_c = tape.scale(c, -1.0);
        let centered = tape.add_scalar(col, neg_c)?;
        let sq = tape.square(centered);
        let down = tape.scale(sq, -1.0 / (2.0 * sigma_sq));
        let up = tape.scale(sq, 1.0 / (2.0 * sigma_sq));
        let phi = tape.exp_clamped(down);
        let phi_inv = tape.exp_clamped(up);
        let g = tape.column(layer.gains, j)?;
        let f = tape.hadamard(phi, g)?;
        let f = tape.hadamard(f, phi_inv)?;
        let f = tape.hadamard(f, col)?;
        filtered.push(f);
    }
    let stacked = tape.hstack(&filtered)?;
    let mix_t = tape.transpose(layer.mix);
    let mixed = tape.matmul(stacked, mix_t)?;
    let shifted = tape.add_scalar(mixed, layer.bias)?;
    Ok(activation.on_tape(tape, shifted))
}

/// One layer evaluated outside any training run.
pub fn wavelet_layer(
    h: &DenseMatrix,
    layer: &WaveletLayer,
    widths: &[f64],
    activation: Activation,
) -> Result<DenseMatrix, RetentionError> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let lv = LayerVars {
        centers: tape.constant(layer.centers.clone()),
        gains: tape.constant(layer.gains.clone()),
        mix: tape.constant(layer.mix.clone()),
        bias: tape.constant(DenseMatrix::filled(1, 1, layer.bias)),
    };
    let out = layer_on_tape(&mut tape, hv, &lv, widths, activation)?;
    Ok(tape.value(out).clone())
}

/// Core-feature estimate `X̂ = H^K` with `H⁰ = Y`.
pub fn retention_forward(y: &DenseMatrix, bank: &WaveletBank) -> Result<DenseMatrix, RetentionError> {
    if y.shape() != (bank.rows(), bank.cols()) {
        return Err(NumericsError::ShapeMismatch {
            op: "retention_forward",
            left: y.shape(),
            right: (bank.rows(), bank.cols()),
        }
        .into());
    }
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let lv = bank.place_constants(&mut tape);
    let out = bank.forward_on_tape(&mut tape, yv, &lv)?;
    Ok(tape.value(out).clone())
}
