//! Subspace-angle sampling and the full-model gradient check.

use serde::{Deserialize, Serialize};

use crate::grad::{compare_gradients, gradients, leaves, GradientDiscrepancy, ParamSet, Primitive, Tape};
use crate::lora::{FrozenBackbone, LoraAdapter};
use crate::numerics::{gaussian_matrix, DenseMatrix, Rng};
use crate::svd_analysis::{theorem1_demo, AnalysisError};
use crate::training::{deal_loss_on_tape, Architecture, DealModel, TrainConfig, TrainError, UpdateStrategy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleSample {
    pub noise_std: f64,
    pub trial: usize,
    pub angle: f64,
}

/// `trials` angles per noise level. Trial `k` draws the same `X` at every
/// level, so levels differ only in the noise.
pub fn theorem1_samples(
    n_x: usize,
    r: usize,
    rank_x: usize,
    noise_levels: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<AngleSample>, AnalysisError> {
    let base = Rng::new(seed);
    let mut out = Vec::with_capacity(noise_levels.len() * trials);
    for &noise_std in noise_levels {
        for trial in 0..trials {
            let mut rng = base.fork(trial as u64);
            let angle = theorem1_demo(n_x, r, rank_x, noise_std, &mut rng)?;
            out.push(AngleSample { noise_std, trial, angle });
        }
    }
    Ok(out)
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPSILON: f64 = 1e-5;
/// (rows, rank) of the checked factor.
pub const GRADCHECK_SIZES: [(usize, usize); 3] = [(4, 2), (16, 4), (32, 8)];
pub const GRADCHECK_DEPTHS: [usize; 2] = [1, 2];
pub const GRADCHECK_SEEDS: u64 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckCase {
    pub rows: usize,
    pub rank: usize,
    pub layers: usize,
    pub seed: u64,
    pub params: usize,
    pub worst: GradientDiscrepancy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
    pub corrupted: Option<Primitive>,
}

impl GradcheckReport {
    pub fn worst(&self) -> &GradcheckCase {
        self.cases
            .iter()
            .max_by(|x, y| x.worst.max_relative_error.total_cmp(&y.worst.max_relative_error))
            .expect("suite has cases")
    }

    pub fn passed(&self) -> bool {
        self.worst().worst.max_relative_error <= GRADCHECK_TOLERANCE
    }
}

/// Both-sides model with every learnable moved off its identity init, so
/// no adjoint is trivially zero. Entries are scaled so the loss stays O(1):
/// central differences lose about `eps_machine * |loss| / ε` to rounding,
/// which must stay well below the comparison floor.
pub fn perturbed_model(rows: usize, rank: usize, layers: usize, seed: u64) -> Result<DealModel, TrainError> {
    let mut rng = Rng::new(seed).fork(layers as u64);
    let scale = 1.0 / (rows as f64).sqrt();
    let backbone = FrozenBackbone::new(gaussian_matrix(rows, rows, 0.0, scale, &mut rng));
    let base = LoraAdapter::new(
        gaussian_matrix(rows, rank, 0.0, scale, &mut rng),
        gaussian_matrix(rows, rank, 0.0, scale, &mut rng),
    )?;
    let arch = Architecture {
        retention_layers: layers,
        ..Architecture::default()
    };
    let mut model = DealModel::new(backbone, base, UpdateStrategy::Both, &arch)?;
    let params = model.params().map(|p| {
        let noise = gaussian_matrix(p.value.rows(), p.value.cols(), 0.0, 0.2, &mut rng);
        p.value.scale(0.5).add(&noise).expect("same shape")
    });
    model.set_params(&params)?;
    Ok(model)
}

fn loss_at(model: &DealModel, params: &ParamSet, q: &DenseMatrix, g: &DenseMatrix, cfg: &TrainConfig) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let vars = leaves(&mut tape, params);
    let loss = deal_loss_on_tape(model, &mut tape, params, &vars, q, g, cfg)?;
    Ok(tape.scalar(loss))
}

/// Reverse-mode against central differences over every θ₁ and θ₂ entry of
/// one perturbed model.
pub fn gradcheck_case(
    rows: usize,
    rank: usize,
    layers: usize,
    seed: u64,
    corrupt: Option<Primitive>,
) -> Result<GradcheckCase, TrainError> {
    let model = perturbed_model(rows, rank, layers, seed)?;
    let mut rng = Rng::new(seed).fork(100 + layers as u64);
    let q = gaussian_matrix(rows, 6, 0.0, 1.0, &mut rng);
    // Targets near the current prediction, as late in fine-tuning.
    let g = model
        .pipeline_forward(&q)?
        .add(&gaussian_matrix(rows, 6, 0.0, 0.1, &mut rng))
        .expect("same shape");
    let cfg = TrainConfig::default();
    let params = model.params();

    let mut tape = Tape::new();
    if let Some(p) = corrupt {
        tape.inject_adjoint_fault(p, 1.5);
    }
    let vars = leaves(&mut tape, &params);
    let loss = deal_loss_on_tape(&model, &mut tape, &params, &vars, &q, &g, &cfg)?;
    let analytic = gradients(&tape, loss, &vars, &params)?;

    let mut numeric = params.zeros_like();
    let mut probe = params.clone();
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.value.len() {
            let x = p.value.as_slice()[k];
            let mut at = |v: f64| -> Result<f64, TrainError> {
                probe.iter_mut().nth(pi).expect("index in range").value.as_mut_slice()[k] = v;
                loss_at(&model, &probe, &q, &g, &cfg)
            };
            let d = (at(x + GRADCHECK_EPSILON)? - at(x - GRADCHECK_EPSILON)?) / (2.0 * GRADCHECK_EPSILON);
            at(x)?;
            numeric.iter_mut().nth(pi).expect("index in range").value.as_mut_slice()[k] = d;
        }
    }
    Ok(GradcheckCase {
        rows,
        rank,
        layers,
        seed,
        params: params.scalar_count(),
        worst: compare_gradients(&analytic, &numeric),
    })
}

/// Every size and depth at seeds `seed..seed + GRADCHECK_SEEDS`.
pub fn gradcheck_suite(seed: u64, corrupt: Option<Primitive>) -> Result<GradcheckReport, TrainError> {
    let mut cases = Vec::new();
    for &(rows, rank) in &GRADCHECK_SIZES {
        for &layers in &GRADCHECK_DEPTHS {
            for s in seed..seed + GRADCHECK_SEEDS {
                cases.push(gradcheck_case(rows, rank, layers, s, corrupt)?);
            }
        }
    }
    Ok(GradcheckReport { cases, corrupted: corrupt })
}
