//! Controlled-update network: `O = δ'(ω H + b 1ᵀ)` per layer, applied to
//! the retained features to produce the updated factor.

use thiserror::Error;

use crate::grad::{GradError, ParamGroup, ParamSet, Tape, Var};
use crate::numerics::{DenseMatrix, NumericsError};
use crate::retention::Activation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UpdaterError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("invalid updater: {0}")]
    Invalid(String),
}

impl From<NumericsError> for UpdaterError {
    fn from(e: NumericsError) -> Self {
        Self::Grad(e.into())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdaterLayer {
    /// n x n, acts on rows.
    pub omega: DenseMatrix,
    /// n x 1, broadcast across columns.
    pub bias: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdaterNet {
    layers: Vec<UpdaterLayer>,
    activation: Activation,
}

#[derive(Clone, Copy, Debug)]
pub struct UpdaterVars {
    pub omega: Var,
    pub bias: Var,
}

impl UpdaterNet {
    pub fn new(layers: Vec<UpdaterLayer>, activation: Activation) -> Result<Self, UpdaterError> {
        let n = layers
            .first()
            .ok_or_else(|| UpdaterError::Invalid("depth must be at least 1".into()))?
            .omega
            .rows();
        for (k, l) in layers.iter().enumerate() {
            if l.omega.shape() != (n, n) || l.bias.shape() != (n, 1) {
                return Err(UpdaterError::Invalid(format!(
                    "layer {k}: omega {:?}, bias {:?}, expected side {n}",
                    l.omega.shape(),
                    l.bias.shape()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    /// `ω = I`, `b = 0`: starts as the identity map when δ' is linear.
    pub fn identity_init(n: usize, depth: usize, activation: Activation) -> Result<Self, UpdaterError> {
        let layer = UpdaterLayer {
            omega: DenseMatrix::identity(n),
            bias: DenseMatrix::zeros(n, 1),
        };
        Self::new(vec![layer; depth], activation)
    }

    pub fn layers(&self) -> &[UpdaterLayer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn side(&self) -> usize {
        self.layers[0].omega.rows()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn push_params(&self, prefix: &str, params: &mut ParamSet) -> Result<(), GradError> {
        for (k, l) in self.layers.iter().enumerate() {
            params.push(format!("{prefix}.layer{k}.omega"), ParamGroup::Updater, l.omega.clone())?;
            params.push(format!("{prefix}.layer{k}.bias"), ParamGroup::Updater, l.bias.clone())?;
        }
        Ok(())
    }

    pub fn load_params(&mut self, prefix: &str, params: &ParamSet) -> Result<(), UpdaterError> {
        for (k, l) in self.layers.iter_mut().enumerate() {
            for (field, slot) in [("omega", &mut l.omega), ("bias", &mut l.bias)] {
                let name = format!("{prefix}.layer{k}.{field}");
                let v = params
                    .get(&name)
                    .ok_or_else(|| UpdaterError::Invalid(format!("missing parameter {name}")))?;
                if v.shape() != slot.shape() {
                    return Err(UpdaterError::Invalid(format!("{name} has shape {:?}", v.shape())));
                }
                *slot = v.clone();
            }
        }
        Ok(())
    }

    pub fn place_constants(&self, tape: &mut Tape) -> Vec<UpdaterVars> {
        self.layers
            .iter()
            .map(|l| UpdaterVars {
                omega: tape.constant(l.omega.clone()),
                bias: tape.constant(l.bias.clone()),
            })
            .collect()
    }

    pub fn lookup_vars(&self, prefix: &str, params: &ParamSet, vars: &[Var]) -> Result<Vec<UpdaterVars>, UpdaterError> {
        (0..self.layers.len())
            .map(|k| {
                let find = |field: &str| {
                    let name = format!("{prefix}.layer{k}.{field}");
                    params
                        .iter()
                        .position(|p| p.name == name)
                        .map(|i| vars[i])
                        .ok_or_else(|| UpdaterError::Invalid(format!("missing parameter {name}")))
                };
                Ok(UpdaterVars {
                    omega: find("omega")?,
                    bias: find("bias")?,
                })
            })
            .collect()
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, h: Var, layers: &[UpdaterVars]) -> Result<Var, UpdaterError> {
        let mut out = h;
        for lv in layers {
            let prod = tape.matmul(lv.omega, out)?;
            let shifted = tape.add_column(prod, lv.bias)?;
            out = self.activation.on_tape(tape, shifted);
        }
        Ok(out)
    }
}

pub fn updater_forward(h: &DenseMatrix, net: &UpdaterNet) -> Result<DenseMatrix, UpdaterError> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let lv = net.place_constants(&mut tape);
    let out = net.forward_on_tape(&mut tape, hv, &lv)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{compare_gradients, finite_diff, grad_of};
    use crate::numerics::{gaussian_matrix, Rng};

    fn reference(h: &DenseMatrix, net: &UpdaterNet) -> DenseMatrix {
        let mut cur = h.clone();
        for l in net.layers() {
            let (n, r) = cur.shape();
            let mut next = DenseMatrix::zeros(n, r);
            for i in 0..n {
                for j in 0..r {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += l.omega.get(i, k) * cur.get(k, j);
                    }
                    next.set(i, j, net.activation().apply(acc + l.bias.get(i, 0)));
                }
            }
            cur = next;
        }
        cur
    }

    fn random_net(n: usize, depth: usize, act: Activation, rng: &mut Rng) -> UpdaterNet {
        let layers = (0..depth)
            .map(|_| UpdaterLayer {
                omega: gaussian_matrix(n, n, 0.0, 0.5, rng),
                bias: gaussian_matrix(n, 1, 0.0, 0.2, rng),
            })
            .collect();
        UpdaterNet::new(layers, act).unwrap()
    }

    #[test]
    fn identity_and_zero_nets() {
        let h = gaussian_matrix(5, 3, 0.0, 1.0, &mut Rng::new(1));
        let id = UpdaterNet::identity_init(5, 1, Activation::Identity).unwrap();
        assert_eq!(updater_forward(&h, &id).unwrap(), h);

        let zero = UpdaterNet::new(
            vec![UpdaterLayer {
                omega: DenseMatrix::zeros(5, 5),
                bias: DenseMatrix::zeros(5, 1),
            }],
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(updater_forward(&h, &zero).unwrap(), DenseMatrix::zeros(5, 3));
    }

    #[test]
    fn matches_reference_and_finite_differences() {
        let mut rng = Rng::new(8);
        let h = gaussian_matrix(5, 3, 0.0, 1.0, &mut rng);
        for (depth, act) in [(1, Activation::Identity), (2, Activation::Tanh)] {
            let net = random_net(5, depth, act, &mut rng);
            let fast = updater_forward(&h, &net).unwrap();
            assert!(fast.max_abs_diff(&reference(&h, &net)) <= 1e-12);

            let mut params = ParamSet::new();
            net.push_params("up", &mut params).unwrap();
            let loss = |t: &mut Tape, v: &[Var]| -> Result<Var, GradError> {
                let hv = t.constant(h.clone());
                let lv = net.lookup_vars("up", &params, v).unwrap();
                let out = net.forward_on_tape(t, hv, &lv).map_err(|e| match e {
                    UpdaterError::Grad(g) => g,
                    other => panic!("{other}"),
                })?;
                t.p_norm_pow(out, 2.0)
            };
            let (_, ad) = grad_of(&params, loss).unwrap();
            let fd = finite_diff(&params, loss, 1e-5).unwrap();
            let worst = compare_gradients(&ad, &fd);
            assert!(worst.max_relative_error <= 1e-4, "{worst:?}");
        }
    }

    #[test]
    fn shape_errors() {
        let net = UpdaterNet::identity_init(4, 1, Activation::Identity).unwrap();
        assert!(updater_forward(&DenseMatrix::zeros(5, 2), &net).is_err());
        assert!(UpdaterNet::identity_init(4, 0, Activation::Identity).is_err());
        assert!(UpdaterNet::new(
            vec![UpdaterLayer {
                omega: DenseMatrix::zeros(3, 4),
                bias: DenseMatrix::zeros(3, 1)
            }],
            Activation::Identity
        )
        .is_err());
    }
}
