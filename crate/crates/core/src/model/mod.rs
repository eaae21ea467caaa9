//! LU layers and the layered invertible network built from them.
//!
//! One layer maps `x -> phi(L U x + b)` with `L` unit lower triangular and
//! `U` upper triangular, so its Jacobian determinant is the product of
//! `phi'` over the pre-activations times the diagonal of `U`. The inverse
//! never forms a matrix inverse: it undoes the activation numerically and
//! then runs one forward and one back substitution per layer.

mod checkpoint;
mod grad;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError,
    CheckpointHeader,
};
pub use grad::{GradientSet, LayerGrad};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::{ActivationError, ActivationKind, DEFAULT_ALPHA, DEFAULT_INVERSE_TOL};
use crate::linalg::{
    add_weighted_sum, packed_lower_len, packed_upper_len, LinalgError, UnitLowerTriangular, UpperTriangular,
};

/// `ln(2 pi) / 2`
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid network: {0}")]
    InvalidNet(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("layer {layer}: near-singular diagonal u[{index}] = {value:e}")]
    NearSingularDiagonal { layer: usize, index: usize, value: f64 },
    #[error("layer {layer}: non-finite value")]
    NonFinite { layer: usize },
    #[error("layer {layer}: {source}")]
    Activation {
        layer: usize,
        #[source]
        source: ActivationError,
    },
    #[error("empty batch")]
    EmptyBatch,
}

impl ModelError {
    fn from_linalg(layer: usize, err: LinalgError) -> Self {
        match err {
            LinalgError::NearSingularDiagonal { index, value } => {
                Self::NearSingularDiagonal { layer, index, value }
            }
            LinalgError::DimensionMismatch { expected, got } => Self::DimensionMismatch { expected, got },
        }
    }
}

/// How [`init_net`] fills the parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `diag(U) = 1`, off-diagonal `U` and strict lower `L` i.i.d.
    /// `N(0, 1/D)`, `b = 0`.
    #[default]
    Standard,
    /// `L = U = I`, `b = 0`.
    Zeros,
    /// Every stored entry of `U` and `L`, the diagonal of `U` included,
    /// i.i.d. uniform on `[-1/sqrt(D), 1/sqrt(D)]`; `b = 0`. This mirrors a
    /// masked default dense-layer initialization and typically yields a
    /// badly conditioned `U`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LuLayer {
    pub upper: UpperTriangular,
    pub lower: UnitLowerTriangular,
    pub bias: Vec<f64>,
    pub activation: ActivationKind,
}

impl LuLayer {
    pub fn identity(dim: usize, activation: ActivationKind) -> Self {
        Self {
            upper: UpperTriangular::identity(dim),
            lower: UnitLowerTriangular::identity(dim),
            bias: vec![0.0; dim],
            activation,
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 3] {
        [self.upper.packed_mut(), self.lower.packed_mut(), &mut self.bias]
    }

    pub fn blocks(&self) -> [&[f64]; 3] {
        [self.upper.packed(), self.lower.packed(), &self.bias]
    }

    /// `(v, s)` with `v = U x` and `s = L v + b`.
    fn affine(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let v = self.upper.matvec(x).expect("layer dimension");
        let mut s = self.lower.matvec(&v).expect("layer dimension");
        s.iter_mut().zip(&self.bias).for_each(|(s, b)| *s += b);
        (v, s)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (_, s) = self.affine(x);
        s.into_iter().map(|s| self.activation.value(s)).collect()
    }

    /// `U^-1 L^-1 (phi^-1(z) - b)` by substitution.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>, InverseError> {
        let mut w = z
            .iter()
            .map(|&z| self.activation.inverse(z, DEFAULT_INVERSE_TOL))
            .collect::<Result<Vec<_>, _>>()
            .map_err(InverseError::Activation)?;
        w.iter_mut().zip(&self.bias).for_each(|(w, b)| *w -= b);
        let y = self.lower.solve(&w).map_err(InverseError::Linalg)?;
        self.upper.solve(&y).map_err(InverseError::Linalg)
    }

    /// `sum_d ln |u_dd|`.
    pub fn log_abs_diag(&self) -> Result<f64, LinalgError> {
        self.upper.check_invertible()?;
        Ok((0..self.dim()).map(|i| self.upper.diag(i).abs().ln()).sum())
    }
}

#[derive(Debug)]
pub enum InverseError {
    Activation(ActivationError),
    Linalg(LinalgError),
}

/// Intermediates of one layer during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Layer input `a^(m-1)`.
    pub input: Vec<f64>,
    /// `U a^(m-1)`.
    pub upper_out: Vec<f64>,
    /// Pre-activation `L U a^(m-1) + b`.
    pub pre_activation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub output: Vec<f64>,
}

/// A chain of LU layers sharing one dimension. Hidden layers use leaky
/// softplus, the last layer the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct LuNet {
    layers: Vec<LuLayer>,
}

impl LuNet {
    pub fn new(layers: Vec<LuLayer>) -> Result<Self, ModelError> {
        let Some(last) = layers.last() else {
            return Err(ModelError::InvalidNet("no layers".into()));
        };
        let dim = last.dim();
        if dim == 0 {
            return Err(ModelError::InvalidNet("dimension must be positive".into()));
        }
        for (m, layer) in layers.iter().enumerate() {
            if layer.upper.dim() != dim || layer.lower.dim() != dim || layer.bias.len() != dim {
                return Err(ModelError::InvalidNet(format!(
                    "layer {m} does not have dimension {dim}"
                )));
            }
            let is_last = m + 1 == layers.len();
            match layer.activation {
                ActivationKind::Identity if !is_last => {
                    return Err(ModelError::InvalidNet(format!(
                        "hidden layer {m} must use leaky softplus"
                    )))
                }
                ActivationKind::LeakySoftplus { .. } if is_last => {
                    return Err(ModelError::InvalidNet(
                        "output layer must use the identity".into(),
                    ))
                }
                ActivationKind::LeakySoftplus { alpha } if !(alpha > 0.0 && alpha < 1.0) => {
                    return Err(ModelError::InvalidNet(format!(
                        "layer {m}: slope {alpha} outside (0, 1)"
                    )))
                }
                _ => {}
            }
        }
        Ok(Self { layers })
    }

    /// A single identity-activated layer with `L = U = I` and `b = 0`, so
    /// `f` is the identity map.
    pub fn identity(dim: usize) -> Result<Self, ModelError> {
        Self::new(vec![LuLayer::identity(dim, ActivationKind::Identity)])
    }

    pub fn layers(&self) -> &[LuLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LuLayer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim()
    }

    pub fn num_parameters(&self) -> usize {
        let d = self.dim();
        self.depth() * (packed_upper_len(d) + packed_lower_len(d) + d)
    }

    fn check_dim(&self, len: usize) -> Result<(), ModelError> {
        if len == self.dim() {
            Ok(())
        } else {
            Err(ModelError::DimensionMismatch {
                expected: self.dim(),
                got: len,
            })
        }
    }

    /// Evaluates `f(x)` and records the intermediates of every layer.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardTrace), ModelError> {
        self.check_dim(x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { layer: 0 });
        }
        let mut traces = Vec::with_capacity(self.depth());
        let mut a = x.to_vec();
        for (m, layer) in self.layers.iter().enumerate() {
            let (v, s) = layer.affine(&a);
            let out: Vec<f64> = s.iter().map(|&s| layer.activation.value(s)).collect();
            if s.iter().chain(&out).any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { layer: m });
            }
            traces.push(LayerTrace {
                input: std::mem::replace(&mut a, out),
                upper_out: v,
                pre_activation: s,
            });
        }
        let trace = ForwardTrace {
            layers: traces,
            output: a.clone(),
        };
        Ok((a, trace))
    }

    /// [`forward`](Self::forward) of every vector in `batch`, processed one
    /// layer at a time. Results are bit-identical to the per-sample pass.
    pub fn forward_batch(&self, batch: &[Vec<f64>]) -> Result<Vec<ForwardTrace>, ModelError> {
        for x in batch {
            self.check_dim(x.len())?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { layer: 0 });
            }
        }
        let mut layer_traces: Vec<Vec<LayerTrace>> = (0..batch.len())
            .map(|_| Vec::with_capacity(self.depth()))
            .collect();
        let mut acts = batch.to_vec();
        for (m, layer) in self.layers.iter().enumerate() {
            let upper_outs = layer.upper.matvec_batch(&acts).expect("layer dimension");
            let mut pre = layer.lower.matvec_batch(&upper_outs).expect("layer dimension");
            let outs: Vec<Vec<f64>> = pre
                .par_iter_mut()
                .map(|s| {
                    s.iter_mut().zip(&layer.bias).for_each(|(s, b)| *s += b);
                    s.iter().map(|&s| layer.activation.value(s)).collect()
                })
                .collect();
            let finite = pre
                .par_iter()
                .zip(&outs)
                .all(|(s, o)| s.iter().chain(o).all(|v| v.is_finite()));
            if !finite {
                return Err(ModelError::NonFinite { layer: m });
            }
            let inputs = std::mem::replace(&mut acts, outs);
            for (((t, input), upper_out), pre_activation) in
                layer_traces.iter_mut().zip(inputs).zip(upper_outs).zip(pre)
            {
                t.push(LayerTrace {
                    input,
                    upper_out,
                    pre_activation,
                });
            }
        }
        Ok(layer_traces
            .into_iter()
            .zip(acts)
            .map(|(layers, output)| ForwardTrace { layers, output })
            .collect())
    }

    /// `f(x)` without keeping a trace.
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(x.len())?;
        let mut a = x.to_vec();
        for (m, layer) in self.layers.iter().enumerate() {
            a = layer.forward(&a);
            if a.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { layer: m });
            }
        }
        Ok(a)
    }

    /// `f^-1(z)`, running the layers in reverse order.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(z.len())?;
        let mut a = z.to_vec();
        for (m, layer) in self.layers.iter().enumerate().rev() {
            a = layer.inverse(&a).map_err(|e| match e {
                InverseError::Activation(source) => ModelError::Activation { layer: m, source },
                InverseError::Linalg(e) => ModelError::from_linalg(m, e),
            })?;
            if a.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { layer: m });
            }
        }
        Ok(a)
    }

    /// `sum_m sum_d ln |u_dd^(m)|`.
    pub fn log_abs_diag_sum(&self) -> Result<f64, ModelError> {
        self.layers
            .iter()
            .enumerate()
            .map(|(m, l)| l.log_abs_diag().map_err(|e| ModelError::from_linalg(m, e)))
            .sum()
    }

    /// Checks every layer's diagonal against [`crate::linalg::DIAG_EPS`].
    pub fn check_invertible(&self) -> Result<(), ModelError> {
        for (m, layer) in self.layers.iter().enumerate() {
            layer
                .upper
                .check_invertible()
                .map_err(|e| ModelError::from_linalg(m, e))?;
        }
        Ok(())
    }

    pub fn log_abs_det_jacobian(&self, trace: &ForwardTrace) -> Result<f64, ModelError> {
        Ok(self.log_activation_slopes(trace) + self.log_abs_diag_sum()?)
    }

    /// `sum_m sum_d ln phi'(s_d^(m))` for one trace.
    fn log_activation_slopes(&self, trace: &ForwardTrace) -> f64 {
        self.layers
            .iter()
            .zip(&trace.layers)
            .map(|(layer, t)| {
                t.pre_activation
                    .iter()
                    .map(|&s| layer.activation.log_derivative(s))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Log-density of `x` under the standard normal pulled back through `f`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64, ModelError> {
        let (z, trace) = self.forward(x)?;
        let logdet = self.log_abs_det_jacobian(&trace)?;
        Ok(standard_normal_log_density(&z) + logdet)
    }

    /// Log-densities of many samples, in input order.
    pub fn log_density_batch(&self, data: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        let diag = self.log_abs_diag_sum()?;
        let traces = self.forward_batch(data)?;
        Ok(traces
            .par_iter()
            .map(|t| standard_normal_log_density(&t.output) + self.log_activation_slopes(t) + diag)
            .collect())
    }

    /// Negative log-likelihood of a batch with the `ln |u_dd|` term weighted
    /// by `gamma`. With `gamma = 1` this is `-sum_n log_density(x_n)`.
    pub fn nll_loss(&self, batch: &[Vec<f64>], gamma: f64) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let diag = self.log_abs_diag_sum()?;
        let per_sample: Vec<f64> = self
            .forward_batch(batch)?
            .par_iter()
            .map(|t| -standard_normal_log_density(&t.output) - self.log_activation_slopes(t))
            .collect();
        Ok(per_sample.iter().sum::<f64>() - gamma * batch.len() as f64 * diag)
    }

    /// Loss and its gradient with respect to every stored parameter.
    pub fn backward(&self, batch: &[Vec<f64>], gamma: f64) -> Result<(f64, GradientSet), ModelError> {
        Ok(self.backward_detailed(batch, gamma)?.into_parts())
    }

    /// Like [`backward`](Self::backward), also reporting the plain
    /// (`gamma = 1`) negative log-likelihood of the batch.
    pub fn backward_detailed(&self, batch: &[Vec<f64>], gamma: f64) -> Result<Backward, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let n = batch.len() as f64;
        let diag = self.log_abs_diag_sum()?;
        let traces = self.forward_batch(batch)?;

        let data_term: f64 = traces
            .iter()
            .map(|t| -standard_normal_log_density(&t.output) - self.log_activation_slopes(t))
            .sum();
        let loss = data_term - gamma * n * diag;
        let nll = data_term - n * diag;

        let mut grads = GradientSet::zeros_like(self);
        // Adjoint of each layer output, starting from d(1/2 |z|^2)/dz = z.
        let mut adjoint: Vec<Vec<f64>> = traces.iter().map(|t| t.output.clone()).collect();

        for (m, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.activation;
            let grad = &mut grads.layers[m];

            let pre_adjoint: Vec<Vec<f64>> = adjoint
                .par_iter()
                .zip(&traces)
                .map(|(g, t)| {
                    g.iter()
                        .zip(&t.layers[m].pre_activation)
                        .map(|(&g, &s)| {
                            let d1 = act.derivative(s);
                            g * d1 - act.second_derivative(s) / d1
                        })
                        .collect()
                })
                .collect();

            for gs in &pre_adjoint {
                grad.bias.iter_mut().zip(gs).for_each(|(b, g)| *b += g);
            }

            // dL_ij = sum_n gs_i v_j for j < i
            let upper_outs: Vec<&[f64]> = traces.iter().map(|t| t.layers[m].upper_out.as_slice()).collect();
            let lower_rows = split_rows(&mut grad.lower, |i| i, layer.dim());
            lower_rows.into_par_iter().enumerate().for_each(|(i, row)| {
                let coeffs: Vec<f64> = pre_adjoint.iter().map(|gs| gs[i]).collect();
                add_weighted_sum(row, &coeffs, &upper_outs, 0);
            });

            let upper_adjoint = layer
                .lower
                .matvec_transpose_batch(&pre_adjoint)
                .expect("layer dimension");

            // dU_ij = sum_n gv_i a_j for j >= i
            let d = layer.dim();
            let upper_rows = split_rows(&mut grad.upper, |i| d - i, d);
            let inputs: Vec<&[f64]> = traces.iter().map(|t| t.layers[m].input.as_slice()).collect();
            upper_rows.into_par_iter().enumerate().for_each(|(i, row)| {
                let coeffs: Vec<f64> = upper_adjoint.iter().map(|gv| gv[i]).collect();
                add_weighted_sum(row, &coeffs, &inputs, i);
            });
            for i in 0..d {
                grad.upper[layer.upper.diag_index(i)] -= gamma * n / layer.upper.diag(i);
            }

            if m > 0 {
                adjoint = layer
                    .upper
                    .matvec_transpose_batch(&upper_adjoint)
                    .expect("layer dimension");
            }
        }
        Ok(Backward { loss, nll, grads })
    }

    /// Draws `n` standard normal latents from `seed` and maps them through
    /// the inverse network.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check_invertible()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim();
        let latents: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        latents.par_iter().map(|z| self.inverse(z)).collect()
    }

    /// Decodes `steps` evenly spaced points on the latent segment between
    /// `f(x_a)` and `f(x_b)`.
    pub fn interpolate(&self, x_a: &[f64], x_b: &[f64], steps: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        if steps < 2 {
            return Err(ModelError::InvalidNet(format!(
                "interpolation needs at least 2 steps, got {steps}"
            )));
        }
        let z_a = self.transform(x_a)?;
        let z_b = self.transform(x_b)?;
        let last = (steps - 1) as f64;
        (0..steps)
            .into_par_iter()
            .map(|k| {
                let t = k as f64 / last;
                let z: Vec<f64> = z_a.iter().zip(&z_b).map(|(a, b)| (1.0 - t) * a + t * b).collect();
                self.inverse(&z)
            })
            .collect()
    }
}

/// Loss, plain negative log-likelihood and gradient of one batch.
#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    pub nll: f64,
    pub grads: GradientSet,
}

impl Backward {
    pub fn into_parts(self) -> (f64, GradientSet) {
        (self.loss, self.grads)
    }
}

/// Splits a packed triangle into its rows; `row_len(i)` is the length of row `i`.
fn split_rows(packed: &mut [f64], row_len: impl Fn(usize) -> usize, dim: usize) -> Vec<&mut [f64]> {
    let mut rows = Vec::with_capacity(dim);
    let mut rest = packed;
    for i in 0..dim {
        let (row, tail) = rest.split_at_mut(row_len(i));
        rows.push(row);
        rest = tail;
    }
    rows
}

pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    -(z.len() as f64) * HALF_LN_2PI - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

pub fn init_net(layers: usize, dim: usize, seed: u64, scheme: InitScheme) -> Result<LuNet, ModelError> {
    init_net_with_alpha(layers, dim, DEFAULT_ALPHA, seed, scheme)
}

pub fn init_net_with_alpha(
    layers: usize,
    dim: usize,
    alpha: f64,
    seed: u64,
    scheme: InitScheme,
) -> Result<LuNet, ModelError> {
    if dim == 0 {
        return Err(ModelError::InvalidNet("dimension must be positive".into()));
    }
    let hidden = ActivationKind::leaky_softplus(alpha).map_err(|e| ModelError::InvalidNet(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("positive std");
    let bound = 1.0 / (dim as f64).sqrt();

    let built = (0..layers)
        .map(|m| {
            let activation = if m + 1 == layers {
                ActivationKind::Identity
            } else {
                hidden
            };
            let mut layer = LuLayer::identity(dim, activation);
            match scheme {
                InitScheme::Zeros => {}
                InitScheme::Standard => {
                    for i in 0..dim {
                        let off = layer.upper.diag_index(i);
                        for k in 1..dim - i {
                            layer.upper.packed_mut()[off + k] = normal.sample(&mut rng);
                        }
                    }
                    for w in layer.lower.packed_mut() {
                        *w = normal.sample(&mut rng);
                    }
                }
                InitScheme::Uniform => {
                    for w in layer.upper.packed_mut() {
                        *w = rng.random_range(-bound..=bound);
                    }
                    for w in layer.lower.packed_mut() {
                        *w = rng.random_range(-bound..=bound);
                    }
                }
            }
            layer
        })
        .collect();
    LuNet::new(built)
}

pub fn forward(net: &LuNet, x: &[f64]) -> Result<(Vec<f64>, ForwardTrace), ModelError> {
    net.forward(x)
}

pub fn inverse(net: &LuNet, z: &[f64]) -> Result<Vec<f64>, ModelError> {
    net.inverse(z)
}

pub fn log_abs_det_jacobian(net: &LuNet, trace: &ForwardTrace) -> Result<f64, ModelError> {
    net.log_abs_det_jacobian(trace)
}

pub fn log_density(net: &LuNet, x: &[f64]) -> Result<f64, ModelError> {
    net.log_density(x)
}

pub fn nll_loss(net: &LuNet, batch: &[Vec<f64>], gamma: f64) -> Result<f64, ModelError> {
    net.nll_loss(batch, gamma)
}

pub fn backward(net: &LuNet, batch: &[Vec<f64>], gamma: f64) -> Result<(f64, GradientSet), ModelError> {
    net.backward(batch, gamma)
}

pub fn sample(net: &LuNet, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, ModelError> {
    net.sample(n, seed)
}

pub fn interpolate(net: &LuNet, x_a: &[f64], x_b: &[f64], steps: usize) -> Result<Vec<Vec<f64>>, ModelError> {
    net.interpolate(x_a, x_b, steps)
}
