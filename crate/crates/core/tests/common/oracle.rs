//! Independent reference computations used to check the library: dense
//! matrix products, finite differences and dense SVD.
#![allow(dead_code)]

use lunet::linalg::{UnitLowerTriangular, UpperTriangular};
use lunet::model::{init_net, InitScheme, LuNet};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A net with random off-diagonals, diagonals in `±[0.5, 1.5]` and random
/// biases, so that no parameter block sits at a special value.
pub fn random_net(depth: usize, dim: usize, seed: u64) -> LuNet {
    let mut net = init_net(depth, dim, seed, InitScheme::Standard).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(1));
    for layer in net.layers_mut() {
        for i in 0..dim {
            let idx = layer.upper.diag_index(i);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            layer.upper.packed_mut()[idx] = sign * rng.random_range(0.5..1.5);
        }
        for b in layer.bias.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    net
}

pub fn random_batch(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

pub fn dense_lower(l: &UnitLowerTriangular) -> DMatrix<f64> {
    let d = l.dim();
    DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else if j < i {
            l.get(i, j)
        } else {
            0.0
        }
    })
}

pub fn dense_upper(u: &UpperTriangular) -> DMatrix<f64> {
    let d = u.dim();
    DMatrix::from_fn(d, d, |i, j| if j >= i { u.get(i, j) } else { 0.0 })
}

/// `f(x)` evaluated with explicit dense `A = L U` per layer.
pub fn dense_forward(net: &LuNet, x: &[f64]) -> Vec<f64> {
    let mut a = nalgebra::DVector::from_column_slice(x);
    for layer in net.layers() {
        let w = dense_lower(&layer.lower) * dense_upper(&layer.upper);
        let s = w * a + nalgebra::DVector::from_column_slice(&layer.bias);
        a = s.map(|v| layer.activation.value(v));
    }
    a.iter().copied().collect()
}

/// `ln |det J_f(x)|` from a central-difference Jacobian.
pub fn fd_log_abs_det(net: &LuNet, x: &[f64]) -> f64 {
    let d = x.len();
    let h = 1e-6;
    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let fp = net.transform(&xp).unwrap();
        let fm = net.transform(&xm).unwrap();
        for i in 0..d {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac.determinant().abs().ln()
}

/// Central differences of the loss with respect to every stored parameter,
/// in the order of `GradientSet::iter` (per layer: `U`, `L`, `b`).
pub fn fd_gradient(net: &LuNet, batch: &[Vec<f64>], gamma: f64, h: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut probe = net.clone();
    for m in 0..net.depth() {
        for block in 0..3 {
            let len = net.layers()[m].blocks()[block].len();
            for k in 0..len {
                let orig = probe.layers()[m].blocks()[block][k];
                probe.layers_mut()[m].blocks_mut()[block][k] = orig + h;
                let plus = probe.nll_loss(batch, gamma).unwrap();
                probe.layers_mut()[m].blocks_mut()[block][k] = orig - h;
                let minus = probe.nll_loss(batch, gamma).unwrap();
                probe.layers_mut()[m].blocks_mut()[block][k] = orig;
                out.push((plus - minus) / (2.0 * h));
            }
        }
    }
    out
}

/// Largest relative deviation `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: impl IntoIterator<Item = f64>, numeric: &[f64], floor: f64) -> f64 {
    analytic
        .into_iter()
        .zip(numeric)
        .map(|(a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `sigma_max / sigma_min` of a dense matrix.
pub fn svd_condition(m: DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    max / min
}

pub fn svd_norm(m: DMatrix<f64>) -> f64 {
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}
