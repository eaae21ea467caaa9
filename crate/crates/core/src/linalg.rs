//! Packed triangular matrices, their products and substitution solvers,
//! and a matrix-free spectral condition number estimate.
//!
//! Both matrix types store their triangle row-major, so every kernel below
//! walks memory contiguously:
//!
//! * [`UnitLowerTriangular`] keeps only the strict lower part; row `i` holds
//!   `(i, 0) .. (i, i-1)` at offset `i (i - 1) / 2`. The unit diagonal is
//!   implicit.
//! * [`UpperTriangular`] keeps the diagonal and everything right of it; row
//!   `i` holds `(i, i) .. (i, D-1)` at offset `i D - i (i - 1) / 2`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

/// Diagonal magnitude below which back substitution is refused.
pub const DIAG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("near-singular diagonal entry {value:e} at index {index}")]
    NearSingularDiagonal { index: usize, value: f64 },
}

fn check_len(expected: usize, got: usize) -> Result<(), LinalgError> {
    if expected == got {
        Ok(())
    } else {
        Err(LinalgError::DimensionMismatch { expected, got })
    }
}

#[inline]
fn lower_offset(i: usize) -> usize {
    i * i.saturating_sub(1) / 2
}

#[inline]
fn upper_offset(dim: usize, i: usize) -> usize {
    i * dim - i * i.saturating_sub(1) / 2
}

/// Unit lower triangular matrix with packed strict lower part.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitLowerTriangular {
    dim: usize,
    strict_lower: Vec<f64>,
}

impl UnitLowerTriangular {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            strict_lower: vec![0.0; packed_lower_len(dim)],
        }
    }

    pub fn from_packed(dim: usize, strict_lower: Vec<f64>) -> Result<Self, LinalgError> {
        check_len(packed_lower_len(dim), strict_lower.len())?;
        Ok(Self { dim, strict_lower })
    }

    /// Takes the strict lower triangle of a row-major dense `dim x dim`
    /// matrix; the diagonal and upper part are ignored.
    pub fn from_dense(dim: usize, dense: &[f64]) -> Result<Self, LinalgError> {
        check_len(dim * dim, dense.len())?;
        let mut strict_lower = Vec::with_capacity(packed_lower_len(dim));
        for i in 0..dim {
            strict_lower.extend_from_slice(&dense[i * dim..i * dim + i]);
        }
        Ok(Self { dim, strict_lower })
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            out[i * d..i * d + i].copy_from_slice(self.row(i));
            out[i * d + i] = 1.0;
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn packed(&self) -> &[f64] {
        &self.strict_lower
    }

    pub fn packed_mut(&mut self) -> &mut [f64] {
        &mut self.strict_lower
    }

    /// Strict lower entries `(i, 0) .. (i, i-1)`.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let off = lower_offset(i);
        &self.strict_lower[off..off + i]
    }

    /// Entry `(i, j)` including the implicit unit diagonal and zero upper part.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match j.cmp(&i) {
            std::cmp::Ordering::Less => self.strict_lower[lower_offset(i) + j],
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Greater => 0.0,
        }
    }

    /// `y = L x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        check_len(self.dim, x.len())?;
        Ok((0..self.dim).map(|i| x[i] + dot(self.row(i), &x[..i])).collect())
    }

    /// `y = L^T x`.
    pub fn matvec_transpose(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        check_len(self.dim, x.len())?;
        let mut y = x.to_vec();
        for i in 1..self.dim {
            axpy(x[i], self.row(i), &mut y[..i]);
        }
        Ok(y)
    }

    /// Solves `L y = rhs` by forward substitution.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
        check_len(self.dim, rhs.len())?;
        let mut y = Vec::with_capacity(self.dim);
        for i in 0..self.dim {
            let v = rhs[i] - dot(self.row(i), &y[..i]);
            y.push(v);
        }
        Ok(y)
    }

    /// Solves `L^T y = rhs` by backward column sweeps.
    pub fn solve_transpose(&self, rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
        check_len(self.dim, rhs.len())?;
        let mut y = rhs.to_vec();
        for i in (1..self.dim).rev() {
            let yi = y[i];
            axpy(-yi, self.row(i), &mut y[..i]);
        }
        Ok(y)
    }

    /// [`matvec`](Self::matvec) of every vector in `xs`, bit-identical to
    /// the single-vector product.
    pub fn matvec_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, LinalgError> {
        map_blocks(xs, self.dim, |xs, ys| {
            for y in ys.iter_mut() {
                *y = vec![0.0; self.dim];
            }
            for i in 0..self.dim {
                let row = self.row(i);
                for (x, y) in xs.iter().zip(ys.iter_mut()) {
                    y[i] = x[i] + dot(row, &x[..i]);
                }
            }
        })
    }

    /// [`matvec_transpose`](Self::matvec_transpose) of every vector in `xs`.
    pub fn matvec_transpose_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, LinalgError> {
        map_blocks(xs, self.dim, |xs, ys| {
            for (x, y) in xs.iter().zip(ys.iter_mut()) {
                *y = x.clone();
            }
            for i in 1..self.dim {
                let row = self.row(i);
                for (x, y) in xs.iter().zip(ys.iter_mut()) {
                    axpy(x[i], row, &mut y[..i]);
                }
            }
        })
    }
}

/// Upper triangular matrix with packed upper part, diagonal included.
#[derive(Debug, Clone, PartialEq)]
pub struct UpperTriangular {
    dim: usize,
    upper: Vec<f64>,
}

impl UpperTriangular {
    pub fn identity(dim: usize) -> Self {
        let mut u = Self {
            dim,
            upper: vec![0.0; packed_upper_len(dim)],
        };
        for i in 0..dim {
            u.row_mut(i)[0] = 1.0;
        }
        u
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut u = Self::identity(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            u.row_mut(i)[0] = d;
        }
        u
    }

    pub fn from_packed(dim: usize, upper: Vec<f64>) -> Result<Self, LinalgError> {
        check_len(packed_upper_len(dim), upper.len())?;
        Ok(Self { dim, upper })
    }

    /// Takes the upper triangle (diagonal included) of a row-major dense
    /// `dim x dim` matrix.
    pub fn from_dense(dim: usize, dense: &[f64]) -> Result<Self, LinalgError> {
        check_len(dim * dim, dense.len())?;
        let mut upper = Vec::with_capacity(packed_upper_len(dim));
        for i in 0..dim {
            upper.extend_from_slice(&dense[i * dim + i..(i + 1) * dim]);
        }
        Ok(Self { dim, upper })
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            out[i * d + i..(i + 1) * d].copy_from_slice(self.row(i));
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn packed(&self) -> &[f64] {
        &self.upper
    }

    pub fn packed_mut(&mut self) -> &mut [f64] {
        &mut self.upper
    }

    /// Entries `(i, i) .. (i, D-1)`.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let off = upper_offset(self.dim, i);
        &self.upper[off..off + self.dim - i]
    }

    #[inline]
    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let off = upper_offset(self.dim, i);
        let len = self.dim - i;
        &mut self.upper[off..off + len]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j < i {
            0.0
        } else {
            self.row(i)[j - i]
        }
    }

    #[inline]
    pub fn diag(&self, i: usize) -> f64 {
        self.upper[upper_offset(self.dim, i)]
    }

    /// Position of diagonal entry `(i, i)` in the packed storage.
    #[inline]
    pub fn diag_index(&self, i: usize) -> usize {
        upper_offset(self.dim, i)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.diag(i)).collect()
    }

    /// Fails on the first diagonal entry with magnitude below [`DIAG_EPS`].
    pub fn check_invertible(&self) -> Result<(), LinalgError> {
        for i in 0..self.dim {
            let value = self.diag(i);
            if !(value.abs() >= DIAG_EPS) {
                return Err(LinalgError::NearSingularDiagonal { index: i, value });
            }
        }
        Ok(())
    }

    /// `y = U x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        check_len(self.dim, x.len())?;
        Ok((0..self.dim).map(|i| dot(self.row(i), &x[i..])).collect())
    }

    /// `y = U^T x`.
    pub fn matvec_transpose(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        check_len(self.dim, x.len())?;
        let mut y = vec![0.0; self.dim];
        for i in 0..self.dim {
            axpy(x[i], self.row(i), &mut y[i..]);
        }
        Ok(y)
    }

    /// Solves `U x = rhs` by back substitution.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
        check_len(self.dim, rhs.len())?;
        self.check_invertible()?;
        let mut x = vec![0.0; self.dim];
        for i in (0..self.dim).rev() {
            let row = self.row(i);
            let s = rhs[i] - dot(&row[1..], &x[i + 1..]);
            x[i] = s / row[0];
        }
        Ok(x)
    }

    /// Solves `U^T x = rhs` by forward column sweeps.
    pub fn solve_transpose(&self, rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
        check_len(self.dim, rhs.len())?;
        self.check_invertible()?;
        let mut x = rhs.to_vec();
        for i in 0..self.dim {
            let row = self.row(i);
            let xi = x[i] / row[0];
            x[i] = xi;
            axpy(-xi, &row[1..], &mut x[i + 1..]);
        }
        Ok(x)
    }

    /// [`matvec`](Self::matvec) of every vector in `xs`, bit-identical to
    /// the single-vector product.
    pub fn matvec_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, LinalgError> {
        map_blocks(xs, self.dim, |xs, ys| {
            for y in ys.iter_mut() {
                *y = vec![0.0; self.dim];
            }
            for i in 0..self.dim {
                let row = self.row(i);
                for (x, y) in xs.iter().zip(ys.iter_mut()) {
                    y[i] = dot(row, &x[i..]);
                }
            }
        })
    }

    /// [`matvec_transpose`](Self::matvec_transpose) of every vector in `xs`.
    pub fn matvec_transpose_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, LinalgError> {
        map_blocks(xs, self.dim, |xs, ys| {
            for y in ys.iter_mut() {
                *y = vec![0.0; self.dim];
            }
            for i in 0..self.dim {
                let row = self.row(i);
                for (x, y) in xs.iter().zip(ys.iter_mut()) {
                    axpy(x[i], row, &mut y[i..]);
                }
            }
        })
    }
}

/// Vectors handled together by the batched products, so that each matrix
/// row is reused from cache across the block.
const BATCH_BLOCK: usize = 4;

fn map_blocks<F>(xs: &[Vec<f64>], dim: usize, kernel: F) -> Result<Vec<Vec<f64>>, LinalgError>
where
    F: Fn(&[Vec<f64>], &mut [Vec<f64>]) + Sync,
{
    for x in xs {
        check_len(dim, x.len())?;
    }
    let mut out = vec![Vec::new(); xs.len()];
    out.par_chunks_mut(BATCH_BLOCK)
        .zip(xs.par_chunks(BATCH_BLOCK))
        .for_each(|(ys, xs)| kernel(xs, ys));
    Ok(out)
}

pub fn packed_lower_len(dim: usize) -> usize {
    dim * dim.saturating_sub(1) / 2
}

pub fn packed_upper_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

#[inline]
/// Inner product over the common length. Eight independent partial sums
/// break the floating-point dependency chain; the reduction order is fixed,
/// so results do not depend on the machine's vector width.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y[j] += sum_n coeffs[n] * vecs[n][offset + j]`, four terms per pass over
/// `y` with a fixed association order.
pub(crate) fn add_weighted_sum(y: &mut [f64], coeffs: &[f64], vecs: &[&[f64]], offset: usize) {
    let len = y.len();
    let mut terms = coeffs.chunks_exact(4).zip(vecs.chunks_exact(4));
    for (c, v) in terms.by_ref() {
        let (v0, v1, v2, v3) = (
            &v[0][offset..offset + len],
            &v[1][offset..offset + len],
            &v[2][offset..offset + len],
            &v[3][offset..offset + len],
        );
        for j in 0..len {
            y[j] += (c[0] * v0[j] + c[1] * v1[j]) + (c[2] * v2[j] + c[3] * v3[j]);
        }
    }
    let rest = coeffs.len() - coeffs.len() % 4;
    for (c, v) in coeffs[rest..].iter().zip(&vecs[rest..]) {
        axpy(*c, &v[offset..offset + len], y);
    }
}

pub fn matvec_unit_lower(l: &UnitLowerTriangular, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
    l.matvec(x)
}

pub fn matvec_upper(u: &UpperTriangular, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
    u.matvec(x)
}

pub fn solve_unit_lower(l: &UnitLowerTriangular, rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
    l.solve(rhs)
}

pub fn solve_upper(u: &UpperTriangular, rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
    u.solve(rhs)
}

/// Settings for the power iteration behind [`spectral_norm`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    /// Convergence threshold on successive estimates, relative to
    /// `max(1, estimate)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Seed for the pseudo-random start vector.
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralNorm {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Estimates the largest singular value of a linear operator known only
/// through `apply` (`x -> A x`) and `apply_transpose` (`x -> A^T x`), by
/// power iteration on `A^T A`.
pub fn spectral_norm<F, G>(apply: F, apply_transpose: G, dim: usize, settings: PowerIteration) -> SpectralNorm
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if dim == 0 {
        return SpectralNorm {
            value: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);

    let mut prev = f64::NAN;
    let mut sigma = 0.0;
    for iter in 1..=settings.max_iter {
        let av = apply(&v);
        // Rayleigh quotient of A^T A at unit v is |A v|^2.
        sigma = norm2(&av);
        if (sigma - prev).abs() <= settings.tol * sigma.max(1.0) {
            return SpectralNorm {
                value: sigma,
                iterations: iter,
                converged: true,
            };
        }
        prev = sigma;
        let mut w = apply_transpose(&av);
        if normalize(&mut w) == 0.0 {
            // A v = 0 with v in the null space; the operator may still be
            // nonzero elsewhere, so restart from a fresh direction.
            v = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            normalize(&mut v);
            continue;
        }
        v = w;
    }
    SpectralNorm {
        value: sigma,
        iterations: settings.max_iter,
        converged: false,
    }
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// A triangular factor whose 2-norm condition number can be estimated
/// without forming its inverse.
pub trait TriangularOperator {
    fn op_dim(&self) -> usize;
    fn check(&self) -> Result<(), LinalgError>;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_transpose(&self, x: &[f64]) -> Vec<f64>;
    fn apply_inverse(&self, x: &[f64]) -> Vec<f64>;
    fn apply_inverse_transpose(&self, x: &[f64]) -> Vec<f64>;
}

impl TriangularOperator for UnitLowerTriangular {
    fn op_dim(&self) -> usize {
        self.dim
    }
    fn check(&self) -> Result<(), LinalgError> {
        Ok(())
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matvec(x).expect("operator dimension")
    }
    fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        self.matvec_transpose(x).expect("operator dimension")
    }
    fn apply_inverse(&self, x: &[f64]) -> Vec<f64> {
        self.solve(x).expect("operator dimension")
    }
    fn apply_inverse_transpose(&self, x: &[f64]) -> Vec<f64> {
        self.solve_transpose(x).expect("operator dimension")
    }
}

impl TriangularOperator for UpperTriangular {
    fn op_dim(&self) -> usize {
        self.dim
    }
    fn check(&self) -> Result<(), LinalgError> {
        self.check_invertible()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matvec(x).expect("operator dimension")
    }
    fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        self.matvec_transpose(x).expect("operator dimension")
    }
    fn apply_inverse(&self, x: &[f64]) -> Vec<f64> {
        self.solve(x).expect("checked invertible")
    }
    fn apply_inverse_transpose(&self, x: &[f64]) -> Vec<f64> {
        self.solve_transpose(x).expect("checked invertible")
    }
}

/// Condition number estimate with convergence information for both norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionEstimate {
    pub kappa: f64,
    pub norm: SpectralNorm,
    pub inverse_norm: SpectralNorm,
}

impl ConditionEstimate {
    pub fn converged(&self) -> bool {
        self.norm.converged && self.inverse_norm.converged
    }
}

/// `kappa(A) = |A|_2 |A^-1|_2`, the inverse norm being taken on the
/// substitution solves.
pub fn condition_number_with<A: TriangularOperator + ?Sized>(
    a: &A,
    settings: PowerIteration,
) -> Result<ConditionEstimate, LinalgError> {
    a.check()?;
    let dim = a.op_dim();
    let norm = spectral_norm(|x| a.apply(x), |x| a.apply_transpose(x), dim, settings);
    let inverse_norm = spectral_norm(
        |x| a.apply_inverse(x),
        |x| a.apply_inverse_transpose(x),
        dim,
        settings,
    );
    Ok(ConditionEstimate {
        kappa: norm.value * inverse_norm.value,
        norm,
        inverse_norm,
    })
}

pub fn condition_number<A: TriangularOperator + ?Sized>(a: &A) -> Result<f64, LinalgError> {
    condition_number_with(a, PowerIteration::default()).map(|c| c.kappa)
}
