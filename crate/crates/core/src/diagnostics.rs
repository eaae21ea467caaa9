//! Post-hoc checks of a network: per-layer condition numbers, normality of
//! random one-dimensional projections of the latent codes, and likelihood
//! ranking of samples.

use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::linalg::{condition_number, norm2};
use crate::model::{LuNet, ModelError};

/// Condition numbers of one layer; `None` marks a factor that could not be
/// inverted.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCondition {
    pub layer: usize,
    pub kappa_upper: Option<f64>,
    pub kappa_lower: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub depth: usize,
    pub dim: usize,
    pub label: String,
    pub layers: Vec<LayerCondition>,
}

impl ConditionReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "layer,kappa_u,kappa_l,note")?;
        let fmt = |k: Option<f64>| k.map_or_else(|| "nan".to_string(), |k| k.to_string());
        for l in &self.layers {
            writeln!(
                out,
                "{},{},{},{}",
                l.layer,
                fmt(l.kappa_upper),
                fmt(l.kappa_lower),
                l.note.as_deref().unwrap_or("")
            )?;
        }
        out.flush()
    }
}

/// `kappa(U)` and `kappa(L)` of every layer. A singular diagonal is recorded
/// on that layer and the report continues.
pub fn condition_report(net: &LuNet, label: impl Into<String>) -> ConditionReport {
    let layers = net
        .layers()
        .par_iter()
        .enumerate()
        .map(|(m, layer)| {
            let upper = condition_number(&layer.upper);
            let lower = condition_number(&layer.lower);
            let note = match (&upper, &lower) {
                (Err(e), _) | (_, Err(e)) => Some(e.to_string()),
                _ => None,
            };
            LayerCondition {
                layer: m,
                kappa_upper: upper.ok(),
                kappa_lower: lower.ok(),
                note,
            }
        })
        .collect();
    ConditionReport {
        depth: net.depth(),
        dim: net.dim(),
        label: label.into(),
        layers,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionTest {
    pub seed: u64,
    /// Unit-length projection direction.
    pub direction: Vec<f64>,
    pub projected: Vec<f64>,
    pub ks_statistic: f64,
}

impl ProjectionTest {
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "index,z")?;
        for (i, z) in self.projected.iter().enumerate() {
            writeln!(out, "{i},{z}")?;
        }
        out.flush()
    }
}

pub fn random_direction(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let c: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm2(&c);
        if n > 0.0 {
            return c.into_iter().map(|v| v / n).collect();
        }
    }
}

/// One-sample Kolmogorov-Smirnov distance between `values` and the standard
/// normal distribution.
pub fn ks_standard_normal(values: &[f64]) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let cdf = normal.cdf(z);
            (((i + 1) as f64 / n) - cdf).max(cdf - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Projects the latent codes of `data` onto a random unit direction drawn
/// from `seed` and measures their distance from `N(0, 1)`.
pub fn projection_normality(net: &LuNet, data: &[Vec<f64>], seed: u64) -> Result<ProjectionTest, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let direction = random_direction(net.dim(), seed);
    let projected = data
        .par_iter()
        .map(|x| {
            let z = net.transform(x)?;
            Ok(z.iter().zip(&direction).map(|(a, b)| a * b).sum())
        })
        .collect::<Result<Vec<f64>, ModelError>>()?;
    let ks_statistic = ks_standard_normal(&projected);
    Ok(ProjectionTest {
        seed,
        direction,
        projected,
        ks_statistic,
    })
}

/// Indices of `data` by decreasing log-density; ties keep their input order.
pub fn rank_by_likelihood(net: &LuNet, data: &[Vec<f64>]) -> Result<Vec<usize>, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let log_densities = net.log_density_batch(data)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| log_densities[b].total_cmp(&log_densities[a]));
    Ok(order)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub center: f64,
    pub count: usize,
    /// Standard normal density at the bin center.
    pub normal_density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    pub bins: Vec<HistogramBin>,
}

impl Histogram {
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "bin_center,count,normal_density")?;
        for b in &self.bins {
            writeln!(out, "{},{},{}", b.center, b.count, b.normal_density)?;
        }
        out.flush()
    }
}

/// Equal-width bins spanning `[min, max]` of the projected values. Bins are
/// half-open `[lo, hi)` except the last, which also includes `max`. Constant
/// data lands entirely in the first bin.
///
/// # Panics
/// If `bins < 2`.
pub fn normality_histogram(test: &ProjectionTest, bins: usize) -> Histogram {
    assert!(bins >= 2, "at least two bins are required");
    let values = &test.projected;
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let (min, max) = if values.is_empty() { (0.0, 0.0) } else { (min, max) };
    let width = (max - min) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = if width > 0.0 {
            (((v - min) / width).floor() as usize).min(bins - 1)
        } else {
            0
        };
        counts[idx] += 1;
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Histogram {
        bin_width: width,
        bins: counts
            .into_iter()
            .enumerate()
            .map(|(i, count)| {
                let center = min + (i as f64 + 0.5) * width;
                HistogramBin {
                    center,
                    count,
                    normal_density: normal.pdf(center),
                }
            })
            .collect(),
    }
}
