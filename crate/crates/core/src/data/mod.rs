//! Datasets: the 2-D Gaussian mixture, IDX image files and the
//! dequantize/scale/logit image pipeline.

mod idx;
mod pipeline;
mod synthetic;

use std::io::{self, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx, LabeledImages};
pub use pipeline::{deprocess, deprocess_pixel, preprocess, Pipeline, Processed};
pub use synthetic::synthetic_blobs;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: I/O error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic 0x{found:08x} at offset {offset}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        offset: usize,
        found: u32,
        expected: u32,
    },
    #[error("{path}: dimension mismatch at offset {offset}: {detail}")]
    DimMismatch {
        path: PathBuf,
        offset: usize,
        detail: String,
    },
    #[error("{path}: file truncated at offset {offset}, expected {expected} bytes")]
    TruncatedFile {
        path: PathBuf,
        offset: usize,
        expected: usize,
    },
    #[error("no images with label {0}")]
    EmptyClass(u8),
    #[error("class id {0} out of range 0..=9")]
    InvalidClass(u8),
    #[error("invalid mixture spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSpec {
    pub centers: Vec<[f64; 2]>,
    pub sigma: f64,
    pub n_total: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            centers: vec![[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]],
            sigma: 0.2,
            n_total: 10_000,
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: &str| Err(DataError::InvalidSpec(m.into()));
        if self.centers.is_empty() {
            return fail("at least one center is required");
        }
        if self.centers.iter().flatten().any(|c| !c.is_finite()) {
            return fail("centers must be finite");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail("sigma must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail("train_fraction must lie in (0, 1)");
        }
        if self.n_total < 2 {
            return fail("n_total must be at least 2");
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        ((self.n_total as f64 * self.train_fraction).round() as usize).clamp(1, self.n_total - 1)
    }
}

/// Train and test points.
pub type Split = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Draws `n_total` points (uniform center, isotropic noise) and splits them
/// into train and test sets by a seeded shuffle.
pub fn gaussian_mixture(spec: &MixtureSpec) -> Result<Split, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.sigma).expect("sigma validated");
    let mut points: Vec<Vec<f64>> = (0..spec.n_total)
        .map(|_| {
            let c = spec.centers[rng.random_range(0..spec.centers.len())];
            vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]
        })
        .collect();
    points.shuffle(&mut rng);
    let test = points.split_off(spec.n_train());
    Ok((points, test))
}

/// Writes points as CSV with an `x0,x1,...` header.
pub fn write_points_csv<W: Write>(mut out: W, points: &[Vec<f64>]) -> io::Result<()> {
    if let Some(first) = points.first() {
        let header: Vec<String> = (0..first.len()).map(|i| format!("x{i}")).collect();
        writeln!(out, "{}", header.join(","))?;
    }
    for p in points {
        let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()
}

/// Reads points written by [`write_points_csv`] (or any headered numeric CSV).
pub fn read_points_csv(text: &str) -> Result<Vec<Vec<f64>>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let width = match lines.next() {
        Some(header) => header.split(',').count(),
        None => return Ok(Vec::new()),
    };
    lines
        .enumerate()
        .map(|(i, line)| {
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| format!("row {}: {e}", i + 1))?;
            if row.len() != width {
                return Err(format!("row {}: {} fields, expected {width}", i + 1, row.len()));
            }
            Ok(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_sizes() {
        let (train, test) = gaussian_mixture(&MixtureSpec::default()).unwrap();
        assert_eq!(train.len(), 9000);
        assert_eq!(test.len(), 1000);
        assert!(train.iter().chain(&test).all(|p| p.len() == 2));
    }

    #[test]
    fn degenerate_noise_lands_on_centers() {
        let spec = MixtureSpec {
            sigma: 1e-9,
            n_total: 500,
            ..MixtureSpec::default()
        };
        let (train, test) = gaussian_mixture(&spec).unwrap();
        for p in train.iter().chain(&test) {
            let near = spec
                .centers
                .iter()
                .any(|c| (p[0] - c[0]).abs() < 1e-6 && (p[1] - c[1]).abs() < 1e-6);
            assert!(near, "{p:?}");
        }
    }

    #[test]
    fn conditional_means_match_centers() {
        let spec = MixtureSpec::default();
        let (train, test) = gaussian_mixture(&spec).unwrap();
        let mut sums = [[0.0; 2]; 4];
        let mut counts = [0usize; 4];
        for p in train.iter().chain(&test) {
            // nearest center; the modes are 10 sigma apart so assignment is unambiguous
            let k = (0..4)
                .min_by(|&a, &b| {
                    let d = |c: [f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                    d(spec.centers[a]).total_cmp(&d(spec.centers[b]))
                })
                .unwrap();
            sums[k][0] += p[0];
            sums[k][1] += p[1];
            counts[k] += 1;
        }
        for k in 0..4 {
            let n = counts[k] as f64;
            assert!(n > 2000.0 && n < 3000.0, "count {n}");
            for (sum, center) in sums[k].iter().zip(spec.centers[k]) {
                assert!((sum / n - center).abs() < 3.0 * spec.sigma / n.sqrt());
            }
        }
    }

    #[test]
    fn mixture_is_deterministic_in_seed() {
        let spec = MixtureSpec {
            n_total: 100,
            ..MixtureSpec::default()
        };
        assert_eq!(gaussian_mixture(&spec).unwrap(), gaussian_mixture(&spec).unwrap());
        let other = MixtureSpec {
            seed: 1,
            ..spec.clone()
        };
        assert_ne!(
            gaussian_mixture(&spec).unwrap(),
            gaussian_mixture(&other).unwrap()
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            MixtureSpec {
                centers: vec![],
                ..Default::default()
            },
            MixtureSpec {
                sigma: 0.0,
                ..Default::default()
            },
            MixtureSpec {
                train_fraction: 1.0,
                ..Default::default()
            },
            MixtureSpec {
                n_total: 1,
                ..Default::default()
            },
        ] {
            assert!(gaussian_mixture(&spec).is_err());
        }
    }

    #[test]
    fn csv_round_trip() {
        let pts = vec![vec![0.5, -1.25], vec![3.0, 1e-7]];
        let mut buf = Vec::new();
        write_points_csv(&mut buf, &pts).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x0,x1\n"));
        assert_eq!(read_points_csv(&text).unwrap(), pts);
        assert!(read_points_csv("x0,x1\n1,2,3\n").is_err());
    }
}
