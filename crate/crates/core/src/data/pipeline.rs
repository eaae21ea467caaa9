use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{logit, sigmoid};

/// Dequantize with `U(0,1)` noise, divide by `scale`, clamp to
/// `[clamp_eps, 1 - clamp_eps]`, then apply the logit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Pipeline {
    pub scale: f64,
    pub clamp_eps: f64,
    pub noise_seed: u64,
}

impl Default for Pipeline {
    fn default() -> Self {
        Self {
            scale: 256.0,
            clamp_eps: 1e-6,
            noise_seed: 0,
        }
    }
}

/// Preprocessed vectors with the per-sample log-density correction.
///
/// Adding `log_det_correction[n]` to the logit-space negative log-density of
/// sample `n` gives the negative log-density of the dequantized pixels on the
/// `[0, scale)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    pub vectors: Vec<Vec<f64>>,
    pub log_det_correction: Vec<f64>,
}

impl Pipeline {
    /// One pixel with explicit noise `u`: the logit-space value and its
    /// contribution to the log-density correction.
    pub fn transform_pixel(&self, pixel: u8, u: f64) -> (f64, f64) {
        let p = ((pixel as f64 + u) / self.scale).clamp(self.clamp_eps, 1.0 - self.clamp_eps);
        (logit(p), (p * (1.0 - p)).ln() + self.scale.ln())
    }

    /// The noise stream of sample `index`; independent of how samples are
    /// scheduled across threads.
    pub fn noise_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        rng.set_stream(index as u64);
        rng
    }

    pub fn preprocess_one(&self, image: &[u8], index: usize) -> (Vec<f64>, f64) {
        let mut rng = self.noise_rng(index);
        let mut correction = 0.0;
        let v = image
            .iter()
            .map(|&px| {
                let (y, c) = self.transform_pixel(px, rng.random::<f64>());
                correction += c;
                y
            })
            .collect();
        (v, correction)
    }

    pub fn deprocess_pixel(&self, v: f64) -> u8 {
        (sigmoid(v) * self.scale).floor().clamp(0.0, 255.0) as u8
    }
}

pub fn preprocess(images: &[Vec<u8>], pipeline: &Pipeline) -> Processed {
    let (vectors, log_det_correction) = images
        .par_iter()
        .enumerate()
        .map(|(n, img)| pipeline.preprocess_one(img, n))
        .unzip();
    Processed {
        vectors,
        log_det_correction,
    }
}

/// Logistic sigmoid, times the pipeline scale, floored onto `0..=255`.
pub fn deprocess(vectors: &[Vec<f64>], pipeline: &Pipeline) -> Vec<Vec<u8>> {
    vectors
        .iter()
        .map(|v| v.iter().map(|&x| pipeline.deprocess_pixel(x)).collect())
        .collect()
}

pub fn deprocess_pixel(v: f64) -> u8 {
    Pipeline::default().deprocess_pixel(v)
}
