use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabeledImages;

/// Images of a single soft Gaussian blob with jittered position, width and
/// brightness on a black background; a stand-in for one digit class when no
/// IDX files are available. All images carry `label`.
pub fn synthetic_blobs(n: usize, rows: usize, cols: usize, label: u8, seed: u64) -> LabeledImages {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n)
        .map(|_| {
            let cy = rows as f64 / 2.0 + rng.random_range(-3.0..3.0);
            let cx = cols as f64 / 2.0 + rng.random_range(-3.0..3.0);
            let sy = rng.random_range(2.5..4.5);
            let sx = rng.random_range(1.5..3.5);
            let peak = rng.random_range(180.0..255.0);
            (0..rows * cols)
                .map(|k| {
                    let dy = (k / cols) as f64 + 0.5 - cy;
                    let dx = (k % cols) as f64 + 0.5 - cx;
                    let v = peak * (-0.5 * ((dy / sy).powi(2) + (dx / sx).powi(2))).exp();
                    v.round().clamp(0.0, 255.0) as u8
                })
                .collect()
        })
        .collect();
    LabeledImages {
        rows,
        cols,
        images,
        labels: vec![label; n],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let a = synthetic_blobs(5, 28, 28, 1, 3);
        assert_eq!(a.len(), 5);
        assert!(a.images.iter().all(|img| img.len() == 784));
        assert_eq!(a, synthetic_blobs(5, 28, 28, 1, 3));
        assert_ne!(a.images[0], a.images[1]);
        assert!(a
            .images
            .iter()
            .all(|img| img[0] == 0 && *img.iter().max().unwrap() > 150));
    }
}
