//! Procedural brain-like test images.
//!
//! An axial-slice caricature: scalp/skull ring, CSF gap, folded gray/white
//! matter boundary, sulci, ventricles and low-amplitude tissue texture.
//! Geometry is defined in normalized coordinates, so the same `variant`
//! rendered at 218x181 and at 109x90 shows the same anatomy.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rand_distr::{Distribution, Normal};

use crate::image::{normalize, smooth3, ImageGrid};

/// Full-resolution slice size used throughout the experiments.
pub const FULL_SIZE: (usize, usize) = (218, 181);
/// Half-scale size used for desk-scale registration runs.
pub const HALF_SIZE: (usize, usize) = (109, 90);

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

/// Standard deviation of the additive acquisition noise, relative to the
/// brightest tissue.
pub const DEFAULT_NOISE: f64 = 0.03;

/// Renders phantom `variant` at `width x height` with [`DEFAULT_NOISE`],
/// intensities normalized to [0, 1].
pub fn brain_phantom(width: usize, height: usize, variant: u64) -> ImageGrid {
    brain_phantom_with_noise(width, height, variant, DEFAULT_NOISE)
}

/// Renders phantom `variant` with Gaussian pixel noise of standard deviation
/// `noise` added before the final normalization.
pub fn brain_phantom_with_noise(width: usize, height: usize, variant: u64, noise: f64) -> ImageGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_b4a1 ^ variant.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let fold_a = rng.random_range(0.0..2.0 * PI);
    let fold_b = rng.random_range(0.0..2.0 * PI);
    let fold_n = 7.0 + rng.random_range(0..4) as f64;
    let sulci: Vec<f64> = (0..14).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let waves: Vec<Wave> = (0..24)
        .map(|i| {
            let freq = 18.0 + 40.0 * rng.random::<f64>();
            let dir = rng.random_range(0.0..PI);
            Wave {
                kx: freq * dir.cos(),
                ky: freq * dir.sin(),
                phase: rng.random_range(0.0..2.0 * PI),
                amp: 0.035 / (1.0 + 0.1 * i as f64),
            }
        })
        .collect();
    let tilt: f64 = rng.random_range(-0.08..0.08);

    let aspect = width as f64 / height as f64;
    let raw = ImageGrid::from_fn(width, height, |px, py| {
        // Normalized coordinates: head centered, unit radius along y.
        let u = ((px as f64 + 0.5) / width as f64 - 0.5) * 2.0 * aspect;
        let v = ((py as f64 + 0.5) / height as f64 - 0.5) * 2.0;
        let (s, c) = tilt.sin_cos();
        let (x, y) = (c * u - s * v, s * u + c * v);
        let ex = x / 0.78;
        let ey = y / 0.92;
        let r = (ex * ex + ey * ey).sqrt();
        let theta = ey.atan2(ex);

        let mut val = if r > 1.0 {
            0.0
        } else if r > 0.93 {
            0.85
        } else if r > 0.88 {
            0.35
        } else if r > 0.84 {
            0.12
        } else {
            let fold = 0.62
                + 0.07 * (fold_n * theta + fold_a).sin()
                + 0.035 * (2.3 * fold_n * theta + fold_b).sin();
            let mut tissue = if r < fold { 0.78 } else { 0.48 };
            for &a in &sulci {
                let d = (theta - a).sin().abs() * r;
                if r > fold - 0.05 && d < 0.018 {
                    tissue = 0.2;
                }
            }
            // Two lateral ventricles.
            for side in [-1.0, 1.0] {
                let vx = (x - side * 0.13) / 0.07;
                let vy = (y + 0.05) / 0.26;
                if vx * vx + vy * vy < 1.0 {
                    tissue = 0.15;
                }
            }
            // Deep gray nuclei.
            for side in [-1.0, 1.0] {
                let nx = (x - side * 0.3) / 0.1;
                let ny = (y - 0.12) / 0.14;
                if nx * nx + ny * ny < 1.0 {
                    tissue = 0.6;
                }
            }
            tissue
        };
        if r <= 1.0 {
            let tex: f64 = waves
                .iter()
                .map(|w| w.amp * (w.kx * u + w.ky * v + w.phase).sin())
                .sum();
            val += tex;
        }
        val
    });
    let clean = smooth3(&raw);
    if noise <= 0.0 {
        return normalize(&clean);
    }
    let dist = Normal::new(0.0, noise).expect("finite noise level");
    let mut noisy = clean.into_data();
    for v in noisy.iter_mut() {
        *v += dist.sample(&mut rng);
    }
    normalize(&ImageGrid::new(width, height, noisy).expect("finite phantom"))
}
