//! Additive bias-field noise: a normalized mixture of isotropic 2D Gaussians,
//!
//! ```text
//! G(x, y) = (1/K) * sum_k exp(-|(x, y) - mu_k|^2 / (2 sigma^2))
//! ```
//!
//! added pixel-wise to an image without clamping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Default kernel width as a fraction of image width (`sigma = width / 16`).
pub const DEFAULT_SIGMA_FRACTION: f64 = 16.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasFieldConfig {
    pub kernel_count: usize,
    /// Kernel standard deviation in pixels; `None` means `width / 16`.
    pub sigma: Option<f64>,
    /// Explicit kernel centers `(x, y)`; drawn from `seed` when `None`.
    pub means: Option<Vec<(f64, f64)>>,
    pub seed: u64,
}

impl BiasFieldConfig {
    /// `kernel_count` kernels at random centers drawn from `seed`.
    pub fn random(kernel_count: usize, seed: u64) -> Self {
        Self {
            kernel_count,
            sigma: None,
            means: None,
            seed,
        }
    }

    /// Kernels at fixed centers.
    pub fn at(means: Vec<(f64, f64)>, sigma: Option<f64>) -> Self {
        Self {
            kernel_count: means.len(),
            sigma,
            means: Some(means),
            seed: 0,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = Some(sigma);
        self
    }

    /// Kernel centers, drawing them uniformly over the pixel domain when
    /// not given explicitly.
    pub fn resolve_means(&self, width: usize, height: usize) -> Vec<(f64, f64)> {
        match &self.means {
            Some(m) => m.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..self.kernel_count)
                    .map(|_| {
                        let x = rng.random::<f64>() * (width - 1) as f64;
                        let y = rng.random::<f64>() * (height - 1) as f64;
                        (x, y)
                    })
                    .collect()
            }
        }
    }

    pub fn resolve_sigma(&self, width: usize) -> f64 {
        self.sigma
            .unwrap_or(width as f64 / DEFAULT_SIGMA_FRACTION)
    }
}

/// Evaluates the Gaussian mixture on the pixel lattice. `K = 0` gives a zero
/// grid.
pub fn generate_bias_field(width: usize, height: usize, config: &BiasFieldConfig) -> Result<ImageGrid> {
    if width == 0 || height == 0 {
        return Err(Error::Argument("bias field dimensions must be positive".into()));
    }
    let means = config.resolve_means(width, height);
    if let Some(m) = &config.means {
        if m.len() != config.kernel_count {
            return Err(Error::Argument(format!(
                "kernel_count {} does not match {} explicit means",
                config.kernel_count,
                m.len()
            )));
        }
    }
    if means.is_empty() {
        return Ok(ImageGrid::zeros(width, height));
    }
    let sigma = config.resolve_sigma(width);
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("sigma must be positive, got {sigma}")));
    }
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let inv_k = 1.0 / means.len() as f64;
    Ok(ImageGrid::from_fn(width, height, |x, y| {
        let (x, y) = (x as f64, y as f64);
        let s: f64 = means
            .iter()
            .map(|&(mx, my)| (-((x - mx).powi(2) + (y - my).powi(2)) * inv_two_var).exp())
            .sum();
        s * inv_k
    }))
}

/// Adds `field` to `img` pixel-wise.
pub fn apply_bias(img: &ImageGrid, field: &ImageGrid) -> Result<ImageGrid> {
    img.check_same_shape(field)
        .map_err(|e| Error::Argument(e.to_string()))?;
    img.add(field)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_kernel_peak_and_decay() {
        let cfg = BiasFieldConfig::at(vec![(10.0, 12.0)], Some(4.0));
        let g = generate_bias_field(30, 30, &cfg).unwrap();
        assert_eq!(g.get(10, 12), 1.0);
        assert!((g.get(14, 12) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((g.get(10, 8) - 0.6065306597126334).abs() < 1e-15);
        assert!(g.get(20, 12) < g.get(14, 12));
    }

    #[test]
    fn duplicate_means_match_single_kernel() {
        let one = generate_bias_field(20, 15, &BiasFieldConfig::at(vec![(5.0, 5.0)], None)).unwrap();
        let two = generate_bias_field(20, 15, &BiasFieldConfig::at(vec![(5.0, 5.0); 2], None)).unwrap();
        assert!(one.max_abs_diff(&two).unwrap() < 1e-15);
    }

    #[test]
    fn default_sigma() {
        assert_eq!(BiasFieldConfig::random(1, 0).resolve_sigma(218), 13.625);
    }

    #[test]
    fn zero_kernels_is_zero_field() {
        let g = generate_bias_field(7, 5, &BiasFieldConfig::random(0, 3)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_and_bounded() {
        let cfg = BiasFieldConfig::random(3, 99);
        let a = generate_bias_field(40, 30, &cfg).unwrap();
        let b = generate_bias_field(40, 30, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.min_max().1 <= 1.0);
        let other = generate_bias_field(40, 30, &BiasFieldConfig::random(3, 100)).unwrap();
        assert_ne!(a, other);
        let means = cfg.resolve_means(40, 30);
        assert!(means.iter().all(|&(x, y)| (0.0..=39.0).contains(&x) && (0.0..=29.0).contains(&y)));
    }

    #[test]
    fn permutation_invariant() {
        let m = vec![(3.0, 4.0), (10.5, 2.0), (7.0, 9.0)];
        let mut r = m.clone();
        r.reverse();
        let a = generate_bias_field(15, 12, &BiasFieldConfig::at(m, Some(3.0))).unwrap();
        let b = generate_bias_field(15, 12, &BiasFieldConfig::at(r, Some(3.0))).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-15);
    }

    #[test]
    fn apply_cases() {
        let img = ImageGrid::from_fn(6, 4, |x, y| (x * y) as f64 * 0.1);
        assert_eq!(apply_bias(&img, &ImageGrid::zeros(6, 4)).unwrap(), img);
        let shifted = apply_bias(&img, &ImageGrid::filled(6, 4, 0.25)).unwrap();
        for (a, b) in shifted.data().iter().zip(img.data()) {
            assert_eq!(*a, b + 0.25);
        }
        let field = generate_bias_field(6, 4, &BiasFieldConfig::random(2, 1)).unwrap();
        let back = apply_bias(&img, &field).unwrap().sub(&field).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() < 1e-15);
        assert!(matches!(
            apply_bias(&img, &ImageGrid::zeros(4, 6)),
            Err(Error::Argument(_))
        ));
    }
}
