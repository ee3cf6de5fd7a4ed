//! Bidimensional empirical mode decomposition.
//!
//! Starting from `RES_0 = I`, each level sifts the previous residual into an
//! intrinsic mode function and subtracts it:
//!
//! ```text
//! IMF_i = RES_{i-1} - (E_max + E_min) / 2      (iterated until the SD stop)
//! RES_i = RES_{i-1} - IMF_i
//! ```
//!
//! IMF 1 carries the highest spatial frequencies; later IMFs are
//! progressively smoother and the final residual holds the slow trend.

mod envelope;
mod extrema;

pub use envelope::{
    dedup_points, delaunay_surface, interpolate_envelope, interpolate_envelope_with,
    ThinPlateSpline, DEFAULT_TPS_MAX_POINTS,
};
pub use extrema::{find_local_extrema, ExtremaSet, ScatterPoint};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Guards the SD denominator on near-zero residuals.
pub const SD_EPSILON: f64 = 1e-12;

/// Stopping rule and envelope settings for sifting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiftOptions {
    pub max_sift_iters: usize,
    pub sd_threshold: f64,
    /// Above this many envelope points the Delaunay fallback replaces TPS.
    pub tps_max_points: usize,
}

impl Default for SiftOptions {
    fn default() -> Self {
        Self {
            max_sift_iters: 20,
            sd_threshold: 0.003,
            tps_max_points: DEFAULT_TPS_MAX_POINTS,
        }
    }
}

/// IMFs (index 0 = IMF 1, highest frequency) plus the final residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ImfStack {
    pub imfs: Vec<ImageGrid>,
    pub residual: ImageGrid,
}

impl ImfStack {
    pub fn levels(&self) -> usize {
        self.imfs.len()
    }

    /// `sum(IMFs) + residual`.
    pub fn reconstruct(&self) -> ImageGrid {
        let mut acc = self.residual.data().to_vec();
        for imf in &self.imfs {
            for (a, v) in acc.iter_mut().zip(imf.data()) {
                *a += v;
            }
        }
        ImageGrid::new(self.residual.width(), self.residual.height(), acc)
            .expect("reconstruction of finite grids is finite")
    }
}

/// Mean of the upper and lower envelopes of `h`.
pub fn mean_envelope(h: &ImageGrid, extrema: &ExtremaSet, opts: &SiftOptions) -> Result<ImageGrid> {
    let (w, ht) = (h.width(), h.height());
    let upper = interpolate_envelope_with(&extrema.upper_points(), w, ht, opts.tps_max_points)?;
    let lower = interpolate_envelope_with(&extrema.lower_points(), w, ht, opts.tps_max_points)?;
    upper.zip_map(&lower, |a, b| 0.5 * (a + b))
}

/// Outcome of one sifting run.
#[derive(Debug, Clone)]
pub struct SiftOutcome {
    pub imf: ImageGrid,
    pub iterations: usize,
}

/// Extracts one IMF from `residual_prev`.
///
/// The first envelope-mean subtraction always runs (corner anchors make the
/// envelopes well defined even without interior extrema); afterwards the
/// loop stops on the SD criterion, on `max_sift_iters`, or when fewer than
/// three strict maxima or minima remain. Grids whose corners are collinear
/// (a single row or column) are returned unchanged.
pub fn sift_detailed(residual_prev: &ImageGrid, opts: &SiftOptions) -> SiftOutcome {
    let mut h = residual_prev.clone();
    let mut iterations = 0;
    while iterations < opts.max_sift_iters.max(1) {
        let extrema = find_local_extrema(&h);
        if iterations > 0 && extrema.is_degenerate() {
            break;
        }
        let mean = match mean_envelope(&h, &extrema, opts) {
            Ok(m) => m,
            Err(_) => break,
        };
        let next = h.sub(&mean).expect("same shape");
        let num: f64 = h
            .data()
            .iter()
            .zip(next.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let den: f64 = h.data().iter().map(|a| a * a + SD_EPSILON).sum();
        h = next;
        iterations += 1;
        if num / den < opts.sd_threshold {
            break;
        }
    }
    SiftOutcome { imf: h, iterations }
}

/// Extracts one IMF; see [`sift_detailed`].
pub fn sift(residual_prev: &ImageGrid, opts: &SiftOptions) -> ImageGrid {
    sift_detailed(residual_prev, opts).imf
}

/// Decomposes `img` into `n` IMFs and a residual.
///
/// When a residual becomes degenerate (fewer than three strict extrema of
/// either kind) the remaining IMFs are zero grids, so the stack always has
/// `n` levels.
pub fn decompose(img: &ImageGrid, n: usize, opts: &SiftOptions) -> Result<ImfStack> {
    if n == 0 {
        return Err(Error::Argument("decomposition needs at least one level".into()));
    }
    let (w, h) = (img.width(), img.height());
    let mut residual = img.clone();
    let mut imfs = Vec::with_capacity(n);
    for _ in 0..n {
        if find_local_extrema(&residual).is_degenerate() {
            imfs.push(ImageGrid::zeros(w, h));
            continue;
        }
        let imf = sift(&residual, opts);
        residual = residual.sub(&imf)?;
        imfs.push(imf);
    }
    Ok(ImfStack { imfs, residual })
}

/// Per-pixel mean of all IMFs; the residual is excluded.
pub fn average_feature_map(stack: &ImfStack) -> Result<ImageGrid> {
    let first = stack
        .imfs
        .first()
        .ok_or_else(|| Error::Argument("stack has no IMFs".into()))?;
    let mut acc = vec![0.0; first.len()];
    for imf in &stack.imfs {
        for (a, v) in acc.iter_mut().zip(imf.data()) {
            *a += v;
        }
    }
    let k = stack.imfs.len() as f64;
    ImageGrid::new(
        first.width(),
        first.height(),
        acc.into_iter().map(|v| v / k).collect(),
    )
}
