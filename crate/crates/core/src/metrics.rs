//! Registration error scores and the convergence predicate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffd::DisplacementField;
use crate::image::ImageGrid;

/// A trial counts as converged when its T-RMSE is strictly below this.
pub const CONVERGENCE_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialScore {
    pub t_rmse: f64,
    pub i_rmse: f64,
    pub converged: bool,
}

impl TrialScore {
    pub fn new(t_rmse: f64, i_rmse: f64) -> Self {
        Self {
            t_rmse,
            i_rmse,
            converged: converged(t_rmse),
        }
    }
}

/// Root-mean-square length of the per-pixel difference vectors.
pub fn t_rmse(true_field: &DisplacementField, est_field: &DisplacementField) -> Result<f64> {
    if true_field.width != est_field.width || true_field.height != est_field.height {
        return Err(Error::Argument(format!(
            "displacement fields differ in size: {}x{} vs {}x{}",
            true_field.width, true_field.height, est_field.width, est_field.height
        )));
    }
    let n = true_field.vectors.len();
    if n == 0 {
        return Ok(0.0);
    }
    let s: f64 = true_field
        .vectors
        .iter()
        .zip(&est_field.vectors)
        .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
        .sum();
    Ok((s / n as f64).sqrt())
}

/// Root-mean-square intensity difference.
pub fn i_rmse(reference: &ImageGrid, registered: &ImageGrid) -> Result<f64> {
    reference
        .check_same_shape(registered)
        .map_err(|e| Error::Argument(e.to_string()))?;
    let s: f64 = reference
        .data()
        .iter()
        .zip(registered.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((s / reference.len() as f64).sqrt())
}

pub fn converged(t_rmse: f64) -> bool {
    t_rmse < CONVERGENCE_THRESHOLD
}
