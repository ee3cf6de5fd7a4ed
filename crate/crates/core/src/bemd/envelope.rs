//! Envelope surfaces through scattered extrema.
//!
//! Thin-plate-spline radial basis interpolation is used up to a configurable
//! point budget; above it the surface falls back to piecewise-linear
//! interpolation over a Delaunay triangulation, with nearest-neighbor
//! extrapolation outside the convex hull.

use std::collections::BTreeMap;

use faer::linalg::solvers::Solve;
use faer::Mat;

use super::extrema::ScatterPoint;
use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Point count above which the Delaunay fallback is used.
pub const DEFAULT_TPS_MAX_POINTS: usize = 2000;

/// `r^2 log r`, written in terms of `r^2`.
#[inline]
fn tps_kernel_sq(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// Averages values of points that share coordinates. Output order is
/// sorted by `(y, x)` so results do not depend on input order.
pub fn dedup_points(points: &[ScatterPoint]) -> Vec<ScatterPoint> {
    let mut acc: BTreeMap<(u64, u64), (f64, f64, f64, usize)> = BTreeMap::new();
    for p in points {
        // Sign-normalize -0.0 so it collides with 0.0.
        let key = ((p.y + 0.0).to_bits(), (p.x + 0.0).to_bits());
        let e = acc.entry(key).or_insert((p.x, p.y, 0.0, 0));
        e.2 += p.value;
        e.3 += 1;
    }
    let mut out: Vec<ScatterPoint> = acc
        .into_values()
        .map(|(x, y, sum, n)| ScatterPoint::new(x, y, sum / n as f64))
        .collect();
    out.sort_by(|a, b| a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x)));
    out
}

fn check_non_collinear(points: &[ScatterPoint]) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::Argument(format!(
            "envelope needs at least 3 distinct points, got {}",
            points.len()
        )));
    }
    let p0 = points[0];
    let (mut max_cross, mut scale) = (0.0f64, 0.0f64);
    let p1 = points
        .iter()
        .copied()
        .max_by(|a, b| {
            let da = (a.x - p0.x).powi(2) + (a.y - p0.y).powi(2);
            let db = (b.x - p0.x).powi(2) + (b.y - p0.y).powi(2);
            da.total_cmp(&db)
        })
        .unwrap();
    for p in points {
        let cross = (p1.x - p0.x) * (p.y - p0.y) - (p1.y - p0.y) * (p.x - p0.x);
        max_cross = max_cross.max(cross.abs());
        scale = scale.max((p.x - p0.x).abs() + (p.y - p0.y).abs());
    }
    if max_cross <= 1e-12 * scale.max(1.0).powi(2) {
        return Err(Error::Argument("envelope points are collinear".into()));
    }
    Ok(())
}

/// A fitted thin-plate spline `s(p) = sum_j w_j phi(|p - p_j|) + a0 + a1 x + a2 y`.
///
/// Coordinates are internally divided by `scale` for conditioning; the
/// orthogonality constraints make the interpolant invariant to that.
#[derive(Debug, Clone)]
pub struct ThinPlateSpline {
    cx: Vec<f64>,
    cy: Vec<f64>,
    weights: Vec<f64>,
    affine: [f64; 3],
    scale: f64,
}

impl ThinPlateSpline {
    /// Solves the interpolation + polynomial-orthogonality system.
    /// Points must already be distinct.
    pub fn fit(points: &[ScatterPoint], scale: f64) -> Result<Self> {
        check_non_collinear(points)?;
        let m = points.len();
        let inv = 1.0 / scale;
        let cx: Vec<f64> = points.iter().map(|p| p.x * inv).collect();
        let cy: Vec<f64> = points.iter().map(|p| p.y * inv).collect();
        let n = m + 3;
        let mut a = Mat::<f64>::zeros(n, n);
        for i in 0..m {
            for j in (i + 1)..m {
                let r2 = (cx[i] - cx[j]).powi(2) + (cy[i] - cy[j]).powi(2);
                let k = tps_kernel_sq(r2);
                a[(i, j)] = k;
                a[(j, i)] = k;
            }
            a[(i, m)] = 1.0;
            a[(i, m + 1)] = cx[i];
            a[(i, m + 2)] = cy[i];
            a[(m, i)] = 1.0;
            a[(m + 1, i)] = cx[i];
            a[(m + 2, i)] = cy[i];
        }
        let rhs = Mat::<f64>::from_fn(n, 1, |i, _| if i < m { points[i].value } else { 0.0 });
        let sol = a.partial_piv_lu().solve(&rhs);
        let sol: Vec<f64> = (0..n).map(|i| sol[(i, 0)]).collect();
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "singular thin-plate-spline system".into(),
            ));
        }
        Ok(Self {
            cx,
            cy,
            weights: sol[..m].to_vec(),
            affine: [sol[m], sol[m + 1], sol[m + 2]],
            scale,
        })
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let inv = 1.0 / self.scale;
        let (x, y) = (x * inv, y * inv);
        let mut s = self.affine[0] + self.affine[1] * x + self.affine[2] * y;
        for ((&px, &py), &w) in self.cx.iter().zip(&self.cy).zip(&self.weights) {
            let r2 = (x - px).powi(2) + (y - py).powi(2);
            s += w * tps_kernel_sq(r2);
        }
        s
    }

    /// Evaluates on the full `width x height` pixel lattice.
    pub fn eval_grid(&self, width: usize, height: usize) -> ImageGrid {
        if let Some(data) = self.eval_grid_integer(width, height) {
            return ImageGrid::new(width, height, data).expect("finite thin-plate-spline surface");
        }
        let inv = 1.0 / self.scale;
        let mut data = vec![0.0; width * height];
        let mut dx2 = vec![0.0; self.cx.len()];
        for y in 0..height {
            let yy = y as f64 * inv;
            for (d, &py) in dx2.iter_mut().zip(&self.cy) {
                *d = (yy - py).powi(2);
            }
            for x in 0..width {
                let xx = x as f64 * inv;
                let mut s = self.affine[0] + self.affine[1] * xx + self.affine[2] * yy;
                for ((&px, &dy2), &w) in self.cx.iter().zip(&dx2).zip(&self.weights) {
                    let r2 = (xx - px) * (xx - px) + dy2;
                    if r2 > 0.0 {
                        s += w * 0.5 * r2 * r2.ln();
                    }
                }
                data[y * width + x] = s;
            }
        }
        ImageGrid::new(width, height, data).expect("finite thin-plate-spline surface")
    }

    /// Fast path when every center lies on a pixel inside the lattice: the
    /// squared pixel distance is an integer, so the kernel comes from a table.
    fn eval_grid_integer(&self, width: usize, height: usize) -> Option<Vec<f64>> {
        let mut ix = Vec::with_capacity(self.cx.len());
        let mut iy = Vec::with_capacity(self.cy.len());
        for (&px, &py) in self.cx.iter().zip(&self.cy) {
            let (x, y) = (px * self.scale, py * self.scale);
            let (rx, ry) = (x.round(), y.round());
            if (x - rx).abs() > 1e-9 || (y - ry).abs() > 1e-9 || rx < 0.0 || ry < 0.0 {
                return None;
            }
            if rx as usize >= width || ry as usize >= height {
                return None;
            }
            ix.push(rx as usize);
            iy.push(ry as usize);
        }
        let max_d2 = (width - 1).pow(2) + (height - 1).pow(2);
        let s2 = self.scale * self.scale;
        let table: Vec<f64> = (0..=max_d2).map(|d2| tps_kernel_sq(d2 as f64 / s2)).collect();
        let inv = 1.0 / self.scale;
        let mut data = vec![0.0; width * height];
        let mut dy2 = vec![0usize; iy.len()];
        for y in 0..height {
            for (d, &py) in dy2.iter_mut().zip(&iy) {
                *d = y.abs_diff(py).pow(2);
            }
            let yy = y as f64 * inv;
            for x in 0..width {
                let xx = x as f64 * inv;
                let mut s = self.affine[0] + self.affine[1] * xx + self.affine[2] * yy;
                for ((&px, &d), &w) in ix.iter().zip(&dy2).zip(&self.weights) {
                    s += w * table[x.abs_diff(px).pow(2) + d];
                }
                data[y * width + x] = s;
            }
        }
        Some(data)
    }
}

/// Piecewise-linear interpolation over a Delaunay triangulation; pixels
/// outside the hull take the value of the nearest input point.
pub fn delaunay_surface(points: &[ScatterPoint], width: usize, height: usize) -> Result<ImageGrid> {
    check_non_collinear(points)?;
    let dpts: Vec<delaunator::Point> = points
        .iter()
        .map(|p| delaunator::Point { x: p.x, y: p.y })
        .collect();
    let tri = delaunator::triangulate(&dpts);
    if tri.triangles.is_empty() {
        return Err(Error::Numerical("degenerate triangulation".into()));
    }
    let mut data = vec![f64::NAN; width * height];
    for t in tri.triangles.chunks_exact(3) {
        let (a, b, c) = (points[t[0]], points[t[1]], points[t[2]]);
        let det = (b.y - c.y) * (a.x - c.x) + (c.x - b.x) * (a.y - c.y);
        if det.abs() < 1e-14 {
            continue;
        }
        let x0 = a.x.min(b.x).min(c.x).ceil().max(0.0) as usize;
        let x1 = (a.x.max(b.x).max(c.x).floor() as usize).min(width - 1);
        let y0 = a.y.min(b.y).min(c.y).ceil().max(0.0) as usize;
        let y1 = (a.y.max(b.y).max(c.y).floor() as usize).min(height - 1);
        let tol = -1e-9;
        for y in y0..=y1 {
            let py = y as f64;
            for x in x0..=x1 {
                let idx = y * width + x;
                if !data[idx].is_nan() {
                    continue;
                }
                let px = x as f64;
                let l1 = ((b.y - c.y) * (px - c.x) + (c.x - b.x) * (py - c.y)) / det;
                let l2 = ((c.y - a.y) * (px - c.x) + (a.x - c.x) * (py - c.y)) / det;
                let l3 = 1.0 - l1 - l2;
                if l1 >= tol && l2 >= tol && l3 >= tol {
                    data[idx] = l1 * a.value + l2 * b.value + l3 * c.value;
                }
            }
        }
    }
    for y in 0..height {
        for x in 0..width {
            let idx = y * width + x;
            if data[idx].is_nan() {
                let (px, py) = (x as f64, y as f64);
                let nearest = points
                    .iter()
                    .min_by(|p, q| {
                        let dp = (p.x - px).powi(2) + (p.y - py).powi(2);
                        let dq = (q.x - px).powi(2) + (q.y - py).powi(2);
                        dp.total_cmp(&dq)
                    })
                    .unwrap();
                data[idx] = nearest.value;
            }
        }
    }
    ImageGrid::new(width, height, data)
}

/// Interpolates a smooth surface through scattered points over the full
/// pixel lattice, using a thin-plate spline up to `tps_max_points` distinct
/// points and the Delaunay fallback above that.
pub fn interpolate_envelope_with(
    points: &[ScatterPoint],
    width: usize,
    height: usize,
    tps_max_points: usize,
) -> Result<ImageGrid> {
    let pts = dedup_points(points);
    if pts.len() > tps_max_points {
        return delaunay_surface(&pts, width, height);
    }
    let scale = width.max(height) as f64;
    Ok(ThinPlateSpline::fit(&pts, scale)?.eval_grid(width, height))
}

/// [`interpolate_envelope_with`] using [`DEFAULT_TPS_MAX_POINTS`].
pub fn interpolate_envelope(points: &[ScatterPoint], width: usize, height: usize) -> Result<ImageGrid> {
    interpolate_envelope_with(points, width, height, DEFAULT_TPS_MAX_POINTS)
}
