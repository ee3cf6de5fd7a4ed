//! Similarity measures, each exposed as a cost to minimize.
//!
//! | measure | cost |
//! |---------|------|
//! | SSD | `(1/N) sum (a - b)^2` |
//! | CC  | `1 - r^2` (Pearson `r`; constant input gives 1) |
//! | MI  | `-(H(A) + H(B) - H(A,B))`, partial-volume histogram, nats |
//! | RC  | `sum log(1 + q^2 / alpha)`, `q = DCT(a - b)` |
//!
//! [`MeasureContext`] additionally supports cheap re-evaluation when only a
//! rectangular patch of the moving image changes, which the finite-difference
//! optimizer relies on.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

pub const DEFAULT_MI_BINS: usize = 64;
pub const DEFAULT_RC_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MeasureKind {
    Ssd,
    Cc,
    Rc { alpha: f64 },
    Mi { bins: usize },
}

impl MeasureKind {
    pub fn rc() -> Self {
        MeasureKind::Rc {
            alpha: DEFAULT_RC_ALPHA,
        }
    }

    pub fn mi() -> Self {
        MeasureKind::Mi {
            bins: DEFAULT_MI_BINS,
        }
    }

    pub fn all() -> [MeasureKind; 4] {
        [MeasureKind::Ssd, MeasureKind::Cc, MeasureKind::rc(), MeasureKind::mi()]
    }

    pub fn name(&self) -> &'static str {
        match self {
            MeasureKind::Ssd => "ssd",
            MeasureKind::Cc => "cc",
            MeasureKind::Rc { .. } => "rc",
            MeasureKind::Mi { .. } => "mi",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MeasureKind::Mi { bins } if bins < 2 => {
                Err(Error::Argument(format!("MI needs at least 2 bins, got {bins}")))
            }
            MeasureKind::Rc { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(Error::Argument(format!("RC alpha must be positive, got {alpha}")))
            }
            _ => Ok(()),
        }
    }

    /// Cost of `b` against `a`.
    pub fn cost(&self, a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
        match *self {
            MeasureKind::Ssd => ssd(a, b),
            MeasureKind::Cc => cc(a, b),
            MeasureKind::Rc { alpha } => rc(a, b, alpha),
            MeasureKind::Mi { bins } => mi(a, b, bins),
        }
    }
}

impl fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MeasureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ssd" => Ok(MeasureKind::Ssd),
            "cc" => Ok(MeasureKind::Cc),
            "rc" => Ok(MeasureKind::rc()),
            "mi" => Ok(MeasureKind::mi()),
            other => Err(Error::Argument(format!("unknown measure '{other}'"))),
        }
    }
}

fn same_shape(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    a.check_same_shape(b)
        .map_err(|e| Error::Argument(e.to_string()))
}

pub fn ssd(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.len() as f64)
}

/// Accumulated first and second moments of a pixel pair sequence.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sa: f64,
    sb: f64,
    saa: f64,
    sbb: f64,
    sab: f64,
}

impl Moments {
    fn cost(&self) -> f64 {
        let n = self.n;
        let var_a = self.saa - self.sa * self.sa / n;
        let var_b = self.sbb - self.sb * self.sb / n;
        let cov = self.sab - self.sa * self.sb / n;
        let tiny_a = 1e-12 * self.saa.max(f64::MIN_POSITIVE);
        let tiny_b = 1e-12 * self.sbb.max(f64::MIN_POSITIVE);
        if var_a <= tiny_a || var_b <= tiny_b {
            return 1.0;
        }
        let r2 = (cov * cov / (var_a * var_b)).min(1.0);
        1.0 - r2
    }
}

pub fn cc(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    same_shape(a, b)?;
    // Center first for accuracy; moments of centered data.
    let (ma, mb) = (a.mean(), b.mean());
    let mut m = Moments {
        n: a.len() as f64,
        ..Moments::default()
    };
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x - ma, y - mb);
        m.sa += x;
        m.sb += y;
        m.saa += x * x;
        m.sbb += y * y;
        m.sab += x * y;
    }
    // A constant image centers to (near) zero; compare against the raw scale.
    let raw_a: f64 = a.data().iter().map(|v| v * v).sum();
    let raw_b: f64 = b.data().iter().map(|v| v * v).sum();
    if m.saa <= 1e-24 * raw_a.max(f64::MIN_POSITIVE) || m.sbb <= 1e-24 * raw_b.max(f64::MIN_POSITIVE) {
        return Ok(1.0);
    }
    Ok(m.cost())
}

/// Partial-volume bin assignment over a fixed `[lo, hi]` range.
#[derive(Debug, Clone, Copy)]
struct Binning {
    lo: f64,
    scale: f64,
    bins: usize,
}

impl Binning {
    fn new(lo: f64, hi: f64, bins: usize) -> Self {
        let range = hi - lo;
        let scale = if range > 0.0 {
            (bins - 1) as f64 / range
        } else {
            0.0
        };
        Self { lo, scale, bins }
    }

    fn of(img: &ImageGrid, bins: usize) -> Self {
        let (lo, hi) = img.min_max();
        Self::new(lo, hi, bins)
    }

    /// Lower bin index and weight of the upper neighbor.
    #[inline]
    fn locate(&self, v: f64) -> (usize, f64) {
        let t = ((v - self.lo) * self.scale).clamp(0.0, (self.bins - 1) as f64);
        let i = (t.floor() as usize).min(self.bins - 2);
        (i, t - i as f64)
    }
}

#[inline]
fn xlogx(n: f64) -> f64 {
    if n > 0.0 {
        n * n.ln()
    } else {
        0.0
    }
}

/// Joint partial-volume histogram in pixel-count units.
#[derive(Debug, Clone)]
struct JointHistogram {
    bins: usize,
    joint: Vec<f64>,
    marg_a: Vec<f64>,
    marg_b: Vec<f64>,
}

impl JointHistogram {
    fn build(a: &[f64], b: &[f64], ba: Binning, bb: Binning) -> Self {
        let bins = ba.bins;
        let mut h = Self {
            bins,
            joint: vec![0.0; bins * bins],
            marg_a: vec![0.0; bins],
            marg_b: vec![0.0; bins],
        };
        for (&x, &y) in a.iter().zip(b) {
            let (ia, fa) = ba.locate(x);
            let (ib, fb) = bb.locate(y);
            h.marg_a[ia] += 1.0 - fa;
            h.marg_a[ia + 1] += fa;
            h.marg_b[ib] += 1.0 - fb;
            h.marg_b[ib + 1] += fb;
            let row0 = ia * bins;
            let row1 = row0 + bins;
            h.joint[row0 + ib] += (1.0 - fa) * (1.0 - fb);
            h.joint[row0 + ib + 1] += (1.0 - fa) * fb;
            h.joint[row1 + ib] += fa * (1.0 - fb);
            h.joint[row1 + ib + 1] += fa * fb;
        }
        h
    }

    fn sum_xlogx(v: &[f64]) -> f64 {
        v.iter().map(|&n| xlogx(n)).sum()
    }
}

/// Entropy in nats of a histogram with total mass `n`, from `sum c log c`.
#[inline]
fn entropy_from(n: f64, sum_clogc: f64) -> f64 {
    n.ln() - sum_clogc / n
}

pub fn mi(a: &ImageGrid, b: &ImageGrid, bins: usize) -> Result<f64> {
    same_shape(a, b)?;
    MeasureKind::Mi { bins }.validate()?;
    let h = JointHistogram::build(a.data(), b.data(), Binning::of(a, bins), Binning::of(b, bins));
    let n = a.len() as f64;
    let ha = entropy_from(n, JointHistogram::sum_xlogx(&h.marg_a));
    let hb = entropy_from(n, JointHistogram::sum_xlogx(&h.marg_b));
    let hab = entropy_from(n, JointHistogram::sum_xlogx(&h.joint));
    Ok(-(ha + hb - hab))
}

/// Orthonormal DCT-II basis matrices for one grid shape.
#[derive(Debug, Clone)]
pub struct DctPlan {
    width: usize,
    height: usize,
    /// `cx[k * width + n]`.
    cx: Vec<f64>,
    cy: Vec<f64>,
}

fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let nf = n as f64;
    for k in 0..n {
        let s = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            m[k * n + i] = s * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf)).cos();
        }
    }
    m
}

impl DctPlan {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            cx: dct_matrix(width),
            cy: dct_matrix(height),
        }
    }

    /// Rows then columns; `data` is row-major `height x width`.
    pub fn forward(&self, data: &[f64]) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut rows = vec![0.0; w * h];
        for y in 0..h {
            let src = &data[y * w..(y + 1) * w];
            for k in 0..w {
                let basis = &self.cx[k * w..(k + 1) * w];
                rows[y * w + k] = basis.iter().zip(src).map(|(c, v)| c * v).sum();
            }
        }
        let mut out = vec![0.0; w * h];
        for k in 0..h {
            let basis = &self.cy[k * h..(k + 1) * h];
            let dst = &mut out[k * w..(k + 1) * w];
            for (y, &c) in basis.iter().enumerate() {
                let src = &rows[y * w..(y + 1) * w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += c * s;
                }
            }
        }
        out
    }

    pub fn inverse(&self, coeffs: &[f64]) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut cols = vec![0.0; w * h];
        for k in 0..h {
            let src = &coeffs[k * w..(k + 1) * w];
            for y in 0..h {
                let c = self.cy[k * h + y];
                let dst = &mut cols[y * w..(y + 1) * w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += c * s;
                }
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            let src = &cols[y * w..(y + 1) * w];
            for x in 0..w {
                out[y * w + x] = (0..w).map(|k| self.cx[k * w + x] * src[k]).sum();
            }
        }
        out
    }

    /// Coefficient change produced by a residual change confined to a
    /// rectangle (`delta` is row-major over the rectangle).
    fn forward_patch(&self, x0: usize, y0: usize, pw: usize, ph: usize, delta: &[f64], out: &mut [f64]) {
        let (w, h) = (self.width, self.height);
        // Transform the patch rows along x into full-length coefficient rows.
        let mut rows = vec![0.0; ph * w];
        for py in 0..ph {
            let src = &delta[py * pw..(py + 1) * pw];
            if src.iter().all(|&v| v == 0.0) {
                continue;
            }
            let dst = &mut rows[py * w..(py + 1) * w];
            for (k, d) in dst.iter_mut().enumerate() {
                let basis = &self.cx[k * w + x0..k * w + x0 + pw];
                *d = basis.iter().zip(src).map(|(c, v)| c * v).sum();
            }
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..h {
            let dst = &mut out[k * w..(k + 1) * w];
            for py in 0..ph {
                let c = self.cy[k * h + y0 + py];
                let src = &rows[py * w..(py + 1) * w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += c * s;
                }
            }
        }
    }
}

/// Orthonormal 2D DCT-II.
pub fn dct2(grid: &ImageGrid) -> ImageGrid {
    let plan = DctPlan::new(grid.width(), grid.height());
    ImageGrid::new(grid.width(), grid.height(), plan.forward(grid.data())).expect("finite DCT")
}

/// Inverse of [`dct2`].
pub fn idct2(grid: &ImageGrid) -> ImageGrid {
    let plan = DctPlan::new(grid.width(), grid.height());
    ImageGrid::new(grid.width(), grid.height(), plan.inverse(grid.data())).expect("finite DCT")
}

fn rc_from_coeffs(q: &[f64], alpha: f64) -> f64 {
    let inv = 1.0 / alpha;
    q.iter().map(|&c| (c * c * inv).ln_1p()).sum()
}

pub fn rc(a: &ImageGrid, b: &ImageGrid, alpha: f64) -> Result<f64> {
    same_shape(a, b)?;
    MeasureKind::Rc { alpha }.validate()?;
    let r = a.sub(b)?;
    Ok(rc_from_coeffs(dct2(&r).data(), alpha))
}

/// A rectangular replacement of moving-image values.
#[derive(Debug, Clone, Copy)]
pub struct Patch<'a> {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    /// New values, row-major over the rectangle.
    pub values: &'a [f64],
}

/// Reusable buffers for [`MeasureContext::cost_patched`].
#[derive(Debug, Clone, Default)]
pub struct PatchScratch {
    buf: Vec<f64>,
    seen: Vec<bool>,
    touched: Vec<usize>,
}

/// A measure bound to a fixed image and a moving-intensity range, able to
/// evaluate a warped moving image and patched variants of it.
///
/// MI bins the moving side over the moving image's `[min, max]` (a superset
/// of any bilinearly warped version), so the binning stays fixed while the
/// transform changes.
#[derive(Debug, Clone)]
pub struct MeasureContext {
    kind: MeasureKind,
    fixed: ImageGrid,
    fixed_bins: Option<Binning>,
    moving_bins: Option<Binning>,
    dct: Option<DctPlan>,
}

/// Cached state of a measure evaluated on one warped image.
#[derive(Debug, Clone)]
pub struct Evaluated {
    pub cost: f64,
    state: EvalState,
}

#[derive(Debug, Clone)]
enum EvalState {
    Ssd { sum: f64 },
    Cc(Moments),
    Mi { hist: JointHistogram, t_joint: f64, t_b: f64, h_a: f64 },
    Rc { coeffs: Vec<f64> },
}

impl MeasureContext {
    pub fn new(kind: MeasureKind, fixed: &ImageGrid, moving: &ImageGrid) -> Result<Self> {
        kind.validate()?;
        same_shape(fixed, moving)?;
        let (fixed_bins, moving_bins) = match kind {
            MeasureKind::Mi { bins } => (Some(Binning::of(fixed, bins)), Some(Binning::of(moving, bins))),
            _ => (None, None),
        };
        let dct = match kind {
            MeasureKind::Rc { .. } => Some(DctPlan::new(fixed.width(), fixed.height())),
            _ => None,
        };
        Ok(Self {
            kind,
            fixed: fixed.clone(),
            fixed_bins,
            moving_bins,
            dct,
        })
    }

    pub fn kind(&self) -> MeasureKind {
        self.kind
    }

    pub fn fixed(&self) -> &ImageGrid {
        &self.fixed
    }

    pub fn cost(&self, warped: &ImageGrid) -> f64 {
        self.evaluate(warped).cost
    }

    pub fn evaluate(&self, warped: &ImageGrid) -> Evaluated {
        let a = self.fixed.data();
        let b = warped.data();
        let n = a.len() as f64;
        match self.kind {
            MeasureKind::Ssd => {
                let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                Evaluated {
                    cost: sum / n,
                    state: EvalState::Ssd { sum },
                }
            }
            MeasureKind::Cc => {
                let mut m = Moments {
                    n,
                    ..Moments::default()
                };
                for (&x, &y) in a.iter().zip(b) {
                    m.sa += x;
                    m.sb += y;
                    m.saa += x * x;
                    m.sbb += y * y;
                    m.sab += x * y;
                }
                Evaluated {
                    cost: m.cost(),
                    state: EvalState::Cc(m),
                }
            }
            MeasureKind::Mi { .. } => {
                let hist = JointHistogram::build(a, b, self.fixed_bins.unwrap(), self.moving_bins.unwrap());
                let t_joint = JointHistogram::sum_xlogx(&hist.joint);
                let t_b = JointHistogram::sum_xlogx(&hist.marg_b);
                let h_a = entropy_from(n, JointHistogram::sum_xlogx(&hist.marg_a));
                let cost = -(h_a + entropy_from(n, t_b) - entropy_from(n, t_joint));
                Evaluated {
                    cost,
                    state: EvalState::Mi {
                        hist,
                        t_joint,
                        t_b,
                        h_a,
                    },
                }
            }
            MeasureKind::Rc { alpha } => {
                let r: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                let coeffs = self.dct.as_ref().unwrap().forward(&r);
                Evaluated {
                    cost: rc_from_coeffs(&coeffs, alpha),
                    state: EvalState::Rc { coeffs },
                }
            }
        }
    }

    /// Cost after replacing the pixels of `patch` in `warped`, where `base`
    /// is `self.evaluate(warped)`. `scratch` is reused between calls.
    pub fn cost_patched(&self, base: &Evaluated, warped: &ImageGrid, patch: &Patch<'_>, scratch: &mut PatchScratch) -> f64 {
        let w = self.fixed.width();
        let a = self.fixed.data();
        let b = warped.data();
        let n = a.len() as f64;
        let pixels = (0..patch.height).flat_map(|py| {
            (0..patch.width).map(move |px| ((patch.y0 + py) * w + patch.x0 + px, py * patch.width + px))
        });
        match (&base.state, self.kind) {
            (EvalState::Ssd { sum }, _) => {
                let mut s = *sum;
                for (idx, pi) in pixels {
                    let nv = patch.values[pi];
                    let ov = b[idx];
                    if nv != ov {
                        s += (a[idx] - nv).powi(2) - (a[idx] - ov).powi(2);
                    }
                }
                s / n
            }
            (EvalState::Cc(m), _) => {
                let mut m = *m;
                for (idx, pi) in pixels {
                    let nv = patch.values[pi];
                    let ov = b[idx];
                    if nv != ov {
                        m.sb += nv - ov;
                        m.sbb += nv * nv - ov * ov;
                        m.sab += a[idx] * (nv - ov);
                    }
                }
                m.cost()
            }
            (EvalState::Mi { hist, t_joint, t_b, h_a }, _) => {
                let fb = self.fixed_bins.unwrap();
                let mb = self.moving_bins.unwrap();
                let bins = hist.bins;
                // Joint cells first, then moving-marginal cells offset by bins^2.
                let cells_total = bins * bins + bins;
                if scratch.buf.len() != cells_total {
                    scratch.buf = vec![0.0; cells_total];
                    scratch.seen = vec![false; cells_total];
                }
                scratch.touched.clear();
                for (idx, pi) in pixels {
                    let nv = patch.values[pi];
                    let ov = b[idx];
                    if nv == ov {
                        continue;
                    }
                    let (ia, fa) = fb.locate(a[idx]);
                    for (v, sign) in [(ov, -1.0), (nv, 1.0)] {
                        let (ib, f) = mb.locate(v);
                        let row0 = ia * bins;
                        let row1 = row0 + bins;
                        let cells = [
                            (row0 + ib, (1.0 - fa) * (1.0 - f)),
                            (row0 + ib + 1, (1.0 - fa) * f),
                            (row1 + ib, fa * (1.0 - f)),
                            (row1 + ib + 1, fa * f),
                            (bins * bins + ib, 1.0 - f),
                            (bins * bins + ib + 1, f),
                        ];
                        for (c, wgt) in cells {
                            if wgt != 0.0 {
                                if !scratch.seen[c] {
                                    scratch.seen[c] = true;
                                    scratch.touched.push(c);
                                }
                                scratch.buf[c] += sign * wgt;
                            }
                        }
                    }
                }
                let (mut tj, mut tb) = (*t_joint, *t_b);
                for &cell in &scratch.touched {
                    let delta = std::mem::take(&mut scratch.buf[cell]);
                    scratch.seen[cell] = false;
                    if cell < bins * bins {
                        let old = hist.joint[cell];
                        tj += xlogx((old + delta).max(0.0)) - xlogx(old);
                    } else {
                        let old = hist.marg_b[cell - bins * bins];
                        tb += xlogx((old + delta).max(0.0)) - xlogx(old);
                    }
                }
                -(h_a + entropy_from(n, tb) - entropy_from(n, tj))
            }
            (EvalState::Rc { coeffs }, MeasureKind::Rc { alpha }) => {
                let mut delta = vec![0.0; patch.width * patch.height];
                for (idx, pi) in pixels {
                    // r = a - b, so the residual changes by -(new - old).
                    delta[pi] = b[idx] - patch.values[pi];
                }
                scratch.buf.resize(coeffs.len(), 0.0);
                self.dct
                    .as_ref()
                    .unwrap()
                    .forward_patch(patch.x0, patch.y0, patch.width, patch.height, &delta, &mut scratch.buf);
                let inv = 1.0 / alpha;
                coeffs
                    .iter()
                    .zip(scratch.buf.iter())
                    .map(|(&q, &d)| {
                        let v = q + d;
                        (v * v * inv).ln_1p()
                    })
                    .sum()
            }
            (EvalState::Rc { .. }, _) => unreachable!("state matches measure kind"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(w: usize, h: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::from_fn(w, h, |_, _| rng.random::<f64>())
    }

    fn textured(w: usize, h: usize) -> ImageGrid {
        ImageGrid::from_fn(w, h, |x, y| {
            0.5 + 0.3 * (0.4 * x as f64).sin() * (0.3 * y as f64).cos() + 0.1 * (0.05 * (x * y) as f64).sin()
        })
    }

    #[test]
    fn ssd_cases() {
        let i = textured(9, 7);
        assert_eq!(ssd(&i, &i).unwrap(), 0.0);
        let z = ImageGrid::zeros(2, 1);
        let o = ImageGrid::filled(2, 1, 1.0);
        assert_eq!(ssd(&z, &o).unwrap(), 1.0);
        let r = random_grid(9, 7, 1);
        assert_eq!(ssd(&i, &r).unwrap(), ssd(&r, &i).unwrap());
        assert!(matches!(ssd(&i, &z), Err(Error::Argument(_))));
    }

    #[test]
    fn cc_cases() {
        let i = textured(12, 10);
        assert!(cc(&i, &i).unwrap().abs() < 1e-12);
        let inv = i.map(|v| -v + 2.0);
        assert!(cc(&i, &inv).unwrap().abs() < 1e-12);
        assert_eq!(cc(&i, &ImageGrid::filled(12, 10, 0.1)).unwrap(), 1.0);
        assert_eq!(cc(&ImageGrid::filled(12, 10, 0.3), &i).unwrap(), 1.0);
    }

    /// Independent MI oracle: explicit loops, explicit probabilities.
    fn mi_oracle(a: &ImageGrid, b: &ImageGrid, bins: usize) -> f64 {
        let pv = |img: &ImageGrid, v: f64| -> [(usize, f64); 2] {
            let (lo, hi) = img.min_max();
            if hi <= lo {
                return [(0, 1.0), (1, 0.0)];
            }
            let t = (v - lo) / (hi - lo) * (bins - 1) as f64;
            let mut i = t.floor() as usize;
            if i >= bins - 1 {
                i = bins - 2;
            }
            let f = t - i as f64;
            [(i, 1.0 - f), (i + 1, f)]
        };
        let n = a.len() as f64;
        let mut joint = vec![vec![0.0; bins]; bins];
        for k in 0..a.len() {
            for (ia, wa) in pv(a, a.data()[k]) {
                for (ib, wb) in pv(b, b.data()[k]) {
                    joint[ia][ib] += wa * wb / n;
                }
            }
        }
        let pa: Vec<f64> = (0..bins).map(|i| joint[i].iter().sum()).collect();
        let pb: Vec<f64> = (0..bins).map(|j| (0..bins).map(|i| joint[i][j]).sum()).collect();
        let mut m = 0.0;
        for i in 0..bins {
            for j in 0..bins {
                let p = joint[i][j];
                if p > 0.0 {
                    m += p * (p / (pa[i] * pb[j])).ln();
                }
            }
        }
        m
    }

    #[test]
    fn mi_matches_oracle_and_independent_images_are_near_zero() {
        let a = random_grid(218, 181, 10);
        let b = random_grid(218, 181, 11);
        let oracle = mi_oracle(&a, &b, 64);
        let cost = mi(&a, &b, 64).unwrap();
        assert!((cost + oracle).abs() < 1e-9, "{cost} vs {oracle}");
        assert!(oracle <= 0.05, "independent MI {oracle}");
        let t = textured(30, 20);
        let u = random_grid(30, 20, 3);
        assert!((mi(&t, &u, 16).unwrap() + mi_oracle(&t, &u, 16)).abs() < 1e-9);
        assert!((mi(&t, &u, 16).unwrap() - mi(&u, &t, 16).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mi_of_self_is_negative_entropy_for_bin_aligned_images() {
        let bins = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = ImageGrid::from_fn(20, 20, |x, y| {
            if (x, y) == (0, 0) {
                0.0
            } else if (x, y) == (1, 0) {
                1.0
            } else {
                rng.random_range(0..bins) as f64 / (bins - 1) as f64
            }
        });
        let mut counts = vec![0.0; bins];
        for &v in img.data() {
            counts[(v * (bins - 1) as f64).round() as usize] += 1.0;
        }
        let n = img.len() as f64;
        let h: f64 = counts.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum();
        assert!((mi(&img, &img, bins).unwrap() + h).abs() < 1e-12);
    }

    #[test]
    fn mi_invariant_under_bin_permutation() {
        let bins = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let levels: Vec<usize> = (0..300).map(|i| if i < 2 { [0, bins - 1][i] } else { rng.random_range(0..bins) }).collect();
        let a = ImageGrid::new(20, 15, levels.iter().map(|&l| l as f64 / 5.0).collect()).unwrap();
        let b = ImageGrid::new(20, 15, levels.iter().rev().map(|&l| l as f64 / 5.0).collect()).unwrap();
        // Permutation fixing the end bins keeps the [min, max] range.
        let perm = [0, 3, 1, 4, 2, 5];
        let remap = b.map(|v| perm[(v * 5.0).round() as usize] as f64 / 5.0);
        assert!((mi(&a, &b, bins).unwrap() - mi(&a, &remap, bins).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn dct_parseval_and_inverse() {
        let g = random_grid(13, 9, 2);
        let q = dct2(&g);
        let e_in: f64 = g.data().iter().map(|v| v * v).sum();
        let e_out: f64 = q.data().iter().map(|v| v * v).sum();
        assert!(((e_in - e_out) / e_in).abs() <= 1e-9);
        assert!(idct2(&q).max_abs_diff(&g).unwrap() <= 1e-10);
        let c = dct2(&ImageGrid::filled(7, 5, 0.3));
        assert!((c.get(0, 0) - 0.3 * 35f64.sqrt()).abs() < 1e-12);
        assert!(c.data()[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dct_matches_direct_double_sum() {
        let g = random_grid(6, 5, 12);
        let q = dct2(&g);
        let (w, h) = (6usize, 5usize);
        for k in 0..h {
            for l in 0..w {
                let sk = if k == 0 { (1.0 / h as f64).sqrt() } else { (2.0 / h as f64).sqrt() };
                let sl = if l == 0 { (1.0 / w as f64).sqrt() } else { (2.0 / w as f64).sqrt() };
                let mut s = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        s += g.get(x, y)
                            * (std::f64::consts::PI * (2 * y + 1) as f64 * k as f64 / (2 * h) as f64).cos()
                            * (std::f64::consts::PI * (2 * x + 1) as f64 * l as f64 / (2 * w) as f64).cos();
                    }
                }
                assert!((q.get(l, k) - sk * sl * s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rc_cases() {
        let i = textured(10, 8);
        assert_eq!(rc(&i, &i, 0.05).unwrap(), 0.0);
        let c = 0.2;
        let shifted = i.map(|v| v - c);
        let n = 80.0;
        let expect = (1.0 + c * c * n / 0.05).ln();
        assert!((rc(&i, &shifted, 0.05).unwrap() - expect).abs() < 1e-9);
        let r = random_grid(10, 8, 5);
        assert!((rc(&i, &r, 0.05).unwrap() - rc(&r, &i, 0.05).unwrap()).abs() < 1e-9);
        assert!(rc(&i, &i, 0.0).is_err());
    }

    #[test]
    fn rc_prefers_smooth_residuals() {
        let (w, h) = (40, 32);
        let base = ImageGrid::zeros(w, h);
        let smooth = ImageGrid::from_fn(w, h, |x, y| {
            let (dx, dy) = (x as f64 - 15.0, y as f64 - 12.0);
            (-(dx * dx + dy * dy) / (2.0 * 2.5f64.powi(2) * 4.0)).exp()
        });
        let energy = |g: &ImageGrid| g.data().iter().map(|v| v * v).sum::<f64>();
        let noise = random_grid(w, h, 6).map(|v| v - 0.5);
        let noise = noise.map(|v| v * (energy(&smooth) / energy(&noise)).sqrt());
        assert!((energy(&noise) - energy(&smooth)).abs() < 1e-9);
        assert!(rc(&base, &smooth, 0.05).unwrap() < rc(&base, &noise, 0.05).unwrap());
    }

    #[test]
    fn measure_parsing() {
        assert_eq!("MI".parse::<MeasureKind>().unwrap(), MeasureKind::mi());
        assert_eq!("rc".parse::<MeasureKind>().unwrap(), MeasureKind::Rc { alpha: 0.05 });
        assert!("ncc".parse::<MeasureKind>().is_err());
        assert!(MeasureKind::Mi { bins: 1 }.validate().is_err());
    }

    #[test]
    fn patched_costs_match_full_evaluation() {
        let (w, h) = (23, 17);
        let fixed = textured(w, h);
        let moving = random_grid(w, h, 9).map(|v| 0.2 + 0.6 * v);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for kind in MeasureKind::all() {
            let ctx = MeasureContext::new(kind, &fixed, &moving).unwrap();
            let warped = moving.clone();
            let base = ctx.evaluate(&warped);
            let (x0, y0, pw, ph) = (5, 3, 7, 6);
            let values: Vec<f64> = (0..pw * ph).map(|_| 0.2 + 0.6 * rng.random::<f64>()).collect();
            let patch = Patch {
                x0,
                y0,
                width: pw,
                height: ph,
                values: &values,
            };
            let mut full = warped.data().to_vec();
            for py in 0..ph {
                for px in 0..pw {
                    full[(y0 + py) * w + x0 + px] = values[py * pw + px];
                }
            }
            let patched_img = ImageGrid::new(w, h, full).unwrap();
            let mut scratch = PatchScratch::default();
            let fast = ctx.cost_patched(&base, &warped, &patch, &mut scratch);
            let slow = ctx.cost(&patched_img);
            assert!((fast - slow).abs() < 1e-9 * slow.abs().max(1.0), "{kind}: {fast} vs {slow}");
        }
    }

    #[test]
    fn context_matches_free_functions_where_ranges_agree() {
        let a = textured(15, 11);
        let b = random_grid(15, 11, 2);
        for kind in MeasureKind::all() {
            let ctx = MeasureContext::new(kind, &a, &b).unwrap();
            assert!((ctx.cost(&b) - kind.cost(&a, &b).unwrap()).abs() < 1e-9, "{kind}");
        }
    }
}
