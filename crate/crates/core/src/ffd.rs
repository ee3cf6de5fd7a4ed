//! Cubic B-spline free-form deformation.
//!
//! A lattice of `nx x ny` control displacements with spacing
//! `extent / (n - 3)` along each axis. Control `k` sits at `(k - 1) * spacing`,
//! so one phantom row/column on each side gives the cubic support full
//! coverage of the image. Warping is backward:
//! `out(x, y) = img(x + dx(x, y), y + dy(x, y))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Uniform cubic B-spline basis `[B0, B1, B2, B3]` at local coordinate `u`.
#[inline]
pub fn bspline_basis(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    let v = 1.0 - u;
    [
        v * v * v / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

/// Dense per-pixel displacement vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub width: usize,
    pub height: usize,
    pub vectors: Vec<[f64; 2]>,
}

impl DisplacementField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            vectors: vec![[0.0; 2]; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 2]) -> Self {
        let mut vectors = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                vectors.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            vectors,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.vectors[y * self.width + x]
    }

    pub fn max_magnitude(&self) -> f64 {
        self.vectors
            .iter()
            .map(|v| v[0].hypot(v[1]))
            .fold(0.0, f64::max)
    }

    /// Backward-warps `img` through this field.
    pub fn warp(&self, img: &ImageGrid) -> Result<ImageGrid> {
        if img.width() != self.width || img.height() != self.height {
            return Err(Error::DimensionMismatch {
                left_w: img.width(),
                left_h: img.height(),
                right_w: self.width,
                right_h: self.height,
            });
        }
        Ok(ImageGrid::from_fn(self.width, self.height, |x, y| {
            let d = self.vectors[y * self.width + x];
            img.sample_bilinear(x as f64 + d[0], y as f64 + d[1])
        }))
    }
}

/// Per-axis lookup of the first supporting control index and the four basis
/// weights for every pixel coordinate.
#[derive(Debug, Clone)]
pub struct AxisBasis {
    pub first: Vec<usize>,
    pub weights: Vec<[f64; 4]>,
}

impl AxisBasis {
    pub fn new(len: usize, n: usize, spacing: f64) -> Self {
        let mut first = Vec::with_capacity(len);
        let mut weights = Vec::with_capacity(len);
        for p in 0..len {
            let (i, u) = cell(p as f64, n, spacing);
            first.push(i);
            weights.push(bspline_basis(u));
        }
        Self { first, weights }
    }

    /// Pixel range influenced by control `k`, as `start..end`.
    pub fn support(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.first.partition_point(|&i| i + 3 < k);
        let end = self.first.partition_point(|&i| i <= k);
        start..end
    }

    /// Basis weight of control `k` at pixel `p` (zero outside its support).
    #[inline]
    pub fn weight(&self, p: usize, k: usize) -> f64 {
        let i = self.first[p];
        if k >= i && k < i + 4 {
            self.weights[p][k - i]
        } else {
            0.0
        }
    }
}

/// Cell index and local coordinate for position `p`. The cell is clamped to
/// the valid range, so positions beyond the lattice extrapolate with the
/// boundary cell's polynomial.
#[inline]
fn cell(p: f64, n: usize, spacing: f64) -> (usize, f64) {
    let t = p / spacing;
    let i = t.floor().clamp(0.0, (n - 4) as f64);
    (i as usize, t - i)
}

/// Cubic B-spline control lattice over a `image_width x image_height` domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfdTransform {
    pub nx: usize,
    pub ny: usize,
    /// `[spacing_x, spacing_y]` in pixels.
    pub spacing: [f64; 2],
    pub image_width: usize,
    pub image_height: usize,
    /// Control displacements `[dx, dy]`, row-major (`index = j * nx + i`).
    pub offsets: Vec<[f64; 2]>,
}

impl FfdTransform {
    /// Identity transform on an `nx x ny` lattice.
    pub fn identity(width: usize, height: usize, nx: usize, ny: usize) -> Result<Self> {
        make_uniform_grid(width, height, nx, ny)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 4 || self.ny < 4 {
            return Err(Error::Argument(format!(
                "lattice must be at least 4x4, got {}x{}",
                self.nx, self.ny
            )));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Argument("transform domain must be non-empty".into()));
        }
        if self.offsets.len() != self.nx * self.ny {
            return Err(Error::Argument(format!(
                "expected {} offsets, found {}",
                self.nx * self.ny,
                self.offsets.len()
            )));
        }
        let sx = self.image_width as f64 / (self.nx - 3) as f64;
        let sy = self.image_height as f64 / (self.ny - 3) as f64;
        if (sx - self.spacing[0]).abs() > 1e-9 * sx || (sy - self.spacing[1]).abs() > 1e-9 * sy {
            return Err(Error::Argument("spacing does not match lattice and domain".into()));
        }
        if self.offsets.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite control offset".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize) -> [f64; 2] {
        self.offsets[j * self.nx + i]
    }

    /// Number of scalar parameters (two per control point).
    pub fn param_count(&self) -> usize {
        2 * self.offsets.len()
    }

    /// Scalar parameter `p`: control `p / 2`, component `p % 2`.
    pub fn param(&self, p: usize) -> f64 {
        self.offsets[p / 2][p % 2]
    }

    pub fn set_param(&mut self, p: usize, v: f64) {
        self.offsets[p / 2][p % 2] = v;
    }

    pub fn is_identity(&self) -> bool {
        self.offsets.iter().all(|o| o[0] == 0.0 && o[1] == 0.0)
    }

    pub fn basis_x(&self) -> AxisBasis {
        AxisBasis::new(self.image_width, self.nx, self.spacing[0])
    }

    pub fn basis_y(&self) -> AxisBasis {
        AxisBasis::new(self.image_height, self.ny, self.spacing[1])
    }

    /// Tensor-product B-spline sum over the 4x4 supporting controls.
    pub fn displacement_at(&self, x: f64, y: f64) -> [f64; 2] {
        let (i0, u) = cell(x, self.nx, self.spacing[0]);
        let (j0, v) = cell(y, self.ny, self.spacing[1]);
        let bu = bspline_basis(u);
        let bv = bspline_basis(v);
        let mut d = [0.0; 2];
        for (m, &wv) in bv.iter().enumerate() {
            let row = (j0 + m) * self.nx + i0;
            let mut acc = [0.0; 2];
            for (l, &wu) in bu.iter().enumerate() {
                let o = self.offsets[row + l];
                acc[0] += wu * o[0];
                acc[1] += wu * o[1];
            }
            d[0] += wv * acc[0];
            d[1] += wv * acc[1];
        }
        d
    }

    /// Evaluates the displacement on every pixel of the domain.
    pub fn dense_displacement(&self) -> DisplacementField {
        let bx = self.basis_x();
        let by = self.basis_y();
        self.dense_with(&bx, &by)
    }

    pub(crate) fn dense_with(&self, bx: &AxisBasis, by: &AxisBasis) -> DisplacementField {
        let (w, h) = (self.image_width, self.image_height);
        let mut vectors = Vec::with_capacity(w * h);
        // Collapse the y direction first: for each row, blend the four lattice
        // rows into one row of nx control vectors.
        let mut blended = vec![[0.0f64; 2]; self.nx];
        for y in 0..h {
            let j0 = by.first[y];
            let wy = by.weights[y];
            for (i, b) in blended.iter_mut().enumerate() {
                let mut acc = [0.0; 2];
                for (m, &wv) in wy.iter().enumerate() {
                    let o = self.offsets[(j0 + m) * self.nx + i];
                    acc[0] += wv * o[0];
                    acc[1] += wv * o[1];
                }
                *b = acc;
            }
            for x in 0..w {
                let i0 = bx.first[x];
                let wx = bx.weights[x];
                let mut d = [0.0; 2];
                for (l, &wu) in wx.iter().enumerate() {
                    let o = blended[i0 + l];
                    d[0] += wu * o[0];
                    d[1] += wu * o[1];
                }
                vectors.push(d);
            }
        }
        DisplacementField {
            width: w,
            height: h,
            vectors,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }
}

/// Identity lattice with spacing `extent / (n - 3)` per axis.
pub fn make_uniform_grid(width: usize, height: usize, nx: usize, ny: usize) -> Result<FfdTransform> {
    if nx < 4 || ny < 4 {
        return Err(Error::Argument(format!(
            "lattice must be at least 4x4, got {nx}x{ny}"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Argument("transform domain must be non-empty".into()));
    }
    Ok(FfdTransform {
        nx,
        ny,
        spacing: [width as f64 / (nx - 3) as f64, height as f64 / (ny - 3) as f64],
        image_width: width,
        image_height: height,
        offsets: vec![[0.0; 2]; nx * ny],
    })
}

/// Replaces every offset component by an independent draw from
/// `U[-amplitude, amplitude]`.
pub fn perturb_grid(t: &FfdTransform, amplitude: f64, seed: u64) -> Result<FfdTransform> {
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(Error::Argument(format!(
            "amplitude must be non-negative, got {amplitude}"
        )));
    }
    let mut out = t.clone();
    if amplitude == 0.0 {
        out.offsets.iter_mut().for_each(|o| *o = [0.0; 2]);
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for o in out.offsets.iter_mut() {
        o[0] = rng.random_range(-amplitude..=amplitude);
        o[1] = rng.random_range(-amplitude..=amplitude);
    }
    Ok(out)
}

/// Free-function form of [`FfdTransform::displacement_at`].
pub fn displacement_at(t: &FfdTransform, x: f64, y: f64) -> [f64; 2] {
    t.displacement_at(x, y)
}

/// Free-function form of [`FfdTransform::dense_displacement`].
pub fn dense_displacement(t: &FfdTransform) -> DisplacementField {
    t.dense_displacement()
}

/// Backward-warps `img` through `t`.
pub fn warp_image(img: &ImageGrid, t: &FfdTransform) -> Result<ImageGrid> {
    if img.width() != t.image_width || img.height() != t.image_height {
        return Err(Error::DimensionMismatch {
            left_w: img.width(),
            left_h: img.height(),
            right_w: t.image_width,
            right_h: t.image_height,
        });
    }
    t.dense_displacement().warp(img)
}

/// One-dimensional cubic B-spline subdivision of a control sequence:
/// `n` controls become `2n - 3` at half the spacing.
fn subdivide<T: Copy>(c: &[T], mix: impl Fn(&[(f64, T)]) -> T) -> Vec<T> {
    let n = c.len();
    let mut out = Vec::with_capacity(2 * n - 3);
    for j in 0..(2 * n - 3) {
        if j % 2 == 0 {
            let k = j / 2;
            out.push(mix(&[(0.5, c[k]), (0.5, c[k + 1])]));
        } else {
            let k = j.div_ceil(2);
            out.push(mix(&[(0.125, c[k - 1]), (0.75, c[k]), (0.125, c[k + 1])]));
        }
    }
    out
}

fn mix2(terms: &[(f64, [f64; 2])]) -> [f64; 2] {
    terms.iter().fold([0.0; 2], |acc, &(w, v)| {
        [acc[0] + w * v[0], acc[1] + w * v[1]]
    })
}

/// Exact knot-insertion refinement: `n -> 2n - 3` controls per axis, same
/// dense displacement.
pub fn refine_grid(t: &FfdTransform) -> FfdTransform {
    let nx2 = 2 * t.nx - 3;
    let ny2 = 2 * t.ny - 3;
    let rows: Vec<Vec<[f64; 2]>> = (0..t.ny)
        .map(|j| subdivide(&t.offsets[j * t.nx..(j + 1) * t.nx], mix2))
        .collect();
    let mut offsets = vec![[0.0; 2]; nx2 * ny2];
    for i in 0..nx2 {
        let column: Vec<[f64; 2]> = rows.iter().map(|r| r[i]).collect();
        for (j, v) in subdivide(&column, mix2).into_iter().enumerate() {
            offsets[j * nx2 + i] = v;
        }
    }
    FfdTransform {
        nx: nx2,
        ny: ny2,
        spacing: [t.spacing[0] / 2.0, t.spacing[1] / 2.0],
        image_width: t.image_width,
        image_height: t.image_height,
        offsets,
    }
}

/// Least-squares pseudo-inverse rows `(B^T B)^-1 B^T` for one axis.
fn axis_pinv(basis: &AxisBasis, n: usize) -> Result<nalgebra::DMatrix<f64>> {
    let len = basis.first.len();
    let mut b = nalgebra::DMatrix::<f64>::zeros(len, n);
    for p in 0..len {
        let i = basis.first[p];
        for l in 0..4 {
            b[(p, i + l)] = basis.weights[p][l];
        }
    }
    let btb = b.transpose() * &b;
    let inv = btb
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular B-spline normal equations".into()))?;
    Ok(inv * b.transpose())
}

/// Least-squares fit of an `nx x ny` lattice to a dense field. The pixel
/// grid is a tensor grid, so the fit separates into one solve per axis.
pub fn fit_to_field(field: &DisplacementField, nx: usize, ny: usize) -> Result<FfdTransform> {
    let mut t = make_uniform_grid(field.width, field.height, nx, ny)?;
    let px = axis_pinv(&t.basis_x(), nx)?;
    let py = axis_pinv(&t.basis_y(), ny)?;
    for comp in 0..2 {
        let d = nalgebra::DMatrix::<f64>::from_fn(field.height, field.width, |y, x| {
            field.vectors[y * field.width + x][comp]
        });
        let c = &py * d * px.transpose();
        for j in 0..ny {
            for i in 0..nx {
                t.offsets[j * nx + i][comp] = c[(j, i)];
            }
        }
    }
    Ok(t)
}

/// Pixel-center correspondence between two pyramid levels with integer
/// downsampling factors relative to full resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelMap {
    pub from_factor: usize,
    pub to_factor: usize,
}

impl LevelMap {
    pub fn same() -> Self {
        Self {
            from_factor: 1,
            to_factor: 1,
        }
    }

    /// Coordinate in the source level of target-level coordinate `p`.
    #[inline]
    pub fn to_source(&self, p: f64) -> f64 {
        let (fa, fb) = (self.from_factor as f64, self.to_factor as f64);
        (p * fb + 0.5 * (fb - 1.0) - 0.5 * (fa - 1.0)) / fa
    }

    /// Factor converting source-level displacements to target-level pixels.
    pub fn scale(&self) -> f64 {
        self.from_factor as f64 / self.to_factor as f64
    }
}

/// Re-expresses `t` on an `nx x ny` lattice over a `width x height` domain.
///
/// Exact subdivisions on the same domain use [`refine_grid`]; otherwise the
/// source field is resampled on the target pixels and fitted by least
/// squares.
pub fn transfer(
    t: &FfdTransform,
    width: usize,
    height: usize,
    nx: usize,
    ny: usize,
    map: LevelMap,
) -> Result<FfdTransform> {
    let same_domain = map.from_factor == map.to_factor
        && t.image_width == width
        && t.image_height == height;
    if same_domain && t.nx == nx && t.ny == ny {
        return Ok(t.clone());
    }
    if same_domain && nx == 2 * t.nx - 3 && ny == 2 * t.ny - 3 {
        return Ok(refine_grid(t));
    }
    if t.is_identity() {
        return make_uniform_grid(width, height, nx, ny);
    }
    let s = map.scale();
    let field = DisplacementField::from_fn(width, height, |x, y| {
        let d = t.displacement_at(map.to_source(x as f64), map.to_source(y as f64));
        [d[0] * s, d[1] * s]
    });
    fit_to_field(&field, nx, ny)
}

/// Dense field of the inverse mapping of `t`: `v(x) = -d(x + v(x))`, solved
/// by fixed-point iteration. This is the field that undoes a warp by `t`.
pub fn inverse_displacement(t: &FfdTransform, iterations: usize) -> DisplacementField {
    DisplacementField::from_fn(t.image_width, t.image_height, |x, y| {
        let (x, y) = (x as f64, y as f64);
        let mut v = [0.0; 2];
        for _ in 0..iterations {
            let d = t.displacement_at(x + v[0], y + v[1]);
            v = [-d[0], -d[1]];
        }
        v
    })
}
