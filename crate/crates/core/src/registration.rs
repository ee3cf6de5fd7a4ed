//! Gradient-descent FFD registration and the three hierarchical pipelines.
//!
//! * [`register_intensity_hier`]: image pyramid (factors `4, 2, 1` for three
//!   levels) on the raw intensities.
//! * [`register_lr_emd`]: one level per IMF at full resolution, from the
//!   smoothest IMF to the finest.
//! * [`register_afr_emd`]: the intensity pyramid applied to the per-image
//!   average of IMFs.
//!
//! All pipelines start from the identity, refine the control lattice towards
//! `final_lattice` and warm-start each level with the previous solution.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bemd::{average_feature_map, decompose, ImfStack, SiftOptions};
use crate::error::{Error, Result};
use crate::ffd::{make_uniform_grid, transfer, AxisBasis, DisplacementField, FfdTransform, LevelMap};
use crate::image::{downsample, normalize, ImageGrid};
use crate::similarity::{Evaluated, MeasureContext, MeasureKind, Patch, PatchScratch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    pub max_iters: usize,
    /// Largest control-offset change of the first step, in pixels.
    pub initial_step: f64,
    pub shrink: f64,
    pub min_step: f64,
    /// Central-difference half width, in pixels.
    pub fd_step: f64,
    /// Relative cost improvement below which a level stops.
    pub tolerance: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            initial_step: 2.0,
            shrink: 0.5,
            min_step: 1e-3,
            fd_step: 0.5,
            tolerance: 1e-6,
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_step", self.initial_step),
            ("min_step", self.min_step),
            ("fd_step", self.fd_step),
            ("tolerance", self.tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::Argument("max_iters must be positive".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Argument(format!("shrink must lie in (0, 1), got {}", self.shrink)));
        }
        Ok(())
    }
}

/// Settings shared by the three pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationOptions {
    pub optimizer: OptimizerOptions,
    /// Control lattice size (per axis) at the finest level.
    pub final_lattice: usize,
    pub sift: SiftOptions,
}

impl Default for RegistrationOptions {
    fn default() -> Self {
        Self {
            optimizer: OptimizerOptions::default(),
            final_lattice: 14,
            sift: SiftOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "intensity")]
    Intensity,
    #[serde(rename = "lr-emd")]
    LrEmd,
    #[serde(rename = "afr-emd")]
    AfrEmd,
}

impl Method {
    pub fn all() -> [Method; 3] {
        [Method::Intensity, Method::LrEmd, Method::AfrEmd]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Intensity => "intensity",
            Method::LrEmd => "lr-emd",
            Method::AfrEmd => "afr-emd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "intensity" => Ok(Method::Intensity),
            "lr-emd" | "lremd" => Ok(Method::LrEmd),
            "afr-emd" | "afremd" => Ok(Method::AfrEmd),
            other => Err(Error::Argument(format!("unknown method '{other}'"))),
        }
    }
}

/// Optimization record of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutcome {
    pub transform: FfdTransform,
    /// Cost at the start and after every accepted step.
    pub trace: Vec<f64>,
    /// Gradient evaluations performed.
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Transform over the full-resolution domain.
    pub transform: FfdTransform,
    pub level_traces: Vec<Vec<f64>>,
    pub iterations: Vec<usize>,
    /// Seconds spent in the pipeline, decomposition included.
    pub wall_time: f64,
}

impl PartialEq for RegistrationResult {
    /// Equality ignores wall time.
    fn eq(&self, other: &Self) -> bool {
        self.transform == other.transform
            && self.level_traces == other.level_traces
            && self.iterations == other.iterations
    }
}

/// Warp state for one transform: dense field plus warped moving image.
struct WarpState {
    field: DisplacementField,
    warped: ImageGrid,
    eval: Evaluated,
}

struct LevelProblem<'a> {
    moving: &'a ImageGrid,
    ctx: MeasureContext,
    bx: AxisBasis,
    by: AxisBasis,
}

impl LevelProblem<'_> {
    fn state(&self, t: &FfdTransform) -> WarpState {
        let field = t.dense_with(&self.bx, &self.by);
        let warped = field.warp(self.moving).expect("field matches moving image");
        let eval = self.ctx.evaluate(&warped);
        WarpState { field, warped, eval }
    }

    /// Central-difference gradient over all control offsets, evaluating
    /// only the pixels each control influences.
    fn gradient(&self, t: &FfdTransform, s: &WarpState, h: f64) -> Vec<f64> {
        let w = self.moving.width();
        let mut grad = vec![0.0; t.param_count()];
        let mut values = Vec::new();
        let mut scratch = PatchScratch::default();
        for j in 0..t.ny {
            let ys = self.by.support(j);
            if ys.is_empty() {
                continue;
            }
            for i in 0..t.nx {
                let xs = self.bx.support(i);
                if xs.is_empty() {
                    continue;
                }
                for comp in 0..2 {
                    let mut costs = [0.0; 2];
                    for (slot, sign) in [(0, 1.0), (1, -1.0)] {
                        values.clear();
                        for y in ys.clone() {
                            let wy = self.by.weight(y, j) * sign * h;
                            for x in xs.clone() {
                                let mut d = s.field.vectors[y * w + x];
                                d[comp] += wy * self.bx.weight(x, i);
                                values.push(self.moving.sample_bilinear(x as f64 + d[0], y as f64 + d[1]));
                            }
                        }
                        let patch = Patch {
                            x0: xs.start,
                            y0: ys.start,
                            width: xs.len(),
                            height: ys.len(),
                            values: &values,
                        };
                        costs[slot] = self.ctx.cost_patched(&s.eval, &s.warped, &patch, &mut scratch);
                    }
                    grad[2 * (j * t.nx + i) + comp] = (costs[0] - costs[1]) / (2.0 * h);
                }
            }
        }
        grad
    }
}

fn check_domain(fixed: &ImageGrid, moving: &ImageGrid, t: &FfdTransform) -> Result<()> {
    fixed
        .check_same_shape(moving)
        .map_err(|e| Error::Argument(e.to_string()))?;
    if t.image_width != fixed.width() || t.image_height != fixed.height() {
        return Err(Error::Argument(format!(
            "transform domain {}x{} does not match image {}x{}",
            t.image_width,
            t.image_height,
            fixed.width(),
            fixed.height()
        )));
    }
    t.validate()
}

/// Gradient descent on `measure(fixed, warp(moving, t))` starting at `init`.
///
/// Each iteration computes a finite-difference gradient, then tries steps
/// along it whose largest offset change equals the current step size; a
/// step is accepted only if it strictly lowers the cost, otherwise the step
/// size shrinks. The level stops after `max_iters` gradients, when the step
/// falls below `min_step`, or when an accepted step improves the cost by
/// less than `tolerance` relative.
pub fn optimize_level_detailed(
    fixed: &ImageGrid,
    moving: &ImageGrid,
    init: &FfdTransform,
    measure: MeasureKind,
    opts: &OptimizerOptions,
) -> Result<LevelOutcome> {
    opts.validate()?;
    check_domain(fixed, moving, init)?;
    let problem = LevelProblem {
        moving,
        ctx: MeasureContext::new(measure, fixed, moving)?,
        bx: init.basis_x(),
        by: init.basis_y(),
    };
    let mut t = init.clone();
    let mut state = problem.state(&t);
    if !state.eval.cost.is_finite() {
        return Err(Error::Numerical(format!("initial {measure} cost is not finite")));
    }
    let mut trace = vec![state.eval.cost];
    let mut step = opts.initial_step;
    let mut iterations = 0;
    'outer: while iterations < opts.max_iters && step >= opts.min_step {
        iterations += 1;
        let grad = problem.gradient(&t, &state, opts.fd_step);
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if !(gmax > 0.0 && gmax.is_finite()) {
            break;
        }
        loop {
            let mut candidate = t.clone();
            for (p, g) in grad.iter().enumerate() {
                candidate.set_param(p, t.param(p) - step * g / gmax);
            }
            let next = problem.state(&candidate);
            let (old, new) = (state.eval.cost, next.eval.cost);
            if new < old {
                t = candidate;
                state = next;
                trace.push(new);
                if (old - new) / old.abs().max(f64::MIN_POSITIVE) < opts.tolerance {
                    break 'outer;
                }
                break;
            }
            step *= opts.shrink;
            if step < opts.min_step {
                break 'outer;
            }
        }
    }
    Ok(LevelOutcome {
        transform: t,
        trace,
        iterations,
    })
}

pub fn optimize_level(
    fixed: &ImageGrid,
    moving: &ImageGrid,
    init: &FfdTransform,
    measure: MeasureKind,
    opts: &OptimizerOptions,
) -> Result<FfdTransform> {
    Ok(optimize_level_detailed(fixed, moving, init, measure, opts)?.transform)
}

/// Lattice sizes from coarse to fine, each roughly half the resolution of
/// the next, ending at `final_lattice`.
pub fn lattice_schedule(final_lattice: usize, levels: usize) -> Vec<usize> {
    let mut sizes = vec![final_lattice];
    for _ in 1..levels {
        let next = *sizes.last().unwrap();
        sizes.push(next.div_ceil(2).saturating_add(2).max(4).min(next));
    }
    sizes.reverse();
    sizes
}

/// Downsampling factors from coarse to fine: `2^(levels-1), ..., 2, 1`.
pub fn pyramid_factors(levels: usize) -> Vec<usize> {
    (0..levels).rev().map(|l| 1usize << l).collect()
}

fn check_inputs(reference: &ImageGrid, floating: &ImageGrid, levels: usize, opts: &RegistrationOptions) -> Result<()> {
    reference
        .check_same_shape(floating)
        .map_err(|e| Error::Argument(e.to_string()))?;
    if levels == 0 {
        return Err(Error::Argument("at least one level is required".into()));
    }
    if opts.final_lattice < 4 {
        return Err(Error::Argument(format!(
            "final lattice must be at least 4, got {}",
            opts.final_lattice
        )));
    }
    opts.optimizer.validate()
}

/// Coarse-to-fine registration over a downsampling pyramid.
fn register_pyramid(
    reference: &ImageGrid,
    floating: &ImageGrid,
    levels: usize,
    measure: MeasureKind,
    opts: &RegistrationOptions,
) -> Result<(FfdTransform, Vec<Vec<f64>>, Vec<usize>)> {
    let factors = pyramid_factors(levels);
    let lattices = lattice_schedule(opts.final_lattice, levels);
    let mut traces = Vec::with_capacity(levels);
    let mut iterations = Vec::with_capacity(levels);
    let mut current: Option<(FfdTransform, usize)> = None;
    for (&factor, &n) in factors.iter().zip(&lattices) {
        let fixed = downsample(reference, factor)?;
        let moving = downsample(floating, factor)?;
        let (w, h) = (fixed.width(), fixed.height());
        let init = match &current {
            None => make_uniform_grid(w, h, n, n)?,
            Some((t, prev_factor)) => transfer(
                t,
                w,
                h,
                n,
                n,
                LevelMap {
                    from_factor: *prev_factor,
                    to_factor: factor,
                },
            )?,
        };
        let out = optimize_level_detailed(&fixed, &moving, &init, measure, &opts.optimizer)?;
        traces.push(out.trace);
        iterations.push(out.iterations);
        current = Some((out.transform, factor));
    }
    Ok((current.unwrap().0, traces, iterations))
}

/// Baseline: intensity pyramid with factors `2^(levels-1), ..., 1`.
pub fn register_intensity_hier(
    reference: &ImageGrid,
    floating: &ImageGrid,
    levels: usize,
    measure: MeasureKind,
    opts: &RegistrationOptions,
) -> Result<RegistrationResult> {
    check_inputs(reference, floating, levels, opts)?;
    let start = Instant::now();
    let (transform, level_traces, iterations) = register_pyramid(reference, floating, levels, measure, opts)?;
    Ok(RegistrationResult {
        transform,
        level_traces,
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Registers IMF pairs from the smoothest (IMF `n`) to the finest (IMF 1),
/// all at full resolution, on a lattice refined at every level.
pub fn register_lr_emd_stacks(
    reference: &ImfStack,
    floating: &ImfStack,
    measure: MeasureKind,
    opts: &RegistrationOptions,
) -> Result<(FfdTransform, Vec<Vec<f64>>, Vec<usize>)> {
    let n = reference.levels();
    if n == 0 || floating.levels() != n {
        return Err(Error::Argument(format!(
            "IMF stacks must be non-empty and equal in depth, got {n} and {}",
            floating.levels()
        )));
    }
    let (w, h) = (reference.residual.width(), reference.residual.height());
    let lattices = lattice_schedule(opts.final_lattice, n);
    let mut traces = Vec::with_capacity(n);
    let mut iterations = Vec::with_capacity(n);
    let mut current: Option<FfdTransform> = None;
    for (level, &lat) in lattices.iter().enumerate() {
        let imf = n - 1 - level;
        let fixed = normalize(&reference.imfs[imf]);
        let moving = normalize(&floating.imfs[imf]);
        let init = match &current {
            None => make_uniform_grid(w, h, lat, lat)?,
            Some(t) => transfer(t, w, h, lat, lat, LevelMap::same())?,
        };
        let out = optimize_level_detailed(&fixed, &moving, &init, measure, &opts.optimizer)?;
        traces.push(out.trace);
        iterations.push(out.iterations);
        current = Some(out.transform);
    }
    Ok((current.unwrap(), traces, iterations))
}

pub fn register_lr_emd(
    reference: &ImageGrid,
    floating: &ImageGrid,
    n: usize,
    measure: MeasureKind,
    opts: &RegistrationOptions,
) -> Result<RegistrationResult> {
    check_inputs(reference, floating, n, opts)?;
    let start = Instant::now();
    let rs = decompose(reference, n, &opts.sift)?;
    let fs = decompose(floating, n, &opts.sift)?;
    let (transform, level_traces, iterations) = register_lr_emd_stacks(&rs, &fs, measure, opts)?;
    Ok(RegistrationResult {
        transform,
        level_traces,
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Registers the normalized average-of-IMF feature maps through the
/// intensity pyramid.
pub fn register_afr_emd_stacks(
    reference: &ImfStack,
    floating: &ImfStack,
    measure: MeasureKind,
    opts: &RegistrationOptions,
) -> Result<(FfdTransform, Vec<Vec<f64>>, Vec<usize>)> {
    let fixed = normalize(&average_feature_map(reference)?);
    let moving = normalize(&average_feature_map(floating)?);
    register_pyramid(&fixed, &moving, reference.levels(), measure, opts)
}

pub fn register_afr_emd(
    reference: &ImageGrid,
    floating: &ImageGrid,
    n: usize,
    measure: MeasureKind,
    opts: &RegistrationOptions,
) -> Result<RegistrationResult> {
    check_inputs(reference, floating, n, opts)?;
    let start = Instant::now();
    let rs = decompose(reference, n, &opts.sift)?;
    let fs = decompose(floating, n, &opts.sift)?;
    let (transform, level_traces, iterations) = register_afr_emd_stacks(&rs, &fs, measure, opts)?;
    Ok(RegistrationResult {
        transform,
        level_traces,
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Runs `method` with `levels` pyramid levels or IMFs.
pub fn register(
    method: Method,
    reference: &ImageGrid,
    floating: &ImageGrid,
    levels: usize,
    measure: MeasureKind,
    opts: &RegistrationOptions,
) -> Result<RegistrationResult> {
    match method {
        Method::Intensity => register_intensity_hier(reference, floating, levels, measure, opts),
        Method::LrEmd => register_lr_emd(reference, floating, levels, measure, opts),
        Method::AfrEmd => register_afr_emd(reference, floating, levels, measure, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ffd::warp_image;
    use crate::metrics::t_rmse;
    use crate::phantom::brain_phantom;

    fn blob_image(w: usize, h: usize) -> ImageGrid {
        ImageGrid::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64, y as f64);
            let g = |cx: f64, cy: f64, s: f64| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp();
            g(15.0, 14.0, 5.0) + 0.7 * g(32.0, 20.0, 6.0) + 0.5 * g(22.0, 30.0, 4.0) + 0.3 * g(38.0, 8.0, 3.5)
        })
    }

    #[test]
    fn schedules() {
        assert_eq!(pyramid_factors(3), vec![4, 2, 1]);
        assert_eq!(pyramid_factors(1), vec![1]);
        assert_eq!(lattice_schedule(14, 3), vec![7, 9, 14]);
        assert_eq!(lattice_schedule(4, 3), vec![4, 4, 4]);
        assert_eq!(lattice_schedule(14, 1), vec![14]);
    }

    #[test]
    fn options_validation() {
        assert!(OptimizerOptions::default().validate().is_ok());
        let bad = OptimizerOptions {
            shrink: 1.0,
            ..OptimizerOptions::default()
        };
        assert!(bad.validate().is_err());
        assert!("AFR-EMD".parse::<Method>().unwrap() == Method::AfrEmd);
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn identity_stays_identity() {
        let img = blob_image(40, 36);
        let init = make_uniform_grid(40, 36, 6, 6).unwrap();
        for measure in MeasureKind::all() {
            let out = optimize_level_detailed(&img, &img, &init, measure, &OptimizerOptions::default()).unwrap();
            let max = out.transform.offsets.iter().flat_map(|o| o.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max <= 2.0, "{measure}: {max}");
            assert!(out.trace.last().unwrap() <= &out.trace[0]);
        }
    }

    #[test]
    fn recovers_translation_with_ssd() {
        let (w, h) = (48, 40);
        let img = blob_image(w, h);
        let mut shift = make_uniform_grid(w, h, 6, 6).unwrap();
        shift.offsets.iter_mut().for_each(|o| *o = [2.0, 0.0]);
        // moving(x) = img(x + 2): registering back needs a -2 shift.
        let moving = warp_image(&img, &shift).unwrap();
        let init = make_uniform_grid(w, h, 6, 6).unwrap();
        let out = optimize_level_detailed(&img, &moving, &init, MeasureKind::Ssd, &OptimizerOptions::default()).unwrap();
        let truth = DisplacementField::from_fn(w, h, |_, _| [-2.0, 0.0]);
        // Score the interior where the blobs provide signal.
        let est = out.transform.dense_displacement();
        let mut err = 0.0;
        let mut count = 0.0;
        for y in 5..h - 5 {
            for x in 5..w - 5 {
                let (a, b) = (truth.get(x, y), est.get(x, y));
                err += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                count += 1.0;
            }
        }
        assert!(err / count < 0.5, "mean error {}", err / count);
        for pair in out.trace.windows(2) {
            assert!(pair[1] < pair[0]);
        }
    }

    #[test]
    fn constant_images_leave_init_unchanged() {
        let c = ImageGrid::filled(20, 18, 0.4);
        let init = make_uniform_grid(20, 18, 5, 5).unwrap();
        let out = optimize_level_detailed(&c, &c, &init, MeasureKind::Ssd, &OptimizerOptions::default()).unwrap();
        assert_eq!(out.transform, init);
        assert_eq!(out.trace, vec![0.0]);
    }

    #[test]
    fn rejects_mismatched_domain() {
        let img = blob_image(20, 18);
        let t = make_uniform_grid(21, 18, 5, 5).unwrap();
        assert!(optimize_level(&img, &img, &t, MeasureKind::Ssd, &OptimizerOptions::default()).is_err());
        let opts = RegistrationOptions::default();
        assert!(register_intensity_hier(&img, &img, 0, MeasureKind::Ssd, &opts).is_err());
    }

    #[test]
    fn pipelines_are_deterministic_and_near_identity_on_equal_images() {
        let img = brain_phantom(54, 45, 2);
        let opts = RegistrationOptions {
            final_lattice: 8,
            ..RegistrationOptions::default()
        };
        for method in Method::all() {
            let a = register(method, &img, &img, 2, MeasureKind::mi(), &opts).unwrap();
            let b = register(method, &img, &img, 2, MeasureKind::mi(), &opts).unwrap();
            assert_eq!(a, b);
            let zero = DisplacementField::zeros(54, 45);
            assert!(t_rmse(&zero, &a.transform.dense_displacement()).unwrap() < 0.5, "{method}");
            for trace in &a.level_traces {
                assert!(trace.windows(2).all(|p| p[1] < p[0]));
            }
        }
    }
}
