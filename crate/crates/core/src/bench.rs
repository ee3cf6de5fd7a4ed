//! Seeded experiment harness: trial generation, sweeps and CSV/JSON output.
//!
//! A trial perturbs a 14x14 lattice with uniform offsets, warps the clean
//! image with it to form the floating image, adds independent K-kernel bias
//! fields to both images, registers them and scores the estimate against
//! the inverse of the perturbation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bias::{apply_bias, generate_bias_field, BiasFieldConfig};
use crate::error::{Error, Result};
use crate::ffd::{inverse_displacement, make_uniform_grid, perturb_grid, warp_image};
use crate::image::{load_image, ImageGrid};
use crate::metrics::{converged, i_rmse, t_rmse};
use crate::phantom::{brain_phantom, HALF_SIZE};
use crate::registration::{register, Method, OptimizerOptions, RegistrationOptions};
use crate::similarity::MeasureKind;

/// Version of the `records.csv` / `summary.csv` / `convergence.csv` layouts.
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Fixed-point iterations used to invert the ground-truth perturbation.
const INVERSE_ITERATIONS: usize = 50;

fn default_runs() -> usize {
    15
}
fn default_amplitude() -> f64 {
    6.0
}
fn default_grid() -> usize {
    14
}
fn default_levels() -> usize {
    3
}
fn default_phantom_size() -> (usize, usize) {
    HALF_SIZE
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("bench-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Grayscale image to use; the built-in phantom when absent.
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub phantom_variant: u64,
    /// Phantom size `(width, height)` when `input` is absent.
    #[serde(default = "default_phantom_size")]
    pub phantom_size: (usize, usize),
    pub methods: Vec<Method>,
    /// Measure names: `ssd`, `cc`, `rc`, `mi`.
    pub measures: Vec<String>,
    pub kernels: Vec<usize>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Lattice size of the perturbation and of the final registration level.
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub optimizer: OptimizerOptions,
}

impl ExperimentConfig {
    pub fn new(methods: Vec<Method>, measures: Vec<MeasureKind>, kernels: Vec<usize>) -> Self {
        Self {
            input: None,
            phantom_variant: 0,
            phantom_size: default_phantom_size(),
            methods,
            measures: measures.iter().map(|m| m.name().to_string()).collect(),
            kernels,
            runs: default_runs(),
            amplitude: default_amplitude(),
            grid: default_grid(),
            levels: default_levels(),
            seed: 0,
            out_dir: default_out_dir(),
            optimizer: OptimizerOptions::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn measure_kinds(&self) -> Result<Vec<MeasureKind>> {
        self.measures
            .iter()
            .map(|m| m.parse().map_err(|e: Error| Error::Config(e.to_string())))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.methods.is_empty() || self.measures.is_empty() || self.kernels.is_empty() {
            return fail("methods, measures and kernels must be non-empty".into());
        }
        self.measure_kinds()?;
        if self.runs == 0 {
            return fail("runs must be at least 1".into());
        }
        if let Some(k) = self.kernels.iter().find(|&&k| k > 4) {
            return fail(format!("kernel counts must lie in 0..=4, got {k}"));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return fail(format!("amplitude must be non-negative, got {}", self.amplitude));
        }
        if self.grid < 4 {
            return fail(format!("grid must be at least 4, got {}", self.grid));
        }
        if self.levels == 0 {
            return fail("levels must be at least 1".into());
        }
        if self.input.is_none() && (self.phantom_size.0 < 8 || self.phantom_size.1 < 8) {
            return fail(format!("phantom size {:?} is too small", self.phantom_size));
        }
        if let Some(p) = &self.input {
            if !p.is_file() {
                return fail(format!("input image {} does not exist", p.display()));
            }
        }
        self.optimizer
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// The clean image all trials are built from.
    pub fn load_image(&self) -> Result<ImageGrid> {
        match &self.input {
            Some(p) => load_image(p),
            None => Ok(brain_phantom(self.phantom_size.0, self.phantom_size.1, self.phantom_variant)),
        }
    }

    pub fn registration_options(&self) -> RegistrationOptions {
        RegistrationOptions {
            optimizer: self.optimizer,
            final_lattice: self.grid,
            ..RegistrationOptions::default()
        }
    }
}

/// One trial's outcome. Failed trials carry `NaN` scores and count as not
/// converged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub measure: String,
    pub kernels: usize,
    pub run: usize,
    pub seed: u64,
    pub t_rmse: f64,
    pub i_rmse: f64,
    pub converged: bool,
    pub failed: bool,
    pub wall_time: f64,
}

/// Per-trial seed: the first eight bytes of SHA-256 over the cell
/// coordinates.
pub fn trial_seed(master: u64, method: Method, measure: MeasureKind, kernels: usize, run: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(format!("{master}|{method}|{measure}|{kernels}|{run}").as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Images and ground truth of one trial.
#[derive(Debug, Clone)]
pub struct TrialInputs {
    pub reference: ImageGrid,
    pub floating: ImageGrid,
    /// Floating image before the bias field was added.
    pub floating_clean: ImageGrid,
    pub perturbation: crate::ffd::FfdTransform,
    /// Displacement that maps the floating image back onto the reference.
    pub truth: crate::ffd::DisplacementField,
}

/// Builds the perturbed, bias-corrupted image pair of one trial.
pub fn trial_inputs(clean: &ImageGrid, grid: usize, amplitude: f64, kernels: usize, seed: u64) -> Result<TrialInputs> {
    let (w, h) = (clean.width(), clean.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s_perturb, s_ref, s_flo): (u64, u64, u64) = (rng.random(), rng.random(), rng.random());
    let perturbation = perturb_grid(&make_uniform_grid(w, h, grid, grid)?, amplitude, s_perturb)?;
    let floating_clean = warp_image(clean, &perturbation)?;
    let truth = inverse_displacement(&perturbation, INVERSE_ITERATIONS);
    let reference = apply_bias(clean, &generate_bias_field(w, h, &BiasFieldConfig::random(kernels, s_ref))?)?;
    let floating = apply_bias(
        &floating_clean,
        &generate_bias_field(w, h, &BiasFieldConfig::random(kernels, s_flo))?,
    )?;
    Ok(TrialInputs {
        reference,
        floating,
        floating_clean,
        perturbation,
        truth,
    })
}

/// Runs one cell of the sweep. Pipeline errors produce a failed record.
pub fn run_trial(
    config: &ExperimentConfig,
    clean: &ImageGrid,
    method: Method,
    measure: MeasureKind,
    kernels: usize,
    run: usize,
) -> Result<RunRecord> {
    let seed = trial_seed(config.seed, method, measure, kernels, run);
    let inputs = trial_inputs(clean, config.grid, config.amplitude, kernels, seed)?;
    let opts = config.registration_options();
    let start = Instant::now();
    let outcome = register(method, &inputs.reference, &inputs.floating, config.levels, measure, &opts);
    let wall_time = start.elapsed().as_secs_f64();
    let mut record = RunRecord {
        method: method.to_string(),
        measure: measure.to_string(),
        kernels,
        run,
        seed,
        t_rmse: f64::NAN,
        i_rmse: f64::NAN,
        converged: false,
        failed: true,
        wall_time,
    };
    match outcome {
        Ok(result) => {
            let est = result.transform.dense_displacement();
            record.t_rmse = t_rmse(&inputs.truth, &est)?;
            record.i_rmse = i_rmse(clean, &est.warp(&inputs.floating_clean)?)?;
            record.converged = converged(record.t_rmse);
            record.failed = false;
        }
        Err(e) => log::warn!("{method}/{measure} K={kernels} run {run} failed: {e}"),
    }
    Ok(record)
}

/// Aggregate of one (method, measure, kernels) cell. `kernels` is `"all"`
/// for the rows pooling every kernel count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub measure: String,
    pub kernels: String,
    pub runs: usize,
    pub converged: usize,
    pub convergence_pct: f64,
    /// Mean and sample SD over converged runs; `NaN` when none converged.
    pub t_rmse_mean: f64,
    pub t_rmse_sd: f64,
    pub i_rmse_mean: f64,
    pub i_rmse_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub measure: String,
    pub method: String,
    pub kernels: usize,
    pub convergence_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub convergence: Vec<ConvergenceRow>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    match values.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (values[0], 0.0),
        n => {
            let mean = values.iter().sum::<f64>() / n as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (mean, var.sqrt())
        }
    }
}

fn summarize_group(method: &str, measure: &str, kernels: String, records: &[&RunRecord]) -> SummaryRow {
    let ok: Vec<&&RunRecord> = records.iter().filter(|r| r.converged).collect();
    let t: Vec<f64> = ok.iter().map(|r| r.t_rmse).collect();
    let i: Vec<f64> = ok.iter().map(|r| r.i_rmse).collect();
    let (t_rmse_mean, t_rmse_sd) = mean_sd(&t);
    let (i_rmse_mean, i_rmse_sd) = mean_sd(&i);
    SummaryRow {
        method: method.to_string(),
        measure: measure.to_string(),
        kernels,
        runs: records.len(),
        converged: ok.len(),
        convergence_pct: 100.0 * ok.len() as f64 / records.len() as f64,
        t_rmse_mean,
        t_rmse_sd,
        i_rmse_mean,
        i_rmse_sd,
    }
}

/// Per-cell and pooled-over-kernels summaries, in sorted key order.
pub fn summarize(records: &[RunRecord]) -> Summary {
    let mut cells: BTreeMap<(&str, &str, usize), Vec<&RunRecord>> = BTreeMap::new();
    let mut pooled: BTreeMap<(&str, &str), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((&r.method, &r.measure, r.kernels)).or_default().push(r);
        pooled.entry((&r.method, &r.measure)).or_default().push(r);
    }
    let mut rows = Vec::new();
    let mut convergence = Vec::new();
    for (&(method, measure), group) in &pooled {
        for (&(m, s, k), cell) in cells.range((method, measure, 0)..=(method, measure, usize::MAX)) {
            let row = summarize_group(m, s, k.to_string(), cell);
            convergence.push(ConvergenceRow {
                measure: s.to_string(),
                method: m.to_string(),
                kernels: k,
                convergence_pct: row.convergence_pct,
            });
            rows.push(row);
        }
        rows.push(summarize_group(method, measure, "all".into(), group));
    }
    convergence.sort_by(|a, b| (&a.measure, &a.method, a.kernels).cmp(&(&b.measure, &b.method, b.kernels)));
    Summary { rows, convergence }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse(format!("{}: {other:?}", path.display())),
        }
    } else {
        Error::Parse(format!("{}: {e}", path.display()))
    }
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    write_csv(path, records)
}

/// Writes `summary.csv` and `convergence.csv` into `dir`.
pub fn write_summary(dir: &Path, summary: &Summary) -> Result<()> {
    write_csv(&dir.join("summary.csv"), &summary.rows)?;
    write_csv(&dir.join("convergence.csv"), &summary.convergence)
}

/// Reads a records CSV; errors name the offending line.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<RunRecord>().enumerate() {
        // Line 1 is the header.
        let record = row.map_err(|e| Error::Parse(format!("{} line {}: {e}", path.display(), i + 2)))?;
        out.push(record);
    }
    if out.is_empty() {
        return Err(Error::Parse(format!("{} contains no records", path.display())));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    csv_schema_version: u32,
    records_columns: [&'static str; 10],
    config: &'a ExperimentConfig,
    image_size: (usize, usize),
    trials: Vec<ManifestTrial<'a>>,
    failed_trials: usize,
}

#[derive(Debug, Clone, Serialize)]
struct ManifestTrial<'a> {
    method: &'a str,
    measure: &'a str,
    kernels: usize,
    run: usize,
    seed: u64,
}

/// Result of a full sweep.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub summary: Summary,
    pub failed: usize,
}

/// Runs every (method, measure, kernels, run) cell in order and writes
/// `records.csv`, `summary.csv`, `convergence.csv` and `manifest.json` into
/// the configured output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let clean = config.load_image()?;
    let measures = config.measure_kinds()?;
    let mut records = Vec::new();
    for &method in &config.methods {
        for &measure in &measures {
            for &k in &config.kernels {
                for run in 0..config.runs {
                    let r = run_trial(config, &clean, method, measure, k, run)?;
                    log::info!(
                        "{method} {measure} K={k} run {run}: t_rmse {:.3} converged {} ({:.1}s)",
                        r.t_rmse,
                        r.converged,
                        r.wall_time
                    );
                    records.push(r);
                }
            }
        }
    }
    let summary = summarize(&records);
    let failed = records.iter().filter(|r| r.failed).count();
    let dir = &config.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_records(&dir.join("records.csv"), &records)?;
    write_summary(dir, &summary)?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        csv_schema_version: CSV_SCHEMA_VERSION,
        records_columns: [
            "method", "measure", "kernels", "run", "seed", "t_rmse", "i_rmse", "converged", "failed", "wall_time",
        ],
        config,
        image_size: (clean.width(), clean.height()),
        trials: records
            .iter()
            .map(|r| ManifestTrial {
                method: &r.method,
                measure: &r.measure,
                kernels: r.kernels,
                run: r.run,
                seed: r.seed,
            })
            .collect(),
        failed_trials: failed,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    let path = dir.join("manifest.json");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(ExperimentOutput {
        records,
        summary,
        failed,
    })
}

/// Recomputes the summaries from a stored records file and writes them into
/// `out_dir`.
pub fn report(records_path: &Path, out_dir: &Path) -> Result<Summary> {
    let records = read_records(records_path)?;
    let summary = summarize(&records);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_summary(out_dir, &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(method: &str, k: usize, run: usize, t: f64) -> RunRecord {
        RunRecord {
            method: method.into(),
            measure: "mi".into(),
            kernels: k,
            run,
            seed: run as u64,
            t_rmse: t,
            i_rmse: t / 10.0,
            converged: converged(t),
            failed: false,
            wall_time: 0.5,
        }
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        let a = trial_seed(7, Method::AfrEmd, MeasureKind::mi(), 1, 3);
        assert_eq!(a, trial_seed(7, Method::AfrEmd, MeasureKind::mi(), 1, 3));
        assert_ne!(a, trial_seed(7, Method::AfrEmd, MeasureKind::mi(), 1, 4));
        assert_ne!(a, trial_seed(8, Method::AfrEmd, MeasureKind::mi(), 1, 3));
        assert_ne!(a, trial_seed(7, Method::LrEmd, MeasureKind::mi(), 1, 3));
    }

    #[test]
    fn summary_uses_converged_runs_for_moments() {
        let records = vec![
            record("intensity", 0, 0, 1.0),
            record("intensity", 0, 1, 3.0),
            record("intensity", 0, 2, 9.0),
            record("intensity", 1, 0, 5.0),
        ];
        let s = summarize(&records);
        assert_eq!(s.rows.len(), 3);
        let k0 = &s.rows[0];
        assert_eq!((k0.runs, k0.converged), (3, 2));
        assert!((k0.convergence_pct - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(k0.t_rmse_mean, 2.0);
        assert!((k0.t_rmse_sd - 2f64.sqrt()).abs() < 1e-12);
        let k1 = &s.rows[1];
        assert_eq!(k1.convergence_pct, 0.0);
        assert!(k1.t_rmse_mean.is_nan());
        let all = &s.rows[2];
        assert_eq!((all.kernels.as_str(), all.runs, all.converged), ("all", 4, 2));
        assert_eq!(s.convergence.len(), 2);
    }

    #[test]
    fn config_parsing_and_validation() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            methods = ["intensity", "afr-emd"]
            measures = ["mi", "ssd"]
            kernels = [0, 1]
            seed = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.runs, 15);
        assert_eq!(cfg.grid, 14);
        assert_eq!(cfg.measure_kinds().unwrap(), vec![MeasureKind::mi(), MeasureKind::Ssd]);
        assert!(ExperimentConfig::from_toml_str("methods = []\nmeasures=[\"mi\"]\nkernels=[0]").is_err());
        assert!(ExperimentConfig::from_toml_str("methods = [\"intensity\"]\nmeasures=[\"xx\"]\nkernels=[0]").is_err());
        assert!(ExperimentConfig::from_toml_str("methods = [\"intensity\"]\nmeasures=[\"mi\"]\nkernels=[5]").is_err());
        assert!(ExperimentConfig::from_toml_str("methods = [\"intensity\"]\nmeasures=[\"mi\"]\nkernels=[0]\nruns=0").is_err());
    }

    #[test]
    fn records_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.csv");
        let mut records = vec![record("lr-emd", 2, 0, 1.25), record("lr-emd", 2, 1, 4.0)];
        records[1].failed = true;
        records[1].t_rmse = f64::NAN;
        write_records(&path, &records).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back[0], records[0]);
        assert!(back[1].t_rmse.is_nan() && back[1].failed);

        let bad = dir.path().join("bad.csv");
        let text = fs::read_to_string(&path).unwrap().replace("1.25", "oops");
        fs::write(&bad, text).unwrap();
        let msg = read_records(&bad).unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");

        let empty = dir.path().join("empty.csv");
        fs::write(&empty, "").unwrap();
        assert!(matches!(read_records(&empty), Err(Error::Parse(_))));
    }

    #[test]
    fn trial_inputs_without_bias_or_perturbation() {
        let clean = brain_phantom(40, 32, 1);
        let t = trial_inputs(&clean, 6, 0.0, 0, 5).unwrap();
        assert_eq!(t.reference, clean);
        assert_eq!(t.floating, clean);
        assert!(t.truth.max_magnitude() == 0.0);
    }
}
