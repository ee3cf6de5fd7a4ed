use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use emdreg::bemd::{average_feature_map, decompose, SiftOptions};
use emdreg::bench::{report, run_experiment, ExperimentConfig};
use emdreg::bias::{apply_bias, generate_bias_field, BiasFieldConfig};
use emdreg::image::{load_image, normalize, save_image};
use emdreg::registration::{register, Method, OptimizerOptions, RegistrationOptions};
use emdreg::similarity::MeasureKind;
use emdreg::{Error, Result};

#[derive(Parser)]
#[command(name = "emdreg", version, about = "EMD-based deformable registration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose an image into IMFs; writes min-max scaled PNGs.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = SiftOptions::default().sd_threshold)]
        sd_threshold: f64,
        #[arg(long, default_value_t = SiftOptions::default().max_sift_iters)]
        max_sift_iters: usize,
    },
    /// Add a random Gaussian-mixture bias field to an image.
    SimulateBias {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        kernels: usize,
        /// Kernel sigma is image width divided by this.
        #[arg(long, default_value_t = 16.0)]
        sigma_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the bias field itself.
        #[arg(long)]
        field_out: Option<PathBuf>,
    },
    /// Register a floating image onto a reference image.
    Register {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        flo: PathBuf,
        #[arg(long, default_value = "afr-emd")]
        method: Method,
        #[command(flatten)]
        measure: MeasureArgs,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        /// Accepted for reproducible scripts; registration itself is deterministic.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 14)]
        grid: usize,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        out_transform: PathBuf,
        #[arg(long)]
        out_image: Option<PathBuf>,
    },
    /// Run a seeded method x measure x bias sweep.
    Benchmark(BenchmarkArgs),
    /// Recompute summary tables from a stored records.csv.
    Report {
        #[arg(long)]
        records: PathBuf,
        /// Defaults to the directory holding the records file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct MeasureArgs {
    #[arg(long, default_value = "mi")]
    measure: MeasureKind,
    #[arg(long)]
    mi_bins: Option<usize>,
    #[arg(long)]
    rc_alpha: Option<f64>,
}

impl MeasureArgs {
    fn resolve(&self) -> MeasureKind {
        match self.measure {
            MeasureKind::Mi { bins } => MeasureKind::Mi {
                bins: self.mi_bins.unwrap_or(bins),
            },
            MeasureKind::Rc { alpha } => MeasureKind::Rc {
                alpha: self.rc_alpha.unwrap_or(alpha),
            },
            other => other,
        }
    }
}

#[derive(Args)]
struct BenchmarkArgs {
    /// TOML experiment file; the flags below are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grayscale image; the built-in phantom when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "intensity,lr-emd,afr-emd")]
    methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "mi")]
    measures: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    kernels: Vec<usize>,
    #[arg(long, default_value_t = 15)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 14)]
    grid: usize,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
}

impl BenchmarkArgs {
    fn into_config(self) -> Result<ExperimentConfig> {
        if let Some(path) = &self.config {
            return ExperimentConfig::load(path);
        }
        let mut cfg = ExperimentConfig::new(self.methods, vec![], self.kernels);
        cfg.measures = self.measures;
        cfg.input = self.input;
        cfg.runs = self.runs;
        cfg.seed = self.seed;
        cfg.amplitude = self.amplitude;
        cfg.grid = self.grid;
        cfg.levels = self.levels;
        cfg.out_dir = self.out;
        if let Some(m) = self.max_iters {
            cfg.optimizer.max_iters = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

const EXIT_CONFIG: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

fn save_normalized(img: &emdreg::ImageGrid, dir: &Path, name: &str) -> Result<()> {
    save_image(&normalize(img), dir.join(name))
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Decompose {
            input,
            levels,
            out_dir,
            sd_threshold,
            max_sift_iters,
        } => {
            let img = load_image(&input)?;
            let opts = SiftOptions {
                sd_threshold,
                max_sift_iters,
                ..SiftOptions::default()
            };
            let stack = decompose(&img, levels, &opts)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
                path: out_dir.clone(),
                source: e,
            })?;
            for (i, imf) in stack.imfs.iter().enumerate() {
                save_normalized(imf, &out_dir, &format!("imf_{}.png", i + 1))?;
            }
            save_normalized(&stack.residual, &out_dir, "residual.png")?;
            save_normalized(&average_feature_map(&stack)?, &out_dir, "average.png")?;
            println!("wrote {} IMFs, residual and average to {}", levels, out_dir.display());
        }
        Command::SimulateBias {
            input,
            kernels,
            sigma_frac,
            seed,
            out,
            field_out,
        } => {
            if !(sigma_frac > 0.0) {
                return Err(Error::Argument(format!("sigma-frac must be positive, got {sigma_frac}")));
            }
            let img = load_image(&input)?;
            let cfg = BiasFieldConfig::random(kernels, seed).with_sigma(img.width() as f64 / sigma_frac);
            let field = generate_bias_field(img.width(), img.height(), &cfg)?;
            save_image(&apply_bias(&img, &field)?, &out)?;
            if let Some(path) = field_out {
                save_image(&field, path)?;
            }
            println!("wrote {}", out.display());
        }
        Command::Register {
            reference,
            flo,
            method,
            measure,
            levels,
            seed,
            grid,
            max_iters,
            out_transform,
            out_image,
        } => {
            let r = load_image(&reference)?;
            let f = load_image(&flo)?;
            let mut optimizer = OptimizerOptions::default();
            if let Some(m) = max_iters {
                optimizer.max_iters = m;
            }
            let opts = RegistrationOptions {
                optimizer,
                final_lattice: grid,
                ..RegistrationOptions::default()
            };
            let measure = measure.resolve();
            log::info!("registering with {method}/{measure}, seed {seed}");
            let result = register(method, &r, &f, levels, measure, &opts)?;
            let json = result.transform.to_json()?;
            std::fs::write(&out_transform, json).map_err(|e| Error::Io {
                path: out_transform.clone(),
                source: e,
            })?;
            if let Some(path) = out_image {
                let warped = result.transform.dense_displacement().warp(&f)?;
                save_image(&warped, path)?;
            }
            for (level, trace) in result.level_traces.iter().enumerate() {
                println!(
                    "level {}: {} iterations, cost {:.6} -> {:.6}",
                    level + 1,
                    result.iterations[level],
                    trace[0],
                    trace[trace.len() - 1]
                );
            }
            println!("wall time {:.2}s", result.wall_time);
        }
        Command::Benchmark(args) => {
            let cfg = args.into_config()?;
            let out = run_experiment(&cfg)?;
            for row in out.summary.rows.iter().filter(|r| r.kernels == "all") {
                println!(
                    "{:>9} {:>3}: convergence {:5.1}%  t_rmse {:.3} +- {:.3}  i_rmse {:.4} +- {:.4}",
                    row.method,
                    row.measure,
                    row.convergence_pct,
                    row.t_rmse_mean,
                    row.t_rmse_sd,
                    row.i_rmse_mean,
                    row.i_rmse_sd
                );
            }
            println!("results in {}", cfg.out_dir.display());
            if out.failed > 0 {
                eprintln!("{} trials failed", out.failed);
                return Ok(EXIT_PARTIAL);
            }
        }
        Command::Report { records, out } => {
            let dir = out.unwrap_or_else(|| records.parent().map(Path::to_path_buf).unwrap_or_default());
            let summary = report(&records, &dir)?;
            println!("method,measure,kernels,runs,converged,convergence_pct,t_rmse_mean,t_rmse_sd");
            for r in &summary.rows {
                println!(
                    "{},{},{},{},{},{},{},{}",
                    r.method, r.measure, r.kernels, r.runs, r.converged, r.convergence_pct, r.t_rmse_mean, r.t_rmse_sd
                );
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
