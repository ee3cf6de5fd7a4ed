//! A small seeded sweep through the experiment harness, followed by a
//! report regenerated from the stored records.
//!
//! ```text
//! cargo run --release --example benchmark -- [out_dir]
//! ```

use std::path::PathBuf;

use emdreg::bench::{report, run_experiment, ExperimentConfig};
use emdreg::registration::Method;
use emdreg::similarity::MeasureKind;

fn main() -> emdreg::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "benchmark-out".into()).into();
    let mut cfg = ExperimentConfig::new(
        vec![Method::Intensity, Method::AfrEmd],
        vec![MeasureKind::mi(), MeasureKind::Ssd],
        vec![0, 1],
    );
    cfg.runs = 3;
    cfg.seed = 1;
    cfg.out_dir = out.clone();

    let result = run_experiment(&cfg)?;
    println!("{} trials, {} failed", result.records.len(), result.failed);
    for row in &result.summary.rows {
        println!(
            "{:>9} {:>3} K={:<3} convergence {:5.1}%  T-RMSE {:.3} +- {:.3}",
            row.method, row.measure, row.kernels, row.convergence_pct, row.t_rmse_mean, row.t_rmse_sd
        );
    }

    let again = report(&out.join("records.csv"), &out)?;
    println!("report reproduces the inline summary: {}", format!("{:?}", again) == format!("{:?}", result.summary));
    Ok(())
}
