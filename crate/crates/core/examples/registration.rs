//! Registers a perturbed, bias-corrupted phantom with the three pipelines.
//!
//! ```text
//! cargo run --release --example registration -- [kernels] [measure]
//! ```

use emdreg::bench::trial_inputs;
use emdreg::ffd::DisplacementField;
use emdreg::metrics::{i_rmse, t_rmse, TrialScore};
use emdreg::phantom::{brain_phantom, HALF_SIZE};
use emdreg::registration::{register, Method, RegistrationOptions};
use emdreg::similarity::MeasureKind;

fn main() -> emdreg::Result<()> {
    let mut args = std::env::args().skip(1);
    let kernels: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let measure: MeasureKind = args.next().as_deref().unwrap_or("mi").parse()?;

    let (w, h) = HALF_SIZE;
    let clean = brain_phantom(w, h, 0);
    let trial = trial_inputs(&clean, 14, 6.0, kernels, 7)?;
    let before = t_rmse(&trial.truth, &DisplacementField::zeros(w, h))?;
    println!("K = {kernels}, {measure}; T-RMSE before registration {before:.3} px");

    let opts = RegistrationOptions::default();
    for method in Method::all() {
        let result = register(method, &trial.reference, &trial.floating, 3, measure, &opts)?;
        let est = result.transform.dense_displacement();
        let score = TrialScore::new(
            t_rmse(&trial.truth, &est)?,
            i_rmse(&clean, &est.warp(&trial.floating_clean)?)?,
        );
        println!(
            "{method:>9}: T-RMSE {:.3} px, I-RMSE {:.4}, converged {}, iterations {:?}, {:.1}s",
            score.t_rmse, score.i_rmse, score.converged, result.iterations, result.wall_time
        );
    }
    Ok(())
}
