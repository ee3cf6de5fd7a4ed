use emdreg::bemd::decompose;
use emdreg::bench::{run_trial, trial_inputs, ExperimentConfig};
use emdreg::ffd::make_uniform_grid;
use emdreg::image::{downsample, normalize};
use emdreg::phantom::brain_phantom;
use emdreg::registration::{
    optimize_level, pyramid_factors, register_afr_emd, register_intensity_hier, register_lr_emd, Method,
    RegistrationOptions,
};
use emdreg::similarity::{MeasureContext, MeasureKind};
use emdreg::ImageGrid;

fn small_opts() -> RegistrationOptions {
    RegistrationOptions {
        final_lattice: 8,
        ..RegistrationOptions::default()
    }
}

#[test]
fn warm_start_beats_unity_at_level_transitions() {
    let clean = brain_phantom(72, 60, 0);
    let opts = small_opts();
    let measure = MeasureKind::mi();
    let (mut better, mut total) = (0, 0);
    for seed in 0..5 {
        let trial = trial_inputs(&clean, 8, 4.0, 0, seed).unwrap();
        let result = register_intensity_hier(&trial.reference, &trial.floating, 3, measure, &opts).unwrap();
        for (level, &factor) in pyramid_factors(3).iter().enumerate().skip(1) {
            let fixed = downsample(&trial.reference, factor).unwrap();
            let moving = downsample(&trial.floating, factor).unwrap();
            let unity = MeasureContext::new(measure, &fixed, &moving).unwrap().cost(&moving);
            let warm = result.level_traces[level][0];
            total += 1;
            if warm <= unity {
                better += 1;
            }
        }
    }
    assert!(better * 5 >= total * 4, "warm start better in {better}/{total}");
}

#[test]
fn single_level_lr_emd_registers_first_imf() {
    let clean = brain_phantom(48, 40, 1);
    let trial = trial_inputs(&clean, 6, 3.0, 0, 9).unwrap();
    let opts = small_opts();
    let lr = register_lr_emd(&trial.reference, &trial.floating, 1, MeasureKind::Cc, &opts).unwrap();
    let rs = decompose(&trial.reference, 1, &opts.sift).unwrap();
    let fs = decompose(&trial.floating, 1, &opts.sift).unwrap();
    let init = make_uniform_grid(48, 40, 8, 8).unwrap();
    let direct = optimize_level(
        &normalize(&rs.imfs[0]),
        &normalize(&fs.imfs[0]),
        &init,
        MeasureKind::Cc,
        &opts.optimizer,
    )
    .unwrap();
    assert_eq!(lr.transform, direct);
    assert_eq!(lr.level_traces.len(), 1);
}

#[test]
fn constant_images_keep_identity() {
    let c = ImageGrid::filled(40, 32, 0.3);
    let result = register_afr_emd(&c, &c, 3, MeasureKind::Ssd, &small_opts()).unwrap();
    assert!(result.transform.is_identity());
}

#[test]
fn trials_are_reproducible() {
    let mut cfg = ExperimentConfig::new(vec![Method::AfrEmd], vec![MeasureKind::Cc], vec![1]);
    cfg.phantom_size = (48, 40);
    cfg.grid = 6;
    cfg.levels = 2;
    cfg.optimizer.max_iters = 5;
    let clean = cfg.load_image().unwrap();
    let a = run_trial(&cfg, &clean, Method::AfrEmd, MeasureKind::Cc, 1, 0).unwrap();
    let b = run_trial(&cfg, &clean, Method::AfrEmd, MeasureKind::Cc, 1, 0).unwrap();
    assert_eq!((a.seed, a.t_rmse, a.i_rmse), (b.seed, b.t_rmse, b.i_rmse));
    assert!(!a.failed);
    assert_eq!(a.converged, a.t_rmse < 4.0);
}
