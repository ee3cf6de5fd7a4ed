//! Evaluates the four measures as an image slides against itself, with and
//! without a bias field on the moving copy.

use emdreg::bias::{apply_bias, generate_bias_field, BiasFieldConfig};
use emdreg::ffd::DisplacementField;
use emdreg::phantom::{brain_phantom, HALF_SIZE};
use emdreg::similarity::MeasureKind;

fn main() -> emdreg::Result<()> {
    let (w, h) = HALF_SIZE;
    let fixed = brain_phantom(w, h, 0);
    let field = generate_bias_field(w, h, &BiasFieldConfig::random(1, 5))?;
    let biased = apply_bias(&fixed, &field)?;

    println!("{:>6} {:>28} {:>28}", "shift", "clean: ssd cc rc mi", "biased: ssd cc rc mi");
    for shift in [-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0] {
        let d = DisplacementField::from_fn(w, h, |_, _| [shift, 0.0]);
        let mut row = format!("{shift:>6.1}");
        for moving in [&fixed, &biased] {
            let warped = d.warp(moving)?;
            for m in MeasureKind::all() {
                row.push_str(&format!(" {:>8.4}", m.cost(&fixed, &warped)?));
            }
            row.push_str("  |");
        }
        println!("{row}");
    }
    Ok(())
}
