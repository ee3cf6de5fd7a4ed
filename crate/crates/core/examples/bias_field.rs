//! Corrupts an image with a one-kernel bias field and shows that the field
//! ends up in the EMD residual rather than in the IMFs.
//!
//! ```text
//! cargo run --release --example bias_field -- [seed]
//! ```

use emdreg::bemd::{decompose, SiftOptions};
use emdreg::bias::{apply_bias, generate_bias_field, BiasFieldConfig};
use emdreg::phantom::{brain_phantom, HALF_SIZE};
use emdreg::ImageGrid;

fn correlation(a: &ImageGrid, b: &ImageGrid) -> f64 {
    let (ma, mb) = (a.mean(), b.mean());
    let mut num = 0.0;
    let (mut da, mut db) = (0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        num += (x - ma) * (y - mb);
        da += (x - ma).powi(2);
        db += (y - mb).powi(2);
    }
    num / (da * db).sqrt()
}

fn main() -> emdreg::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let (w, h) = HALF_SIZE;
    let clean = brain_phantom(w, h, 0);
    let cfg = BiasFieldConfig::random(1, seed);
    let field = generate_bias_field(w, h, &cfg)?;
    let noisy = apply_bias(&clean, &field)?;
    println!(
        "kernel at {:?}, sigma {:.2} px",
        cfg.resolve_means(w, h)[0],
        cfg.resolve_sigma(w)
    );

    let opts = SiftOptions::default();
    let a = decompose(&clean, 3, &opts)?;
    let b = decompose(&noisy, 3, &opts)?;
    for (i, (x, y)) in a.imfs.iter().zip(&b.imfs).enumerate() {
        println!("IMF {} difference vs field: r = {:+.3}", i + 1, correlation(&y.sub(x)?, &field));
    }
    println!(
        "residual difference vs field: r = {:+.3}",
        correlation(&b.residual.sub(&a.residual)?, &field)
    );
    Ok(())
}
