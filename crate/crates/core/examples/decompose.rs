//! Decomposes the built-in phantom into IMFs and writes them as PNGs.
//!
//! ```text
//! cargo run --release --example decompose -- [out_dir]
//! ```

use std::path::PathBuf;

use emdreg::bemd::{average_feature_map, decompose, find_local_extrema, SiftOptions};
use emdreg::image::{normalize, save_image};
use emdreg::phantom::{brain_phantom, HALF_SIZE};

fn main() -> emdreg::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "decompose-out".into()).into();
    std::fs::create_dir_all(&out).expect("create output directory");

    let (w, h) = HALF_SIZE;
    let img = brain_phantom(w, h, 0);
    let stack = decompose(&img, 3, &SiftOptions::default())?;

    for (i, imf) in stack.imfs.iter().enumerate() {
        let (lo, hi) = imf.min_max();
        let extrema = find_local_extrema(imf);
        println!(
            "IMF {}: range [{lo:.3}, {hi:.3}], {} maxima, {} minima",
            i + 1,
            extrema.maxima.len(),
            extrema.minima.len()
        );
        save_image(&normalize(imf), out.join(format!("imf_{}.png", i + 1)))?;
    }
    save_image(&normalize(&stack.residual), out.join("residual.png"))?;
    save_image(&normalize(&average_feature_map(&stack)?), out.join("average.png"))?;

    let err = stack.reconstruct().max_abs_diff(&img)?;
    println!("reconstruction error {err:.2e}; images in {}", out.display());
    Ok(())
}
