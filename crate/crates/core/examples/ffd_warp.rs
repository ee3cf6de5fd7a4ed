//! Free-form deformation basics: perturb a control lattice, warp, refine,
//! invert and serialize.

use emdreg::ffd::{inverse_displacement, make_uniform_grid, perturb_grid, refine_grid, warp_image, FfdTransform};
use emdreg::metrics::{i_rmse, t_rmse};
use emdreg::phantom::{brain_phantom, HALF_SIZE};

fn main() -> emdreg::Result<()> {
    let (w, h) = HALF_SIZE;
    let img = brain_phantom(w, h, 1);
    let grid = make_uniform_grid(w, h, 14, 14)?;
    println!("14x14 lattice, spacing {:.3} x {:.3} px", grid.spacing[0], grid.spacing[1]);

    let t = perturb_grid(&grid, 6.0, 42)?;
    let dense = t.dense_displacement();
    println!("perturbed field: max |d| = {:.2} px", dense.max_magnitude());

    let warped = warp_image(&img, &t)?;
    println!("intensity RMSE after warping: {:.4}", i_rmse(&img, &warped)?);

    let fine = refine_grid(&t);
    let drift = t_rmse(&dense, &fine.dense_displacement())?;
    println!("refined to {}x{}, dense-field change {drift:.1e} px", fine.nx, fine.ny);

    let inverse = inverse_displacement(&t, 50);
    let restored = inverse.warp(&warped)?;
    println!("warp then inverse: intensity RMSE {:.4}", i_rmse(&img, &restored)?);

    let json = t.to_json()?;
    let back = FfdTransform::from_json(&json)?;
    println!("JSON round trip exact: {}", back == t);
    Ok(())
}
