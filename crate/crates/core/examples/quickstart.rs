//! Registers an axial thick-slice phantom to a coronal one entirely in
//! scanner coordinates, with detected keypoints, and prints the metrics.
//!
//! `cargo run --release -p worldreg --example quickstart`

use worldreg::coords::WorldAffine;
use worldreg::keypoints::{detect_keypoints, pair_keypoints, DetectorConfig};
use worldreg::metrics::{evaluate, ReportOptions};
use worldreg::objective::{solve_registration, TransformModel};
use worldreg::phantom::{make_pair, quickstart_spec, Orientation, PairGeometry};
use worldreg::solvers::AffineTransform;
use worldreg::warp::{warp_to_fixed_grid, Interpolation, WorldTransform};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g = WorldTransform::Affine(AffineTransform {
        matrix: WorldAffine::translation_only([6.0, -4.0, 3.0]),
    });
    let geom = PairGeometry {
        fov_mm: 100.0,
        spacing_m: [1.0, 1.0, 6.0],
        orientation_m: Orientation::Axial,
        spacing_f: [1.4, 5.0, 1.4],
        orientation_f: Orientation::Coronal,
    };
    let pair = make_pair(&quickstart_spec(), &g, &geom)?;
    println!(
        "moving {:?} voxels, fixed {:?} voxels",
        pair.moving.dims(),
        pair.fixed.dims()
    );

    let cfg = DetectorConfig::default();
    let (km, kf) = pair_keypoints(
        &detect_keypoints(&pair.moving, &cfg)?,
        &detect_keypoints(&pair.fixed, &cfg)?,
    )?;
    println!("{} keypoint pairs", km.len());

    for (name, model) in [
        ("affine", TransformModel::Affine),
        ("tps λ=10", TransformModel::Tps { lambda: 10.0 }),
    ] {
        let reg = solve_registration(&km, &kf, model)?;
        let warped = warp_to_fixed_grid(
            &pair.moving,
            &pair.fixed.grid,
            &reg.pull,
            Interpolation::Trilinear,
        )?;
        let r = evaluate(&warped, &pair.fixed, ReportOptions::default())?;
        println!(
            "{name:>9}: Dice {:.4}  HD {:.2} mm  SSIM {:.4}  MSE {:.5}",
            r.soft_dice_mean.unwrap_or(f64::NAN),
            r.hausdorff_mean.unwrap_or(f64::NAN),
            r.ssim,
            r.mse
        );
    }
    Ok(())
}
