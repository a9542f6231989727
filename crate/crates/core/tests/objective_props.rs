//! The similarity objective peaks at the true correspondence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use worldreg::coords::{WorldAffine, WorldPoint};
use worldreg::objective::{eval_objective, LambdaChoice, SimilarityConfig, SimilarityTerm};
use worldreg::phantom::{make_pair, quickstart_spec, Orientation, PairGeometry};
use worldreg::solvers::AffineTransform;
use worldreg::warp::WorldTransform;

fn truth_pair() -> worldreg::phantom::GroundTruth {
    let rot = nalgebra::Rotation3::from_euler_angles(0.05, -0.03, 0.08).into_inner();
    let g = WorldTransform::Affine(AffineTransform {
        matrix: WorldAffine::from_parts(&rot, &nalgebra::Vector3::new(3.0, -2.0, 4.0)).unwrap(),
    });
    let geom = PairGeometry {
        fov_mm: 100.0,
        spacing_m: [3.0; 3],
        orientation_m: Orientation::Axial,
        spacing_f: [2.5, 3.5, 3.0],
        orientation_f: Orientation::Coronal,
    };
    make_pair(&quickstart_spec(), &g, &geom).unwrap()
}

#[test]
fn truth_beats_every_perturbation() {
    let pair = truth_pair();
    let (tm, tf) = &pair.true_keypoints;
    let configs = [
        SimilarityConfig::default(),
        SimilarityConfig {
            terms: vec![(SimilarityTerm::Mse, 1.0)],
            lambda: LambdaChoice::Affine,
            dynamic_range: None,
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for cfg in &configs {
        let best = eval_objective(&pair.moving, &pair.fixed, tm, tf, cfg).unwrap();
        for _ in 0..100 {
            let moved: Vec<WorldPoint> = tm
                .points()
                .iter()
                .map(|p| {
                    let d = nalgebra::Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                    .normalize()
                        * rng.random_range(1.0..4.0);
                    WorldPoint::new(p.x + d[0], p.y + d[1], p.z + d[2])
                })
                .collect();
            let v = eval_objective(
                &pair.moving,
                &pair.fixed,
                &tm.with_points(moved).unwrap(),
                tf,
                cfg,
            )
            .unwrap();
            assert!(v < best, "perturbed {v} ≥ truth {best}");
        }
    }
}

#[test]
fn objective_ignores_uniform_confidence_scale() {
    let pair = truth_pair();
    let (tm, tf) = &pair.true_keypoints;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let jitter: Vec<WorldPoint> = tm
        .points()
        .iter()
        .map(|p| {
            WorldPoint::new(
                p.x + rng.random_range(-2.0..2.0),
                p.y,
                p.z - rng.random_range(-2.0..2.0),
            )
        })
        .collect();
    let km = tm.with_points(jitter).unwrap();
    let cfg = SimilarityConfig::default();
    let base = eval_objective(&pair.moving, &pair.fixed, &km, tf, &cfg).unwrap();
    for s in [1e-4, 0.3, 17.0] {
        let v = eval_objective(
            &pair.moving,
            &pair.fixed,
            &km.scaled_confidences(s).unwrap(),
            tf,
            &cfg,
        )
        .unwrap();
        assert!((v - base).abs() <= 1e-9, "scale {s}: {v} vs {base}");
    }
}
