//! Pairwise similarity objective and keypoint refinement.
//!
//! The objective solves a transform from a keypoint pair, warps the moving
//! volume onto the fixed grid once, and returns a weighted sum of similarity
//! terms. Higher is better: MSE enters negated. [`refine_keypoints`]
//! improves a keypoint initialization by derivative-free pattern search on
//! that objective.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::coords::WorldPoint;
use crate::metrics::{joint_range, mse, soft_dice_probabilities, ssim, MetricsError};
use crate::solvers::{
    solve_affine_weighted, solve_rigid_weighted, solve_tps, KeypointSet, SolverError,
};
use crate::volume::Volume;
use crate::warp::{warp_soft_labels, warp_to_fixed_grid, Interpolation, WarpError, WorldTransform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("invalid similarity config: {0}")]
    BadSimilarity(String),
    #[error("invalid refinement config: {0}")]
    BadRefinement(String),
    #[error("dice term requested but a volume has no label grid")]
    MissingLabels,
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Which world transform a keypoint pair is turned into.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformModel {
    Rigid,
    Affine,
    Tps { lambda: f64 },
}

/// A solved registration.
#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    /// Moving world → fixed world, for the affine models.
    pub forward: Option<WorldTransform>,
    /// Fixed world → moving world, as consumed by warping.
    pub pull: WorldTransform,
}

/// Solves `model` from index-aligned moving/fixed keypoints. Affine models
/// are fitted moving→fixed and inverted; the spline is fitted directly in
/// the pull-back direction (fixed control points onto moving targets).
pub fn solve_registration(
    km: &KeypointSet,
    kf: &KeypointSet,
    model: TransformModel,
) -> Result<Registration, ObjectiveError> {
    Ok(match model {
        TransformModel::Rigid | TransformModel::Affine => {
            let fwd = if model == TransformModel::Rigid {
                WorldTransform::Rigid(solve_rigid_weighted(km, kf)?)
            } else {
                WorldTransform::Affine(solve_affine_weighted(km, kf)?)
            };
            let pull = fwd
                .inverse()?
                .expect("affine models have closed-form inverses");
            Registration {
                forward: Some(fwd),
                pull,
            }
        }
        TransformModel::Tps { lambda } => Registration {
            forward: None,
            pull: WorldTransform::Tps(solve_tps(kf, km, lambda)?),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SimilarityTerm {
    Mse,
    Ssim,
    Dice,
}

impl std::str::FromStr for SimilarityTerm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mse" => Ok(Self::Mse),
            "ssim" => Ok(Self::Ssim),
            "dice" => Ok(Self::Dice),
            other => Err(format!("unknown similarity term `{other}`")),
        }
    }
}

/// Spline rigidity used by the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LambdaChoice {
    /// Affine transform, no spline.
    #[default]
    Affine,
    Fixed(f64),
    /// Log-uniform over `[lo, hi] ⊆ [0.001, 100]`. A single evaluation uses
    /// the geometric mean; refinement draws one value from its seed.
    LogUniform {
        lo: f64,
        hi: f64,
    },
}

pub const LAMBDA_RANGE: (f64, f64) = (0.001, 100.0);

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityConfig {
    pub terms: Vec<(SimilarityTerm, f64)>,
    pub lambda: LambdaChoice,
    /// SSIM dynamic range; `None` uses the joint span of both inputs.
    pub dynamic_range: Option<f64>,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            terms: vec![(SimilarityTerm::Ssim, 1.0), (SimilarityTerm::Dice, 1.0)],
            lambda: LambdaChoice::Affine,
            dynamic_range: None,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: String| Err(ObjectiveError::BadSimilarity(m));
        if self.terms.is_empty() {
            return bad("at least one similarity term is required".into());
        }
        let mut seen = BTreeSet::new();
        for &(t, w) in &self.terms {
            if !(w > 0.0 && w.is_finite()) {
                return bad(format!("weight of {t:?} must be positive, got {w}"));
            }
            if !seen.insert(t) {
                return bad(format!("{t:?} listed twice"));
            }
        }
        match self.lambda {
            LambdaChoice::Fixed(l) if !(l >= 0.0 && l.is_finite()) => {
                bad(format!("lambda must be non-negative, got {l}"))
            }
            LambdaChoice::LogUniform { lo, hi }
                if !(LAMBDA_RANGE.0 <= lo && lo <= hi && hi <= LAMBDA_RANGE.1) =>
            {
                bad(format!(
                    "lambda range [{lo}, {hi}] must lie within [0.001, 100]"
                ))
            }
            _ => Ok(()),
        }?;
        if let Some(r) = self.dynamic_range {
            if !(r > 0.0 && r.is_finite()) {
                return bad(format!("dynamic range must be positive, got {r}"));
            }
        }
        Ok(())
    }

    fn model(&self, lambda: Option<f64>) -> TransformModel {
        match (self.lambda, lambda) {
            (LambdaChoice::Affine, _) => TransformModel::Affine,
            (_, Some(l)) => TransformModel::Tps { lambda: l },
            (LambdaChoice::Fixed(l), None) => TransformModel::Tps { lambda: l },
            (LambdaChoice::LogUniform { lo, hi }, None) => TransformModel::Tps {
                lambda: (lo * hi).sqrt(),
            },
        }
    }

    fn needs(&self, term: SimilarityTerm) -> bool {
        self.terms.iter().any(|&(t, _)| t == term)
    }
}

/// Per-pair constants hoisted out of repeated evaluations.
struct Context<'a> {
    moving: &'a Volume,
    fixed: &'a Volume,
    range: f64,
    labels: Vec<u16>,
    fixed_onehot: Vec<Vec<f32>>,
}

impl<'a> Context<'a> {
    fn new(
        moving: &'a Volume,
        fixed: &'a Volume,
        cfg: &SimilarityConfig,
    ) -> Result<Self, ObjectiveError> {
        cfg.validate()?;
        let mut ctx = Context {
            moving,
            fixed,
            range: cfg
                .dynamic_range
                .unwrap_or_else(|| joint_range(moving, fixed)),
            labels: Vec::new(),
            fixed_onehot: Vec::new(),
        };
        if cfg.needs(SimilarityTerm::Dice) {
            let (Some(_), Some(fl)) = (&moving.labels, &fixed.labels) else {
                return Err(ObjectiveError::MissingLabels);
            };
            let set: BTreeSet<u16> = moving
                .label_set()
                .into_iter()
                .chain(fixed.label_set())
                .collect();
            ctx.labels = set.into_iter().collect();
            ctx.fixed_onehot = ctx
                .labels
                .iter()
                .map(|&l| fl.iter().map(|&v| (v == l) as u8 as f32).collect())
                .collect();
        }
        Ok(ctx)
    }

    fn eval(
        &self,
        km: &KeypointSet,
        kf: &KeypointSet,
        cfg: &SimilarityConfig,
        model: TransformModel,
    ) -> Result<f64, ObjectiveError> {
        let reg = solve_registration(km, kf, model)?;
        let need_intensity = cfg.needs(SimilarityTerm::Mse) || cfg.needs(SimilarityTerm::Ssim);
        let warped = if need_intensity {
            let mut plain = self.moving.clone();
            plain.labels = None;
            Some(warp_to_fixed_grid(
                &plain,
                &self.fixed.grid,
                &reg.pull,
                Interpolation::Trilinear,
            )?)
        } else {
            None
        };
        let mut total = 0.0;
        for &(term, w) in &cfg.terms {
            let value = match term {
                SimilarityTerm::Mse => -mse(warped.as_ref().unwrap(), self.fixed)?,
                SimilarityTerm::Ssim => ssim(warped.as_ref().unwrap(), self.fixed, self.range)?,
                SimilarityTerm::Dice => {
                    if self.labels.is_empty() {
                        1.0
                    } else {
                        let soft = warp_soft_labels(
                            self.moving,
                            &self.fixed.grid,
                            &reg.pull,
                            &self.labels,
                        )?;
                        let mut s = 0.0;
                        for (a, b) in soft.iter().zip(&self.fixed_onehot) {
                            s += soft_dice_probabilities(a, b)?;
                        }
                        s / self.labels.len() as f64
                    }
                }
            };
            total += w * value;
        }
        Ok(total)
    }
}

/// Weighted similarity of the moving volume, warped through the transform
/// solved from `(km, kf)`, against the fixed volume. Higher is better.
pub fn eval_objective(
    moving: &Volume,
    fixed: &Volume,
    km: &KeypointSet,
    kf: &KeypointSet,
    cfg: &SimilarityConfig,
) -> Result<f64, ObjectiveError> {
    let ctx = Context::new(moving, fixed, cfg)?;
    ctx.eval(km, kf, cfg, cfg.model(None))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementConfig {
    /// Maximum number of sweeps (each sweep scores every candidate move).
    pub max_iters: usize,
    pub step_mm: f64,
    /// Stop once an accepted move gains less than this.
    pub tol: f64,
    pub rng_seed: u64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            max_iters: 60,
            step_mm: 2.0,
            tol: 1e-7,
            rng_seed: 0,
        }
    }
}

/// The search stops when the step shrinks below `step_mm / MIN_STEP_DIVISOR`.
pub const MIN_STEP_DIVISOR: f64 = 64.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub moving: KeypointSet,
    pub fixed: KeypointSet,
    pub objective: f64,
    /// Objective after initialization and after every sweep.
    pub trace: Vec<f64>,
    pub accepted_steps: usize,
    /// Spline rigidity used, if any.
    pub lambda: Option<f64>,
}

/// Pattern search over the moving-side keypoint coordinates; fixed-side
/// keypoints and all confidences stay put.
///
/// Each sweep scores the ±step move of every (active keypoint, axis) and
/// accepts the best strict improvement; ties go to the lowest keypoint
/// index, then axis, then the negative direction. A sweep without
/// improvement halves the step. Candidates whose transform cannot be solved
/// count as non-improving.
pub fn refine_keypoints(
    moving: &Volume,
    fixed: &Volume,
    init_km: &KeypointSet,
    init_kf: &KeypointSet,
    scfg: &SimilarityConfig,
    rcfg: &RefinementConfig,
) -> Result<Refinement, ObjectiveError> {
    if rcfg.max_iters == 0
        || !(rcfg.step_mm > 0.0 && rcfg.step_mm.is_finite())
        || !(rcfg.tol >= 0.0)
    {
        return Err(ObjectiveError::BadRefinement(
            "max_iters and step_mm must be positive, tol non-negative".into(),
        ));
    }
    let ctx = Context::new(moving, fixed, scfg)?;
    let lambda = match scfg.lambda {
        LambdaChoice::Affine => None,
        LambdaChoice::Fixed(l) => Some(l),
        LambdaChoice::LogUniform { lo, hi } => {
            let mut rng = ChaCha8Rng::seed_from_u64(rcfg.rng_seed);
            let u: f64 = rng.random();
            Some((lo.ln() + u * (hi.ln() - lo.ln())).exp())
        }
    };
    let model = scfg.model(lambda);

    let mut km = init_km.clone();
    let mut best = ctx.eval(&km, init_kf, scfg, model)?;
    let mut trace = vec![best];
    let mut accepted = 0;
    let mut step = rcfg.step_mm;
    let min_step = rcfg.step_mm / MIN_STEP_DIVISOR;

    // (keypoint, axis, sign) in tie-break order
    let moves: Vec<(usize, usize, f64)> = (0..km.len())
        .filter(|&i| km.is_active(i))
        .flat_map(|i| (0..3).flat_map(move |a| [(i, a, -1.0), (i, a, 1.0)]))
        .collect();

    for _ in 0..rcfg.max_iters {
        let scores: Vec<Option<f64>> = moves
            .par_iter()
            .map(|&(i, a, sign)| {
                let mut pts = km.points().to_vec();
                let mut c = pts[i].to_array();
                c[a] += sign * step;
                pts[i] = WorldPoint::from_array(c);
                let cand = km.with_points(pts).ok()?;
                ctx.eval(&cand, init_kf, scfg, model).ok()
            })
            .collect();
        let mut pick: Option<(usize, f64)> = None;
        for (n, s) in scores.iter().enumerate() {
            if let Some(s) = *s {
                if s > pick.map_or(best, |p| p.1) {
                    pick = Some((n, s));
                }
            }
        }
        match pick {
            Some((n, s)) => {
                let (i, a, sign) = moves[n];
                let mut pts = km.points().to_vec();
                let mut c = pts[i].to_array();
                c[a] += sign * step;
                pts[i] = WorldPoint::from_array(c);
                km = km.with_points(pts)?;
                let gain = s - best;
                best = s;
                accepted += 1;
                trace.push(best);
                if gain < rcfg.tol {
                    break;
                }
            }
            None => {
                trace.push(best);
                step /= 2.0;
                if step < min_step {
                    break;
                }
            }
        }
    }
    Ok(Refinement {
        moving: km,
        fixed: init_kf.clone(),
        objective: best,
        trace,
        accepted_steps: accepted,
        lambda,
    })
}

/// Mean distance between `forward(m_i)` and `f_i` over true keypoint pairs.
pub fn transfer_error(forward: &WorldTransform, true_m: &KeypointSet, true_f: &KeypointSet) -> f64 {
    let n = true_m.len() as f64;
    true_m
        .points()
        .iter()
        .zip(true_f.points())
        .map(|(m, f)| forward.apply(*m).distance(*f))
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coords::WorldAffine;
    use crate::phantom::{make_pair, quickstart_spec, PairGeometry};
    use crate::solvers::AffineTransform;

    fn pair() -> crate::phantom::GroundTruth {
        let g = WorldTransform::Affine(AffineTransform {
            matrix: WorldAffine::translation_only([4.0, -3.0, 2.0]),
        });
        let geom = PairGeometry {
            fov_mm: 100.0,
            spacing_m: [4.0; 3],
            spacing_f: [4.0; 3],
            ..Default::default()
        };
        make_pair(&quickstart_spec(), &g, &geom).unwrap()
    }

    #[test]
    fn self_similarity() {
        let gt = pair();
        let (km, _) = &gt.true_keypoints;
        let ssim_only = SimilarityConfig {
            terms: vec![(SimilarityTerm::Ssim, 1.0)],
            ..Default::default()
        };
        let v = eval_objective(&gt.moving, &gt.moving, km, km, &ssim_only).unwrap();
        assert!((v - 1.0).abs() < 1e-6);
        let mse_only = SimilarityConfig {
            terms: vec![(SimilarityTerm::Mse, 1.0)],
            ..Default::default()
        };
        assert!(
            eval_objective(&gt.moving, &gt.moving, km, km, &mse_only)
                .unwrap()
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn truth_beats_perturbation() {
        let gt = pair();
        let (km, kf) = &gt.true_keypoints;
        let cfg = SimilarityConfig::default();
        let truth = eval_objective(&gt.moving, &gt.fixed, km, kf, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy: Vec<WorldPoint> = km
            .points()
            .iter()
            .map(|p| {
                let d: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                WorldPoint::new(
                    p.x + 10.0 * d[0] / n,
                    p.y + 10.0 * d[1] / n,
                    p.z + 10.0 * d[2] / n,
                )
            })
            .collect();
        let worse = eval_objective(
            &gt.moving,
            &gt.fixed,
            &km.with_points(noisy).unwrap(),
            kf,
            &cfg,
        )
        .unwrap();
        assert!(truth > worse, "{truth} vs {worse}");
    }

    #[test]
    fn confidence_scale_invariance_and_missing_labels() {
        let gt = pair();
        let (km, kf) = &gt.true_keypoints;
        let cfg = SimilarityConfig::default();
        let a = eval_objective(&gt.moving, &gt.fixed, km, kf, &cfg).unwrap();
        let b = eval_objective(
            &gt.moving,
            &gt.fixed,
            &km.scaled_confidences(7.5).unwrap(),
            &kf.scaled_confidences(7.5).unwrap(),
            &cfg,
        )
        .unwrap();
        assert!((a - b).abs() < 1e-9);
        let mut bare = gt.fixed.clone();
        bare.labels = None;
        assert_eq!(
            eval_objective(&gt.moving, &bare, km, kf, &cfg),
            Err(ObjectiveError::MissingLabels)
        );
    }

    #[test]
    fn config_validation() {
        let mut c = SimilarityConfig::default();
        c.lambda = LambdaChoice::LogUniform { lo: 1e-4, hi: 1.0 };
        assert!(c.validate().is_err());
        c.lambda = LambdaChoice::Fixed(10.0);
        c.terms = vec![];
        assert!(c.validate().is_err());
        c.terms = vec![(SimilarityTerm::Mse, 0.0)];
        assert!(c.validate().is_err());
    }

    #[test]
    fn optimum_is_a_fixed_point() {
        let gt = pair();
        let (km, _) = &gt.true_keypoints;
        let cfg = SimilarityConfig {
            terms: vec![(SimilarityTerm::Mse, 1.0)],
            ..Default::default()
        };
        let r = refine_keypoints(
            &gt.moving,
            &gt.moving,
            km,
            km,
            &cfg,
            &RefinementConfig {
                max_iters: 10,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.accepted_steps, 0);
        assert_eq!(&r.moving, km);
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn log_uniform_draw_is_seeded_and_in_range() {
        let gt = pair();
        let (km, kf) = &gt.true_keypoints;
        let cfg = SimilarityConfig {
            terms: vec![(SimilarityTerm::Dice, 1.0)],
            lambda: LambdaChoice::LogUniform {
                lo: 0.001,
                hi: 100.0,
            },
            dynamic_range: None,
        };
        let rc = RefinementConfig {
            max_iters: 1,
            rng_seed: 9,
            ..Default::default()
        };
        let a = refine_keypoints(&gt.moving, &gt.fixed, km, kf, &cfg, &rc).unwrap();
        let b = refine_keypoints(&gt.moving, &gt.fixed, km, kf, &cfg, &rc).unwrap();
        assert_eq!(a, b);
        let l = a.lambda.unwrap();
        assert!((0.001..=100.0).contains(&l));
    }
}
