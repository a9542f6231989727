//! Closed-form transforms from weighted keypoint correspondences.
//!
//! The affine fit minimizes `Σ cᵢ ‖kᶠᵢ − T·kᵐᵢ‖²` with `cᵢ = cᵐᵢ·cᶠᵢ` and
//! homogeneous keypoints, i.e. `T = Kᶠ C Kᵐᵀ (Kᵐ C Kᵐᵀ)⁻¹`. The thin-plate
//! spline uses the 3-D biharmonic kernel `U(r) = r` with a confidence
//! weighted smoothing term controlled by `lambda`.

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector3, SVD};
use thiserror::Error;

use crate::coords::{WorldAffine, WorldPoint};

/// Relative singular-value floor for every linear solve in this module.
pub const RANK_TOL: f64 = 1e-10;
/// Control points closer than this are coincident.
pub const MIN_CONTROL_SEPARATION: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("keypoint sets differ in size: {moving} moving vs {fixed} fixed")]
    LengthMismatch { moving: usize, fixed: usize },
    #[error("need at least 4 active keypoints, got {0}")]
    TooFewKeypoints(usize),
    #[error("confidence {value} at index {index} is not a positive finite number")]
    BadConfidence { index: usize, value: f64 },
    #[error("keypoint {0} is not finite")]
    NonFinitePoint(usize),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("lambda must be finite and non-negative, got {0}")]
    BadLambda(f64),
}

/// A located landmark with its confidence weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub position: WorldPoint,
    pub confidence: f64,
}

impl Keypoint {
    pub fn new(position: WorldPoint, confidence: f64) -> Self {
        Self {
            position,
            confidence,
        }
    }
}

/// Ordered keypoints in world millimeters with positive confidences.
///
/// Points can be switched off through the mask; a masked point keeps its
/// slot (so correspondence by index is preserved) but carries no weight.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points: Vec<WorldPoint>,
    confidences: Vec<f64>,
    active: Vec<bool>,
}

impl KeypointSet {
    pub fn new(points: Vec<WorldPoint>, confidences: Vec<f64>) -> Result<Self, SolverError> {
        let n = points.len();
        Self::with_mask(points, confidences, vec![true; n])
    }

    pub fn uniform(points: Vec<WorldPoint>) -> Result<Self, SolverError> {
        let n = points.len();
        Self::new(points, vec![1.0; n])
    }

    pub fn from_keypoints(kps: &[Keypoint]) -> Result<Self, SolverError> {
        Self::new(
            kps.iter().map(|k| k.position).collect(),
            kps.iter().map(|k| k.confidence).collect(),
        )
    }

    pub fn with_mask(
        points: Vec<WorldPoint>,
        confidences: Vec<f64>,
        active: Vec<bool>,
    ) -> Result<Self, SolverError> {
        if points.len() != confidences.len() || points.len() != active.len() {
            return Err(SolverError::LengthMismatch {
                moving: points.len(),
                fixed: confidences.len().min(active.len()),
            });
        }
        for (i, (p, &c)) in points.iter().zip(&confidences).enumerate() {
            if !p.is_finite() {
                return Err(SolverError::NonFinitePoint(i));
            }
            if active[i] && !(c > 0.0 && c.is_finite()) {
                return Err(SolverError::BadConfidence { index: i, value: c });
            }
        }
        let n_active = active.iter().filter(|&&a| a).count();
        if n_active < 4 {
            return Err(SolverError::TooFewKeypoints(n_active));
        }
        Ok(Self {
            points,
            confidences,
            active,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[WorldPoint] {
        &self.points
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn keypoints(&self) -> Vec<Keypoint> {
        self.points
            .iter()
            .zip(&self.confidences)
            .map(|(&p, &c)| Keypoint::new(p, c))
            .collect()
    }

    /// Same confidences and mask, new positions.
    pub fn with_points(&self, points: Vec<WorldPoint>) -> Result<Self, SolverError> {
        Self::with_mask(points, self.confidences.clone(), self.active.clone())
    }

    pub fn scaled_confidences(&self, s: f64) -> Result<Self, SolverError> {
        Self::with_mask(
            self.points.clone(),
            self.confidences.iter().map(|c| c * s).collect(),
            self.active.clone(),
        )
    }
}

/// Homogeneous world-to-world affine map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub matrix: WorldAffine,
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            matrix: WorldAffine::identity(),
        }
    }

    pub fn apply(&self, p: WorldPoint) -> WorldPoint {
        WorldPoint::from_array(self.matrix.apply(p.to_array()))
    }
}

/// How per-pair confidence products enter the TPS smoothing term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TpsWeighting {
    /// Ridge term `λ·diag(1/wᵢ)` with `wᵢ = cᵐᵢ·cᶠᵢ`.
    #[default]
    Confidence,
    /// Ridge term `λ·I`; confidences ignored.
    Uniform,
}

/// `f(p) = affine_part·p + Σᵢ wᵢ ‖p − cᵢ‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsTransform {
    pub control_points: Vec<WorldPoint>,
    pub affine_part: WorldAffine,
    pub warp_coefficients: Vec<[f64; 3]>,
    pub lambda: f64,
}

impl TpsTransform {
    #[inline]
    pub fn apply(&self, p: WorldPoint) -> WorldPoint {
        eval_tps(self, p)
    }

    /// Jacobian of the map at `p` (row = output axis).
    pub fn jacobian(&self, p: WorldPoint) -> Matrix3<f64> {
        let mut j = self.affine_part.linear();
        for (c, w) in self.control_points.iter().zip(&self.warp_coefficients) {
            let d = [p.x - c.x, p.y - c.y, p.z - c.z];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if r > 0.0 {
                for (a, wa) in w.iter().enumerate() {
                    for (b, db) in d.iter().enumerate() {
                        j[(a, b)] += wa * db / r;
                    }
                }
            }
        }
        j
    }

    /// Residuals of the side conditions `Σ wᵢ = 0`, `Σ wᵢ cᵢᵀ = 0`, largest magnitude.
    pub fn side_condition_residual(&self) -> f64 {
        let mut sums = [[0.0f64; 4]; 3];
        for (c, w) in self.control_points.iter().zip(&self.warp_coefficients) {
            for (a, wa) in w.iter().enumerate() {
                sums[a][0] += wa;
                sums[a][1] += wa * c.x;
                sums[a][2] += wa * c.y;
                sums[a][3] += wa * c.z;
            }
        }
        sums.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Pair weights `cᵐᵢ·cᶠᵢ`, zero for masked pairs.
fn pair_weights(moving: &KeypointSet, fixed: &KeypointSet) -> Result<Vec<f64>, SolverError> {
    if moving.len() != fixed.len() {
        return Err(SolverError::LengthMismatch {
            moving: moving.len(),
            fixed: fixed.len(),
        });
    }
    let w: Vec<f64> = (0..moving.len())
        .map(|i| {
            if moving.is_active(i) && fixed.is_active(i) {
                moving.confidences[i] * fixed.confidences[i]
            } else {
                0.0
            }
        })
        .collect();
    let n_active = w.iter().filter(|&&x| x > 0.0).count();
    if n_active < 4 {
        return Err(SolverError::TooFewKeypoints(n_active));
    }
    Ok(w)
}

/// Similarity normalization `x ↦ (x − μ)/s` taking the weighted cloud to
/// zero mean and unit RMS radius. Returned as the 4x4 matrix.
fn normalization(points: &[WorldPoint], weights: &[f64]) -> Matrix4<f64> {
    let total: f64 = weights.iter().sum();
    let mut mu = Vector3::zeros();
    for (p, &w) in points.iter().zip(weights) {
        mu += p.to_vector() * w;
    }
    mu /= total;
    let mut ss = 0.0;
    for (p, &w) in points.iter().zip(weights) {
        ss += w * (p.to_vector() - mu).norm_squared();
    }
    let s = (ss / total).sqrt();
    let s = if s > 0.0 { s } else { 1.0 };
    let mut n = Matrix4::identity() / s;
    n[(3, 3)] = 1.0;
    n.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-mu / s));
    n
}

fn relative_condition(svd: &SVD<f64, nalgebra::Dyn, nalgebra::Dyn>) -> f64 {
    let sv = &svd.singular_values;
    let max = sv.max();
    if max <= 0.0 {
        0.0
    } else {
        sv.min() / max
    }
}

/// Weighted least-squares affine map taking moving keypoints onto fixed ones.
pub fn solve_affine_weighted(
    moving: &KeypointSet,
    fixed: &KeypointSet,
) -> Result<AffineTransform, SolverError> {
    let w = pair_weights(moving, fixed)?;
    let norm = normalization(moving.points(), &w);
    let n = moving.len();

    // Normalized homogeneous moving stack and raw fixed stack (4 x N).
    let mut km = DMatrix::<f64>::zeros(4, n);
    let mut kf = DMatrix::<f64>::zeros(4, n);
    for i in 0..n {
        let p = moving.points[i];
        let q = fixed.points[i];
        for r in 0..3 {
            km[(r, i)] =
                norm[(r, 0)] * p.x + norm[(r, 1)] * p.y + norm[(r, 2)] * p.z + norm[(r, 3)];
        }
        km[(3, i)] = 1.0;
        kf[(0, i)] = q.x;
        kf[(1, i)] = q.y;
        kf[(2, i)] = q.z;
        kf[(3, i)] = 1.0;
    }
    let mut km_c = km.clone();
    for (i, mut col) in km_c.column_iter_mut().enumerate() {
        col *= w[i];
    }
    let system = &km * km_c.transpose(); // Kᵐ C Kᵐᵀ
    let rhs = &kf * km_c.transpose(); // Kᶠ C Kᵐᵀ

    let svd = SVD::new(system.clone(), true, true);
    // Singular values of the system are squares of those of Kᵐ√C.
    let cond = relative_condition(&svd).sqrt();
    if cond <= RANK_TOL {
        return Err(SolverError::DegenerateConfiguration(format!(
            "moving keypoints are coplanar or coincident (relative singular value {cond:e})"
        )));
    }
    // T' · S = R  with S symmetric  ⇔  S · T'ᵀ = Rᵀ
    let sol = svd
        .solve(&rhs.transpose(), 0.0)
        .map_err(|e| SolverError::DegenerateConfiguration(e.to_string()))?;
    let t_norm = Matrix4::from_fn(|r, c| sol[(c, r)]);
    let mut t = t_norm * norm;
    t[(3, 0)] = 0.0;
    t[(3, 1)] = 0.0;
    t[(3, 2)] = 0.0;
    t[(3, 3)] = 1.0;
    let matrix = WorldAffine::new_unchecked(t).map_err(|e| {
        SolverError::DegenerateConfiguration(format!("affine solution invalid: {e}"))
    })?;
    Ok(AffineTransform { matrix })
}

/// Rigid map: the orthogonal polar factor of the weighted affine fit, with
/// translation taking the weighted moving centroid onto the fixed one.
pub fn solve_rigid_weighted(
    moving: &KeypointSet,
    fixed: &KeypointSet,
) -> Result<AffineTransform, SolverError> {
    let affine = solve_affine_weighted(moving, fixed)?;
    let w = pair_weights(moving, fixed)?;
    let rotation = orthogonal_factor(&affine.matrix.linear());
    let total: f64 = w.iter().sum();
    let mut cm = Vector3::zeros();
    let mut cf = Vector3::zeros();
    for i in 0..moving.len() {
        cm += moving.points[i].to_vector() * w[i];
        cf += fixed.points[i].to_vector() * w[i];
    }
    cm /= total;
    cf /= total;
    let t = cf - rotation * cm;
    let matrix = WorldAffine::from_parts(&rotation, &t)
        .map_err(|e| SolverError::DegenerateConfiguration(e.to_string()))?;
    Ok(AffineTransform { matrix })
}

/// Closest proper rotation to `l` (polar decomposition, det forced to +1).
pub fn orthogonal_factor(l: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = l.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // flip the axis of the smallest singular value
        let idx = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(2);
        let mut d = Matrix3::identity();
        d[(idx, idx)] = -1.0;
        r = u * d * v_t;
    }
    r
}

/// Thin-plate spline from `moving` control points onto `fixed` targets.
pub fn solve_tps(
    moving: &KeypointSet,
    fixed: &KeypointSet,
    lambda: f64,
) -> Result<TpsTransform, SolverError> {
    solve_tps_with(moving, fixed, lambda, TpsWeighting::Confidence)
}

pub fn solve_tps_with(
    moving: &KeypointSet,
    fixed: &KeypointSet,
    lambda: f64,
    weighting: TpsWeighting,
) -> Result<TpsTransform, SolverError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(SolverError::BadLambda(lambda));
    }
    let all_w = pair_weights(moving, fixed)?;
    let idx: Vec<usize> = (0..moving.len()).filter(|&i| all_w[i] > 0.0).collect();
    let n = idx.len();
    let src: Vec<WorldPoint> = idx.iter().map(|&i| moving.points[i]).collect();
    let dst: Vec<WorldPoint> = idx.iter().map(|&i| fixed.points[i]).collect();
    let weights: Vec<f64> = match weighting {
        TpsWeighting::Confidence => idx.iter().map(|&i| all_w[i]).collect(),
        TpsWeighting::Uniform => vec![1.0; n],
    };

    if lambda == 0.0 {
        for a in 0..n {
            for b in a + 1..n {
                if src[a].distance(src[b]) <= MIN_CONTROL_SEPARATION {
                    return Err(SolverError::DegenerateConfiguration(format!(
                        "control points {} and {} coincide; exact interpolation is singular",
                        idx[a], idx[b]
                    )));
                }
            }
        }
    }

    // Polynomial block on normalized coordinates for conditioning.
    let norm = normalization(&src, &vec![1.0; n]);
    let mut p = DMatrix::<f64>::zeros(n, 4);
    for (i, s) in src.iter().enumerate() {
        p[(i, 0)] = 1.0;
        for r in 0..3 {
            p[(i, r + 1)] =
                norm[(r, 0)] * s.x + norm[(r, 1)] * s.y + norm[(r, 2)] * s.z + norm[(r, 3)];
        }
    }
    let p_svd = SVD::new(p.clone(), false, false);
    if relative_condition(&p_svd) <= RANK_TOL {
        return Err(SolverError::DegenerateConfiguration(
            "control points are coplanar".into(),
        ));
    }

    // Complete orthonormal basis: QR of [P | I] gives Q whose first four
    // columns span range(P) and whose remaining columns span its complement.
    let mut aug = DMatrix::<f64>::zeros(n, n + 4);
    aug.view_mut((0, 0), (n, 4)).copy_from(&p);
    aug.view_mut((0, 4), (n, n)).fill_with_identity();
    let q = aug.qr().q();
    let q1 = q.columns(0, 4).into_owned();
    let q2 = q.columns(4, n - 4).into_owned();
    let r1 = q1.transpose() * &p;

    // Kernel with ridge: K − λ·diag(1/wᵢ). With U(r) = r the kernel is
    // conditionally negative definite, so the smoothing term enters with a
    // negative sign.
    let mut k = DMatrix::<f64>::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            k[(a, b)] = src[a].distance(src[b]);
        }
    }
    let mut k_reg = k.clone();
    for a in 0..n {
        k_reg[(a, a)] -= lambda / weights[a];
    }

    let mut y = DMatrix::<f64>::zeros(n, 3);
    for (i, d) in dst.iter().enumerate() {
        y[(i, 0)] = d.x;
        y[(i, 1)] = d.y;
        y[(i, 2)] = d.z;
    }

    let warp = if n > 4 {
        let reduced = q2.transpose() * &k_reg * &q2;
        let svd = SVD::new(reduced, true, true);
        if relative_condition(&svd) <= RANK_TOL {
            return Err(SolverError::DegenerateConfiguration(
                "thin-plate system is singular".into(),
            ));
        }
        let gamma = svd
            .solve(&(q2.transpose() * &y), 0.0)
            .map_err(|e| SolverError::DegenerateConfiguration(e.to_string()))?;
        &q2 * gamma
    } else {
        DMatrix::<f64>::zeros(n, 3)
    };

    // P a = y − (K − λW⁻¹) w  restricted to range(P).
    let resid = &y - &k_reg * &warp;
    let a_norm = r1
        .clone()
        .lu()
        .solve(&(q1.transpose() * resid))
        .ok_or_else(|| SolverError::DegenerateConfiguration("affine block singular".into()))?;
    // a_norm rows: [const, x', y', z'] per output column. Back to world.
    let mut affine_n = Matrix4::identity();
    for out in 0..3 {
        affine_n[(out, 3)] = a_norm[(0, out)];
        for c in 0..3 {
            affine_n[(out, c)] = a_norm[(c + 1, out)];
        }
    }
    let affine = affine_n * norm;
    let mut affine = affine;
    affine[(3, 0)] = 0.0;
    affine[(3, 1)] = 0.0;
    affine[(3, 2)] = 0.0;
    affine[(3, 3)] = 1.0;
    let affine_part = WorldAffine::new_unchecked(affine)
        .map_err(|e| SolverError::DegenerateConfiguration(e.to_string()))?;

    Ok(TpsTransform {
        control_points: src,
        affine_part,
        warp_coefficients: (0..n)
            .map(|i| [warp[(i, 0)], warp[(i, 1)], warp[(i, 2)]])
            .collect(),
        lambda,
    })
}

/// Evaluates `affine_part·p + Σᵢ wᵢ ‖p − cᵢ‖`, accumulating control points
/// in index order.
#[inline]
pub fn eval_tps(t: &TpsTransform, p: WorldPoint) -> WorldPoint {
    let a = t.affine_part.apply(p.to_array());
    let (mut x, mut y, mut z) = (a[0], a[1], a[2]);
    for (c, w) in t.control_points.iter().zip(&t.warp_coefficients) {
        let dx = p.x - c.x;
        let dy = p.y - c.y;
        let dz = p.z - c.z;
        let r = (dx * dx + dy * dy + dz * dz).sqrt();
        x += w[0] * r;
        y += w[1] * r;
        z += w[2] * r;
    }
    WorldPoint::new(x, y, z)
}

/// Bending energy `−Σ_axes wᵀ K w` with `K_ab = ‖c_a − c_b‖`. Non-negative
/// under the side conditions (the kernel is conditionally negative definite).
pub fn tps_bending_energy(t: &TpsTransform) -> f64 {
    let n = t.control_points.len();
    let mut e = 0.0;
    for a in 0..n {
        for b in 0..n {
            let r = t.control_points[a].distance(t.control_points[b]);
            let wa = t.warp_coefficients[a];
            let wb = t.warp_coefficients[b];
            e += r * (wa[0] * wb[0] + wa[1] * wb[1] + wa[2] * wb[2]);
        }
    }
    (-e).max(0.0)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random_points(rng: &mut ChaCha8Rng, n: usize, half: f64) -> Vec<WorldPoint> {
        (0..n)
            .map(|_| {
                WorldPoint::new(
                    rng.random_range(-half..half),
                    rng.random_range(-half..half),
                    rng.random_range(-half..half),
                )
            })
            .collect()
    }

    fn random_conf(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0.1..1.0)).collect()
    }

    fn apply_all(a: &WorldAffine, pts: &[WorldPoint]) -> Vec<WorldPoint> {
        pts.iter()
            .map(|p| WorldPoint::from_array(a.apply(p.to_array())))
            .collect()
    }

    fn rel_frobenius(a: &WorldAffine, b: &WorldAffine) -> f64 {
        (a.matrix() - b.matrix()).norm() / b.matrix().norm()
    }

    #[test]
    fn identity_when_sets_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 6, 50.0);
        let set = KeypointSet::uniform(pts).unwrap();
        let t = solve_affine_weighted(&set, &set).unwrap();
        assert!(t.matrix.max_abs_diff(&WorldAffine::identity()) < 1e-9);
    }

    #[test]
    fn pure_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(&mut rng, 8, 40.0);
        let moved: Vec<_> = pts
            .iter()
            .map(|p| WorldPoint::new(p.x + 5.0, p.y - 3.0, p.z + 2.0))
            .collect();
        let t = solve_affine_weighted(
            &KeypointSet::uniform(pts).unwrap(),
            &KeypointSet::uniform(moved).unwrap(),
        )
        .unwrap();
        let expect = WorldAffine::translation_only([5.0, -3.0, 2.0]);
        assert!(t.matrix.max_abs_diff(&expect) < 1e-9);
    }

    #[test]
    fn recovers_general_affine_with_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = WorldAffine::from_rows([
            [1.1, 0.2, -0.1, 12.0],
            [-0.15, 0.9, 0.05, -7.5],
            [0.1, 0.05, 1.2, 3.25],
            [0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let pts = random_points(&mut rng, 12, 60.0);
        let target = apply_all(&g, &pts);
        let m = KeypointSet::new(pts, random_conf(&mut rng, 12)).unwrap();
        let f = KeypointSet::new(target, random_conf(&mut rng, 12)).unwrap();
        let t = solve_affine_weighted(&m, &f).unwrap();
        assert!(rel_frobenius(&t.matrix, &g) < 1e-9);
    }

    #[test]
    fn coplanar_points_are_degenerate() {
        let pts: Vec<_> = (0..6)
            .map(|i| WorldPoint::new(i as f64, (i * i) as f64, 5.0))
            .collect();
        let set = KeypointSet::uniform(pts).unwrap();
        assert!(matches!(
            solve_affine_weighted(&set, &set),
            Err(SolverError::DegenerateConfiguration(_))
        ));
        assert!(matches!(
            solve_tps(&set, &set, 1.0),
            Err(SolverError::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn keypoint_set_validation() {
        let pts = vec![WorldPoint::default(); 3];
        assert_eq!(
            KeypointSet::uniform(pts),
            Err(SolverError::TooFewKeypoints(3))
        );
        let pts = vec![WorldPoint::default(); 4];
        assert!(matches!(
            KeypointSet::new(pts.clone(), vec![1.0, 0.0, 1.0, 1.0]),
            Err(SolverError::BadConfidence { index: 1, .. })
        ));
        // masked points may carry zero confidence
        let mut mask = vec![true; 5];
        mask[4] = false;
        let mut conf = vec![1.0; 5];
        conf[4] = 0.0;
        let five = vec![WorldPoint::default(); 5];
        assert!(KeypointSet::with_mask(five, conf, mask).is_ok());
    }

    #[test]
    fn masked_pair_equals_omitted_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = random_points(&mut rng, 9, 30.0);
        let tgt: Vec<_> = pts
            .iter()
            .map(|p| {
                WorldPoint::new(
                    p.x + rng.random_range(-2.0..2.0),
                    p.y * 1.05,
                    p.z + rng.random_range(-2.0..2.0),
                )
            })
            .collect();
        let mut mask = vec![true; 9];
        mask[3] = false;
        let m = KeypointSet::with_mask(pts.clone(), vec![1.0; 9], mask.clone()).unwrap();
        let f = KeypointSet::with_mask(tgt.clone(), vec![1.0; 9], mask).unwrap();
        let masked = solve_affine_weighted(&m, &f).unwrap();
        let keep: Vec<usize> = (0..9).filter(|&i| i != 3).collect();
        let m2 = KeypointSet::uniform(keep.iter().map(|&i| pts[i]).collect()).unwrap();
        let f2 = KeypointSet::uniform(keep.iter().map(|&i| tgt[i]).collect()).unwrap();
        let omitted = solve_affine_weighted(&m2, &f2).unwrap();
        assert!(masked.matrix.max_abs_diff(&omitted.matrix) < 1e-9);
    }

    #[test]
    fn rigid_block_is_a_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts = random_points(&mut rng, 10, 40.0);
        let noisy: Vec<_> = pts
            .iter()
            .map(|p| WorldPoint::new(1.1 * p.x + 0.2 * p.y, p.y - 4.0, 0.9 * p.z))
            .collect();
        let t = solve_rigid_weighted(
            &KeypointSet::uniform(pts).unwrap(),
            &KeypointSet::uniform(noisy).unwrap(),
        )
        .unwrap();
        let r = t.matrix.linear();
        assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rigid_recovers_exact_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -0.2, 0.7);
        let g = WorldAffine::from_parts(rot.matrix(), &Vector3::new(3.0, -1.0, 8.0)).unwrap();
        let pts = random_points(&mut rng, 7, 40.0);
        let tgt = apply_all(&g, &pts);
        let t = solve_rigid_weighted(
            &KeypointSet::uniform(pts).unwrap(),
            &KeypointSet::uniform(tgt).unwrap(),
        )
        .unwrap();
        assert!(t.matrix.max_abs_diff(&g) < 1e-9);
    }

    #[test]
    fn tps_on_identical_sets_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = random_points(&mut rng, 10, 50.0);
        let set = KeypointSet::new(pts, random_conf(&mut rng, 10)).unwrap();
        for lambda in [0.0, 0.5, 100.0] {
            let t = solve_tps(&set, &set, lambda).unwrap();
            assert!(t.affine_part.max_abs_diff(&WorldAffine::identity()) < 1e-9);
            assert!(t.warp_coefficients.iter().flatten().all(|w| w.abs() < 1e-9));
        }
    }

    #[test]
    fn tps_zero_lambda_interpolates() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let src = random_points(&mut rng, 15, 50.0);
        let dst: Vec<_> = src
            .iter()
            .map(|p| {
                WorldPoint::new(
                    p.x + rng.random_range(-5.0..5.0),
                    p.y + rng.random_range(-5.0..5.0),
                    p.z + rng.random_range(-5.0..5.0),
                )
            })
            .collect();
        let m = KeypointSet::new(src.clone(), random_conf(&mut rng, 15)).unwrap();
        let f = KeypointSet::new(dst.clone(), random_conf(&mut rng, 15)).unwrap();
        let t = solve_tps(&m, &f, 0.0).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            assert!(eval_tps(&t, *s).distance(*d) < 1e-6);
        }
        assert!(t.side_condition_residual() < 1e-6);
        assert!(tps_bending_energy(&t) > 0.0);
    }

    #[test]
    fn tps_duplicate_controls_rejected_at_zero_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut src = random_points(&mut rng, 8, 50.0);
        src[5] = src[2];
        let set = KeypointSet::uniform(src).unwrap();
        assert!(matches!(
            solve_tps(&set, &set, 0.0),
            Err(SolverError::DegenerateConfiguration(_))
        ));
        assert!(solve_tps(&set, &set, 1.0).is_ok());
        assert_eq!(
            solve_tps(&set, &set, -1.0),
            Err(SolverError::BadLambda(-1.0))
        );
    }

    #[test]
    fn tps_zero_coefficients_reduce_to_affine() {
        let a = WorldAffine::from_rows([
            [1.0, 0.1, 0.0, 2.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 2.0, -1.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let t = TpsTransform {
            control_points: vec![WorldPoint::new(1.0, 2.0, 3.0); 5],
            affine_part: a,
            warp_coefficients: vec![[0.0; 3]; 5],
            lambda: 1.0,
        };
        let p = WorldPoint::new(4.0, -5.0, 6.0);
        assert_eq!(eval_tps(&t, p).to_array(), a.apply(p.to_array()));
        assert_eq!(tps_bending_energy(&t), 0.0);
    }

    #[test]
    fn tps_affine_field_has_no_bending() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = WorldAffine::from_rows([
            [0.95, 0.1, 0.0, 2.0],
            [0.0, 1.05, -0.1, -3.0],
            [0.05, 0.0, 1.1, 1.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let src = random_points(&mut rng, 12, 40.0);
        let dst = apply_all(&g, &src);
        let t = solve_tps(
            &KeypointSet::uniform(src).unwrap(),
            &KeypointSet::uniform(dst).unwrap(),
            0.0,
        )
        .unwrap();
        assert!(tps_bending_energy(&t) < 1e-9);
        assert!(t.affine_part.max_abs_diff(&g) < 1e-9);
    }

    #[test]
    fn tps_far_field_is_affine_dominated() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let src = random_points(&mut rng, 10, 20.0);
        let dst: Vec<_> = src
            .iter()
            .map(|p| WorldPoint::new(p.x + rng.random_range(-3.0..3.0), p.y, p.z + 1.0))
            .collect();
        let t = solve_tps(
            &KeypointSet::uniform(src.clone()).unwrap(),
            &KeypointSet::uniform(dst).unwrap(),
            0.0,
        )
        .unwrap();
        let mut diam: f64 = 0.0;
        for a in &src {
            for b in &src {
                diam = diam.max(a.distance(*b));
            }
        }
        for dir in [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.577, 0.577, 0.577]] {
            let p = WorldPoint::new(
                dir[0] * 10.0 * diam,
                dir[1] * 10.0 * diam,
                dir[2] * 10.0 * diam,
            );
            let full = eval_tps(&t, p).to_vector();
            let aff = Vector3::from(t.affine_part.apply(p.to_array()));
            assert!((full - aff).norm() <= 0.05 * aff.norm());
        }
    }

    #[test]
    fn tps_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let src = random_points(&mut rng, 9, 30.0);
        let dst: Vec<_> = src
            .iter()
            .map(|p| WorldPoint::new(p.x + rng.random_range(-3.0..3.0), p.y + 1.0, p.z))
            .collect();
        let t = solve_tps(
            &KeypointSet::uniform(src).unwrap(),
            &KeypointSet::uniform(dst).unwrap(),
            0.5,
        )
        .unwrap();
        let p = WorldPoint::new(3.0, -2.0, 7.0);
        let j = t.jacobian(p);
        let h = 1e-5;
        for b in 0..3 {
            let mut plus = p.to_array();
            let mut minus = p.to_array();
            plus[b] += h;
            minus[b] -= h;
            let fp = eval_tps(&t, WorldPoint::from_array(plus)).to_vector();
            let fm = eval_tps(&t, WorldPoint::from_array(minus)).to_vector();
            let col = (fp - fm) / (2.0 * h);
            for a in 0..3 {
                assert!((col[a] - j[(a, b)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn uniform_weighting_ignores_confidences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let src = random_points(&mut rng, 10, 30.0);
        let dst: Vec<_> = src
            .iter()
            .map(|p| WorldPoint::new(p.x + rng.random_range(-3.0..3.0), p.y, p.z))
            .collect();
        let a = solve_tps_with(
            &KeypointSet::new(src.clone(), random_conf(&mut rng, 10)).unwrap(),
            &KeypointSet::uniform(dst.clone()).unwrap(),
            2.0,
            TpsWeighting::Uniform,
        )
        .unwrap();
        let b = solve_tps(
            &KeypointSet::uniform(src).unwrap(),
            &KeypointSet::uniform(dst).unwrap(),
            2.0,
        )
        .unwrap();
        let p = WorldPoint::new(1.0, 2.0, 3.0);
        assert!(eval_tps(&a, p).distance(eval_tps(&b, p)) < 1e-9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn scale_invariance_of_confidences(seed in any::<u64>(), s in 1e-3f64..1e3) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = rng.random_range(5..20);
                let src = random_points(&mut rng, n, 50.0);
                let dst: Vec<_> = src.iter().map(|p| WorldPoint::new(
                    p.x + rng.random_range(-4.0..4.0), p.y + rng.random_range(-4.0..4.0), p.z)).collect();
                let m = KeypointSet::new(src, random_conf(&mut rng, n)).unwrap();
                let f = KeypointSet::new(dst, random_conf(&mut rng, n)).unwrap();
                let a = solve_affine_weighted(&m, &f).unwrap();
                let b = solve_affine_weighted(&m.scaled_confidences(s).unwrap(), &f).unwrap();
                prop_assert!(rel_frobenius(&b.matrix, &a.matrix) < 1e-9);
            }

            #[test]
            fn trivial_case_is_identity(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = rng.random_range(4..30);
                let pts = random_points(&mut rng, n, 80.0);
                let m = KeypointSet::new(pts.clone(), random_conf(&mut rng, n)).unwrap();
                let f = KeypointSet::new(pts, random_conf(&mut rng, n)).unwrap();
                let t = solve_affine_weighted(&m, &f).unwrap();
                prop_assert!(t.matrix.max_abs_diff(&WorldAffine::identity()) < 1e-9);
            }

            #[test]
            fn tps_lambda_continuity(seed in any::<u64>(), lambda in 0.0f64..50.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let src = random_points(&mut rng, 12, 40.0);
                let dst: Vec<_> = src.iter().map(|p| WorldPoint::new(
                    p.x + rng.random_range(-4.0..4.0), p.y, p.z + rng.random_range(-4.0..4.0))).collect();
                let m = KeypointSet::uniform(src).unwrap();
                let f = KeypointSet::uniform(dst).unwrap();
                let a = solve_tps(&m, &f, lambda).unwrap();
                let b = solve_tps(&m, &f, lambda * (1.0 + 1e-6)).unwrap();
                for q in random_points(&mut rng, 10, 40.0) {
                    prop_assert!(eval_tps(&a, q).distance(eval_tps(&b, q)) < 1e-3);
                }
                prop_assert!(a.side_condition_residual() < 1e-6);
            }
        }
    }
}
