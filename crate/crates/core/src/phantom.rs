//! Synthetic ground truth.
//!
//! A phantom is a set of analytic ellipsoids in world millimeters. It can be
//! rasterized on any grid (with 2×2×2 supersampled edges) and paired with a
//! known moving→fixed world transform, so every downstream number has an
//! exact reference.
//!
//! Text format (one statement per line, `#` comments):
//!
//! ```text
//! noise 0.01
//! seed 42
//! # ellipsoid cx cy cz  rx ry rz  intensity label
//! ellipsoid 0 0 0  40 35 30  0.2 1
//! ```

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::coords::{CoordsError, WorldAffine, WorldPoint};
use crate::solvers::{solve_tps, KeypointSet, SolverError, TpsTransform};
use crate::volume::{Grid, Volume};
use crate::warp::{WarpError, WorldTransform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("shape {index}: {msg}")]
    InvalidShape { index: usize, msg: String },
    #[error("label {0} is used by more than one shape")]
    DuplicateLabel(u16),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error(transparent)]
    Coords(#[from] CoordsError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: WorldPoint,
    /// Semi-axes along world x, y, z (mm).
    pub radii: [f64; 3],
    pub intensity: f32,
    pub label: u16,
}

impl Ellipsoid {
    /// `Σ ((p − c) / r)²`; ≤ 1 inside.
    #[inline]
    pub fn rho2(&self, p: WorldPoint) -> f64 {
        let d = [
            p.x - self.center.x,
            p.y - self.center.y,
            p.z - self.center.z,
        ];
        (0..3).map(|a| (d[a] / self.radii[a]).powi(2)).sum()
    }

    pub fn volume_mm3(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii.iter().product::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub shapes: Vec<Ellipsoid>,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl PhantomSpec {
    pub fn new(
        shapes: Vec<Ellipsoid>,
        noise_sigma: f64,
        rng_seed: u64,
    ) -> Result<Self, PhantomError> {
        let spec = Self {
            shapes,
            noise_sigma,
            rng_seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(PhantomError::Geometry(
                "noise sigma must be finite and non-negative".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (index, s) in self.shapes.iter().enumerate() {
            if s.radii.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
                return Err(PhantomError::InvalidShape {
                    index,
                    msg: "radii must be positive".into(),
                });
            }
            if !s.center.is_finite() || !s.intensity.is_finite() {
                return Err(PhantomError::InvalidShape {
                    index,
                    msg: "non-finite center or intensity".into(),
                });
            }
            if s.label == 0 {
                return Err(PhantomError::InvalidShape {
                    index,
                    msg: "label 0 is reserved for background".into(),
                });
            }
            if !seen.insert(s.label) {
                return Err(PhantomError::DuplicateLabel(s.label));
            }
        }
        Ok(())
    }

    /// Innermost containing shape: where shapes overlap, the one with the
    /// smallest volume wins (later shapes on ties).
    pub fn shape_at(&self, p: WorldPoint) -> Option<&Ellipsoid> {
        let mut best: Option<&Ellipsoid> = None;
        for s in &self.shapes {
            if s.rho2(p) <= 1.0 && best.is_none_or(|b| s.volume_mm3() <= b.volume_mm3()) {
                best = Some(s);
            }
        }
        best
    }

    /// Noise-free analytic intensity and label.
    pub fn field(&self, p: WorldPoint) -> (f32, u16) {
        self.shape_at(p)
            .map_or((0.0, 0), |s| (s.intensity, s.label))
    }

    pub fn centers(&self) -> Vec<WorldPoint> {
        self.shapes.iter().map(|s| s.center).collect()
    }

    pub fn parse(text: &str) -> Result<Self, PhantomError> {
        let mut shapes = Vec::new();
        let mut noise = 0.0;
        let mut seed = 0u64;
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut tokens = content.split_whitespace();
            let key = tokens.next().unwrap_or_default();
            let args: Vec<&str> = tokens.collect();
            let err = |msg: String| PhantomError::Parse { line, msg };
            let real = |t: &str| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("expected a real number, got `{t}`")))
            };
            let arity = |want: usize| {
                if args.len() == want {
                    Ok(())
                } else {
                    Err(err(format!(
                        "`{key}` takes {want} values, got {}",
                        args.len()
                    )))
                }
            };
            match key {
                "noise" => {
                    arity(1)?;
                    noise = real(args[0])?;
                }
                "seed" => {
                    arity(1)?;
                    seed = args[0]
                        .parse()
                        .map_err(|_| err(format!("bad seed `{}`", args[0])))?;
                }
                "ellipsoid" => {
                    arity(8)?;
                    let v = args[..7]
                        .iter()
                        .map(|t| real(t))
                        .collect::<Result<Vec<_>, _>>()?;
                    let label = args[7]
                        .parse::<u16>()
                        .map_err(|_| err(format!("bad label `{}`", args[7])))?;
                    shapes.push(Ellipsoid {
                        center: WorldPoint::new(v[0], v[1], v[2]),
                        radii: [v[3], v[4], v[5]],
                        intensity: v[6] as f32,
                        label,
                    });
                }
                other => return Err(err(format!("unknown statement `{other}`"))),
            }
        }
        let spec = Self {
            shapes,
            noise_sigma: noise,
            rng_seed: seed,
        };
        // Report validation failures against the offending line.
        spec.validate().map_err(|e| match e {
            PhantomError::InvalidShape { index, msg } => PhantomError::Parse {
                line: shape_line(text, index),
                msg,
            },
            PhantomError::DuplicateLabel(l) => {
                let index = spec.shapes.iter().rposition(|s| s.label == l).unwrap_or(0);
                PhantomError::Parse {
                    line: shape_line(text, index),
                    msg: format!("duplicate label {l}"),
                }
            }
            other => other,
        })?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("noise {:?}\nseed {}\n", self.noise_sigma, self.rng_seed);
        for e in &self.shapes {
            s.push_str(&format!(
                "ellipsoid {:?} {:?} {:?} {:?} {:?} {:?} {:?} {}\n",
                e.center.x,
                e.center.y,
                e.center.z,
                e.radii[0],
                e.radii[1],
                e.radii[2],
                e.intensity,
                e.label
            ));
        }
        s
    }
}

fn shape_line(text: &str, index: usize) -> usize {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            l.split('#')
                .next()
                .unwrap_or("")
                .trim_start()
                .starts_with("ellipsoid")
        })
        .nth(index)
        .map_or(0, |(n, _)| n + 1)
}

impl FromStr for PhantomSpec {
    type Err = PhantomError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

/// A small abdomen-like phantom: a body ellipsoid holding eight organs with
/// distinct intensities, sized for a ~100 mm field of view.
pub fn quickstart_spec() -> PhantomSpec {
    let organ = |c: [f64; 3], r: [f64; 3], intensity: f32, label: u16| Ellipsoid {
        center: WorldPoint::from_array(c),
        radii: r,
        intensity,
        label,
    };
    PhantomSpec::new(
        vec![
            organ([0.0, 0.0, 0.0], [46.0, 44.0, 45.0], 0.25, 1),
            organ([-18.0, -17.0, -18.0], [13.0, 11.0, 12.0], 1.0, 2),
            organ([18.0, -18.0, -17.0], [11.0, 13.0, 11.0], 0.8, 3),
            organ([-17.0, 18.0, -18.0], [12.0, 12.0, 10.0], 0.6, 4),
            organ([18.0, 17.0, -18.0], [10.0, 11.0, 13.0], 0.9, 5),
            organ([-18.0, -18.0, 17.0], [11.0, 12.0, 12.0], 0.7, 6),
            organ([17.0, -18.0, 18.0], [12.0, 10.0, 11.0], 1.0, 7),
            organ([-18.0, 17.0, 18.0], [11.0, 11.0, 11.0], 0.85, 8),
            organ([18.0, 18.0, 17.0], [13.0, 11.0, 11.0], 0.65, 9),
        ],
        0.0,
        42,
    )
    .expect("built-in phantom is valid")
}

/// Supersample offsets (voxels) for 2× antialiasing.
const SUB: [f64; 2] = [-0.25, 0.25];

/// Rasterizes `field` (world → (intensity, label)) on `grid`: intensity is
/// the mean of 2×2×2 sub-samples, the label is the voxel-center sample.
pub fn rasterize<F>(grid: &Grid, field: F) -> Result<Volume, PhantomError>
where
    F: Fn(WorldPoint) -> Result<(f32, u16), PhantomError> + Sync,
{
    let [_, d1, d2] = grid.dims;
    let slab = d1 * d2;
    let mut data = vec![0.0f32; grid.len()];
    let mut labels = vec![0u16; grid.len()];
    data.par_chunks_mut(slab)
        .zip(labels.par_chunks_mut(slab))
        .enumerate()
        .try_for_each(|(i, (ds, ls))| -> Result<(), PhantomError> {
            for j in 0..d1 {
                for k in 0..d2 {
                    let at = |a: f64, b: f64, c: f64| {
                        WorldPoint::from_array(grid.affine.apply([
                            i as f64 + a,
                            j as f64 + b,
                            k as f64 + c,
                        ]))
                    };
                    let mut acc = 0.0f64;
                    for a in SUB {
                        for b in SUB {
                            for c in SUB {
                                acc += field(at(a, b, c))?.0 as f64;
                            }
                        }
                    }
                    ds[j * d2 + k] = (acc / 8.0) as f32;
                    ls[j * d2 + k] = field(at(0.0, 0.0, 0.0))?.1;
                }
            }
            Ok(())
        })?;
    Ok(Volume {
        grid: *grid,
        data,
        labels: Some(labels),
    })
}

/// Adds seeded Gaussian noise in memory order. `stream` separates the noise
/// of the two members of a pair drawn from one seed.
fn add_noise(vol: &mut Volume, sigma: f64, seed: u64, stream: u64) {
    if sigma <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    for v in &mut vol.data {
        *v = (*v as f64 + normal.sample(&mut rng)) as f32;
    }
}

/// Rasterizes the phantom on `grid`, noise included.
pub fn render(spec: &PhantomSpec, grid: &Grid) -> Volume {
    let mut vol = rasterize(grid, |p| Ok(spec.field(p))).expect("analytic field is infallible");
    add_noise(&mut vol, spec.noise_sigma, spec.rng_seed, 0);
    vol
}

/// Signed axis permutations emulating orthogonal acquisitions. Each variant
/// names the world axis (with sign) that voxel axes `i, j, k` run along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Orientation {
    /// `i → +x, j → +y, k → +z` (slices stacked along z).
    #[default]
    Axial,
    /// `i → −z, j → +y, k → +x` (slices stacked along y).
    Coronal,
    /// `i → +y, j → −z, k → −x` (slices stacked along x).
    Sagittal,
}

impl Orientation {
    /// Columns of the direction matrix, as `(world axis, sign)` per voxel axis.
    fn axes(self) -> [(usize, f64); 3] {
        match self {
            Orientation::Axial => [(0, 1.0), (1, 1.0), (2, 1.0)],
            Orientation::Coronal => [(2, -1.0), (1, 1.0), (0, 1.0)],
            Orientation::Sagittal => [(1, 1.0), (2, -1.0), (0, -1.0)],
        }
    }
}

impl FromStr for Orientation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "axial" => Ok(Self::Axial),
            "coronal" => Ok(Self::Coronal),
            "sagittal" => Ok(Self::Sagittal),
            other => Err(format!("unknown orientation `{other}`")),
        }
    }
}

/// A grid covering a centered cube of side `fov_mm`, with voxel spacing
/// `spacing` (per voxel axis) and the given orientation. The middle of the
/// grid sits at the world origin.
pub fn centered_grid(
    fov_mm: f64,
    spacing: [f64; 3],
    orientation: Orientation,
) -> Result<Grid, PhantomError> {
    if !(fov_mm > 0.0) || spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(PhantomError::Geometry(format!(
            "field of view {fov_mm} and spacings {spacing:?} must be positive"
        )));
    }
    let dims = spacing.map(|s| (fov_mm / s).floor() as usize + 1);
    let mut rows = [[0.0; 4]; 4];
    rows[3][3] = 1.0;
    for (col, (axis, sign)) in orientation.axes().into_iter().enumerate() {
        rows[axis][col] = sign * spacing[col];
    }
    for r in 0..3 {
        let centre: f64 = (0..3)
            .map(|c| rows[r][c] * (dims[c] - 1) as f64 / 2.0)
            .sum();
        rows[r][3] = -centre;
    }
    let affine = WorldAffine::from_rows(rows)?;
    Grid::new(dims, affine).map_err(|e| PhantomError::Geometry(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGeometry {
    pub fov_mm: f64,
    pub spacing_m: [f64; 3],
    pub orientation_m: Orientation,
    pub spacing_f: [f64; 3],
    pub orientation_f: Orientation,
}

impl Default for PairGeometry {
    fn default() -> Self {
        Self {
            fov_mm: 100.0,
            spacing_m: [2.0; 3],
            orientation_m: Orientation::Axial,
            spacing_f: [2.0; 3],
            orientation_f: Orientation::Axial,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Moving world → fixed world.
    pub world_transform: WorldTransform,
    pub moving: Volume,
    pub fixed: Volume,
    /// (moving-side, fixed-side), index-aligned: shape centers and their
    /// images under `world_transform`.
    pub true_keypoints: (KeypointSet, KeypointSet),
}

/// Renders the phantom on the moving grid, and the phantom carried by `g`
/// (moving→fixed) on the fixed grid: the fixed image at `p` shows the
/// phantom at `g⁻¹(p)`. The spec needs at least 4 shapes, since their
/// centers are the true keypoints.
pub fn make_pair(
    spec: &PhantomSpec,
    g: &WorldTransform,
    geom: &PairGeometry,
) -> Result<GroundTruth, PhantomError> {
    spec.validate()?;
    if spec.shapes.len() < 4 {
        return Err(PhantomError::Geometry(format!(
            "a ground-truth pair needs at least 4 shapes (one keypoint each), got {}",
            spec.shapes.len()
        )));
    }
    let gm = centered_grid(geom.fov_mm, geom.spacing_m, geom.orientation_m)?;
    let gf = centered_grid(geom.fov_mm, geom.spacing_f, geom.orientation_f)?;
    let moving = render(spec, &gm);
    let mut fixed = match g.inverse()? {
        Some(inv) => rasterize(&gf, |p| Ok(spec.field(inv.apply(p))))?,
        None => rasterize(&gf, |p| Ok(spec.field(g.invert_point(p)?)))?,
    };
    add_noise(&mut fixed, spec.noise_sigma, spec.rng_seed, 1);
    let centers = spec.centers();
    let mapped = centers.iter().map(|&c| g.apply(c)).collect();
    Ok(GroundTruth {
        world_transform: g.clone(),
        moving,
        fixed,
        true_keypoints: (
            KeypointSet::uniform(centers)?,
            KeypointSet::uniform(mapped)?,
        ),
    })
}

/// A smooth moving→fixed deformation: a spline through `controls` displaced
/// by `displacements`, scaled down so that the displacement sampled every
/// `probe_mm` over the centered cube of side `fov_mm` never exceeds
/// `max_disp_mm`. The spline reproduces affine maps, so its displacement is
/// linear in `displacements` and the rescale is exact.
pub fn bounded_tps(
    controls: &[WorldPoint],
    displacements: &[[f64; 3]],
    lambda: f64,
    max_disp_mm: f64,
    fov_mm: f64,
    probe_mm: f64,
) -> Result<TpsTransform, PhantomError> {
    if controls.len() < 4 || controls.len() != displacements.len() {
        return Err(PhantomError::Geometry(format!(
            "a deformation needs at least 4 control points with one displacement each, got {} and {}",
            controls.len(),
            displacements.len()
        )));
    }
    let solve = |scale: f64| -> Result<TpsTransform, PhantomError> {
        let targets = controls
            .iter()
            .zip(displacements)
            .map(|(c, d)| {
                WorldPoint::new(c.x + scale * d[0], c.y + scale * d[1], c.z + scale * d[2])
            })
            .collect();
        Ok(solve_tps(
            &KeypointSet::uniform(controls.to_vec())?,
            &KeypointSet::uniform(targets)?,
            lambda,
        )?)
    };
    let t = solve(1.0)?;
    let n = (fov_mm / probe_mm).ceil() as usize;
    let mut worst = 0.0f64;
    for a in 0..=n {
        for b in 0..=n {
            for c in 0..=n {
                let p = [a, b, c].map(|v| -fov_mm / 2.0 + fov_mm * v as f64 / n as f64);
                let p = WorldPoint::from_array(p);
                worst = worst.max(t.apply(p).distance(p));
            }
        }
    }
    if worst <= max_disp_mm {
        Ok(t)
    } else {
        solve(max_disp_mm / worst)
    }
}

/// A seeded random smooth deformation: every control point moves by a
/// direction drawn uniformly from the sphere times a length uniform in
/// `[0.5, 1] · max_disp_mm`, then [`bounded_tps`] caps the displacement over
/// the field of view at `max_disp_mm`.
pub fn random_deformation(
    controls: &[WorldPoint],
    max_disp_mm: f64,
    fov_mm: f64,
    seed: u64,
) -> Result<TpsTransform, PhantomError> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let disp: Vec<[f64; 3]> = controls
        .iter()
        .map(|_| {
            let d: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
            let len = max_disp_mm * rng.random_range(0.5..=1.0);
            d.map(|v| v / n * len)
        })
        .collect();
    bounded_tps(controls, &disp, 1.0, max_disp_mm, fov_mm, fov_mm / 20.0)
}

/// `outer ∘ t` as a single spline: an affine map after a spline keeps the
/// spline form with composed affine part and linearly mapped coefficients.
pub fn affine_after_tps(outer: &WorldAffine, t: &TpsTransform) -> TpsTransform {
    let l = outer.linear();
    TpsTransform {
        control_points: t.control_points.clone(),
        affine_part: crate::coords::compose(outer, &t.affine_part),
        warp_coefficients: t
            .warp_coefficients
            .iter()
            .map(|w| {
                let v = l * nalgebra::Vector3::new(w[0], w[1], w[2]);
                [v[0], v[1], v[2]]
            })
            .collect(),
        lambda: t.lambda,
    }
}
