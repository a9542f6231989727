//! Keypoint extraction.
//!
//! Non-negative activation maps are reduced to keypoints by their center of
//! mass (computed in normalized `[-1, 1]³` space, then scaled to voxels and
//! mapped to world millimeters); the confidence of a keypoint is the total
//! mass of its map. [`detect_blobs`] produces such maps deterministically
//! from a scale-space Laplacian-of-Gaussian so the pipeline can run without a
//! trained detector.

use rayon::prelude::*;
use thiserror::Error;

use crate::coords::{
    invert, normalized_to_voxel, voxel_to_world, CoordsError, VoxelIndex, WorldPoint,
};
use crate::solvers::{solve_affine_weighted, Keypoint, KeypointSet, SolverError};
use crate::volume::{Grid, Volume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeypointError {
    #[error("activation map {index} has mass {mass:e}, not above {threshold:e}")]
    ZeroMassMap {
        index: usize,
        mass: f64,
        threshold: f64,
    },
    #[error("found {found} blob extrema above the response floor, need {requested}")]
    InsufficientStructure { found: usize, requested: usize },
    #[error("volume has constant intensity")]
    ConstantVolume,
    #[error("invalid detector config: {0}")]
    BadConfig(String),
    #[error("activation map {index} has {actual} voxels, grid has {expected}")]
    MapSize {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("only {0} mutual keypoint matches, need 4")]
    TooFewMatches(usize),
    #[error(transparent)]
    Coords(#[from] CoordsError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// N non-negative maps on one voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    grid: Grid,
    maps: Vec<Vec<f32>>,
}

impl ActivationStack {
    /// Negative and non-finite activations are clamped to zero.
    pub fn new(grid: Grid, mut maps: Vec<Vec<f32>>) -> Result<Self, KeypointError> {
        for (index, m) in maps.iter_mut().enumerate() {
            if m.len() != grid.len() {
                return Err(KeypointError::MapSize {
                    index,
                    expected: grid.len(),
                    actual: m.len(),
                });
            }
            for v in m.iter_mut() {
                if !(*v > 0.0) || !v.is_finite() {
                    *v = 0.0;
                }
            }
        }
        Ok(Self { grid, maps })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn maps(&self) -> &[Vec<f32>] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Mass and normalized-space first moments of one map.
fn moments(grid: &Grid, map: &[f32]) -> (f64, [f64; 3]) {
    let [d0, d1, d2] = grid.dims;
    let norm = |d: usize, i: usize| {
        if d <= 1 {
            0.0
        } else {
            2.0 * i as f64 / (d - 1) as f64 - 1.0
        }
    };
    let mut mass = 0.0f64;
    let mut first = [0.0f64; 3];
    for i in 0..d0 {
        let ni = norm(d0, i);
        for j in 0..d1 {
            let nj = norm(d1, j);
            let row = &map[(i * d1 + j) * d2..(i * d1 + j + 1) * d2];
            for (k, &v) in row.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let v = v as f64;
                mass += v;
                first[0] += v * ni;
                first[1] += v * nj;
                first[2] += v * norm(d2, k);
            }
        }
    }
    (mass, first)
}

/// One keypoint per map, in map order.
pub fn center_of_mass(
    stack: &ActivationStack,
    min_mass: f64,
) -> Result<Vec<Keypoint>, KeypointError> {
    stack
        .maps
        .par_iter()
        .enumerate()
        .map(|(index, map)| {
            let (mass, first) = moments(&stack.grid, map);
            if !(mass > min_mass) {
                return Err(KeypointError::ZeroMassMap {
                    index,
                    mass,
                    threshold: min_mass,
                });
            }
            let n = first.map(|f| f / mass);
            let v = normalized_to_voxel(stack.grid.dims, n);
            Ok(Keypoint::new(voxel_to_world(&stack.grid.affine, v), mass))
        })
        .collect()
}

/// Rescales intensities to zero mean and unit (population) standard
/// deviation. The grid and labels are untouched.
pub fn zscore_normalize(vol: &Volume) -> Result<Volume, KeypointError> {
    let first = vol.data[0];
    if vol.data.iter().all(|&v| v == first) {
        return Err(KeypointError::ConstantVolume);
    }
    let n = vol.data.len() as f64;
    let mean = vol.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = vol
        .data
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    if var <= 0.0 {
        return Err(KeypointError::ConstantVolume);
    }
    let sd = var.sqrt();
    Ok(Volume {
        grid: vol.grid,
        data: vol
            .data
            .iter()
            .map(|&v| ((v as f64 - mean) / sd) as f32)
            .collect(),
        labels: vol.labels.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub n_keypoints: usize,
    /// Gaussian scales in millimeters, strictly increasing.
    pub blob_scales: Vec<f64>,
    pub min_activation_mass: f64,
    /// Minimum scale-normalized LoG response for an extremum to count.
    pub response_floor: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            n_keypoints: 8,
            blob_scales: vec![3.0, 4.5, 6.0, 8.0, 10.5, 13.5],
            min_activation_mass: 0.0,
            response_floor: 0.05,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), KeypointError> {
        if self.n_keypoints < 4 {
            return Err(KeypointError::BadConfig(format!(
                "n_keypoints must be at least 4, got {}",
                self.n_keypoints
            )));
        }
        if self.blob_scales.is_empty()
            || self
                .blob_scales
                .iter()
                .any(|&s| !(s > 0.0 && s.is_finite()))
            || self.blob_scales.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(KeypointError::BadConfig(
                "blob scales must be positive and strictly increasing".into(),
            ));
        }
        if !(self.min_activation_mass >= 0.0) {
            return Err(KeypointError::BadConfig(
                "min_activation_mass must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma < 1e-3 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable convolution along one axis with edge replication.
fn convolve_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    if kernel.len() == 1 {
        return data.to_vec();
    }
    let radius = (kernel.len() / 2) as isize;
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    let len = dims[axis] as isize;
    let mut out = vec![0.0; data.len()];
    out.par_chunks_mut(dims[1] * dims[2])
        .enumerate()
        .for_each(|(i, slab)| {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let pos = [i, j, k][axis] as isize;
                    let base = (i * dims[1] + j) * dims[2] + k - pos as usize * stride;
                    let mut acc = 0.0;
                    for (t, w) in kernel.iter().enumerate() {
                        let p = (pos + t as isize - radius).clamp(0, len - 1) as usize;
                        acc += w * data[base + p * stride];
                    }
                    slab[j * dims[2] + k] = acc;
                }
            }
        });
    out
}

/// `−σ²·∇²(G_σ * I)` with σ in millimeters; second differences use edge
/// replication and physical spacing.
fn log_response(data: &[f64], grid: &Grid, sigma_mm: f64) -> Vec<f64> {
    let dims = grid.dims;
    let spacing = grid.spacing();
    let mut g = data.to_vec();
    for a in 0..3 {
        g = convolve_axis(&g, dims, a, &gaussian_kernel(sigma_mm / spacing[a]));
    }
    let mut out = vec![0.0; g.len()];
    out.par_chunks_mut(dims[1] * dims[2])
        .enumerate()
        .for_each(|(i, slab)| {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let c = [i, j, k];
                    let centre = g[(i * dims[1] + j) * dims[2] + k];
                    let mut lap = 0.0;
                    for a in 0..3 {
                        if dims[a] < 3 {
                            continue;
                        }
                        let mut lo = c;
                        let mut hi = c;
                        lo[a] = c[a].saturating_sub(1);
                        hi[a] = (c[a] + 1).min(dims[a] - 1);
                        let vl = g[(lo[0] * dims[1] + lo[1]) * dims[2] + lo[2]];
                        let vh = g[(hi[0] * dims[1] + hi[1]) * dims[2] + hi[2]];
                        lap += (vl - 2.0 * centre + vh) / (spacing[a] * spacing[a]);
                    }
                    slab[j * dims[2] + k] = -sigma_mm * sigma_mm * lap;
                }
            }
        });
    out
}

#[derive(Debug, Clone, Copy)]
struct Extremum {
    response: f64,
    scale: usize,
    index: usize,
}

fn is_scale_space_max(responses: &[Vec<f64>], dims: [usize; 3], s: usize, idx: usize) -> bool {
    let v = responses[s][idx];
    let [i, j, k] = [
        idx / (dims[1] * dims[2]),
        (idx / dims[2]) % dims[1],
        idx % dims[2],
    ];
    let lo = |c: usize| c.saturating_sub(1);
    let hi = |c: usize, d: usize| (c + 1).min(d - 1);
    for ss in s.saturating_sub(1)..=(s + 1).min(responses.len() - 1) {
        let r = &responses[ss];
        for ii in lo(i)..=hi(i, dims[0]) {
            for jj in lo(j)..=hi(j, dims[1]) {
                for kk in lo(k)..=hi(k, dims[2]) {
                    let n = (ii * dims[1] + jj) * dims[2] + kk;
                    if (ss, n) != (s, idx) && r[n] > v {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Parabolic sub-voxel offset along each axis, clamped to half a voxel.
fn refine_peak(r: &[f64], dims: [usize; 3], idx: usize) -> [f64; 3] {
    let c = [
        idx / (dims[1] * dims[2]),
        (idx / dims[2]) % dims[1],
        idx % dims[2],
    ];
    let mut out = [c[0] as f64, c[1] as f64, c[2] as f64];
    for a in 0..3 {
        if c[a] == 0 || c[a] + 1 >= dims[a] {
            continue;
        }
        let mut lo = c;
        let mut hi = c;
        lo[a] -= 1;
        hi[a] += 1;
        let at = |p: [usize; 3]| r[(p[0] * dims[1] + p[1]) * dims[2] + p[2]];
        let (vl, v0, vh) = (at(lo), r[idx], at(hi));
        let denom = vl - 2.0 * v0 + vh;
        if denom < 0.0 {
            out[a] += (0.5 * (vl - vh) / denom).clamp(-0.5, 0.5);
        }
    }
    out
}

/// Positive LoG response under a Gaussian window of width `sigma` (mm)
/// centred at `centre`, truncated at three widths.
fn windowed_map(
    grid: &Grid,
    response: &[f64],
    centre: WorldPoint,
    sigma: f64,
) -> Result<Vec<f32>, KeypointError> {
    let dims = grid.dims;
    let inv = invert(&grid.affine)?;
    let cv = inv.apply(centre.to_array());
    let l = inv.linear();
    let reach = 3.0 * sigma;
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let half = reach * l.row(a).norm();
        lo[a] = (cv[a] - half).floor().max(0.0) as usize;
        hi[a] = ((cv[a] + half).ceil().max(0.0) as usize).min(dims[a] - 1);
    }
    let mut map = vec![0.0f32; grid.len()];
    let two_s2 = 2.0 * sigma * sigma;
    for i in lo[0]..=hi[0] {
        for j in lo[1]..=hi[1] {
            for k in lo[2]..=hi[2] {
                let n = grid.index(i, j, k);
                let r = response[n];
                if r <= 0.0 {
                    continue;
                }
                let p = grid.affine.apply([i as f64, j as f64, k as f64]);
                let d2 = (p[0] - centre.x).powi(2)
                    + (p[1] - centre.y).powi(2)
                    + (p[2] - centre.z).powi(2);
                if d2 > reach * reach {
                    continue;
                }
                map[n] = (r * (-d2 / two_s2).exp()) as f32;
            }
        }
    }
    Ok(map)
}

const MEAN_SHIFT_STEPS: usize = 3;

/// Scale-space LoG blob detector producing one soft activation map per
/// selected blob, strongest first.
pub fn detect_blobs(vol: &Volume, cfg: &DetectorConfig) -> Result<ActivationStack, KeypointError> {
    cfg.validate()?;
    let z = match zscore_normalize(vol) {
        Ok(z) => z,
        Err(KeypointError::ConstantVolume) => {
            return Err(KeypointError::InsufficientStructure {
                found: 0,
                requested: cfg.n_keypoints,
            })
        }
        Err(e) => return Err(e),
    };
    let grid = vol.grid;
    let dims = grid.dims;
    let data: Vec<f64> = z.data.iter().map(|&v| v as f64).collect();
    let responses: Vec<Vec<f64>> = cfg
        .blob_scales
        .iter()
        .map(|&s| log_response(&data, &grid, s))
        .collect();

    let mut candidates: Vec<Extremum> = Vec::new();
    for (s, r) in responses.iter().enumerate() {
        let found: Vec<Extremum> = (0..r.len())
            .into_par_iter()
            .filter(|&n| r[n] > cfg.response_floor && is_scale_space_max(&responses, dims, s, n))
            .map(|index| Extremum {
                response: r[index],
                scale: s,
                index,
            })
            .collect();
        candidates.extend(found);
    }
    candidates.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.scale.cmp(&b.scale))
            .then(a.index.cmp(&b.index))
    });

    // Greedy non-maximum suppression in world space.
    let mut chosen: Vec<(Extremum, WorldPoint)> = Vec::new();
    for c in candidates {
        if chosen.len() == cfg.n_keypoints {
            break;
        }
        let sigma = cfg.blob_scales[c.scale];
        let p = grid.world(c.index);
        let suppressed = chosen.iter().any(|(o, q)| {
            let radius = 2.0 * sigma.max(cfg.blob_scales[o.scale]);
            p.distance(*q) < radius
        });
        if !suppressed {
            chosen.push((c, p));
        }
    }
    if chosen.len() < cfg.n_keypoints {
        return Err(KeypointError::InsufficientStructure {
            found: chosen.len(),
            requested: cfg.n_keypoints,
        });
    }

    let maps = chosen
        .par_iter()
        .map(|(e, _)| {
            let sigma = cfg.blob_scales[e.scale];
            let r = &responses[e.scale];
            let v = refine_peak(r, dims, e.index);
            let mut centre = voxel_to_world(&grid.affine, VoxelIndex::new(v[0], v[1], v[2]));
            let mut map = windowed_map(&grid, r, centre, sigma)?;
            for _ in 0..MEAN_SHIFT_STEPS {
                let (mass, first) = moments(&grid, &map);
                if !(mass > 0.0) {
                    break;
                }
                let n = first.map(|f| f / mass);
                centre = voxel_to_world(&grid.affine, normalized_to_voxel(dims, n));
                map = windowed_map(&grid, r, centre, sigma)?;
            }
            Ok(map)
        })
        .collect::<Result<Vec<_>, KeypointError>>()?;
    ActivationStack::new(grid, maps)
}

/// Blob detection followed by the center-of-mass reduction.
pub fn detect_keypoints(
    vol: &Volume,
    cfg: &DetectorConfig,
) -> Result<Vec<Keypoint>, KeypointError> {
    let stack = detect_blobs(vol, cfg)?;
    center_of_mass(&stack, cfg.min_activation_mass)
}

/// Pairs two independently detected keypoint lists by mutual nearest
/// neighbors, alternating matching and re-fitting (translation first, then
/// affine). Returned sets are index-aligned, ordered by moving index.
pub fn pair_keypoints(
    moving: &[Keypoint],
    fixed: &[Keypoint],
) -> Result<(KeypointSet, KeypointSet), KeypointError> {
    if moving.len() < 4 || fixed.len() < 4 {
        return Err(KeypointError::TooFewMatches(moving.len().min(fixed.len())));
    }
    let centroid = |k: &[Keypoint]| {
        let n = k.len() as f64;
        k.iter().fold([0.0; 3], |acc, p| {
            [
                acc[0] + p.position.x / n,
                acc[1] + p.position.y / n,
                acc[2] + p.position.z / n,
            ]
        })
    };
    let (cm, cf) = (centroid(moving), centroid(fixed));
    let mut map =
        crate::coords::WorldAffine::translation_only([cf[0] - cm[0], cf[1] - cm[1], cf[2] - cm[2]]);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    const TRANSLATION_ROUNDS: usize = 3;
    for round in 0..30 {
        let mapped: Vec<WorldPoint> = moving
            .iter()
            .map(|k| WorldPoint::from_array(map.apply(k.position.to_array())))
            .collect();
        let nearest = |p: WorldPoint, set: &mut dyn Iterator<Item = WorldPoint>| {
            set.enumerate()
                .map(|(i, q)| (i, p.distance(q)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i)
                .unwrap_or(0)
        };
        let next: Vec<(usize, usize)> = (0..moving.len())
            .filter_map(|m| {
                let f = nearest(mapped[m], &mut fixed.iter().map(|k| k.position));
                let back = nearest(fixed[f].position, &mut mapped.iter().copied());
                (back == m).then_some((m, f))
            })
            .collect();
        if next.len() < 4 {
            return Err(KeypointError::TooFewMatches(next.len()));
        }
        let converged = next == pairs && round >= TRANSLATION_ROUNDS;
        pairs = next;
        if converged {
            break;
        }
        if round < TRANSLATION_ROUNDS {
            let n = pairs.len() as f64;
            let mut t = [0.0; 3];
            for &(m, f) in &pairs {
                let d = [
                    fixed[f].position.x - moving[m].position.x,
                    fixed[f].position.y - moving[m].position.y,
                    fixed[f].position.z - moving[m].position.z,
                ];
                for a in 0..3 {
                    t[a] += d[a] / n;
                }
            }
            map = crate::coords::WorldAffine::translation_only(t);
        } else {
            let (ms, fs) = build_sets(moving, fixed, &pairs)?;
            match solve_affine_weighted(&ms, &fs) {
                Ok(a) => map = a.matrix,
                Err(SolverError::DegenerateConfiguration(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    build_sets(moving, fixed, &pairs)
}

fn build_sets(
    moving: &[Keypoint],
    fixed: &[Keypoint],
    pairs: &[(usize, usize)],
) -> Result<(KeypointSet, KeypointSet), KeypointError> {
    let ms: Vec<Keypoint> = pairs.iter().map(|&(m, _)| moving[m]).collect();
    let fs: Vec<Keypoint> = pairs.iter().map(|&(_, f)| fixed[f]).collect();
    Ok((
        KeypointSet::from_keypoints(&ms)?,
        KeypointSet::from_keypoints(&fs)?,
    ))
}
