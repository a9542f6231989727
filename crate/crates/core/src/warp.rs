//! Pull-back warping of a moving volume onto a fixed voxel grid.
//!
//! For every fixed voxel `x` the moving image is sampled once at
//! `A_m⁻¹ · t(A_f · x)`. No intermediate grid is ever built, so the only
//! interpolation is the final one.

use rayon::prelude::*;
use thiserror::Error;

use crate::coords::{invert, CoordsError, WorldAffine, WorldPoint};
use crate::solvers::{eval_tps, AffineTransform, TpsTransform};
use crate::volume::{Grid, Volume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WarpError {
    #[error(transparent)]
    Coords(#[from] CoordsError),
    #[error("point inversion did not converge at ({x}, {y}, {z})")]
    InversionFailed { x: f64, y: f64, z: f64 },
}

/// A world-to-world map. Whether it runs moving→fixed or fixed→moving is a
/// property of where it is used; warping always expects fixed→moving.
#[derive(Debug, Clone, PartialEq)]
pub enum WorldTransform {
    Affine(AffineTransform),
    /// Affine whose linear block is a proper rotation.
    Rigid(AffineTransform),
    Tps(TpsTransform),
}

impl WorldTransform {
    pub fn identity() -> Self {
        WorldTransform::Affine(AffineTransform::identity())
    }

    #[inline]
    pub fn apply(&self, p: WorldPoint) -> WorldPoint {
        match self {
            WorldTransform::Affine(a) | WorldTransform::Rigid(a) => a.apply(p),
            WorldTransform::Tps(t) => eval_tps(t, p),
        }
    }

    pub fn as_affine(&self) -> Option<&WorldAffine> {
        match self {
            WorldTransform::Affine(a) | WorldTransform::Rigid(a) => Some(&a.matrix),
            WorldTransform::Tps(_) => None,
        }
    }

    /// Closed-form inverse for the affine variants.
    pub fn inverse(&self) -> Result<Option<WorldTransform>, WarpError> {
        Ok(match self {
            WorldTransform::Affine(a) => Some(WorldTransform::Affine(AffineTransform {
                matrix: invert(&a.matrix)?,
            })),
            WorldTransform::Rigid(a) => Some(WorldTransform::Rigid(AffineTransform {
                matrix: invert(&a.matrix)?,
            })),
            WorldTransform::Tps(_) => None,
        })
    }

    /// Solves `self(q) = p` for `q`. Exact for affine maps; Newton iteration
    /// seeded from the inverse affine part for splines.
    pub fn invert_point(&self, p: WorldPoint) -> Result<WorldPoint, WarpError> {
        match self {
            WorldTransform::Affine(a) | WorldTransform::Rigid(a) => Ok(WorldPoint::from_array(
                invert(&a.matrix)?.apply(p.to_array()),
            )),
            WorldTransform::Tps(t) => {
                let inv = invert(&t.affine_part)?;
                let mut q = WorldPoint::from_array(inv.apply(p.to_array()));
                for _ in 0..50 {
                    let f = eval_tps(t, q);
                    let r = [p.x - f.x, p.y - f.y, p.z - f.z];
                    let err = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                    if err < 1e-10 {
                        return Ok(q);
                    }
                    let j = t.jacobian(q);
                    let step = j.lu().solve(&nalgebra::Vector3::from(r)).ok_or(
                        WarpError::InversionFailed {
                            x: p.x,
                            y: p.y,
                            z: p.z,
                        },
                    )?;
                    q = WorldPoint::new(q.x + step[0], q.y + step[1], q.z + step[2]);
                }
                let f = eval_tps(t, q);
                if f.distance(p) < 1e-6 {
                    Ok(q)
                } else {
                    Err(WarpError::InversionFailed {
                        x: p.x,
                        y: p.y,
                        z: p.z,
                    })
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Trilinear,
    Nearest,
}

/// Trilinear sample at continuous voxel coordinates; 0 outside
/// `[0, dim − 1]` on any axis. Corners are accumulated in (i, j, k) binary
/// order.
/// Sample coordinates this close outside the grid (in voxels) are clamped
/// onto it, so that round-off in `A_m⁻¹·A_f` cannot zero the border.
pub const EDGE_TOLERANCE: f64 = 1e-6;

#[inline]
pub fn trilinear(data: &[f32], dims: [usize; 3], v: [f64; 3]) -> f32 {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let top = (dims[a] - 1) as f64;
        if !(v[a] >= -EDGE_TOLERANCE && v[a] <= top + EDGE_TOLERANCE) {
            return 0.0;
        }
        let x = v[a].clamp(0.0, top);
        let i0 = (x.floor() as usize).min(dims[a].saturating_sub(2));
        lo[a] = i0;
        hi[a] = (i0 + 1).min(dims[a] - 1);
        frac[a] = x - i0 as f64;
    }
    let at = |i: usize, j: usize, k: usize| data[(i * dims[1] + j) * dims[2] + k] as f64;
    let (wx, wy, wz) = (
        [1.0 - frac[0], frac[0]],
        [1.0 - frac[1], frac[1]],
        [1.0 - frac[2], frac[2]],
    );
    let xs = [lo[0], hi[0]];
    let ys = [lo[1], hi[1]];
    let zs = [lo[2], hi[2]];
    let mut acc = 0.0f64;
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..2 {
                acc += wx[a] * wy[b] * wz[c] * at(xs[a], ys[b], zs[c]);
            }
        }
    }
    acc as f32
}

/// Nearest voxel (round half away from zero); `None` when out of bounds.
#[inline]
pub fn nearest_index(dims: [usize; 3], v: [f64; 3]) -> Option<usize> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = v[a].round();
        if !(r >= 0.0 && r <= (dims[a] - 1) as f64) {
            return None;
        }
        idx[a] = r as usize;
    }
    Some((idx[0] * dims[1] + idx[1]) * dims[2] + idx[2])
}

/// Precomputed chain `A_m⁻¹ ∘ t ∘ A_f`, evaluated per voxel.
struct SampleMap<'a> {
    fixed: &'a Grid,
    moving_inv: WorldAffine,
    pull: &'a WorldTransform,
}

impl<'a> SampleMap<'a> {
    fn new(moving: &Grid, fixed: &'a Grid, pull: &'a WorldTransform) -> Result<Self, WarpError> {
        Ok(Self {
            fixed,
            moving_inv: invert(&moving.affine)?,
            pull,
        })
    }

    #[inline]
    fn locate(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let p = self.fixed.affine.apply([i as f64, j as f64, k as f64]);
        let q = self.pull.apply(WorldPoint::from_array(p));
        self.moving_inv.apply(q.to_array())
    }
}

/// Fills `out` (fixed-grid order) in parallel over i-slabs. Each voxel is
/// computed independently, so the result does not depend on thread count.
fn fill_parallel<T: Send, F>(grid: &Grid, out: &mut [T], f: F)
where
    F: Fn(usize, usize, usize) -> T + Sync,
{
    let slab = grid.dims[1] * grid.dims[2];
    out.par_chunks_mut(slab).enumerate().for_each(|(i, chunk)| {
        for j in 0..grid.dims[1] {
            for k in 0..grid.dims[2] {
                chunk[j * grid.dims[2] + k] = f(i, j, k);
            }
        }
    });
}

/// Samples `moving` on `fixed_grid` through the pull-back map `pull`
/// (fixed world → moving world). Intensities use `mode`; labels, when
/// present, are always carried by nearest neighbor. Out-of-bounds samples
/// are 0.
pub fn warp_to_fixed_grid(
    moving: &Volume,
    fixed_grid: &Grid,
    pull: &WorldTransform,
    mode: Interpolation,
) -> Result<Volume, WarpError> {
    let map = SampleMap::new(&moving.grid, fixed_grid, pull)?;
    let md = moving.grid.dims;
    let mut data = vec![0.0f32; fixed_grid.len()];
    match mode {
        Interpolation::Trilinear => fill_parallel(fixed_grid, &mut data, |i, j, k| {
            trilinear(&moving.data, md, map.locate(i, j, k))
        }),
        Interpolation::Nearest => fill_parallel(fixed_grid, &mut data, |i, j, k| {
            nearest_index(md, map.locate(i, j, k)).map_or(0.0, |n| moving.data[n])
        }),
    }
    let labels = moving.labels.as_ref().map(|labels| {
        let mut out = vec![0u16; fixed_grid.len()];
        fill_parallel(fixed_grid, &mut out, |i, j, k| {
            nearest_index(md, map.locate(i, j, k)).map_or(0, |n| labels[n])
        });
        out
    });
    Ok(Volume {
        grid: *fixed_grid,
        data,
        labels,
    })
}

/// Nearest-neighbor label warp only.
pub fn warp_labels(
    moving: &Volume,
    fixed_grid: &Grid,
    pull: &WorldTransform,
) -> Result<Option<Vec<u16>>, WarpError> {
    let Some(labels) = moving.labels.as_ref() else {
        return Ok(None);
    };
    let map = SampleMap::new(&moving.grid, fixed_grid, pull)?;
    let md = moving.grid.dims;
    let mut out = vec![0u16; fixed_grid.len()];
    fill_parallel(fixed_grid, &mut out, |i, j, k| {
        nearest_index(md, map.locate(i, j, k)).map_or(0, |n| labels[n])
    });
    Ok(Some(out))
}

/// Trilinear warp of the one-hot indicator of each requested label:
/// fractional membership on the fixed grid, one channel per label.
pub fn warp_soft_labels(
    moving: &Volume,
    fixed_grid: &Grid,
    pull: &WorldTransform,
    labels: &[u16],
) -> Result<Vec<Vec<f32>>, WarpError> {
    let map = SampleMap::new(&moving.grid, fixed_grid, pull)?;
    let md = moving.grid.dims;
    let n = fixed_grid.len();
    let src = moving.labels.as_deref();
    let mut locs = vec![[0.0f64; 3]; n];
    fill_parallel(fixed_grid, &mut locs, |i, j, k| map.locate(i, j, k));
    Ok(labels
        .iter()
        .map(|&label| {
            let Some(src) = src else {
                return vec![0.0; n];
            };
            let onehot: Vec<f32> = src.iter().map(|&l| (l == label) as u8 as f32).collect();
            let mut out = vec![0.0f32; n];
            out.par_iter_mut()
                .zip(locs.par_iter())
                .for_each(|(o, v)| *o = trilinear(&onehot, md, *v));
            out
        })
        .collect())
}

/// Per fixed voxel, `t(p) − p` in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub grid: Grid,
    pub vectors: Vec<[f64; 3]>,
}

pub fn displacement_field(fixed_grid: &Grid, t: &WorldTransform) -> DisplacementField {
    let mut vectors = vec![[0.0; 3]; fixed_grid.len()];
    fill_parallel(fixed_grid, &mut vectors, |i, j, k| {
        let p = WorldPoint::from_array(fixed_grid.affine.apply([i as f64, j as f64, k as f64]));
        let q = t.apply(p);
        [q.x - p.x, q.y - p.y, q.z - p.z]
    });
    DisplacementField {
        grid: *fixed_grid,
        vectors,
    }
}
