//! Homogeneous voxel/world geometry.
//!
//! A [`WorldAffine`] is the 4x4 header matrix that takes a (continuous) voxel
//! index `(i, j, k, 1)` to scanner millimeters. All point arithmetic here is
//! written out explicitly so that every consumer (warping, oracles in tests)
//! performs the same floating-point operations in the same order.

use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

/// Smallest admissible |det| of the 3x3 linear block.
pub const SINGULAR_DET: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoordsError {
    #[error("singular affine: |det| of linear block is {det:e}")]
    SingularAffine { det: f64 },
    #[error("affine last row must be (0, 0, 0, 1), got {row:?}")]
    BadLastRow { row: [f64; 4] },
    #[error("affine has non-finite entries")]
    NonFinite,
}

/// Continuous voxel coordinates. Integer values are voxel centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelIndex {
    pub i: f64,
    pub j: f64,
    pub k: f64,
}

impl VoxelIndex {
    pub const fn new(i: f64, j: f64, k: f64) -> Self {
        Self { i, j, k }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.i, self.j, self.k]
    }
}

/// A point in scanner space, millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn distance(self, other: WorldPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Voxel-to-world (or world-to-world) homogeneous map with the last row
/// pinned to `(0, 0, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldAffine {
    m: Matrix4<f64>,
}

impl WorldAffine {
    /// Validates the pinned last row, finiteness and invertibility.
    pub fn new(m: Matrix4<f64>) -> Result<Self, CoordsError> {
        let a = Self::new_unchecked(m)?;
        let det = a.linear().determinant();
        if det.abs() <= SINGULAR_DET {
            return Err(CoordsError::SingularAffine { det });
        }
        Ok(a)
    }

    /// Like [`WorldAffine::new`] but admits a singular linear block. Used for
    /// products and solver output, where singularity is reported later by
    /// whoever needs the inverse.
    pub fn new_unchecked(m: Matrix4<f64>) -> Result<Self, CoordsError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(CoordsError::NonFinite);
        }
        let row = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if row != [0.0, 0.0, 0.0, 1.0] {
            return Err(CoordsError::BadLastRow { row });
        }
        Ok(Self { m })
    }

    pub fn from_rows(rows: [[f64; 4]; 4]) -> Result<Self, CoordsError> {
        Self::new(Matrix4::from_fn(|r, c| rows[r][c]))
    }

    pub fn identity() -> Self {
        Self {
            m: Matrix4::identity(),
        }
    }

    /// Builds `[linear | translation]` with the pinned last row.
    pub fn from_parts(
        linear: &Matrix3<f64>,
        translation: &Vector3<f64>,
    ) -> Result<Self, CoordsError> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(linear);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
        Self::new(m)
    }

    pub fn from_spacing(spacing: [f64; 3], origin: [f64; 3]) -> Result<Self, CoordsError> {
        Self::from_parts(
            &Matrix3::from_diagonal(&Vector3::from(spacing)),
            &Vector3::from(origin),
        )
    }

    pub fn translation_only(t: [f64; 3]) -> Self {
        let mut m = Matrix4::identity();
        m[(0, 3)] = t[0];
        m[(1, 3)] = t[1];
        m[(2, 3)] = t[2];
        Self { m }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.m
    }

    pub fn rows(&self) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.m[(r, c)];
            }
        }
        out
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.m.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.m.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Physical length of one voxel step along each voxel axis.
    pub fn spacing(&self) -> [f64; 3] {
        let l = self.linear();
        [l.column(0).norm(), l.column(1).norm(), l.column(2).norm()]
    }

    /// `(m · (x, y, z, 1))[..3]`, evaluated row by row, left to right.
    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)] * p[2] + m[(0, 3)],
            m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)] * p[2] + m[(1, 3)],
            m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)] * p[2] + m[(2, 3)],
        ]
    }

    /// Applies only the linear block (for direction vectors).
    pub fn apply_linear(&self, d: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[(0, 0)] * d[0] + m[(0, 1)] * d[1] + m[(0, 2)] * d[2],
            m[(1, 0)] * d[0] + m[(1, 1)] * d[1] + m[(1, 2)] * d[2],
            m[(2, 0)] * d[0] + m[(2, 1)] * d[1] + m[(2, 2)] * d[2],
        ]
    }

    pub fn max_abs_diff(&self, other: &WorldAffine) -> f64 {
        (self.m - other.m).abs().max()
    }
}

pub fn voxel_to_world(a: &WorldAffine, v: VoxelIndex) -> WorldPoint {
    WorldPoint::from_array(a.apply(v.to_array()))
}

pub fn world_to_voxel(a: &WorldAffine, p: WorldPoint) -> Result<VoxelIndex, CoordsError> {
    let inv = invert(a)?;
    let v = inv.apply(p.to_array());
    Ok(VoxelIndex::new(v[0], v[1], v[2]))
}

/// `outer ∘ inner`: the map `x ↦ outer · (inner · x)`.
pub fn compose(outer: &WorldAffine, inner: &WorldAffine) -> WorldAffine {
    // The pinned row of `outer` reproduces inner's pinned row exactly.
    WorldAffine {
        m: outer.m * inner.m,
    }
}

pub fn invert(a: &WorldAffine) -> Result<WorldAffine, CoordsError> {
    let l = a.linear();
    let det = l.determinant();
    if det.abs() <= SINGULAR_DET {
        return Err(CoordsError::SingularAffine { det });
    }
    let li = l.try_inverse().ok_or(CoordsError::SingularAffine { det })?;
    let t = -(li * a.translation());
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&li);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    Ok(WorldAffine { m })
}

/// Maps `[-1, 1]` along each axis onto voxel centers `0 ..= dim - 1`.
pub fn normalized_to_voxel(dims: [usize; 3], n: [f64; 3]) -> VoxelIndex {
    let f = |d: usize, x: f64| (x + 1.0) * 0.5 * (d.max(1) - 1) as f64;
    VoxelIndex::new(f(dims[0], n[0]), f(dims[1], n[1]), f(dims[2], n[2]))
}

/// Inverse of [`normalized_to_voxel`]; a singleton axis maps to 0.
pub fn voxel_to_normalized(dims: [usize; 3], v: VoxelIndex) -> [f64; 3] {
    let f = |d: usize, x: f64| {
        if d <= 1 {
            0.0
        } else {
            2.0 * x / (d - 1) as f64 - 1.0
        }
    };
    [f(dims[0], v.i), f(dims[1], v.j), f(dims[2], v.k)]
}
