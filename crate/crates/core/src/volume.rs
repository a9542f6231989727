//! Scalar volumes on an oriented voxel grid.
//!
//! Memory order is row-major over `(i, j, k)`: `k` varies fastest. The
//! orientation of the grid in scanner space lives entirely in the affine.

use thiserror::Error;

use crate::coords::{voxel_to_world, VoxelIndex, WorldAffine, WorldPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("grid dimensions must be at least 1 along every axis, got {0:?}")]
    EmptyAxis([usize; 3]),
    #[error("expected {expected} voxels for dims {dims:?}, got {actual}")]
    WrongLength {
        dims: [usize; 3],
        expected: usize,
        actual: usize,
    },
    #[error("intensity at voxel {0} is not finite")]
    NonFinite(usize),
}

/// Voxel extent plus voxel-to-world affine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub affine: WorldAffine,
}

impl Grid {
    pub fn new(dims: [usize; 3], affine: WorldAffine) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::EmptyAxis(dims));
        }
        Ok(Self { dims, affine })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let rest = idx / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], k]
    }

    pub fn world(&self, idx: usize) -> WorldPoint {
        let [i, j, k] = self.unravel(idx);
        voxel_to_world(&self.affine, VoxelIndex::new(i as f64, j as f64, k as f64))
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.affine.spacing()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f32>,
    pub labels: Option<Vec<u16>>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self, VolumeError> {
        if data.len() != grid.len() {
            return Err(VolumeError::WrongLength {
                dims: grid.dims,
                expected: grid.len(),
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self {
            grid,
            data,
            labels: None,
        })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            data: vec![0.0; grid.len()],
            grid,
            labels: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<u16>) -> Result<Self, VolumeError> {
        if labels.len() != self.grid.len() {
            return Err(VolumeError::WrongLength {
                dims: self.grid.dims,
                expected: self.grid.len(),
                actual: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn affine(&self) -> &WorldAffine {
        &self.grid.affine
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.index(i, j, k)]
    }

    /// Sorted distinct non-zero labels.
    pub fn label_set(&self) -> Vec<u16> {
        let mut seen = std::collections::BTreeSet::new();
        if let Some(l) = &self.labels {
            seen.extend(l.iter().copied().filter(|&v| v != 0));
        }
        seen.into_iter().collect()
    }

    pub fn intensity_range(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}
