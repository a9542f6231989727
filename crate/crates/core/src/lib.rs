//! Keypoint-driven registration of medical volumes in scanner coordinates.
//!
//! Keypoints are located in world millimeters through each volume's header
//! affine, transforms are solved in closed form from weighted
//! correspondences, and the moving image is sampled exactly once on the
//! fixed image's native grid. Nothing is resampled to a common resolution.

pub mod coords;
pub mod keypoints;
pub mod metrics;
pub mod objective;
pub mod phantom;
pub mod solvers;
pub mod volio;
pub mod volume;
pub mod warp;

pub use coords::{VoxelIndex, WorldAffine, WorldPoint};
pub use keypoints::{ActivationStack, DetectorConfig};
pub use objective::{SimilarityConfig, TransformModel};
pub use phantom::PhantomSpec;
pub use solvers::{AffineTransform, Keypoint, KeypointSet, TpsTransform};
pub use volume::{Grid, Volume};
pub use warp::{Interpolation, WorldTransform};
