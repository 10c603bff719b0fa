//! Aligns a collection of object images to a shared canonical voxel shape.
//!
//! The engine estimates a camera pose and field of view per image by
//! analysis-by-synthesis against a frozen [`field::VoxelField`], then fits
//! dense canonical coordinate mappings between every image and the shape.
//! Those mappings transfer keypoints and pixels between images. A synthetic
//! scene generator ([`synth`]) supplies exact ground truth for every stage.
//!
//! Module map:
//!
//! * [`geometry`]: rigid transforms, se(3) exponential/logarithm, pinhole cameras.
//! * [`field`]: voxel grids with trilinear sampling and NOCS normalization.
//! * [`render`]: volumetric rendering of color, mask, NOCS and descriptors.
//! * [`metric`]: semantic and IoU image distances.
//! * [`pose_fit`]: candidate-grid initialization and finite-difference refinement.
//! * [`warp`]: 2D warp fitting, 2D/3D lifts and their inverses, transfer.
//! * [`eval`]: Procrustes pose errors, PCK and the nearest-neighbor baseline.
//! * [`synth`]: procedural shapes and posed multi-view datasets.
//! * [`dataio`]: tensor, netpbm, manifest and pose file formats.
//! * [`pipeline`]: end-to-end orchestration used by the command-line tool.

pub mod dataio;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod metric;
pub mod optim;
pub mod pipeline;
pub mod pose_fit;
pub mod raster;
pub mod render;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};
