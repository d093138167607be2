//! Coordinate-indexed sparse voxel tensors and the rulebook that drives every
//! sparse convolution in the crate.

mod rulebook;
pub mod svt;
mod tensor;

pub use rulebook::{build_rulebook, kernel_offsets, ConvGeometry, ConvMode, Rulebook};
pub use tensor::{make_sparse_tensor, SparseVoxelTensor, SpatialShape, VoxelCoord};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("duplicate coordinate {coord} at rows {first} and {second}")]
    DuplicateCoordinate {
        coord: VoxelCoord,
        first: usize,
        second: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("coordinate {coord} at row {row} lies outside spatial shape {shape:?}")]
    OutOfBounds {
        coord: VoxelCoord,
        row: usize,
        shape: SpatialShape,
    },
    #[error("invalid kernel {kernel:?}: {reason}")]
    InvalidKernel {
        kernel: [usize; 3],
        reason: &'static str,
    },
    #[error("invalid stride {stride:?}: {reason}")]
    InvalidStride {
        stride: [usize; 3],
        reason: &'static str,
    },
    #[error("malformed .svt data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
