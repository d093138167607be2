use std::collections::hash_map::{DefaultHasher, Entry};
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};

use super::SparseError;
use crate::matrix::Matrix;

/// Grid extents `(X, Y, Z)` in voxels.
pub type SpatialShape = [u32; 3];

/// Integer voxel coordinate. Ordering is lexicographic on `(batch, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelCoord {
    pub batch: u32,
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl VoxelCoord {
    pub const fn new(batch: u32, x: i32, y: i32, z: i32) -> Self {
        Self { batch, x, y, z }
    }

    #[inline]
    pub fn xyz(&self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn with_xyz(batch: u32, p: [i32; 3]) -> Self {
        Self::new(batch, p[0], p[1], p[2])
    }

    #[inline]
    pub fn offset(&self, k: [i32; 3]) -> Self {
        Self::new(self.batch, self.x + k[0], self.y + k[1], self.z + k[2])
    }

    #[inline]
    pub fn in_bounds(&self, shape: SpatialShape) -> bool {
        self.xyz()
            .iter()
            .zip(shape)
            .all(|(&c, s)| c >= 0 && (c as i64) < s as i64)
    }
}

impl fmt::Display for VoxelCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.batch, self.x, self.y, self.z)
    }
}

/// Active voxel sites with one feature row each. Immutable once built.
#[derive(Clone)]
pub struct SparseVoxelTensor {
    coords: Vec<VoxelCoord>,
    features: Matrix,
    shape: SpatialShape,
    index: HashMap<VoxelCoord, u32>,
    fingerprint: u64,
}

/// Builds a tensor, checking uniqueness, bounds and the row count.
/// Row `i` of `features` belongs to `coords[i]`.
pub fn make_sparse_tensor(
    coords: Vec<VoxelCoord>,
    features: Matrix,
    spatial_shape: SpatialShape,
) -> Result<SparseVoxelTensor, SparseError> {
    SparseVoxelTensor::new(coords, features, spatial_shape)
}

pub(crate) fn coords_fingerprint(coords: &[VoxelCoord]) -> u64 {
    let mut h = DefaultHasher::new();
    coords.hash(&mut h);
    h.finish()
}

impl SparseVoxelTensor {
    pub fn new(
        coords: Vec<VoxelCoord>,
        features: Matrix,
        shape: SpatialShape,
    ) -> Result<Self, SparseError> {
        if features.rows() != coords.len() {
            return Err(SparseError::ShapeMismatch(format!(
                "{} coordinates but {} feature rows",
                coords.len(),
                features.rows()
            )));
        }
        let mut index = HashMap::with_capacity(coords.len());
        for (row, c) in coords.iter().enumerate() {
            if !c.in_bounds(shape) {
                return Err(SparseError::OutOfBounds {
                    coord: *c,
                    row,
                    shape,
                });
            }
            match index.entry(*c) {
                Entry::Occupied(e) => {
                    return Err(SparseError::DuplicateCoordinate {
                        coord: *c,
                        first: *e.get() as usize,
                        second: row,
                    })
                }
                Entry::Vacant(e) => {
                    e.insert(row as u32);
                }
            }
        }
        let fingerprint = coords_fingerprint(&coords);
        Ok(Self {
            coords,
            features,
            shape,
            index,
            fingerprint,
        })
    }

    /// Same coordinates, new features. Skips re-validation of the coordinates.
    pub fn with_features(&self, features: Matrix) -> Result<Self, SparseError> {
        if features.rows() != self.coords.len() {
            return Err(SparseError::ShapeMismatch(format!(
                "{} coordinates but {} feature rows",
                self.coords.len(),
                features.rows()
            )));
        }
        Ok(Self {
            coords: self.coords.clone(),
            features,
            shape: self.shape,
            index: self.index.clone(),
            fingerprint: self.fingerprint,
        })
    }

    #[inline]
    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    #[inline]
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    #[inline]
    pub fn spatial_shape(&self) -> SpatialShape {
        self.shape
    }

    #[inline]
    pub fn num_active(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Fingerprint of the coordinate list, used to detect stale rulebooks.
    #[inline]
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Row of `c`, or `None` when the site is empty or outside the grid.
    #[inline]
    pub fn lookup(&self, c: &VoxelCoord) -> Option<usize> {
        self.index.get(c).map(|&r| r as usize)
    }

    pub fn into_parts(self) -> (Vec<VoxelCoord>, Matrix, SpatialShape) {
        (self.coords, self.features, self.shape)
    }
}

impl fmt::Debug for SparseVoxelTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SparseVoxelTensor")
            .field("num_active", &self.coords.len())
            .field("channels", &self.features.cols())
            .field("shape", &self.shape)
            .finish()
    }
}
