//! Point-cloud clipping and voxel binning.

use thiserror::Error;

use crate::matrix::Matrix;
use crate::sparse_core::{SparseVoxelTensor, SpatialShape, VoxelCoord};

#[derive(Debug, Error, PartialEq)]
pub enum VoxelError {
    #[error("no points left inside the clip box")]
    EmptyCloud,
    #[error("invalid voxel config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: Option<f32>,
    /// Timestep index; static clouds leave this unset.
    pub t: Option<u32>,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            intensity: None,
            t: None,
        }
    }

    pub fn with_intensity(mut self, i: f32) -> Self {
        self.intensity = Some(i);
        self
    }

    #[inline]
    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureMode {
    /// One channel, always 1.0.
    Occupancy,
    /// Mean point offset from the voxel center in voxel units, 3 channels.
    MeanOffset,
    /// Mean offset plus mean intensity, 4 channels.
    MeanIntensity,
}

impl FeatureMode {
    pub fn channels(self) -> usize {
        match self {
            FeatureMode::Occupancy => 1,
            FeatureMode::MeanOffset => 3,
            FeatureMode::MeanIntensity => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Occupancy => "occupancy",
            FeatureMode::MeanOffset => "mean_offset",
            FeatureMode::MeanIntensity => "mean_intensity",
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = VoxelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "occupancy" => Ok(FeatureMode::Occupancy),
            "mean_offset" | "mean-offset" => Ok(FeatureMode::MeanOffset),
            "mean_intensity" | "mean-intensity" => Ok(FeatureMode::MeanIntensity),
            other => Err(VoxelError::InvalidConfig(format!("unknown feature mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelConfig {
    pub clip_min: [f64; 3],
    pub clip_max: [f64; 3],
    pub voxel_size: [f64; 3],
    pub feature_mode: FeatureMode,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        Self::modelnet()
    }
}

impl VoxelConfig {
    /// Object classification: +-0.2 m on every axis, 0.01 m voxels.
    pub fn modelnet() -> Self {
        Self {
            clip_min: [-0.2; 3],
            clip_max: [0.2; 3],
            voxel_size: [0.01; 3],
            feature_mode: FeatureMode::MeanOffset,
        }
    }

    /// Outdoor LiDAR: (0.05, 0.05, 0.1) m voxels over the usual front-view
    /// range `[0, 70.4] x [-40, 40] x [-3, 1]` m.
    pub fn kitti() -> Self {
        Self {
            clip_min: [0.0, -40.0, -3.0],
            clip_max: [70.4, 40.0, 1.0],
            voxel_size: [0.05, 0.05, 0.1],
            feature_mode: FeatureMode::MeanIntensity,
        }
    }

    pub fn validate(&self) -> Result<(), VoxelError> {
        for a in 0..3 {
            let ok = self.clip_min[a].is_finite()
                && self.clip_max[a].is_finite()
                && self.clip_max[a] > self.clip_min[a];
            if !ok {
                return Err(VoxelError::InvalidConfig(format!(
                    "clip range on axis {a} is empty: [{}, {})",
                    self.clip_min[a], self.clip_max[a]
                )));
            }
            if !(self.voxel_size[a] > 0.0 && self.voxel_size[a].is_finite()) {
                return Err(VoxelError::InvalidConfig(format!(
                    "voxel size on axis {a} must be positive, got {}",
                    self.voxel_size[a]
                )));
            }
        }
        Ok(())
    }

    /// `ceil((clip_max - clip_min) / voxel_size)` per axis, tolerant of
    /// representation error in the ratio.
    pub fn grid_shape(&self) -> SpatialShape {
        let mut s = [0u32; 3];
        for (a, v) in s.iter_mut().enumerate() {
            let ratio = (self.clip_max[a] - self.clip_min[a]) / self.voxel_size[a];
            *v = ((ratio - 1e-9).ceil() as u32).max(1);
        }
        s
    }

    #[inline]
    fn contains(&self, p: &Point) -> bool {
        let q = p.xyz();
        (0..3).all(|a| q[a] >= self.clip_min[a] && q[a] < self.clip_max[a])
    }
}

/// Keeps points with `clip_min <= p < clip_max` on every axis.
pub fn clip_points(pc: &PointCloud, cfg: &VoxelConfig) -> PointCloud {
    PointCloud::new(pc.points.iter().filter(|p| cfg.contains(p)).copied().collect())
}

/// Bins a cloud into voxels `floor((p - clip_min) / voxel_size)` and averages
/// per-voxel features. Clipping is applied first. Voxels come out sorted by
/// coordinate; all carry batch index 0.
pub fn voxelize(pc: &PointCloud, cfg: &VoxelConfig) -> Result<SparseVoxelTensor, VoxelError> {
    cfg.validate()?;
    let shape = cfg.grid_shape();
    let mut binned: Vec<([i32; 3], [f64; 3], f32)> = pc
        .points
        .iter()
        .filter(|p| cfg.contains(p))
        .map(|p| {
            let q = p.xyz();
            let mut idx = [0i32; 3];
            let mut frac = [0f64; 3];
            for a in 0..3 {
                let rel = (q[a] - cfg.clip_min[a]) / cfg.voxel_size[a];
                let i = (rel.floor() as i64).clamp(0, shape[a] as i64 - 1);
                idx[a] = i as i32;
                frac[a] = (rel - i as f64 - 0.5).clamp(-0.5, 0.5);
            }
            (idx, frac, p.intensity.unwrap_or(0.0))
        })
        .collect();
    if binned.is_empty() {
        return Err(VoxelError::EmptyCloud);
    }
    binned.sort_by_key(|b| b.0);

    let mode = cfg.feature_mode;
    let ch = mode.channels();
    let mut coords = Vec::new();
    let mut data = Vec::new();
    let mut start = 0;
    while start < binned.len() {
        let key = binned[start].0;
        let mut end = start;
        let mut off = [0f64; 3];
        let mut inten = 0f64;
        while end < binned.len() && binned[end].0 == key {
            for (o, f) in off.iter_mut().zip(binned[end].1) {
                *o += f;
            }
            inten += binned[end].2 as f64;
            end += 1;
        }
        let n = (end - start) as f64;
        coords.push(VoxelCoord::with_xyz(0, key));
        match mode {
            FeatureMode::Occupancy => data.push(1.0),
            FeatureMode::MeanOffset | FeatureMode::MeanIntensity => {
                data.extend(off.iter().map(|o| (o / n).clamp(-0.5, 0.5) as f32));
                if mode == FeatureMode::MeanIntensity {
                    data.push((inten / n) as f32);
                }
            }
        }
        start = end;
    }
    let features = Matrix::from_vec(coords.len(), ch, data).expect("one row per voxel");
    Ok(SparseVoxelTensor::new(coords, features, shape).expect("binned coordinates are unique and in bounds"))
}
