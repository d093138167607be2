pub mod data_io;
pub mod matrix;
pub mod network;
pub mod neurons;
pub mod par;
pub mod profiler;
pub mod selftest;
pub mod sparse_conv;
pub mod sparse_core;
pub mod trainer;
pub mod voxelizer;
