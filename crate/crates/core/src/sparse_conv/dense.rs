//! Dense reference convolution over a full voxel grid.

use super::KernelWeights;
use crate::matrix::Matrix;
use crate::sparse_core::{kernel_offsets, SparseVoxelTensor, VoxelCoord};

/// Dense single-batch grid, `(x, y, z, channel)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrid {
    shape: [usize; 3],
    channels: usize,
    data: Vec<f32>,
}

impl DenseGrid {
    pub fn zeros(shape: [usize; 3], channels: usize) -> Self {
        Self {
            shape,
            channels,
            data: vec![0.0; shape.iter().product::<usize>() * channels],
        }
    }

    /// Scatters a sparse tensor into a dense grid. Batch indices are ignored.
    pub fn from_sparse(t: &SparseVoxelTensor) -> Self {
        let s = t.spatial_shape();
        let mut g = Self::zeros([s[0] as usize, s[1] as usize, s[2] as usize], t.channels());
        for (r, c) in t.coords().iter().enumerate() {
            let base = g.site(c.x as usize, c.y as usize, c.z as usize);
            g.data[base..base + g.channels].copy_from_slice(t.features().row(r));
        }
        g
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn volume(&self) -> usize {
        self.shape.iter().product()
    }

    #[inline]
    fn site(&self, x: usize, y: usize, z: usize) -> usize {
        ((x * self.shape[1] + y) * self.shape[2] + z) * self.channels
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> &[f32] {
        let b = self.site(x, y, z);
        &self.data[b..b + self.channels]
    }

    pub fn at_mut(&mut self, x: usize, y: usize, z: usize) -> &mut [f32] {
        let b = self.site(x, y, z);
        let c = self.channels;
        &mut self.data[b..b + c]
    }

    fn get_padded(&self, p: [i64; 3]) -> Option<&[f32]> {
        if (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.shape[a]) {
            Some(self.at(p[0] as usize, p[1] as usize, p[2] as usize))
        } else {
            None
        }
    }

    /// Feature rows at the given coordinates, in order.
    pub fn sample(&self, coords: &[VoxelCoord]) -> Matrix {
        let mut m = Matrix::zeros(coords.len(), self.channels);
        for (r, c) in coords.iter().enumerate() {
            m.row_mut(r)
                .copy_from_slice(self.at(c.x as usize, c.y as usize, c.z as usize));
        }
        m
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Dense 3D cross-correlation with zero padding:
/// `out[p] = sum_k W_k^T x[p * stride + k]`, output extent `ceil(X / stride)`.
/// Offsets follow the sparse convention (centered for odd kernels, `[0, k)`
/// for even ones).
pub fn vsc_forward_dense(input: &DenseGrid, w: &KernelWeights, stride: [usize; 3]) -> DenseGrid {
    assert_eq!(input.channels(), w.c_in(), "channel mismatch");
    let offsets = kernel_offsets(w.kernel());
    let out_shape = [
        input.shape[0].div_ceil(stride[0]),
        input.shape[1].div_ceil(stride[1]),
        input.shape[2].div_ceil(stride[2]),
    ];
    let mut out = DenseGrid::zeros(out_shape, w.c_out());
    for x in 0..out_shape[0] {
        for y in 0..out_shape[1] {
            for z in 0..out_shape[2] {
                let base = [
                    (x * stride[0]) as i64,
                    (y * stride[1]) as i64,
                    (z * stride[2]) as i64,
                ];
                let mut acc = vec![0.0f32; w.c_out()];
                if let Some(b) = w.bias() {
                    acc.copy_from_slice(b);
                }
                for (k, off) in offsets.iter().enumerate() {
                    let q = [
                        base[0] + off[0] as i64,
                        base[1] + off[1] as i64,
                        base[2] + off[2] as i64,
                    ];
                    let Some(xin) = input.get_padded(q) else {
                        continue;
                    };
                    for (c, &xc) in xin.iter().enumerate() {
                        for (a, &wv) in acc.iter_mut().zip(w.slice(k, c)) {
                            *a += xc * wv;
                        }
                    }
                }
                out.at_mut(x, y, z).copy_from_slice(&acc);
            }
        }
    }
    out
}
