//! Rulebook-driven sparse convolution.
//!
//! Every convolution is gather -> multiply -> scatter over the pairs of a
//! [`Rulebook`]. For each output row the contributions are accumulated in
//! kernel-offset order, whether the loop runs sequentially or in parallel, so
//! results are bit-reproducible. A dense reference convolution is provided
//! for verification.

mod backward;
mod dense;
mod forward;
pub mod swt;

pub use backward::{conv_backward_rows, ssc_backward};
pub use dense::{vsc_forward_dense, DenseGrid};
pub use forward::{
    conv_rows, conv_rows_counted, ssc_forward, ssc_forward_accumulate, ssc_forward_counted,
    ssc_forward_virtual, OpCounts,
};

use rand::Rng;
use thiserror::Error;

use crate::neurons::NeuronError;
use crate::sparse_core::{Rulebook, SparseError};

#[derive(Debug, Error)]
pub enum ConvError {
    #[error("channel mismatch: weights expect {expected} input channels, got {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("stale rulebook: built for a different coordinate set")]
    StaleRulebook,
    #[error("kernel mismatch: weights have {weights} offsets, rulebook has {rulebook}")]
    KernelMismatch { weights: usize, rulebook: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed weight file: {0}")]
    Format(String),
    #[error(transparent)]
    Neuron(#[from] NeuronError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Weights of a 3D kernel, laid out `(offset, c_in, c_out)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelWeights {
    kernel: [usize; 3],
    c_in: usize,
    c_out: usize,
    data: Vec<f32>,
    bias: Option<Vec<f32>>,
}

impl KernelWeights {
    pub fn zeros(kernel: [usize; 3], c_in: usize, c_out: usize) -> Self {
        let n = kernel.iter().product::<usize>() * c_in * c_out;
        Self {
            kernel,
            c_in,
            c_out,
            data: vec![0.0; n],
            bias: None,
        }
    }

    pub fn from_vec(
        kernel: [usize; 3],
        c_in: usize,
        c_out: usize,
        data: Vec<f32>,
    ) -> Result<Self, ConvError> {
        let n = kernel.iter().product::<usize>() * c_in * c_out;
        if data.len() != n {
            return Err(ConvError::ShapeMismatch(format!(
                "kernel {kernel:?} x {c_in} x {c_out} needs {n} weights, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ConvError::ShapeMismatch("non-finite weight".into()));
        }
        Ok(Self {
            kernel,
            c_in,
            c_out,
            data,
            bias: None,
        })
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(kernel: [usize; 3], c_in: usize, c_out: usize, bound: f32, rng: &mut impl Rng) -> Self {
        let mut w = Self::zeros(kernel, c_in, c_out);
        for v in &mut w.data {
            *v = rng.random_range(-bound..=bound);
        }
        w
    }

    /// Identity map on the center offset; requires an odd kernel.
    pub fn identity(kernel: [usize; 3], channels: usize) -> Self {
        let mut w = Self::zeros(kernel, channels, channels);
        let center = crate::sparse_core::kernel_offsets(kernel)
            .iter()
            .position(|o| *o == [0, 0, 0])
            .expect("odd kernel has a center offset");
        for c in 0..channels {
            w.set(center, c, c, 1.0);
        }
        w
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Result<Self, ConvError> {
        if bias.len() != self.c_out {
            return Err(ConvError::ShapeMismatch(format!(
                "bias length {} for {} output channels",
                bias.len(),
                self.c_out
            )));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    #[inline]
    pub fn kernel(&self) -> [usize; 3] {
        self.kernel
    }

    #[inline]
    pub fn num_offsets(&self) -> usize {
        self.kernel.iter().product()
    }

    #[inline]
    pub fn c_in(&self) -> usize {
        self.c_in
    }

    #[inline]
    pub fn c_out(&self) -> usize {
        self.c_out
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    /// Row of `c_out` weights for offset `k`, input channel `c`.
    #[inline]
    pub fn slice(&self, k: usize, c: usize) -> &[f32] {
        let start = (k * self.c_in + c) * self.c_out;
        &self.data[start..start + self.c_out]
    }

    #[inline]
    pub fn slice_mut(&mut self, k: usize, c: usize) -> &mut [f32] {
        let start = (k * self.c_in + c) * self.c_out;
        &mut self.data[start..start + self.c_out]
    }

    #[inline]
    pub fn get(&self, k: usize, c_in: usize, c_out: usize) -> f32 {
        self.data[(k * self.c_in + c_in) * self.c_out + c_out]
    }

    #[inline]
    pub fn set(&mut self, k: usize, c_in: usize, c_out: usize, v: f32) {
        self.data[(k * self.c_in + c_in) * self.c_out + c_out] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub(crate) fn check_against(&self, rb: &Rulebook, input_cols: usize) -> Result<(), ConvError> {
        if input_cols != self.c_in {
            return Err(ConvError::ChannelMismatch {
                expected: self.c_in,
                found: input_cols,
            });
        }
        if rb.num_offsets() != self.num_offsets() {
            return Err(ConvError::KernelMismatch {
                weights: self.num_offsets(),
                rulebook: rb.num_offsets(),
            });
        }
        Ok(())
    }
}

/// FLOPs of a sparse convolution: `2 * fr * N_r * C_in * C_out`.
pub fn count_flops(rb: &Rulebook, c_in: usize, c_out: usize, firing_rate: f64) -> f64 {
    flops_from_pairs(rb.total_pairs(), c_in, c_out, firing_rate)
}

pub fn flops_from_pairs(pairs: usize, c_in: usize, c_out: usize, firing_rate: f64) -> f64 {
    2.0 * firing_rate * pairs as f64 * c_in as f64 * c_out as f64
}

/// FLOPs of the dense equivalent: `2 * fr * N * k^3 * C_in * C_out`, with `N`
/// output sites and `kernel_volume = k^3`.
pub fn count_flops_dense(
    out_sites: usize,
    kernel_volume: usize,
    c_in: usize,
    c_out: usize,
    firing_rate: f64,
) -> f64 {
    2.0 * firing_rate * out_sites as f64 * kernel_volume as f64 * c_in as f64 * c_out as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::sparse_core::{build_rulebook, make_sparse_tensor, ConvMode, VoxelCoord};

    #[test]
    fn flops_examples() {
        assert_eq!(flops_from_pairs(10, 4, 8, 1.0), 640.0);
        assert_eq!(flops_from_pairs(10, 4, 8, 0.0), 0.0);
        assert_eq!(count_flops_dense(27, 27, 2, 2, 0.5), 2916.0);
    }

    #[test]
    fn count_flops_reads_rulebook() {
        let coords = vec![VoxelCoord::new(0, 0, 0, 0), VoxelCoord::new(0, 1, 0, 0)];
        let t = make_sparse_tensor(coords, Matrix::filled(2, 4, 1.0), [3, 3, 1]).unwrap();
        let rb = build_rulebook(&t, [3, 3, 1], [1, 1, 1], ConvMode::Submanifold).unwrap();
        assert_eq!(count_flops(&rb, 4, 8, 1.0), 2.0 * 4.0 * 4.0 * 8.0);
    }

    #[test]
    fn weights_shape_checked() {
        assert!(KernelWeights::from_vec([3, 3, 3], 2, 2, vec![0.0; 10]).is_err());
        assert!(KernelWeights::from_vec([1, 1, 1], 1, 1, vec![f32::NAN]).is_err());
        let w = KernelWeights::zeros([3, 3, 3], 2, 5);
        assert_eq!(w.len(), 27 * 10);
        assert!(w.clone().with_bias(vec![0.0; 4]).is_err());
        assert!(w.with_bias(vec![0.0; 5]).is_ok());
    }
}
