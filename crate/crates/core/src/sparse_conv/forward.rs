use std::sync::atomic::{AtomicU64, Ordering};

use super::{ConvError, KernelWeights};
use crate::matrix::Matrix;
use crate::neurons::expand_virtual_timesteps;
use crate::par;
use crate::sparse_core::{Rulebook, SparseVoxelTensor};

/// Arithmetic actually executed by one convolution call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub multiplies: u64,
    pub additions: u64,
}

fn check_rows(x: &Matrix, rb: &Rulebook) -> Result<(), ConvError> {
    if x.rows() != rb.num_inputs() {
        return Err(ConvError::StaleRulebook);
    }
    Ok(())
}

fn check_tensor(input: &SparseVoxelTensor, rb: &Rulebook) -> Result<(), ConvError> {
    if input.fingerprint() != rb.input_fingerprint() || input.num_active() != rb.num_inputs() {
        return Err(ConvError::StaleRulebook);
    }
    Ok(())
}

fn wrap(out: Matrix, rb: &Rulebook) -> Result<SparseVoxelTensor, ConvError> {
    Ok(SparseVoxelTensor::new(
        rb.out_coords().to_vec(),
        out,
        rb.out_shape(),
    )?)
}

/// Membrane potential `U_p = sum_k W_k^T S_{p+k}` at every rulebook output.
/// Real-valued; spiking happens in the neuron layers.
pub fn ssc_forward(
    input: &SparseVoxelTensor,
    w: &KernelWeights,
    rb: &Rulebook,
) -> Result<SparseVoxelTensor, ConvError> {
    check_tensor(input, rb)?;
    wrap(conv_rows(input.features(), w, rb)?, rb)
}

/// [`ssc_forward`] that also reports the multiplies it executed.
pub fn ssc_forward_counted(
    input: &SparseVoxelTensor,
    w: &KernelWeights,
    rb: &Rulebook,
) -> Result<(SparseVoxelTensor, OpCounts), ConvError> {
    check_tensor(input, rb)?;
    let (out, counts) = conv_rows_counted(input.features(), w, rb)?;
    Ok((wrap(out, rb)?, counts))
}

/// Convolution over raw feature rows; `x` row `i` is rulebook input `i`.
pub fn conv_rows(x: &Matrix, w: &KernelWeights, rb: &Rulebook) -> Result<Matrix, ConvError> {
    Ok(conv_rows_counted(x, w, rb)?.0)
}

pub fn conv_rows_counted(
    x: &Matrix,
    w: &KernelWeights,
    rb: &Rulebook,
) -> Result<(Matrix, OpCounts), ConvError> {
    w.check_against(rb, x.cols())?;
    check_rows(x, rb)?;
    let c_out = w.c_out();
    let c_in = w.c_in();
    let mut out = Matrix::zeros(rb.num_outputs(), c_out);
    let mults = AtomicU64::new(0);
    par::for_each_row_mut(out.as_mut_slice(), c_out, |o, acc| {
        if let Some(b) = w.bias() {
            acc.copy_from_slice(b);
        }
        let mut local = 0u64;
        for &(k, i) in rb.output_entries(o) {
            let xi = x.row(i as usize);
            for (c, &xc) in xi.iter().enumerate().take(c_in) {
                if xc == 0.0 {
                    continue;
                }
                let wr = w.slice(k as usize, c);
                for (a, &wv) in acc.iter_mut().zip(wr) {
                    *a += xc * wv;
                }
                local += c_out as u64;
            }
        }
        mults.fetch_add(local, Ordering::Relaxed);
    });
    let m = mults.into_inner();
    Ok((
        out,
        OpCounts {
            multiplies: m,
            additions: m,
        },
    ))
}

/// Addition-only convolution of integer spikes: a spike of magnitude `s`
/// adds its weight row `s` times. Multiplies are never executed.
pub fn ssc_forward_accumulate(
    input: &SparseVoxelTensor,
    w: &KernelWeights,
    rb: &Rulebook,
) -> Result<(Matrix, OpCounts), ConvError> {
    check_tensor(input, rb)?;
    let x = input.features();
    w.check_against(rb, x.cols())?;
    let c_out = w.c_out();
    let mut out = Matrix::zeros(rb.num_outputs(), c_out);
    let adds = AtomicU64::new(0);
    let mut bad = None;
    for v in x.as_slice() {
        if !(*v >= 0.0 && v.fract() == 0.0) {
            bad = Some(*v);
            break;
        }
    }
    if let Some(v) = bad {
        return Err(ConvError::ShapeMismatch(format!(
            "accumulate path needs nonnegative integer spikes, found {v}"
        )));
    }
    par::for_each_row_mut(out.as_mut_slice(), c_out, |o, acc| {
        let mut local = 0u64;
        for &(k, i) in rb.output_entries(o) {
            for (c, &s) in x.row(i as usize).iter().enumerate() {
                let reps = s as u32;
                if reps == 0 {
                    continue;
                }
                let wr = w.slice(k as usize, c);
                for _ in 0..reps {
                    for (a, &wv) in acc.iter_mut().zip(wr) {
                        *a += wv;
                    }
                }
                local += reps as u64 * c_out as u64;
            }
        }
        adds.fetch_add(local, Ordering::Relaxed);
    });
    Ok((
        out,
        OpCounts {
            multiplies: 0,
            additions: adds.into_inner(),
        },
    ))
}

/// Forward pass over the virtual-timestep expansion of integer spikes: each
/// binary plane is convolved by weight accumulation and the planes summed.
pub fn ssc_forward_virtual(
    input: &SparseVoxelTensor,
    w: &KernelWeights,
    rb: &Rulebook,
    d_max: u32,
) -> Result<(Matrix, OpCounts), ConvError> {
    check_tensor(input, rb)?;
    w.check_against(rb, input.channels())?;
    let planes = expand_virtual_timesteps(input.features(), d_max)?;
    let c_out = w.c_out();
    let mut out = Matrix::zeros(rb.num_outputs(), c_out);
    let mut total = OpCounts::default();
    for plane in &planes {
        let adds = AtomicU64::new(0);
        par::for_each_row_mut(out.as_mut_slice(), c_out, |o, acc| {
            let mut local = 0u64;
            for &(k, i) in rb.output_entries(o) {
                for (c, &bit) in plane.row(i as usize).iter().enumerate() {
                    if bit != 0.0 {
                        for (a, &wv) in acc.iter_mut().zip(w.slice(k as usize, c)) {
                            *a += wv;
                        }
                        local += c_out as u64;
                    }
                }
            }
            adds.fetch_add(local, Ordering::Relaxed);
        });
        total.additions += adds.into_inner();
    }
    Ok((out, total))
}
