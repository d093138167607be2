use super::{ConvError, KernelWeights};
use crate::matrix::Matrix;
use crate::par;
use crate::sparse_core::{Rulebook, SparseVoxelTensor};

/// Transpose of [`super::ssc_forward`]: over every pair `(i, o)` of offset
/// `k`, `grad_input[i] += W_k grad_out[o]` and `grad_w[k] += S_i grad_out[o]^T`.
pub fn ssc_backward(
    grad_out: &Matrix,
    input: &SparseVoxelTensor,
    w: &KernelWeights,
    rb: &Rulebook,
) -> Result<(Matrix, KernelWeights), ConvError> {
    if input.fingerprint() != rb.input_fingerprint() {
        return Err(ConvError::StaleRulebook);
    }
    let (gi, gw) = conv_backward_rows(grad_out, input.features(), w, rb, true)?;
    Ok((gi.expect("requested"), gw))
}

/// Row-level backward. The input gradient is skipped when `want_input_grad`
/// is false (first layer of a network).
pub fn conv_backward_rows(
    grad_out: &Matrix,
    x: &Matrix,
    w: &KernelWeights,
    rb: &Rulebook,
    want_input_grad: bool,
) -> Result<(Option<Matrix>, KernelWeights), ConvError> {
    w.check_against(rb, x.cols())?;
    if x.rows() != rb.num_inputs() {
        return Err(ConvError::StaleRulebook);
    }
    if grad_out.shape() != (rb.num_outputs(), w.c_out()) {
        return Err(ConvError::ShapeMismatch(format!(
            "grad_out is {:?}, expected ({}, {})",
            grad_out.shape(),
            rb.num_outputs(),
            w.c_out()
        )));
    }
    let c_in = w.c_in();
    let c_out = w.c_out();

    let grad_input = want_input_grad.then(|| {
        let (ptr, entries) = rb.input_major();
        let mut gi = Matrix::zeros(x.rows(), c_in);
        par::for_each_row_mut(gi.as_mut_slice(), c_in, |i, acc| {
            for &(k, o) in &entries[ptr[i] as usize..ptr[i + 1] as usize] {
                let g = grad_out.row(o as usize);
                for (c, a) in acc.iter_mut().enumerate() {
                    let wr = w.slice(k as usize, c);
                    let mut s = 0.0f32;
                    for (&wv, &gv) in wr.iter().zip(g) {
                        s += wv * gv;
                    }
                    *a += s;
                }
            }
        });
        gi
    });

    let per_offset = par::map_indices(rb.num_offsets(), |k| {
        let mut gk = vec![0.0f32; c_in * c_out];
        for &(i, o) in rb.pairs(k) {
            let xi = x.row(i as usize);
            let g = grad_out.row(o as usize);
            for (c, &xc) in xi.iter().enumerate() {
                if xc == 0.0 {
                    continue;
                }
                for (a, &gv) in gk[c * c_out..(c + 1) * c_out].iter_mut().zip(g) {
                    *a += xc * gv;
                }
            }
        }
        gk
    });
    let mut gw = KernelWeights::zeros(w.kernel(), c_in, c_out);
    let block = c_in * c_out;
    for (k, gk) in per_offset.into_iter().enumerate() {
        gw.as_mut_slice()[k * block..(k + 1) * block].copy_from_slice(&gk);
    }
    Ok((grad_input, gw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_core::{build_rulebook, make_sparse_tensor, ConvMode, VoxelCoord};

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let coords = vec![VoxelCoord::new(0, 0, 0, 0), VoxelCoord::new(0, 1, 0, 0)];
        let t = make_sparse_tensor(coords, Matrix::filled(2, 2, 1.0), [3, 3, 1]).unwrap();
        let rb = build_rulebook(&t, [3, 3, 1], [1, 1, 1], ConvMode::Submanifold).unwrap();
        let w = KernelWeights::from_vec([3, 3, 1], 2, 3, (0..54).map(|v| v as f32).collect()).unwrap();
        let (gi, gw) = ssc_backward(&Matrix::zeros(2, 3), &t, &w, &rb).unwrap();
        assert!(gi.as_slice().iter().all(|&v| v == 0.0));
        assert!(gw.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pair_weight_gradient() {
        let t = make_sparse_tensor(vec![VoxelCoord::new(0, 0, 0, 0)], Matrix::filled(1, 1, 1.0), [2, 2, 2])
            .unwrap();
        let rb = build_rulebook(&t, [1, 1, 1], [1, 1, 1], ConvMode::Submanifold).unwrap();
        let w = KernelWeights::from_vec([1, 1, 1], 1, 1, vec![0.7]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![-2.5]).unwrap();
        let (gi, gw) = ssc_backward(&g, &t, &w, &rb).unwrap();
        assert_eq!(gw.as_slice(), &[-2.5]);
        assert_eq!(gi.as_slice(), &[0.7 * -2.5]);
    }

    #[test]
    fn grad_out_shape_checked() {
        let t = make_sparse_tensor(vec![VoxelCoord::new(0, 0, 0, 0)], Matrix::filled(1, 1, 1.0), [2, 2, 2])
            .unwrap();
        let rb = build_rulebook(&t, [1, 1, 1], [1, 1, 1], ConvMode::Submanifold).unwrap();
        let w = KernelWeights::zeros([1, 1, 1], 1, 1);
        assert!(matches!(
            ssc_backward(&Matrix::zeros(2, 1), &t, &w, &rb),
            Err(ConvError::ShapeMismatch(_))
        ));
    }
}
