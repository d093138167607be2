//! LIF and integer-LIF neuron dynamics.
//!
//! The binary LIF neuron integrates `U = H + I`, fires `S = [U >= V_th]` and
//! keeps `H = beta * (U - S)`. The integer variant replaces the firing
//! function with `S = round(clip(U, 0, D))`; its surrogate gradient is the
//! rectangular window `0 <= U <= D`.

use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum NeuronError {
    #[error("shape mismatch: state {state:?} vs input {input:?}")]
    ShapeMismatch {
        state: (usize, usize),
        input: (usize, usize),
    },
    #[error("spike value {value} at ({row},{col}) is not an integer in [0, {d_max}]")]
    ValueOutOfRange {
        value: f32,
        row: usize,
        col: usize,
        d_max: u32,
    },
    #[error("invalid neuron parameters: {0}")]
    InvalidParams(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronParams {
    /// Leak factor applied after the reset, in (0, 1].
    pub beta: f32,
    /// Firing threshold of the binary neuron.
    pub v_th: f32,
    /// Largest integer spike emitted by the integer neuron.
    pub d_max: u32,
}

impl Default for NeuronParams {
    fn default() -> Self {
        Self {
            beta: 0.5,
            v_th: 1.0,
            d_max: 4,
        }
    }
}

impl NeuronParams {
    pub fn new(beta: f32, v_th: f32, d_max: u32) -> Result<Self, NeuronError> {
        let p = Self { beta, v_th, d_max };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), NeuronError> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(NeuronError::InvalidParams("beta must lie in (0, 1]"));
        }
        if self.v_th.is_nan() || self.v_th <= 0.0 {
            return Err(NeuronError::InvalidParams("v_th must be positive"));
        }
        if self.d_max < 1 {
            return Err(NeuronError::InvalidParams("d_max must be at least 1"));
        }
        Ok(())
    }
}

/// Post-reset membrane potential `H` of one neuron layer, one entry per site
/// and channel. Starts at zero for every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState {
    pub h: Matrix,
}

impl NeuronState {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            h: Matrix::zeros(rows, cols),
        }
    }

    fn check(&self, input: &Matrix) -> Result<(), NeuronError> {
        if self.h.shape() != input.shape() {
            return Err(NeuronError::ShapeMismatch {
                state: self.h.shape(),
                input: input.shape(),
            });
        }
        Ok(())
    }
}

/// One binary LIF update. Fires at `U >= V_th`.
pub fn lif_step(
    state: &NeuronState,
    input_current: &Matrix,
    params: &NeuronParams,
) -> Result<(Matrix, NeuronState), NeuronError> {
    state.check(input_current)?;
    let (rows, cols) = input_current.shape();
    let mut spikes = Matrix::zeros(rows, cols);
    let mut h = Matrix::zeros(rows, cols);
    let it = state
        .h
        .as_slice()
        .iter()
        .zip(input_current.as_slice())
        .zip(spikes.as_mut_slice().iter_mut().zip(h.as_mut_slice()));
    for ((&hp, &x), (s, hn)) in it {
        let u = hp + x;
        *s = if u >= params.v_th { 1.0 } else { 0.0 };
        *hn = params.beta * (u - *s);
    }
    Ok((spikes, NeuronState { h }))
}

/// Integer firing function `round(clip(u, 0, D))`, ties away from zero.
#[inline]
pub fn ilif_fire(u: f32, d_max: u32) -> f32 {
    u.clamp(0.0, d_max as f32).round()
}

/// Rectangular surrogate window: 1 inside `[0, D]`, else 0.
#[inline]
pub fn ilif_window(u: f32, d_max: u32) -> bool {
    (0.0..=d_max as f32).contains(&u)
}

pub fn ilif_forward(u: &Matrix, d_max: u32) -> Matrix {
    u.map(|v| ilif_fire(v, d_max))
}

pub fn ilif_surrogate_mask(u: &Matrix, d_max: u32) -> Matrix {
    u.map(|v| if ilif_window(v, d_max) { 1.0 } else { 0.0 })
}

/// Output of one integer-LIF update, with what the backward pass needs.
#[derive(Clone, Debug)]
pub struct IlifStep {
    /// Membrane potential `U = H_prev + I` before firing.
    pub u: Matrix,
    pub spikes: Matrix,
    pub state: NeuronState,
}

/// One integer-LIF update with the same membrane recurrence as [`lif_step`].
pub fn ilif_step(
    state: &NeuronState,
    input_current: &Matrix,
    params: &NeuronParams,
) -> Result<IlifStep, NeuronError> {
    state.check(input_current)?;
    let (rows, cols) = input_current.shape();
    let mut u = state.h.clone();
    u.add_assign(input_current);
    let spikes = ilif_forward(&u, params.d_max);
    let mut h = Matrix::zeros(rows, cols);
    for ((hn, &uu), &s) in h
        .as_mut_slice()
        .iter_mut()
        .zip(u.as_slice())
        .zip(spikes.as_slice())
    {
        *hn = params.beta * (uu - s);
    }
    Ok(IlifStep {
        u,
        spikes,
        state: NeuronState { h },
    })
}

/// Backward through one integer-LIF update.
///
/// `grad_spikes` is dL/dS at this step, `grad_h_next` is dL/dH carried from
/// the following timestep (zero at the last one). Returns dL/dU, which is
/// both the gradient of the input current and of the previous `H`.
pub fn ilif_step_backward(
    u: &Matrix,
    grad_spikes: &Matrix,
    grad_h_next: Option<&Matrix>,
    params: &NeuronParams,
) -> Matrix {
    let mut g = Matrix::zeros(u.rows(), u.cols());
    let out = g.as_mut_slice();
    for (idx, (&uu, &gs)) in u.as_slice().iter().zip(grad_spikes.as_slice()).enumerate() {
        let inside = ilif_window(uu, params.d_max);
        let mut v = if inside { gs } else { 0.0 };
        if let Some(gh) = grad_h_next {
            // dH/dU = beta * (1 - dS/dU)
            if !inside {
                v += params.beta * gh.as_slice()[idx];
            }
        }
        out[idx] = v;
    }
    g
}

fn check_spikes(s: &Matrix, d_max: u32) -> Result<(), NeuronError> {
    for r in 0..s.rows() {
        for (c, &v) in s.row(r).iter().enumerate() {
            if !(v >= 0.0 && v <= d_max as f32 && v.fract() == 0.0) {
                return Err(NeuronError::ValueOutOfRange {
                    value: v,
                    row: r,
                    col: c,
                    d_max,
                });
            }
        }
    }
    Ok(())
}

/// Thermometer code of integer spikes: plane `j` (0-based) holds `s > j`.
/// The planes sum back to `s`.
pub fn expand_virtual_timesteps(s: &Matrix, d_max: u32) -> Result<Vec<Matrix>, NeuronError> {
    check_spikes(s, d_max)?;
    Ok((0..d_max)
        .map(|j| s.map(|v| if v > j as f32 { 1.0 } else { 0.0 }))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m1(v: f32) -> Matrix {
        Matrix::from_vec(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn lif_quiescent() {
        let p = NeuronParams::default();
        let (s, st) = lif_step(&NeuronState::zeros(1, 1), &m1(0.0), &p).unwrap();
        assert_eq!(s.get(0, 0), 0.0);
        assert_eq!(st.h.get(0, 0), 0.0);
    }

    #[test]
    fn lif_fires_at_threshold() {
        let p = NeuronParams::new(0.5, 1.0, 4).unwrap();
        let (s, st) = lif_step(&NeuronState::zeros(1, 1), &m1(1.0), &p).unwrap();
        assert_eq!(s.get(0, 0), 1.0);
        assert_eq!(st.h.get(0, 0), 0.5 * (1.0 - 1.0));
    }

    #[test]
    fn lif_subthreshold_leak() {
        let p = NeuronParams::new(0.5, 1.0, 4).unwrap();
        let state = NeuronState { h: m1(0.4) };
        let (s, st) = lif_step(&state, &m1(0.4), &p).unwrap();
        assert_eq!(s.get(0, 0), 0.0);
        assert!((st.h.get(0, 0) - 0.4).abs() < 1e-7);
    }

    #[test]
    fn lif_shape_mismatch() {
        let err = lif_step(&NeuronState::zeros(2, 1), &m1(0.0), &NeuronParams::default());
        assert!(matches!(err, Err(NeuronError::ShapeMismatch { .. })));
    }

    #[test]
    fn ilif_examples() {
        assert_eq!(ilif_fire(2.6, 4), 3.0);
        assert_eq!(ilif_fire(-1.3, 4), 0.0);
        assert_eq!(ilif_fire(7.2, 4), 4.0);
        assert_eq!(ilif_fire(2.5, 4), 3.0);
        assert_eq!(ilif_fire(0.49, 4), 0.0);
    }

    #[test]
    fn surrogate_window_examples() {
        assert!(ilif_window(2.0, 4));
        assert!(!ilif_window(-0.1, 4));
        assert!(ilif_window(4.0, 4));
        assert!(ilif_window(0.0, 4));
        assert!(!ilif_window(4.01, 4));
    }

    #[test]
    fn thermometer_examples() {
        let s = Matrix::from_vec(1, 3, vec![3.0, 0.0, 4.0]).unwrap();
        let planes = expand_virtual_timesteps(&s, 4).unwrap();
        let col = |c: usize| planes.iter().map(|p| p.get(0, c)).collect::<Vec<_>>();
        assert_eq!(col(0), vec![1., 1., 1., 0.]);
        assert_eq!(col(1), vec![0., 0., 0., 0.]);
        assert_eq!(col(2), vec![1., 1., 1., 1.]);
    }

    #[test]
    fn thermometer_rejects_out_of_range() {
        for bad in [5.0, -1.0, 1.5] {
            let err = expand_virtual_timesteps(&m1(bad), 4).unwrap_err();
            assert!(matches!(err, NeuronError::ValueOutOfRange { .. }));
        }
    }

    #[test]
    fn invalid_params() {
        assert!(NeuronParams::new(0.0, 1.0, 4).is_err());
        assert!(NeuronParams::new(1.5, 1.0, 4).is_err());
        assert!(NeuronParams::new(0.5, 0.0, 4).is_err());
        assert!(NeuronParams::new(0.5, 1.0, 0).is_err());
        assert!(NeuronParams::new(1.0, 1.0, 1).is_ok());
    }

    #[test]
    fn ilif_state_recurrence() {
        let p = NeuronParams::new(0.5, 1.0, 4).unwrap();
        let step = ilif_step(&NeuronState { h: m1(0.2) }, &m1(2.2), &p).unwrap();
        assert!((step.u.get(0, 0) - 2.4).abs() < 1e-6);
        assert_eq!(step.spikes.get(0, 0), 2.0);
        assert!((step.state.h.get(0, 0) - 0.2).abs() < 1e-6);
    }

    #[test]
    fn ilif_backward_window_and_leak() {
        let p = NeuronParams::new(0.5, 1.0, 4).unwrap();
        let u = Matrix::from_vec(1, 2, vec![1.0, 9.0]).unwrap();
        let gs = Matrix::from_vec(1, 2, vec![2.0, 2.0]).unwrap();
        let gh = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let g = ilif_step_backward(&u, &gs, Some(&gh), &p);
        // inside: dS/dU = 1, dH/dU = 0; outside: dS/dU = 0, dH/dU = beta
        assert_eq!(g.as_slice(), &[2.0, 0.5]);
    }

    proptest! {
        #[test]
        fn ilif_range_and_monotone(a in -10.0f32..10.0, b in -10.0f32..10.0, d in 1u32..8) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (sl, sh) = (ilif_fire(lo, d), ilif_fire(hi, d));
            prop_assert!(sl <= sh);
            prop_assert!(sl >= 0.0 && sh <= d as f32 && sh.fract() == 0.0);
        }

        #[test]
        fn lif_binary_and_reset(h in -2.0f32..2.0, x in -2.0f32..3.0, beta in 0.05f32..1.0) {
            let p = NeuronParams::new(beta, 1.0, 4).unwrap();
            let (s, st) = lif_step(&NeuronState { h: m1(h) }, &m1(x), &p).unwrap();
            let s = s.get(0, 0);
            prop_assert!(s == 0.0 || s == 1.0);
            if s == 1.0 {
                prop_assert!(st.h.get(0, 0) < h + x);
            }
        }

        #[test]
        fn thermometer_sums_back(vals in proptest::collection::vec(0u32..=4, 1..30)) {
            let s = Matrix::from_vec(1, vals.len(), vals.iter().map(|&v| v as f32).collect()).unwrap();
            let planes = expand_virtual_timesteps(&s, 4).unwrap();
            let mut sum = Matrix::zeros(1, vals.len());
            for p in &planes {
                prop_assert!(p.as_slice().iter().all(|&b| b == 0.0 || b == 1.0));
                sum.add_assign(p);
            }
            prop_assert_eq!(sum, s);
        }
    }
}
