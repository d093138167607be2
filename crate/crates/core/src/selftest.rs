//! Built-in verification suite: kernel oracles, adjoint and gradient checks,
//! accounting audits and model invariants on seeded random instances.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;
use crate::network::{basic_block_forward, cross_entropy, BlockWeights, Network, NetworkSpec, Variant};
use crate::neurons::NeuronParams;
use crate::sparse_conv::{
    conv_rows_counted, ssc_backward, ssc_forward, ssc_forward_virtual, swt, vsc_forward_dense, DenseGrid,
    KernelWeights,
};
use crate::sparse_core::{build_rulebook, svt, ConvMode, SparseVoxelTensor, VoxelCoord};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} ({})", self.name, self.detail)
    }
}

/// Random single-batch tensor on a `side^3` grid. Every site carries at least
/// one nonzero channel. With `d_max`, features are integers in `0..=d_max`.
pub fn random_tensor(
    rng: &mut impl Rng,
    side: u32,
    channels: usize,
    density: f64,
    d_max: Option<u32>,
) -> SparseVoxelTensor {
    let volume = (side * side * side) as usize;
    let n = ((volume as f64 * density).round() as usize).clamp(1, volume);
    let mut sites = BTreeSet::new();
    while sites.len() < n {
        sites.insert((
            rng.random_range(0..side as i32),
            rng.random_range(0..side as i32),
            rng.random_range(0..side as i32),
        ));
    }
    let coords: Vec<VoxelCoord> = sites.into_iter().map(|(x, y, z)| VoxelCoord::new(0, x, y, z)).collect();
    let mut f = Matrix::zeros(n, channels);
    for r in 0..n {
        loop {
            for v in f.row_mut(r) {
                *v = match d_max {
                    Some(d) => rng.random_range(0..=d) as f32,
                    None => rng.random_range(-1.0f32..1.0),
                };
            }
            if f.row_is_active(r) {
                break;
            }
        }
    }
    SparseVoxelTensor::new(coords, f, [side; 3]).expect("distinct in-bounds sites")
}

/// Fan-in scaled uniform weights, as the network initializer draws them.
pub fn random_weights(rng: &mut impl Rng, kernel: [usize; 3], c_in: usize, c_out: usize) -> KernelWeights {
    let fan_in = kernel.iter().product::<usize>() * c_in;
    KernelWeights::uniform(kernel, c_in, c_out, 2.0 * (3.0 / fan_in as f32).sqrt(), rng)
}

fn oracle_equivalence(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0f32;
    for n in 0..100 {
        let side = rng.random_range(2..=6);
        let (ci, co) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let density = rng.random_range(0.05..0.5);
        let t = random_tensor(rng, side, ci, density, None);
        let (kernel, stride, mode) = if n % 4 == 3 {
            ([2, 2, 2], [2, 2, 2], ConvMode::Strided)
        } else {
            ([3, 3, 3], [1, 1, 1], ConvMode::Submanifold)
        };
        let w = random_weights(rng, kernel, ci, co);
        let rb = build_rulebook(&t, kernel, stride, mode).expect("valid config");
        let sparse = ssc_forward(&t, &w, &rb).expect("consistent inputs");
        let dense = vsc_forward_dense(&DenseGrid::from_sparse(&t), &w, stride);
        let reference = dense.sample(sparse.coords());
        worst = worst.max(reference.max_abs_diff(sparse.features()));
    }
    CheckResult {
        name: "sparse conv equals dense oracle",
        passed: worst <= 1e-5,
        detail: format!("max abs error {worst:.2e} over 100 instances"),
    }
}

fn adjoint(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0f64;
    for _ in 0..20 {
        let (ci, co) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let t = random_tensor(rng, 5, ci, 0.3, None);
        let w = random_weights(rng, [3, 3, 3], ci, co);
        let rb = build_rulebook(&t, [3, 3, 3], [1, 1, 1], ConvMode::Submanifold).expect("valid");
        let y = ssc_forward(&t, &w, &rb).expect("forward");
        let mut g = Matrix::zeros(y.num_active(), co);
        for v in g.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
        let (gi, gw) = ssc_backward(&g, &t, &w, &rb).expect("backward");
        // <A x, g> = <x, A^T g> and <A_w w, g> = <w, dL/dw>.
        let lhs = y.features().dot(&g);
        let rhs = t.features().dot(&gi);
        let w_side: f64 = w.as_slice().iter().zip(gw.as_slice()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let scale = lhs.abs().max(1.0);
        worst = worst.max((lhs - rhs).abs() / scale).max((lhs - w_side).abs() / scale);
    }
    CheckResult {
        name: "backward is the adjoint of forward",
        passed: worst <= 1e-5,
        detail: format!("max relative mismatch {worst:.2e} over 20 instances"),
    }
}

fn virtual_expansion(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0f32;
    for _ in 0..30 {
        let (ci, co) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let density = rng.random_range(0.05..0.5);
        let t = random_tensor(rng, 6, ci, density, Some(4));
        let w = random_weights(rng, [3, 3, 3], ci, co);
        let rb = build_rulebook(&t, [3, 3, 3], [1, 1, 1], ConvMode::Submanifold).expect("valid");
        let m = ssc_forward(&t, &w, &rb).expect("forward");
        let (v, counts) = ssc_forward_virtual(&t, &w, &rb, 4).expect("virtual");
        worst = worst.max(v.max_abs_diff(m.features()));
        let mut expected = 0u64;
        for o in 0..rb.num_outputs() {
            for &(_, i) in rb.output_entries(o) {
                expected += t.features().row(i as usize).iter().map(|&s| s as u64).sum::<u64>() * co as u64;
            }
        }
        if counts.additions != expected || counts.multiplies != 0 {
            worst = f32::INFINITY;
        }
    }
    CheckResult {
        name: "virtual-timestep accumulation equals matrix forward",
        passed: worst <= 1e-5,
        detail: format!("max abs error {worst:.2e} over 30 instances"),
    }
}

fn op_counts(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0f64;
    for _ in 0..30 {
        let (ci, co) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let density = rng.random_range(0.05..0.5);
        let t = random_tensor(rng, 6, ci, density, Some(4));
        let w = random_weights(rng, [3, 3, 3], ci, co);
        let rb = build_rulebook(&t, [3, 3, 3], [1, 1, 1], ConvMode::Submanifold).expect("valid");
        let (_, c) = conv_rows_counted(t.features(), &w, &rb).expect("forward");
        let mut nnz = 0usize;
        for o in 0..rb.num_outputs() {
            for &(_, i) in rb.output_entries(o) {
                nnz += t.features().row(i as usize).iter().filter(|&&v| v != 0.0).count();
            }
        }
        let fr = nnz as f64 / (rb.total_pairs() * ci).max(1) as f64;
        let predicted = crate::sparse_conv::count_flops(&rb, ci, co, fr);
        let measured = (c.multiplies + c.additions) as f64;
        if predicted > 0.0 {
            worst = worst.max((predicted - measured).abs() / predicted);
        }
    }
    CheckResult {
        name: "instrumented op count matches FLOPs formula",
        passed: worst <= 0.01,
        detail: format!("max relative deviation {worst:.2e}"),
    }
}

fn residual_identity(rng: &mut ChaCha8Rng) -> CheckResult {
    let t = random_tensor(rng, 6, 8, 0.3, None);
    let out = basic_block_forward(&t, &BlockWeights::zeros(8, 2), &NeuronParams::default());
    let passed = matches!(&out, Ok(o) if o.output.features() == t.features() && o.output.coords() == t.coords());
    CheckResult {
        name: "zeroed block is the identity",
        passed,
        detail: "bit-exact comparison".into(),
    }
}

fn small_network(timesteps: usize, seed: u64) -> Network {
    let mut spec = NetworkSpec::variant(Variant::Custom, 3, 3);
    spec.channels_per_stage = [3, 4, 4, 4];
    spec.stem_channels = 3;
    spec.timesteps = timesteps;
    Network::new(spec, seed).expect("valid spec")
}

fn network_gradient(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut net = small_network(2, rng.random());
    let t = random_tensor(rng, 16, 3, 0.05, None);
    let x = t.features().map(|v| v.abs() * 2.0);
    let t = t.with_features(x).expect("same rows");
    let geom = match net.prepare(&t) {
        Ok(g) => g,
        Err(e) => return fail("network gradient matches finite differences", e.to_string()),
    };
    if let Err(e) = net.calibrate(&[(geom.clone(), t.features().clone())], 1.5) {
        return fail("network gradient matches finite differences", e.to_string());
    }
    let tape = net.forward(&geom, t.features()).expect("forward");
    let (_, grads) = net.backward(&tape, 1).expect("backward");
    let h = 1e-2f32;
    let mut worst = 0f64;
    let mut nonzero = 0;
    let layers = net.weights().convs.len() + 1;
    for layer in 0..layers {
        let n = net.weights().tensors().nth(layer).map_or(0, KernelWeights::len);
        for _ in 0..3 {
            let idx = rng.random_range(0..n);
            let orig = net.weights().tensors().nth(layer).expect("layer").as_slice()[idx];
            let mut eval = |v: f32| {
                net.weights_mut().tensors_mut().nth(layer).expect("layer").as_mut_slice()[idx] = v;
                let r = net.forward_linearized(&geom, t.features(), &tape).expect("replay");
                cross_entropy(&r.logits, 1).0 as f64
            };
            let fd = (eval(orig + h) - eval(orig - h)) / (2.0 * h as f64);
            eval(orig);
            let an = grads.tensors().nth(layer).expect("layer").as_slice()[idx] as f64;
            worst = worst.max((fd - an).abs() / (an.abs() + 1e-2));
            nonzero += (an != 0.0) as usize;
        }
    }
    CheckResult {
        name: "network gradient matches finite differences",
        passed: worst <= 2e-2 && nonzero * 2 >= layers * 3,
        detail: format!("max scaled error {worst:.2e}, {nonzero} of {} sampled gradients nonzero", layers * 3),
    }
}

fn fail(name: &'static str, detail: String) -> CheckResult {
    CheckResult {
        name,
        passed: false,
        detail,
    }
}

fn file_roundtrips(rng: &mut ChaCha8Rng) -> CheckResult {
    let t = random_tensor(rng, 6, 4, 0.2, None);
    let mut buf = Vec::new();
    let svt_ok = svt::write_svt(&t, &mut buf).is_ok()
        && svt::read_svt(&buf[..]).is_ok_and(|b| b.coords() == t.coords() && b.features() == t.features());
    let layers = vec![random_weights(rng, [3, 3, 3], 2, 3), random_weights(rng, [2, 2, 2], 3, 4)];
    let mut buf = Vec::new();
    let swt_ok = swt::write_swt(&layers, &mut buf).is_ok() && swt::read_swt(&buf[..]).is_ok_and(|b| b == layers);
    CheckResult {
        name: "tensor and weight files roundtrip",
        passed: svt_ok && swt_ok,
        detail: format!("svt {svt_ok}, swt {swt_ok}"),
    }
}

fn determinism(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut net = small_network(2, rng.random());
    let t = random_tensor(rng, 16, 3, 0.05, None);
    if let Ok(g) = net.prepare(&t) {
        let _ = net.calibrate(&[(g, t.features().clone())], 1.5);
    }
    let run = || {
        let g = net.prepare(&t).ok()?;
        net.forward(&g, t.features()).ok().map(|tape| tape.logits)
    };
    let (a, b) = (run(), run());
    CheckResult {
        name: "forward is deterministic",
        passed: a.is_some() && a == b,
        detail: format!("{a:?}"),
    }
}

/// Runs every check with instances drawn from `seed`.
pub fn run_selftest(seed: u64) -> Vec<CheckResult> {
    let checks: [fn(&mut ChaCha8Rng) -> CheckResult; 8] = [
        oracle_equivalence,
        adjoint,
        virtual_expansion,
        op_counts,
        residual_identity,
        network_gradient,
        file_roundtrips,
        determinism,
    ];
    checks
        .iter()
        .enumerate()
        .map(|(i, f)| f(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_passes() {
        for r in run_selftest(0) {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn random_tensor_rows_are_active() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(&mut rng, 4, 3, 0.5, Some(4));
        assert_eq!(t.num_active(), 32);
        assert!(t.features().active_rows().iter().all(|&a| a));
    }
}
