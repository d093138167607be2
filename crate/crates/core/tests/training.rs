//! Training-loop behaviour at toy scale.

use spike_sparse::matrix::Matrix;
use spike_sparse::network::{Network, NetworkSpec, SampleGeometry, Variant};
use spike_sparse::trainer::{
    batch_gradients, evaluate, fit, make_toy_dataset, prepare_samples, train_step, Optimizer, Sample, TrainConfig,
};
use spike_sparse::voxelizer::VoxelConfig;

fn toy(seed: u64, per_class: usize, net: &Network) -> Vec<Sample> {
    prepare_samples(net, &make_toy_dataset(seed, per_class), &VoxelConfig::modelnet()).unwrap()
}

fn calibrated(seed: u64, data: &[Sample]) -> Network {
    let mut net = Network::new(NetworkSpec::variant(Variant::T, 3, 4), seed).unwrap();
    let probe: Vec<(SampleGeometry, Matrix)> =
        data.iter().take(16).map(|s| (s.geometry.clone(), s.features.clone())).collect();
    net.calibrate(&probe, 1.5).unwrap();
    net
}

#[test]
fn single_sample_overfits() {
    let base = Network::new(NetworkSpec::variant(Variant::T, 3, 4), 0).unwrap();
    let data = toy(3, 1, &base);
    let one = vec![data[1].clone()];
    let mut net = calibrated(0, &one);
    let cfg = TrainConfig { weight_decay: 0.0, cosine: false, lr: 0.05, ..TrainConfig::default() };
    let mut opt = Optimizer::new(&cfg, net.weights());
    let batch: Vec<&Sample> = one.iter().collect();
    let mut last = f32::INFINITY;
    for _ in 0..200 {
        last = train_step(&mut net, &mut opt, &batch, cfg.lr).unwrap().loss;
    }
    let (res, _) = batch_gradients(&net, &batch).unwrap();
    assert!(res.loss < 0.01, "loss after 200 steps {last}, now {}", res.loss);
    assert_eq!(evaluate(&net, &one).unwrap(), 1.0);
}

#[test]
fn loss_decreases_early() {
    let base = Network::new(NetworkSpec::variant(Variant::T, 3, 4), 0).unwrap();
    let data = toy(4, 50, &base);
    let mut net = Network::new(NetworkSpec::variant(Variant::T, 3, 4), 1).unwrap();
    let cfg = TrainConfig { epochs: 4, ..TrainConfig::default() };
    let mut losses = Vec::new();
    fit(&mut net, &data, None, &cfg, |r| losses.push(r.loss), |_| {}).unwrap();
    let mut first: Vec<f32> = losses[..50.min(losses.len())].to_vec();
    let initial = first[0];
    first.sort_by(f32::total_cmp);
    let median = first[first.len() / 2];
    assert!(median < initial, "median {median} vs initial {initial}");
}

#[test]
fn most_weights_receive_gradient_at_init() {
    let base = Network::new(NetworkSpec::variant(Variant::T, 3, 4), 0).unwrap();
    let data = toy(5, 4, &base);
    let net = calibrated(2, &data);
    let batch: Vec<&Sample> = data.iter().collect();
    let (_, g) = batch_gradients(&net, &batch).unwrap();
    let (mut zero, mut total) = (0usize, 0usize);
    for w in &g.convs {
        zero += w.as_slice().iter().filter(|&&v| v == 0.0).count();
        total += w.len();
    }
    let frac = zero as f64 / total as f64;
    assert!(frac < 0.5, "{:.1}% of conv weights have zero gradient", frac * 100.0);
}

#[test]
fn untrained_model_is_near_chance() {
    let base = Network::new(NetworkSpec::variant(Variant::T, 3, 4), 0).unwrap();
    let data = toy(6, 50, &base);
    let net = calibrated(3, &data);
    let acc = evaluate(&net, &data).unwrap();
    assert!((acc - 0.25).abs() <= 0.1, "accuracy {acc}");
}

#[test]
fn fixed_seed_trajectories_repeat() {
    let base = Network::new(NetworkSpec::variant(Variant::T, 3, 4), 0).unwrap();
    let data = toy(7, 4, &base);
    let cfg = TrainConfig { epochs: 2, batch_size: 4, seed: 9, ..TrainConfig::default() };
    let run = || {
        let mut net = Network::new(NetworkSpec::variant(Variant::T, 3, 4), 4).unwrap();
        let mut losses = Vec::new();
        fit(&mut net, &data, None, &cfg, |r| losses.push(r.loss.to_bits()), |_| {}).unwrap();
        (losses, net.weights().clone())
    };
    let (la, wa) = run();
    let (lb, wb) = run();
    assert_eq!(la, lb);
    assert_eq!(wa, wb);
}
