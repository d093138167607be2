//! Surrogate-gradient training through time, optimizers, evaluation and a
//! synthetic four-class shape dataset.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::matrix::Matrix;
use crate::network::{Gradients, Network, NetworkError, NetworkWeights, SampleGeometry};
use crate::par;
use crate::sparse_core::SparseVoxelTensor;
use crate::voxelizer::{voxelize, Point, PointCloud, VoxelConfig, VoxelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at epoch {epoch} step {step}")]
    NonFiniteLoss { loss: f32, epoch: usize, step: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
    Adamw,
}

impl FromStr for OptimizerKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" | "sgd_momentum" => Ok(Self::SgdMomentum),
            "adam" => Ok(Self::Adam),
            "adamw" => Ok(Self::Adamw),
            other => Err(TrainError::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f32,
    /// Cosine decay of the learning rate to zero over all steps.
    pub cosine: bool,
    /// Rescale initial weights on a few training samples so each conv
    /// produces potentials of this RMS. `None` keeps the raw initialization.
    pub calibrate_rms: Option<f32>,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// ModelNet recipe.
    fn default() -> Self {
        Self {
            lr: 0.1,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 200,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            cosine: true,
            calibrate_rms: Some(1.5),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(TrainError::Config("lr must be a finite non-negative number".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(TrainError::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f32 {
        if !self.cosine || total_steps == 0 {
            return self.lr;
        }
        let p = (step as f64 / total_steps as f64).min(1.0);
        (self.lr as f64 * 0.5 * (1.0 + (PI * p).cos())) as f32
    }
}

/// Optimizer state, one buffer per weight tensor.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f32,
    weight_decay: f32,
    m: NetworkWeights,
    v: NetworkWeights,
    t: u32,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, weights: &NetworkWeights) -> Self {
        Self {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            m: weights.zeros_like(),
            v: weights.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, weights: &mut NetworkWeights, grads: &Gradients, lr: f32) {
        self.t += 1;
        let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let wd = self.weight_decay;
        let params = weights.tensors_mut();
        let moments = self.m.tensors_mut().zip(self.v.tensors_mut());
        for ((w, g), (m, v)) in params.zip(grads.tensors()).zip(moments) {
            let w = w.as_mut_slice();
            let g = g.as_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for i in 0..w.len() {
                match self.kind {
                    OptimizerKind::SgdMomentum => {
                        let gi = g[i] + wd * w[i];
                        m[i] = self.momentum * m[i] + gi;
                        w[i] -= lr * m[i];
                    }
                    OptimizerKind::Adam | OptimizerKind::Adamw => {
                        let gi = if self.kind == OptimizerKind::Adam { g[i] + wd * w[i] } else { g[i] };
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        let upd = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                        if self.kind == OptimizerKind::Adamw {
                            w[i] -= lr * wd * w[i];
                        }
                        w[i] -= lr * upd;
                    }
                }
            }
        }
    }
}

/// A voxelized sample with its cached per-stage geometry.
#[derive(Clone, Debug)]
pub struct Sample {
    pub geometry: SampleGeometry,
    pub features: Matrix,
    pub label: usize,
}

impl Sample {
    pub fn new(net: &Network, tensor: &SparseVoxelTensor, label: usize) -> Result<Self, TrainError> {
        Ok(Self {
            geometry: net.prepare(tensor)?,
            features: tensor.features().clone(),
            label,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
    /// Mean nonzero fraction over all neuron layers in the batch.
    pub firing_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct StepResult {
    pub loss: f32,
    pub correct: usize,
    pub firing_rate: f64,
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-sample losses and gradients for a batch, summed in sample order.
pub fn batch_gradients(net: &Network, batch: &[&Sample]) -> Result<(StepResult, Gradients), TrainError> {
    let per: Vec<Result<(f32, bool, f64, Gradients), NetworkError>> = par::map_indices(batch.len(), |i| {
        let s = batch[i];
        let tape = net.forward(&s.geometry, &s.features)?;
        let ok = argmax(&tape.logits) == s.label;
        let fr = mean_rate(&tape.trace.neuron_rates);
        let (loss, g) = net.backward(&tape, s.label)?;
        Ok((loss, ok, fr, g))
    });
    let mut total = net.weights().zeros_like();
    let mut res = StepResult::default();
    for r in per {
        let (loss, ok, fr, g) = r?;
        total.add_assign(&g);
        res.loss += loss;
        res.correct += ok as usize;
        res.firing_rate += fr;
    }
    let n = batch.len().max(1);
    total.scale(1.0 / n as f32);
    res.loss /= n as f32;
    res.firing_rate /= n as f64;
    Ok((res, total))
}

fn mean_rate(rates: &[(f64, f64)]) -> f64 {
    if rates.is_empty() {
        0.0
    } else {
        rates.iter().map(|r| r.0).sum::<f64>() / rates.len() as f64
    }
}

/// One optimizer update on the mean cross-entropy of `batch`.
pub fn train_step(
    net: &mut Network,
    opt: &mut Optimizer,
    batch: &[&Sample],
    lr: f32,
) -> Result<StepResult, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (res, grads) = batch_gradients(net, batch)?;
    if !res.loss.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            loss: res.loss,
            epoch: 0,
            step: 0,
        });
    }
    opt.step(net.weights_mut(), &grads, lr);
    Ok(res)
}

/// Top-1 accuracy.
pub fn evaluate(net: &Network, data: &[Sample]) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let hits: Vec<Result<bool, NetworkError>> = par::map_indices(data.len(), |i| {
        let s = &data[i];
        let tape = net.forward(&s.geometry, &s.features)?;
        Ok(argmax(&tape.logits) == s.label)
    });
    let mut n = 0usize;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / data.len() as f64)
}

/// Predicted class of every sample.
pub fn predict(net: &Network, data: &[Sample]) -> Result<Vec<usize>, TrainError> {
    let out: Vec<Result<usize, NetworkError>> = par::map_indices(data.len(), |i| {
        let s = &data[i];
        Ok(argmax(&net.forward(&s.geometry, &s.features)?.logits))
    });
    out.into_iter().map(|r| r.map_err(TrainError::from)).collect()
}

/// Full training loop. `on_step` receives every step record, `on_epoch`
/// every epoch summary. Shuffling is deterministic in `cfg.seed`.
pub fn fit(
    net: &mut Network,
    train: &[Sample],
    test: Option<&[Sample]>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogRecord),
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(rms) = cfg.calibrate_rms {
        let probe: Vec<(SampleGeometry, Matrix)> = train
            .iter()
            .take(16)
            .map(|s| (s.geometry.clone(), s.features.clone()))
            .collect();
        net.calibrate(&probe, rms)?;
    }
    let mut opt = Optimizer::new(cfg, net.weights());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut loss_sum = 0f32;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let lr = cfg.lr_at(step, total);
            let res = train_step(net, &mut opt, &batch, lr).map_err(|e| match e {
                TrainError::NonFiniteLoss { loss, .. } => TrainError::NonFiniteLoss { loss, epoch, step },
                other => other,
            })?;
            loss_sum += res.loss * batch.len() as f32;
            correct += res.correct;
            on_step(&LogRecord {
                epoch,
                step,
                loss: res.loss,
                lr,
                firing_rate: res.firing_rate,
            });
            step += 1;
        }
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f32,
            train_accuracy: correct as f64 / train.len() as f64,
            test_accuracy: test.map(|t| evaluate(net, t)).transpose()?,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}

pub const TOY_CLASSES: [&str; 4] = ["sphere", "cube", "cross", "cylinder"];

/// Parameters of the synthetic shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub points: usize,
    pub jitter: f64,
    pub sphere_radius: f64,
    pub cube_half: f64,
    pub cross_half: f64,
    pub cylinder_radius: f64,
    pub cylinder_half_height: f64,
    pub rotate: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            points: 512,
            jitter: 0.004,
            sphere_radius: 0.15,
            cube_half: 0.1,
            cross_half: 0.15,
            cylinder_radius: 0.1,
            cylinder_half_height: 0.12,
            rotate: true,
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let n = Normal::new(0.0, 1.0).expect("valid normal");
    loop {
        let v: [f64; 3] = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if r > 1e-9 {
            return [v[0] / r, v[1] / r, v[2] / r];
        }
    }
}

fn shape_point(class: usize, cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match class {
        0 => unit_vector(rng).map(|c| c * cfg.sphere_radius),
        1 => {
            let a = cfg.cube_half;
            let face = rng.random_range(0..6);
            let mut p = [rng.random_range(-a..a), rng.random_range(-a..a), rng.random_range(-a..a)];
            p[face / 2] = if face % 2 == 0 { -a } else { a };
            p
        }
        2 => {
            let a = cfg.cross_half;
            let (u, v) = (rng.random_range(-a..a), rng.random_range(-a..a));
            if rng.random_bool(0.5) {
                [u, 0.0, v]
            } else {
                [0.0, u, v]
            }
        }
        _ => {
            let th = rng.random_range(0.0..2.0 * PI);
            let z = rng.random_range(-cfg.cylinder_half_height..cfg.cylinder_half_height);
            [cfg.cylinder_radius * th.cos(), cfg.cylinder_radius * th.sin(), z]
        }
    }
}

/// One synthetic cloud. Jitter is Gaussian per axis with its norm clamped to
/// three standard deviations.
pub fn toy_cloud(class: usize, cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> PointCloud {
    let phi: f64 = if cfg.rotate { rng.random_range(0.0..2.0 * PI) } else { 0.0 };
    let (s, c) = phi.sin_cos();
    let noise = Normal::new(0.0, cfg.jitter.max(0.0)).unwrap_or_else(|_| Normal::new(0.0, 0.0).expect("zero normal"));
    let points = (0..cfg.points)
        .map(|_| {
            let p = shape_point(class, cfg, rng);
            let mut j = [noise.sample(rng), noise.sample(rng), noise.sample(rng)];
            let norm = (j[0] * j[0] + j[1] * j[1] + j[2] * j[2]).sqrt();
            let cap = 3.0 * cfg.jitter;
            if norm > cap && norm > 0.0 {
                j = j.map(|v| v * cap / norm);
            }
            let (x, y, z) = (p[0] + j[0], p[1] + j[1], p[2] + j[2]);
            Point {
                x: c * x - s * y,
                y: s * x + c * y,
                z,
                intensity: None,
                t: None,
            }
        })
        .collect();
    PointCloud { points }
}

/// `n_per_class` clouds of each class, interleaved by class, deterministic in
/// `seed`.
pub fn make_toy_dataset(seed: u64, n_per_class: usize) -> Vec<(PointCloud, usize)> {
    make_toy_dataset_with(seed, n_per_class, &ToyConfig::default())
}

pub fn make_toy_dataset_with(seed: u64, n_per_class: usize, cfg: &ToyConfig) -> Vec<(PointCloud, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_class * TOY_CLASSES.len());
    for _ in 0..n_per_class {
        for class in 0..TOY_CLASSES.len() {
            out.push((toy_cloud(class, cfg, &mut rng), class));
        }
    }
    out
}

/// Voxelizes labelled clouds and caches their geometry for `net`.
pub fn prepare_samples(
    net: &Network,
    data: &[(PointCloud, usize)],
    voxel: &VoxelConfig,
) -> Result<Vec<Sample>, TrainError> {
    let per: Vec<Result<Sample, TrainError>> = par::map_indices(data.len(), |i| {
        let (pc, label) = &data[i];
        let t = voxelize(pc, voxel)?;
        Sample::new(net, &t, *label)
    });
    per.into_iter().collect()
}
