//! Spiking sparse backbone: voxel-coding stem, four stages of downsample and
//! residual blocks, and a pooled linear classifier.
//!
//! The standalone operations below run a single timestep from a zero
//! neuron state and work directly on tensors. [`Network`] runs the full
//! multi-timestep model with cached per-sample geometry and a backward pass.

mod model;
mod spec;

pub use model::{
    cross_entropy, ConvKind, ConvLayerInfo, ConvStats, ForwardTrace, Gradients, Network,
    NetworkWeights, NeuronLayerInfo, Program, SampleGeometry, StageGeometry, Tape, BLOCK_KERNEL,
    DOWN_KERNEL, DOWN_STRIDE, NUM_STAGES,
};
pub use spec::{NetworkSpec, Variant};

use thiserror::Error;

use crate::matrix::Matrix;
use crate::neurons::{ilif_step, NeuronError, NeuronParams, NeuronState};
use crate::sparse_conv::{conv_rows, ConvError, KernelWeights};
use crate::sparse_core::{ConvGeometry, ConvMode, SparseError, SparseVoxelTensor};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("input tensor has no active voxels")]
    EmptyInput,
    #[error("classifier input has no active sites")]
    EmptyFeatures,
    #[error("residual operands have different coordinate sets")]
    CoordMismatch,
    #[error("channel mismatch: expected {expected}, got {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("weights do not fit the network: {0}")]
    WeightShape(String),
    #[error(transparent)]
    Conv(#[from] ConvError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Neuron(#[from] NeuronError),
}

/// Weights of one residual block: the shortcut conv and the `m` convs of the
/// second half.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub first: KernelWeights,
    pub rest: Vec<KernelWeights>,
}

impl BlockWeights {
    pub fn zeros(channels: usize, depth: usize) -> Self {
        Self {
            first: KernelWeights::zeros(BLOCK_KERNEL, channels, channels),
            rest: (0..depth)
                .map(|_| KernelWeights::zeros(BLOCK_KERNEL, channels, channels))
                .collect(),
        }
    }
}

/// Intermediate potentials of a residual block.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    /// `U' = SSC(SN(U)) + U`.
    pub shortcut: SparseVoxelTensor,
    /// `SSC^m(SN^m(U'))`.
    pub branch: SparseVoxelTensor,
    /// `U'' = branch + U'`, the block output.
    pub output: SparseVoxelTensor,
}

fn fire(u: &Matrix, params: &NeuronParams) -> Result<Matrix, NetworkError> {
    let state = NeuronState::zeros(u.rows(), u.cols());
    Ok(ilif_step(&state, u, params)?.spikes)
}

/// Conv over `x` (rows aligned with `geom`'s inputs), gated by the active
/// rows of `x`; outputs land on every geometric output site, zero where no
/// pair reaches.
fn conv_on_geometry(geom: &ConvGeometry, x: &Matrix, w: &KernelWeights) -> Result<Matrix, NetworkError> {
    let (rb, targets) = geom.gate(&x.active_rows());
    let compact = conv_rows(x, w, &rb)?;
    let mut full = Matrix::zeros(geom.out_coords().len(), w.c_out());
    for (o, &dst) in targets.iter().enumerate() {
        full.row_mut(dst as usize).copy_from_slice(compact.row(o));
    }
    Ok(full)
}

fn submanifold(t: &SparseVoxelTensor, x: &Matrix, w: &KernelWeights) -> Result<Matrix, NetworkError> {
    let geom = ConvGeometry::new(t, BLOCK_KERNEL, [1, 1, 1], ConvMode::Submanifold)?;
    conv_on_geometry(&geom, x, w)
}

fn retensor(t: &SparseVoxelTensor, m: Matrix) -> Result<SparseVoxelTensor, NetworkError> {
    Ok(t.with_features(m)?)
}

/// Stem: `m` repetitions of (3x3x3 submanifold conv, integer LIF).
pub fn svc_encode(
    v: &SparseVoxelTensor,
    weights: &[KernelWeights],
    params: &NeuronParams,
) -> Result<SparseVoxelTensor, NetworkError> {
    if weights.is_empty() {
        return Err(NetworkError::Config("stem needs at least one conv".into()));
    }
    let mut x = v.features().clone();
    for w in weights {
        let u = submanifold(v, &x, w)?;
        x = fire(&u, params)?;
    }
    retensor(v, x)
}

/// Residual block on membrane potentials. Both residual additions are over
/// the shared coordinate set.
pub fn basic_block_forward(
    u: &SparseVoxelTensor,
    weights: &BlockWeights,
    params: &NeuronParams,
) -> Result<BlockOutput, NetworkError> {
    let mut shortcut = submanifold(u, &fire(u.features(), params)?, &weights.first)?;
    if shortcut.shape() != u.features().shape() {
        return Err(NetworkError::CoordMismatch);
    }
    shortcut.add_assign(u.features());
    let mut branch = shortcut.clone();
    for w in &weights.rest {
        branch = submanifold(u, &fire(&branch, params)?, w)?;
    }
    if weights.rest.is_empty() {
        branch = Matrix::zeros(shortcut.rows(), shortcut.cols());
    }
    let mut output = branch.clone();
    output.add_assign(&shortcut);
    Ok(BlockOutput {
        shortcut: retensor(u, shortcut)?,
        branch: retensor(u, branch)?,
        output: retensor(u, output)?,
    })
}

/// Integer LIF followed by a 2x2x2 stride-2 sparse conv. Output sites are
/// the halved coordinates of every input site.
pub fn downsample(
    u: &SparseVoxelTensor,
    weights: &KernelWeights,
    params: &NeuronParams,
) -> Result<SparseVoxelTensor, NetworkError> {
    let geom = ConvGeometry::new(u, DOWN_KERNEL, DOWN_STRIDE, ConvMode::Strided)?;
    let out = conv_on_geometry(&geom, &fire(u.features(), params)?, weights)?;
    Ok(SparseVoxelTensor::new(
        geom.out_coords().to_vec(),
        out,
        geom.out_shape(),
    )?)
}

/// Full backbone over all timesteps. Returns final-stage spikes of the last
/// timestep and the per-layer trace.
pub fn backbone_forward(
    v: &SparseVoxelTensor,
    spec: &NetworkSpec,
    weights: &NetworkWeights,
) -> Result<(SparseVoxelTensor, ForwardTrace), NetworkError> {
    let net = Network::from_weights(spec.clone(), weights.clone())?;
    let geom = net.prepare(v)?;
    let tape = net.forward(&geom, v.features())?;
    let last = geom.stage(NUM_STAGES);
    let spikes = tape.final_spikes(spec.timesteps - 1, net.program()).clone();
    let features = SparseVoxelTensor::new(last.coords.clone(), spikes, last.shape)?;
    Ok((features, tape.trace))
}

/// Global average pool over the tensor's sites, then a linear layer.
pub fn classify_head(
    features: &SparseVoxelTensor,
    head: &KernelWeights,
    num_classes: usize,
) -> Result<Vec<f32>, NetworkError> {
    if features.is_empty() {
        return Err(NetworkError::EmptyFeatures);
    }
    if head.num_offsets() != 1 || head.c_in() != features.channels() || head.c_out() != num_classes {
        return Err(NetworkError::WeightShape(format!(
            "head is {} x {} x {}, features have {} channels for {} classes",
            head.num_offsets(),
            head.c_in(),
            head.c_out(),
            features.channels(),
            num_classes
        )));
    }
    Ok(model::head_logits(head, &model::mean_rows(features.features())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_core::VoxelCoord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(sites: &[[i32; 3]], feats: Vec<Vec<f32>>, shape: [u32; 3]) -> SparseVoxelTensor {
        let coords = sites.iter().map(|p| VoxelCoord::new(0, p[0], p[1], p[2])).collect();
        SparseVoxelTensor::new(coords, Matrix::from_rows(&feats).unwrap(), shape).unwrap()
    }

    fn random_tensor(n: usize, c: usize, side: i32, seed: u64) -> SparseVoxelTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sites = std::collections::BTreeSet::new();
        while sites.len() < n {
            sites.insert([
                rng.random_range(0..side),
                rng.random_range(0..side),
                rng.random_range(0..side),
            ]);
        }
        let sites: Vec<_> = sites.into_iter().collect();
        let feats = (0..n)
            .map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        tensor(&sites, feats, [side as u32; 3])
    }

    #[test]
    fn stem_clips_identity_input() {
        let p = NeuronParams::default();
        let t = tensor(&[[1, 1, 1]], vec![vec![4.4]], [3, 3, 3]);
        let s = svc_encode(&t, &[KernelWeights::identity(BLOCK_KERNEL, 1)], &p).unwrap();
        assert_eq!(s.features().as_slice(), &[4.0]);
        let z = tensor(&[[1, 1, 1]], vec![vec![0.0]], [3, 3, 3]);
        let s = svc_encode(&z, &[KernelWeights::identity(BLOCK_KERNEL, 1)], &p).unwrap();
        assert_eq!(s.features().as_slice(), &[0.0]);
    }

    #[test]
    fn stem_output_is_integer_on_input_support() {
        let p = NeuronParams::default();
        let t = random_tensor(20, 3, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = KernelWeights::uniform(BLOCK_KERNEL, 3, 8, 1.0, &mut rng);
        let s = svc_encode(&t, &[w], &p).unwrap();
        assert_eq!(s.coords(), t.coords());
        assert!(s.features().as_slice().iter().all(|&v| (0.0..=4.0).contains(&v) && v.fract() == 0.0));
    }

    #[test]
    fn zero_block_passes_input() {
        let p = NeuronParams::default();
        let t = random_tensor(30, 4, 6, 3);
        let out = basic_block_forward(&t, &BlockWeights::zeros(4, 2), &p).unwrap();
        assert_eq!(out.shortcut.features(), t.features());
        assert!(out.branch.features().as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(out.output.features(), t.features());
        assert_eq!(out.output.coords(), t.coords());
    }

    #[test]
    fn subthreshold_block_is_identity_on_shortcut() {
        let p = NeuronParams::default();
        let mut t = random_tensor(10, 2, 5, 4);
        let f = t.features().map(|v| v.abs() * 0.49);
        t = t.with_features(f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = BlockWeights::zeros(2, 2);
        w.first = KernelWeights::uniform(BLOCK_KERNEL, 2, 2, 1.0, &mut rng);
        let out = basic_block_forward(&t, &w, &p).unwrap();
        assert_eq!(out.shortcut.features(), t.features());
    }

    #[test]
    fn downsample_merges_cell_and_splits_corners() {
        let p = NeuronParams::default();
        let cell: Vec<[i32; 3]> = (0..8).map(|i| [i & 1, (i >> 1) & 1, (i >> 2) & 1]).collect();
        let t = tensor(&cell, vec![vec![1.0]; 8], [4, 4, 4]);
        let w = KernelWeights::from_vec(DOWN_KERNEL, 1, 1, vec![1.0; 8]).unwrap();
        let d = downsample(&t, &w, &p).unwrap();
        assert_eq!(d.num_active(), 1);
        assert_eq!(d.features().as_slice(), &[8.0]);
        assert_eq!(d.spatial_shape(), [2, 2, 2]);

        let corners: Vec<[i32; 3]> = (0..8).map(|i| [(i & 1) * 3, ((i >> 1) & 1) * 3, ((i >> 2) & 1) * 3]).collect();
        let t = tensor(&corners, vec![vec![1.0]; 8], [4, 4, 4]);
        assert_eq!(downsample(&t, &w, &p).unwrap().num_active(), 8);

        let e = SparseVoxelTensor::new(vec![], Matrix::zeros(0, 1), [4, 4, 4]).unwrap();
        assert!(downsample(&e, &w, &p).unwrap().is_empty());
    }

    #[test]
    fn head_pools_mean() {
        let t = tensor(&[[0, 0, 0], [1, 0, 0]], vec![vec![1.0, 2.0], vec![3.0, 6.0]], [2, 1, 1]);
        let id = KernelWeights::from_vec([1, 1, 1], 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(classify_head(&t, &id, 2).unwrap(), vec![2.0, 4.0]);
        let z = KernelWeights::zeros([1, 1, 1], 2, 3);
        assert_eq!(classify_head(&t, &z, 3).unwrap(), vec![0.0; 3]);
        let e = SparseVoxelTensor::new(vec![], Matrix::zeros(0, 2), [2, 1, 1]).unwrap();
        assert!(matches!(classify_head(&e, &id, 2), Err(NetworkError::EmptyFeatures)));
    }

    #[test]
    fn backbone_runs_on_forty_cubed() {
        let spec = NetworkSpec::variant(Variant::T, 3, 4);
        let t = random_tensor(20, 3, 40, 6);
        let net = Network::new(spec.clone(), 7).unwrap();
        let (feat, trace) = backbone_forward(&t, &spec, net.weights()).unwrap();
        for a in feat.spatial_shape() {
            assert!(a <= 3);
        }
        assert_eq!(feat.channels(), 128);
        assert!(trace.neuron_rates.iter().all(|&(b, _)| (0.0..=1.0).contains(&b)));
        assert_eq!(trace.timesteps, 1);
        let (again, _) = backbone_forward(&t, &spec, net.weights()).unwrap();
        assert_eq!(again.features(), feat.features());
    }

    #[test]
    fn program_matches_standalone_ops() {
        let mut spec = NetworkSpec::variant(Variant::Custom, 2, 3);
        spec.channels_per_stage = [4, 4, 6, 6];
        spec.stem_channels = 4;
        let t = random_tensor(40, 2, 10, 8);
        let net = Network::new(spec.clone(), 9).unwrap();
        let w = &net.weights().convs;
        let p = spec.neuron;
        let mut x = svc_encode(&t, &w[0..2], &p).unwrap();
        let mut i = 2;
        for _ in 0..NUM_STAGES {
            x = downsample(&x, &w[i], &p).unwrap();
            let b = BlockWeights {
                first: w[i + 1].clone(),
                rest: w[i + 2..i + 4].to_vec(),
            };
            x = basic_block_forward(&x, &b, &p).unwrap().output;
            i += 4;
        }
        let (feat, _) = backbone_forward(&t, &spec, net.weights()).unwrap();
        let spikes = fire(x.features(), &p).unwrap();
        assert_eq!(feat.coords(), x.coords());
        assert_eq!(feat.features(), &spikes);
    }
}
