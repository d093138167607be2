//! The backbone as a flat program of conv, spike and add nodes over
//! per-stage activation slots, with a tape-based backward pass through time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::NetworkSpec;
use super::NetworkError;
use crate::matrix::Matrix;
use crate::neurons::{ilif_step, ilif_step_backward, ilif_window, NeuronState};
use crate::sparse_conv::{conv_backward_rows, conv_rows_counted, KernelWeights};
use crate::sparse_core::{
    ConvGeometry, ConvMode, Rulebook, SparseVoxelTensor, SpatialShape, VoxelCoord,
};

pub const NUM_STAGES: usize = 4;
pub const BLOCK_KERNEL: [usize; 3] = [3, 3, 3];
pub const DOWN_KERNEL: [usize; 3] = [2, 2, 2];
pub const DOWN_STRIDE: [usize; 3] = [2, 2, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// 3x3x3 submanifold conv within a stage.
    Submanifold,
    /// 2x2x2 stride-2 conv into the next stage.
    Down,
}

#[derive(Clone, Debug)]
pub struct ConvLayerInfo {
    pub name: String,
    pub kind: ConvKind,
    pub stage_in: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvLayerInfo {
    pub fn kernel(&self) -> [usize; 3] {
        match self.kind {
            ConvKind::Submanifold => BLOCK_KERNEL,
            ConvKind::Down => DOWN_KERNEL,
        }
    }

    pub fn stage_out(&self) -> usize {
        match self.kind {
            ConvKind::Submanifold => self.stage_in,
            ConvKind::Down => self.stage_in + 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NeuronLayerInfo {
    pub name: String,
    pub stage: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug)]
enum Node {
    Conv { layer: usize, input: usize, output: usize },
    Spike { neuron: usize, input: usize, output: usize },
    Add { a: usize, b: usize, output: usize },
}

/// Layer order and dataflow derived from a [`NetworkSpec`].
#[derive(Clone, Debug)]
pub struct Program {
    nodes: Vec<Node>,
    convs: Vec<ConvLayerInfo>,
    neurons: Vec<NeuronLayerInfo>,
    num_slots: usize,
    final_slot: usize,
    final_channels: usize,
}

struct Builder {
    p: Program,
}

impl Builder {
    fn slot(&mut self) -> usize {
        self.p.num_slots += 1;
        self.p.num_slots - 1
    }

    fn conv(&mut self, name: String, kind: ConvKind, stage_in: usize, c_in: usize, c_out: usize, input: usize) -> usize {
        let output = self.slot();
        let layer = self.p.convs.len();
        self.p.convs.push(ConvLayerInfo {
            name,
            kind,
            stage_in,
            c_in,
            c_out,
        });
        self.p.nodes.push(Node::Conv { layer, input, output });
        output
    }

    fn spike(&mut self, name: String, stage: usize, channels: usize, input: usize) -> usize {
        let output = self.slot();
        let neuron = self.p.neurons.len();
        self.p.neurons.push(NeuronLayerInfo {
            name,
            stage,
            channels,
        });
        self.p.nodes.push(Node::Spike { neuron, input, output });
        output
    }

    fn add(&mut self, a: usize, b: usize) -> usize {
        let output = self.slot();
        self.p.nodes.push(Node::Add { a, b, output });
        output
    }
}

impl Program {
    pub fn build(spec: &NetworkSpec) -> Self {
        let mut b = Builder {
            p: Program {
                nodes: Vec::new(),
                convs: Vec::new(),
                neurons: Vec::new(),
                num_slots: 1,
                final_slot: 0,
                final_channels: 0,
            },
        };
        let mut x = 0;
        let mut c = spec.in_channels;
        for j in 0..spec.svc_depth {
            let u = b.conv(format!("svc.conv{j}"), ConvKind::Submanifold, 0, c, spec.stem_channels, x);
            x = b.spike(format!("svc.sn{j}"), 0, spec.stem_channels, u);
            c = spec.stem_channels;
        }
        let mut cur = x;
        for l in 0..NUM_STAGES {
            let ch = spec.channels_per_stage[l];
            let s = b.spike(format!("stage{}.down.sn", l + 1), l, c, cur);
            let mut u = b.conv(format!("stage{}.down.conv", l + 1), ConvKind::Down, l, c, ch, s);
            c = ch;
            let stage = l + 1;
            for blk in 0..spec.blocks_per_stage[l] {
                let tag = format!("stage{}.block{}", stage, blk);
                let s = b.spike(format!("{tag}.sn0"), stage, c, u);
                let conv = b.conv(format!("{tag}.conv0"), ConvKind::Submanifold, stage, c, c, s);
                let shortcut = b.add(conv, u);
                let mut y = shortcut;
                for i in 0..spec.block_depth {
                    let s = b.spike(format!("{tag}.sn{}", i + 1), stage, c, y);
                    y = b.conv(format!("{tag}.conv{}", i + 1), ConvKind::Submanifold, stage, c, c, s);
                }
                u = if spec.block_depth > 0 { b.add(y, shortcut) } else { shortcut };
            }
            cur = u;
        }
        let head = b.spike("head.sn".into(), NUM_STAGES, c, cur);
        b.p.final_slot = head;
        b.p.final_channels = c;
        b.p
    }

    pub fn convs(&self) -> &[ConvLayerInfo] {
        &self.convs
    }

    pub fn neurons(&self) -> &[NeuronLayerInfo] {
        &self.neurons
    }

    pub fn final_channels(&self) -> usize {
        self.final_channels
    }
}

/// Coordinates and neighbour tables of every stage for one input sample.
#[derive(Clone, Debug)]
pub struct SampleGeometry {
    stages: Vec<StageGeometry>,
}

#[derive(Clone, Debug)]
pub struct StageGeometry {
    pub coords: Vec<VoxelCoord>,
    pub shape: SpatialShape,
    submanifold: ConvGeometry,
    down: Option<ConvGeometry>,
}

impl SampleGeometry {
    pub fn build(input: &SparseVoxelTensor) -> Result<Self, NetworkError> {
        if input.is_empty() {
            return Err(NetworkError::EmptyInput);
        }
        let mut stages = Vec::with_capacity(NUM_STAGES + 1);
        let mut tensor = SparseVoxelTensor::new(
            input.coords().to_vec(),
            Matrix::zeros(input.num_active(), 0),
            input.spatial_shape(),
        )?;
        for s in 0..=NUM_STAGES {
            let submanifold = ConvGeometry::new(&tensor, BLOCK_KERNEL, [1, 1, 1], ConvMode::Submanifold)?;
            let down = (s < NUM_STAGES)
                .then(|| ConvGeometry::new(&tensor, DOWN_KERNEL, DOWN_STRIDE, ConvMode::Strided))
                .transpose()?;
            let next = down.as_ref().map(|d| {
                SparseVoxelTensor::new(
                    d.out_coords().to_vec(),
                    Matrix::zeros(d.out_coords().len(), 0),
                    d.out_shape(),
                )
            });
            stages.push(StageGeometry {
                coords: tensor.coords().to_vec(),
                shape: tensor.spatial_shape(),
                submanifold,
                down,
            });
            if let Some(n) = next {
                tensor = n?;
            }
        }
        Ok(Self { stages })
    }

    pub fn stage(&self, s: usize) -> &StageGeometry {
        &self.stages[s]
    }

    pub fn num_sites(&self, s: usize) -> usize {
        self.stages[s].coords.len()
    }
}

/// Parameters of the whole network, in program order, plus the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    pub convs: Vec<KernelWeights>,
    /// `[1,1,1]` kernel mapping pooled channels to class logits.
    pub head: KernelWeights,
}

impl NetworkWeights {
    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self
                .convs
                .iter()
                .map(|w| KernelWeights::zeros(w.kernel(), w.c_in(), w.c_out()))
                .collect(),
            head: KernelWeights::zeros([1, 1, 1], self.head.c_in(), self.head.c_out()),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &KernelWeights> {
        self.convs.iter().chain(std::iter::once(&self.head))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut KernelWeights> {
        self.convs.iter_mut().chain(std::iter::once(&mut self.head))
    }

    pub fn add_assign(&mut self, other: &NetworkWeights) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for t in self.tensors_mut() {
            for v in t.as_mut_slice() {
                *v *= s;
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(KernelWeights::len).sum()
    }

    /// Layers in checkpoint order: convs, then the head.
    pub fn to_layers(&self) -> Vec<KernelWeights> {
        self.tensors().cloned().collect()
    }
}

/// Gradients share the weight layout.
pub type Gradients = NetworkWeights;

/// Per-sample statistics of one conv layer, averaged over timesteps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvStats {
    /// Rulebook pair count N_r.
    pub pairs: f64,
    /// Nonzero fraction of the gathered input entries.
    pub fr_binary: f64,
    /// Mean magnitude of the gathered input entries.
    pub fr_integer: f64,
    /// Multiplies executed by the matrix-product path.
    pub multiplies: f64,
    /// Rulebook output rows (gated centers).
    pub outputs: f64,
    /// Sites in the output grid.
    pub out_grid_volume: usize,
}

/// What one forward pass observed, per layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    /// Per neuron layer `(nonzero fraction, mean spike)` of its output.
    pub neuron_rates: Vec<(f64, f64)>,
    pub convs: Vec<ConvStats>,
    pub timesteps: usize,
}

#[derive(Clone, Debug)]
struct ConvRecord {
    rb: Rulebook,
    targets: Vec<u32>,
}

#[derive(Clone, Debug)]
struct StepRecord {
    values: Vec<Matrix>,
    convs: Vec<ConvRecord>,
    neuron_u: Vec<Matrix>,
    pooled: Vec<f32>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    steps: Vec<StepRecord>,
    pub logits: Vec<f32>,
    pub trace: ForwardTrace,
}

impl Tape {
    /// Final-stage spike features of timestep `t` on the last stage's sites.
    pub fn final_spikes(&self, t: usize, program: &Program) -> &Matrix {
        &self.steps[t].values[program.final_slot]
    }

    /// Value of the slot produced by conv layer `layer` at timestep `t`.
    fn conv_output(&self, program: &Program, t: usize, layer: usize) -> Option<&Matrix> {
        program.nodes.iter().find_map(|n| match *n {
            Node::Conv { layer: l, output, .. } if l == layer => Some(&self.steps[t].values[output]),
            _ => None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    program: Program,
    weights: NetworkWeights,
}

fn row_stats(x: &Matrix, rb: &Rulebook) -> (f64, f64) {
    let n = rb.total_pairs();
    if n == 0 || x.cols() == 0 {
        return (0.0, 0.0);
    }
    let mut nnz = 0f64;
    let mut sum = 0f64;
    let per_row: Vec<(f64, f64)> = (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            (
                row.iter().filter(|&&v| v != 0.0).count() as f64,
                row.iter().map(|&v| v.abs() as f64).sum(),
            )
        })
        .collect();
    for o in 0..rb.num_outputs() {
        for &(_, i) in rb.output_entries(o) {
            nnz += per_row[i as usize].0;
            sum += per_row[i as usize].1;
        }
    }
    let denom = n as f64 * x.cols() as f64;
    (nnz / denom, sum / denom)
}

fn rates(m: &Matrix) -> (f64, f64) {
    let n = m.as_slice().len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let nnz = m.as_slice().iter().filter(|&&v| v != 0.0).count();
    let sum: f64 = m.as_slice().iter().map(|&v| v as f64).sum();
    (nnz as f64 / n as f64, sum / n as f64)
}

/// Softmax cross-entropy; returns the loss and dL/dlogits.
pub fn cross_entropy(logits: &[f32], label: usize) -> (f32, Vec<f32>) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = -((exps[label] / total).ln()) as f32;
    let grad = exps
        .iter()
        .enumerate()
        .map(|(k, &e)| (e / total - if k == label { 1.0 } else { 0.0 }) as f32)
        .collect();
    (loss, grad)
}

impl Network {
    /// Fan-in scaled uniform initialization, deterministic in `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self, NetworkError> {
        spec.validate()?;
        let program = Program::build(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = program
            .convs
            .iter()
            .map(|c| {
                let fan_in = c.kernel().iter().product::<usize>() * c.c_in;
                let bound = spec.init_gain * (3.0 / fan_in as f32).sqrt();
                KernelWeights::uniform(c.kernel(), c.c_in, c.c_out, bound, &mut rng)
            })
            .collect();
        let c = program.final_channels;
        let bound = (3.0 / c as f32).sqrt() * 0.5;
        let head = KernelWeights::uniform([1, 1, 1], c, spec.num_classes, bound, &mut rng);
        Ok(Self {
            spec,
            program,
            weights: NetworkWeights { convs, head },
        })
    }

    pub fn from_weights(spec: NetworkSpec, weights: NetworkWeights) -> Result<Self, NetworkError> {
        spec.validate()?;
        let program = Program::build(&spec);
        if weights.convs.len() != program.convs.len() {
            return Err(NetworkError::WeightShape(format!(
                "network has {} conv layers, weights have {}",
                program.convs.len(),
                weights.convs.len()
            )));
        }
        for (info, w) in program.convs.iter().zip(&weights.convs) {
            if w.num_offsets() != info.kernel().iter().product::<usize>()
                || w.c_in() != info.c_in
                || w.c_out() != info.c_out
            {
                return Err(NetworkError::WeightShape(format!(
                    "{}: expected {:?} x {} x {}, got {} offsets x {} x {}",
                    info.name,
                    info.kernel(),
                    info.c_in,
                    info.c_out,
                    w.num_offsets(),
                    w.c_in(),
                    w.c_out()
                )));
            }
        }
        let h = &weights.head;
        if h.num_offsets() != 1 || h.c_in() != program.final_channels || h.c_out() != spec.num_classes {
            return Err(NetworkError::WeightShape("classifier head shape".into()));
        }
        let mut weights = weights;
        // Restore the true kernel extents, which checkpoints do not carry.
        for (info, w) in program.convs.iter().zip(weights.convs.iter_mut()) {
            if w.kernel() != info.kernel() {
                *w = KernelWeights::from_vec(info.kernel(), w.c_in(), w.c_out(), w.as_slice().to_vec())?;
            }
        }
        Ok(Self {
            spec,
            program,
            weights,
        })
    }

    /// Rebuilds from checkpoint layers (convs then head).
    pub fn from_layers(spec: NetworkSpec, mut layers: Vec<KernelWeights>) -> Result<Self, NetworkError> {
        let head = layers
            .pop()
            .ok_or_else(|| NetworkError::WeightShape("checkpoint has no layers".into()))?;
        Self::from_weights(spec, NetworkWeights { convs: layers, head })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn weights(&self) -> &NetworkWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut NetworkWeights {
        &mut self.weights
    }

    pub fn prepare(&self, input: &SparseVoxelTensor) -> Result<SampleGeometry, NetworkError> {
        if input.channels() != self.spec.in_channels {
            return Err(NetworkError::ChannelMismatch {
                expected: self.spec.in_channels,
                found: input.channels(),
            });
        }
        SampleGeometry::build(input)
    }

    /// Forward pass over all timesteps. Neuron states start at zero and
    /// persist across timesteps; the input is replayed at every step.
    pub fn forward(&self, geom: &SampleGeometry, input: &Matrix) -> Result<Tape, NetworkError> {
        self.run(geom, input, None)
    }

    /// Replays `reference` with its rulebooks frozen and every neuron
    /// replaced by its surrogate linearization
    /// `S = S_ref + window(U_ref) * (U - U_ref)`. The exact gradient of this
    /// function is what [`Self::backward`] computes for `reference`.
    pub fn forward_linearized(
        &self,
        geom: &SampleGeometry,
        input: &Matrix,
        reference: &Tape,
    ) -> Result<Tape, NetworkError> {
        self.run(geom, input, Some(reference))
    }

    fn run(&self, geom: &SampleGeometry, input: &Matrix, reference: Option<&Tape>) -> Result<Tape, NetworkError> {
        if input.rows() != geom.num_sites(0) {
            return Err(NetworkError::WeightShape(format!(
                "input has {} rows, geometry {} sites",
                input.rows(),
                geom.num_sites(0)
            )));
        }
        if input.cols() != self.spec.in_channels {
            return Err(NetworkError::ChannelMismatch {
                expected: self.spec.in_channels,
                found: input.cols(),
            });
        }
        let t_total = self.spec.timesteps;
        let params = self.spec.neuron;
        let mut states: Vec<NeuronState> = self
            .program
            .neurons
            .iter()
            .map(|n| NeuronState::zeros(geom.num_sites(n.stage), n.channels))
            .collect();
        let mut steps = Vec::with_capacity(t_total);
        let mut trace = ForwardTrace {
            neuron_rates: vec![(0.0, 0.0); self.program.neurons.len()],
            convs: self
                .program
                .convs
                .iter()
                .map(|c| {
                    let s = geom.stage(c.stage_out()).shape;
                    ConvStats {
                        out_grid_volume: s.iter().map(|&v| v as usize).product(),
                        ..Default::default()
                    }
                })
                .collect(),
            timesteps: t_total,
        };
        let mut logits_sum = vec![0f32; self.spec.num_classes];
        let inv_t = 1.0 / t_total as f64;

        for t in 0..t_total {
            let ref_step = reference.map(|r| &r.steps[t]);
            let mut values: Vec<Option<Matrix>> = vec![None; self.program.num_slots];
            values[0] = Some(input.clone());
            let mut convs: Vec<Option<ConvRecord>> = vec![None; self.program.convs.len()];
            let mut neuron_u: Vec<Option<Matrix>> = vec![None; self.program.neurons.len()];
            for node in &self.program.nodes {
                match *node {
                    Node::Conv { layer, input, output } => {
                        let info = &self.program.convs[layer];
                        let x = values[input].as_ref().expect("slot written before use");
                        let stage = geom.stage(info.stage_in);
                        let record = match ref_step {
                            Some(r) => r.convs[layer].clone(),
                            None => {
                                let g = match info.kind {
                                    ConvKind::Submanifold => &stage.submanifold,
                                    ConvKind::Down => stage.down.as_ref().expect("down geometry"),
                                };
                                let (rb, targets) = g.gate(&x.active_rows());
                                ConvRecord { rb, targets }
                            }
                        };
                        let w = &self.weights.convs[layer];
                        let (compact, counts) = conv_rows_counted(x, w, &record.rb)?;
                        let mut full = Matrix::zeros(geom.num_sites(info.stage_out()), info.c_out);
                        for (o, &dst) in record.targets.iter().enumerate() {
                            full.row_mut(dst as usize).copy_from_slice(compact.row(o));
                        }
                        let (fb, fi) = row_stats(x, &record.rb);
                        let st = &mut trace.convs[layer];
                        st.pairs += record.rb.total_pairs() as f64 * inv_t;
                        st.fr_binary += fb * inv_t;
                        st.fr_integer += fi * inv_t;
                        st.multiplies += counts.multiplies as f64 * inv_t;
                        st.outputs += record.rb.num_outputs() as f64 * inv_t;
                        values[output] = Some(full);
                        convs[layer] = Some(record);
                    }
                    Node::Spike { neuron, input, output } => {
                        let x = values[input].as_ref().expect("slot written before use");
                        let step = ilif_step(&states[neuron], x, &params)?;
                        let spikes = match ref_step {
                            None => step.spikes,
                            Some(r) => {
                                let u0 = &r.neuron_u[neuron];
                                let s0 = &r.values[output];
                                let mut s = s0.clone();
                                for (idx, v) in s.as_mut_slice().iter_mut().enumerate() {
                                    let u_ref = u0.as_slice()[idx];
                                    if ilif_window(u_ref, params.d_max) {
                                        *v += step.u.as_slice()[idx] - u_ref;
                                    }
                                }
                                s
                            }
                        };
                        let mut h = step.u.clone();
                        for (hv, &sv) in h.as_mut_slice().iter_mut().zip(spikes.as_slice()) {
                            *hv = params.beta * (*hv - sv);
                        }
                        states[neuron] = NeuronState { h };
                        let (rb_, ri) = rates(&spikes);
                        trace.neuron_rates[neuron].0 += rb_ * inv_t;
                        trace.neuron_rates[neuron].1 += ri * inv_t;
                        neuron_u[neuron] = Some(step.u);
                        values[output] = Some(spikes);
                    }
                    Node::Add { a, b, output } => {
                        let mut sum = values[a].clone().expect("slot written before use");
                        let rhs = values[b].as_ref().expect("slot written before use");
                        if sum.shape() != rhs.shape() {
                            return Err(NetworkError::CoordMismatch);
                        }
                        sum.add_assign(rhs);
                        values[output] = Some(sum);
                    }
                }
            }
            let fin = values[self.program.final_slot].as_ref().expect("final slot");
            let pooled = mean_rows(fin);
            let logits = head_logits(&self.weights.head, &pooled);
            for (s, l) in logits_sum.iter_mut().zip(&logits) {
                *s += l;
            }
            steps.push(StepRecord {
                values: values.into_iter().map(|v| v.unwrap_or_else(|| Matrix::zeros(0, 0))).collect(),
                convs: convs.into_iter().map(|c| c.expect("every conv runs")).collect(),
                neuron_u: neuron_u.into_iter().map(|u| u.expect("every neuron runs")).collect(),
                pooled,
            });
        }
        let logits = logits_sum.iter().map(|v| v / t_total as f32).collect();
        Ok(Tape {
            steps,
            logits,
            trace,
        })
    }

    /// Cross-entropy loss of `tape.logits` against `label` and the gradient
    /// of every weight, back through all timesteps.
    pub fn backward(&self, tape: &Tape, label: usize) -> Result<(f32, Gradients), NetworkError> {
        if label >= self.spec.num_classes {
            return Err(NetworkError::Config(format!(
                "label {label} out of range for {} classes",
                self.spec.num_classes
            )));
        }
        let (loss, dlogits) = cross_entropy(&tape.logits, label);
        let grads = self.backward_from_logits(tape, &dlogits)?;
        Ok((loss, grads))
    }

    /// Backward pass seeded with an arbitrary dL/dlogits (of the mean logits).
    pub fn backward_from_logits(&self, tape: &Tape, dlogits: &[f32]) -> Result<Gradients, NetworkError> {
        let params = self.spec.neuron;
        let t_total = tape.steps.len();
        let mut grads = self.weights.zeros_like();
        let mut carry: Vec<Option<Matrix>> = vec![None; self.program.neurons.len()];
        let dl_t: Vec<f32> = dlogits.iter().map(|g| g / t_total as f32).collect();
        let head = &self.weights.head;
        let (c, k) = (head.c_in(), head.c_out());

        for t in (0..t_total).rev() {
            let step = &tape.steps[t];
            let mut g: Vec<Option<Matrix>> = vec![None; self.program.num_slots];
            // head: logits = W^T mean_rows(S)
            for ci in 0..c {
                let p = step.pooled[ci];
                let gw = grads.head.slice_mut(0, ci);
                for (a, &d) in gw.iter_mut().zip(&dl_t) {
                    *a += p * d;
                }
            }
            let fin = &step.values[self.program.final_slot];
            let rows = fin.rows().max(1);
            let mut dpool = vec![0f32; c];
            for (ci, dp) in dpool.iter_mut().enumerate() {
                let wr = head.slice(0, ci);
                *dp = (0..k).map(|j| wr[j] * dl_t[j]).sum::<f32>() / rows as f32;
            }
            let mut gfin = Matrix::zeros(fin.rows(), c);
            for r in 0..fin.rows() {
                gfin.row_mut(r).copy_from_slice(&dpool);
            }
            g[self.program.final_slot] = Some(gfin);

            for node in self.program.nodes.iter().rev() {
                match *node {
                    Node::Add { a, b, output } => {
                        if let Some(go) = g[output].take() {
                            accumulate(&mut g[b], &go);
                            accumulate_owned(&mut g[a], go);
                        }
                    }
                    Node::Spike { neuron, input, output } => {
                        let gs = g[output].take();
                        let gh = carry[neuron].take();
                        if gs.is_none() && gh.is_none() {
                            continue;
                        }
                        let u = &step.neuron_u[neuron];
                        let gs = gs.unwrap_or_else(|| Matrix::zeros(u.rows(), u.cols()));
                        let gu = ilif_step_backward(u, &gs, gh.as_ref(), &params);
                        accumulate(&mut g[input], &gu);
                        if t > 0 {
                            carry[neuron] = Some(gu);
                        }
                    }
                    Node::Conv { layer, input, output } => {
                        let Some(go) = g[output].take() else {
                            continue;
                        };
                        let rec = &step.convs[layer];
                        let compact = go.gather_rows(&rec.targets);
                        let x = &step.values[input];
                        let w = &self.weights.convs[layer];
                        let (gi, gw) = conv_backward_rows(&compact, x, w, &rec.rb, input != 0)?;
                        for (a, &b) in grads.convs[layer].as_mut_slice().iter_mut().zip(gw.as_slice()) {
                            *a += b;
                        }
                        if let Some(gi) = gi {
                            accumulate_owned(&mut g[input], gi);
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Data-driven rescaling of the initial weights: layer by layer, scales
    /// each conv so the potentials it produces on active rows have RMS
    /// `target_rms` over `samples`. Returns the applied scale factors.
    pub fn calibrate(
        &mut self,
        samples: &[(SampleGeometry, Matrix)],
        target_rms: f32,
    ) -> Result<Vec<f32>, NetworkError> {
        let mut factors = Vec::with_capacity(self.program.convs.len());
        for layer in 0..self.program.convs.len() {
            let mut sq = 0f64;
            let mut n = 0usize;
            for (geom, x) in samples {
                let tape = self.forward(geom, x)?;
                let rec_targets = &tape.steps[0].convs[layer].targets;
                if let Some(out) = tape.conv_output(&self.program, 0, layer) {
                    for &r in rec_targets {
                        for &v in out.row(r as usize) {
                            sq += (v as f64) * (v as f64);
                            n += 1;
                        }
                    }
                }
            }
            let rms = if n > 0 { (sq / n as f64).sqrt() as f32 } else { 0.0 };
            let f = if rms > 1e-6 { target_rms / rms } else { 1.0 };
            for v in self.weights.convs[layer].as_mut_slice() {
                *v *= f;
            }
            factors.push(f);
        }
        Ok(factors)
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: &Matrix) {
    match slot {
        Some(m) => m.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}

fn accumulate_owned(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(m) => m.add_assign(&g),
        None => *slot = Some(g),
    }
}

pub(crate) fn mean_rows(m: &Matrix) -> Vec<f32> {
    let mut out = vec![0f32; m.cols()];
    if m.rows() == 0 {
        return out;
    }
    for r in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / m.rows() as f32;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

pub(crate) fn head_logits(head: &KernelWeights, pooled: &[f32]) -> Vec<f32> {
    let mut logits = match head.bias() {
        Some(b) => b.to_vec(),
        None => vec![0f32; head.c_out()],
    };
    for (c, &p) in pooled.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (l, &w) in logits.iter_mut().zip(head.slice(0, c)) {
            *l += p * w;
        }
    }
    logits
}
