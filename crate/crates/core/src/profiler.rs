//! Firing-rate measurement, operation accounting and the MAC/AC energy model.

use std::fmt::Write as _;

use thiserror::Error;

use crate::network::{ForwardTrace, Program};
use crate::sparse_core::SparseVoxelTensor;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("missing layer statistics: {0}")]
    MissingLayerStats(String),
}

/// Energy per operation, in joules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyModel {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            e_mac: 4.6e-12,
            e_ac: 0.9e-12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    /// Consumes real-valued input: every operation is a multiply-accumulate.
    Mac,
    /// Consumes spikes: operations are accumulates scaled by the firing rate.
    Ac,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub name: String,
    pub kind: OpKind,
    /// Rulebook pairs N_r (1 for the classifier).
    pub pairs: f64,
    pub c_in: usize,
    pub c_out: usize,
    /// Fraction of nonzero input entries seen by the layer.
    pub fr_binary: f64,
    /// Mean input spike magnitude; the rate that drives AC counts.
    pub fr_integer: f64,
    /// `2 * N_r * C_in * C_out`, before any firing-rate scaling.
    pub flops: f64,
    /// Same count for a dense convolution over the full output grid.
    pub dense_flops: f64,
}

impl LayerStats {
    /// FLOPs with the binary firing rate applied, `2 fr N_r C_in C_out`.
    pub fn effective_flops(&self) -> f64 {
        self.flops * self.fr_binary
    }

    /// Predicted accumulate count under virtual-timestep expansion.
    pub fn predicted_acs(&self) -> f64 {
        self.pairs * (self.c_in * self.c_out) as f64 * self.fr_integer
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiringStats {
    pub layers: Vec<LayerStats>,
    pub timesteps: usize,
    pub d_max: u32,
}

/// Per-layer and total energy of one inference, in joules.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub per_layer: Vec<f64>,
    pub total: f64,
}

impl EnergyReport {
    pub fn total_mj(&self) -> f64 {
        self.total * 1e3
    }
}

/// `(fraction of nonzero entries, mean entry)` of a spike tensor.
pub fn measure_firing_rate(spikes: &SparseVoxelTensor) -> (f64, f64) {
    let v = spikes.features().as_slice();
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let nnz = v.iter().filter(|&&x| x != 0.0).count();
    let sum: f64 = v.iter().map(|&x| x as f64).sum();
    (nnz as f64 / v.len() as f64, sum / v.len() as f64)
}

fn energy_with(stats: &FiringStats, model: &EnergyModel, flops: impl Fn(&LayerStats) -> f64) -> Result<EnergyReport, ProfileError> {
    if stats.layers.is_empty() {
        return Err(ProfileError::MissingLayerStats("no layers".into()));
    }
    if stats.layers[0].kind != OpKind::Mac {
        return Err(ProfileError::MissingLayerStats("first layer must be the MAC stem".into()));
    }
    let t = stats.timesteps as f64;
    let per_layer: Vec<f64> = stats
        .layers
        .iter()
        .map(|l| match l.kind {
            OpKind::Mac => model.e_mac * flops(l),
            OpKind::Ac => model.e_ac * t * flops(l) * l.fr_integer,
        })
        .collect();
    let total = per_layer.iter().sum();
    Ok(EnergyReport { per_layer, total })
}

/// `E = E_MAC FL_1 + E_AC T sum_n FL_n fr_n`.
pub fn estimate_energy(stats: &FiringStats, model: &EnergyModel) -> Result<EnergyReport, ProfileError> {
    energy_with(stats, model, |l| l.flops)
}

/// The same estimate with every conv replaced by a dense one over its full
/// output grid.
pub fn estimate_energy_dense(stats: &FiringStats, model: &EnergyModel) -> Result<EnergyReport, ProfileError> {
    energy_with(stats, model, |l| l.dense_flops)
}

/// Builds layer statistics from a forward trace. Layer 1 is the first stem
/// conv; the classifier is appended as a spiking AC layer.
pub fn firing_stats(program: &Program, trace: &ForwardTrace, num_classes: usize, d_max: u32) -> FiringStats {
    let mut layers: Vec<LayerStats> = program
        .convs()
        .iter()
        .zip(&trace.convs)
        .enumerate()
        .map(|(n, (info, s))| {
            let kvol = info.kernel().iter().product::<usize>() as f64;
            let cc = (info.c_in * info.c_out) as f64;
            let dense_pairs = s.out_grid_volume as f64 * kvol;
            LayerStats {
                name: info.name.clone(),
                kind: if n == 0 { OpKind::Mac } else { OpKind::Ac },
                pairs: s.pairs,
                c_in: info.c_in,
                c_out: info.c_out,
                fr_binary: s.fr_binary,
                fr_integer: s.fr_integer,
                flops: 2.0 * s.pairs * cc,
                dense_flops: 2.0 * dense_pairs * cc,
            }
        })
        .collect();
    let c = program.final_channels();
    let (hb, hi) = trace.neuron_rates.last().copied().unwrap_or((0.0, 0.0));
    let fc = 2.0 * (c * num_classes) as f64;
    layers.push(LayerStats {
        name: "head.fc".into(),
        kind: OpKind::Ac,
        pairs: 1.0,
        c_in: c,
        c_out: num_classes,
        fr_binary: hb,
        fr_integer: hi,
        flops: fc,
        dense_flops: fc,
    });
    FiringStats {
        layers,
        timesteps: trace.timesteps,
        d_max,
    }
}

/// Averages statistics of several samples layer by layer.
pub fn average_stats(samples: &[FiringStats]) -> Option<FiringStats> {
    let first = samples.first()?;
    let n = samples.len() as f64;
    let mut out = first.clone();
    for (i, l) in out.layers.iter_mut().enumerate() {
        let mean = |f: fn(&LayerStats) -> f64| samples.iter().map(|s| f(&s.layers[i])).sum::<f64>() / n;
        l.pairs = mean(|l| l.pairs);
        l.fr_binary = mean(|l| l.fr_binary);
        l.fr_integer = mean(|l| l.fr_integer);
        l.flops = mean(|l| l.flops);
        l.dense_flops = mean(|l| l.dense_flops);
    }
    Some(out)
}

/// One line per layer: name, N_r, fr_binary, fr_integer, FLOPs, pJ.
pub fn report_text(stats: &FiringStats, energy: &EnergyReport, dense: &EnergyReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "layer\tpairs\tfr_binary\tfr_integer\tflops\tpJ");
    for (l, e) in stats.layers.iter().zip(&energy.per_layer) {
        let _ = writeln!(
            s,
            "{}\t{:.1}\t{:.4}\t{:.4}\t{:.0}\t{:.2}",
            l.name,
            l.pairs,
            l.fr_binary,
            l.fr_integer,
            l.effective_flops(),
            e * 1e12
        );
    }
    let _ = writeln!(s, "timesteps\t{}\td_max\t{}", stats.timesteps, stats.d_max);
    let _ = writeln!(s, "total_mJ\t{:.6e}", energy.total_mj());
    let _ = writeln!(s, "dense_total_mJ\t{:.6e}", dense.total_mj());
    s
}
