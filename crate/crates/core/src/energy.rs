//! Operation counting and the MAC/AC energy model.
//!
//! The encoder's receptive-field evaluations and the first LIF layer's dense
//! work at every stage-1 timestep are multiply-accumulates. Every later
//! synaptic layer costs one accumulate per non-zero input per target neuron.
//! A shrink layer costs one MAC per allocation logit plus accumulates for
//! the population mean and for distributing each non-zero input over the
//! next stage's timesteps. Auxiliary heads never run at inference.

use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{ActorTrace, Dynamics, Mode, NetworkSpec, PopSan};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const E_MAC_PJ: f64 = 4.6;
pub const E_AC_PJ: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyModel {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel {
            e_mac: E_MAC_PJ,
            e_ac: E_AC_PJ,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerOps {
    pub name: String,
    pub mac: f64,
    pub ac: f64,
}

/// Operation counts of one inference (or an average over many). Counts are
/// kept as `f64` so averages and rate-based estimates share the type.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpCount {
    pub mac_ops: f64,
    pub ac_ops: f64,
    /// Shrink-layer share of `mac_ops` and `ac_ops`.
    pub shrink_mac_ops: f64,
    pub shrink_ac_ops: f64,
    pub layers: Vec<LayerOps>,
    /// Timesteps simulated over all stages.
    pub timesteps: usize,
}

impl OpCount {
    fn from_layers(layers: Vec<LayerOps>, timesteps: usize) -> Self {
        let sum = |f: fn(&LayerOps) -> f64, shrink: bool| {
            layers
                .iter()
                .filter(|l| !shrink || l.name.starts_with("shrink"))
                .map(f)
                .sum()
        };
        OpCount {
            mac_ops: sum(|l| l.mac, false),
            ac_ops: sum(|l| l.ac, false),
            shrink_mac_ops: sum(|l| l.mac, true),
            shrink_ac_ops: sum(|l| l.ac, true),
            layers,
            timesteps,
        }
    }
}

/// Energy in picojoules.
pub fn estimate_energy(counts: &OpCount, model: &EnergyModel) -> f64 {
    model.e_mac * counts.mac_ops + model.e_ac * counts.ac_ops
}

fn nonzeros<S: Scalar>(m: &Matrix<S>) -> f64 {
    m.as_slice().iter().filter(|x| !x.is_zero()).count() as f64
}

fn layer(name: String, mac: f64, ac: f64) -> LayerOps {
    LayerOps { name, mac, ac }
}

/// Counts the operations recorded in an eval-mode trace.
pub fn ops_from_trace<S: Scalar>(spec: &NetworkSpec, trace: &ActorTrace<S>) -> Result<OpCount> {
    if trace.mode != Mode::Eval {
        return Err(Error::Mismatch(
            "operation counts need an eval-mode trace; auxiliary heads do not run at inference".into(),
        ));
    }
    if trace.stages.len() != spec.stages.len() {
        return Err(Error::Mismatch("trace does not match the network spec".into()));
    }
    let mut layers = vec![layer("encoder".into(), spec.input_neurons() as f64, 0.0)];
    let mut first = true;
    for (i, stage) in trace.stages.iter().enumerate() {
        for (k, t) in stage.iter().enumerate() {
            let n_out = t.spikes.cols() as f64;
            let name = format!("stage{}.layer{}", i + 1, k + 1);
            if first {
                let dense = (t.input.rows() * t.input.cols()) as f64 * n_out;
                layers.push(layer(name, dense, 0.0));
                first = false;
            } else {
                layers.push(layer(name, 0.0, nonzeros(&t.input) * n_out));
            }
        }
        if let Some(cache) = trace.shrinks.get(i) {
            let [t_next, t_prev] = cache.allocation.shape();
            let nnz = nonzeros(&cache.input);
            layers.push(layer(
                format!("shrink{}", i + 1),
                (t_next * t_prev) as f64,
                nnz + nnz * t_next as f64,
            ));
        }
    }
    let out = &trace.output;
    layers.push(layer("output".into(), 0.0, nonzeros(&out.input) * out.spikes.cols() as f64));
    layers.push(layer("decoder".into(), 0.0, nonzeros(&out.spikes)));
    let timesteps = spec.stages.iter().map(|s| s.timesteps).sum();
    Ok(OpCount::from_layers(layers, timesteps))
}

/// Runs eval-mode spiking inference on every observation and counts the
/// operations of each run.
pub fn count_ops<S: Scalar, R: Rng + ?Sized>(
    net: &PopSan<S>,
    observations: &[Vec<S>],
    rng: &mut R,
) -> Result<Vec<(OpCount, ActorTrace<S>)>> {
    observations
        .iter()
        .map(|obs| {
            let (_, trace) = net.forward(obs, Mode::Eval, Dynamics::Spiking, rng)?;
            Ok((ops_from_trace(&net.spec, &trace)?, trace))
        })
        .collect()
}

/// Fraction of non-zero inputs seen by each counted stage, measured from
/// recorded inference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivityProfile {
    /// Input density of every main-path synaptic layer (hidden layers in
    /// order, then the output layer). The first entry belongs to the dense
    /// first layer and does not affect counts.
    pub layer_input_density: Vec<f64>,
    /// Density of each shrink layer's input spikes.
    pub shrink_input_density: Vec<f64>,
    /// Firing rate of the output populations.
    pub output_rate: f64,
    /// Mean firing rate of every main-path LIF layer.
    pub spike_rates: Vec<f64>,
}

impl ActivityProfile {
    pub fn measure<S: Scalar>(traces: &[ActorTrace<S>]) -> Result<Self> {
        let first = traces
            .first()
            .ok_or_else(|| Error::EmptyBatch("activity profile needs at least one trace".into()))?;
        let density = |m: &Matrix<S>| nonzeros(m) / (m.rows() * m.cols()) as f64;
        let n_layers = first.stages.iter().map(Vec::len).sum::<usize>() + 1;
        let mut p = ActivityProfile {
            layer_input_density: vec![0.0; n_layers],
            shrink_input_density: vec![0.0; first.shrinks.len()],
            output_rate: 0.0,
            spike_rates: vec![0.0; n_layers],
        };
        for tr in traces {
            let lif: Vec<_> = tr.stages.iter().flatten().chain(std::iter::once(&tr.output)).collect();
            if lif.len() != n_layers || tr.shrinks.len() != p.shrink_input_density.len() {
                return Err(Error::Mismatch("traces come from different architectures".into()));
            }
            for (k, t) in lif.iter().enumerate() {
                p.layer_input_density[k] += density(&t.input);
                p.spike_rates[k] += density(&t.spikes);
            }
            for (d, c) in p.shrink_input_density.iter_mut().zip(&tr.shrinks) {
                *d += density(&c.input);
            }
            p.output_rate += density(&tr.output.spikes);
        }
        let n = traces.len() as f64;
        for v in p
            .layer_input_density
            .iter_mut()
            .chain(p.spike_rates.iter_mut())
            .chain(p.shrink_input_density.iter_mut())
        {
            *v /= n;
        }
        p.output_rate /= n;
        Ok(p)
    }

    /// Every density multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let s = |v: &[f64]| v.iter().map(|x| x * factor).collect();
        ActivityProfile {
            layer_input_density: s(&self.layer_input_density),
            shrink_input_density: s(&self.shrink_input_density),
            output_rate: self.output_rate * factor,
            spike_rates: s(&self.spike_rates),
        }
    }

    pub fn mean_spike_rate(&self) -> f64 {
        self.spike_rates.iter().sum::<f64>() / self.spike_rates.len().max(1) as f64
    }
}

/// Expected operation counts of `spec` at the given activity.
pub fn expected_ops(spec: &NetworkSpec, profile: &ActivityProfile) -> Result<OpCount> {
    let shapes = spec.main_layer_shapes();
    if profile.layer_input_density.len() != shapes.len()
        || profile.shrink_input_density.len() + 1 != spec.stages.len()
    {
        return Err(Error::Mismatch("activity profile does not match the network spec".into()));
    }
    let mut layers = vec![layer("encoder".into(), spec.input_neurons() as f64, 0.0)];
    let mut idx = 0;
    for (i, stage) in spec.stages.iter().enumerate() {
        let t = stage.timesteps as f64;
        for k in 0..stage.hidden_sizes.len() {
            let (n_in, n_out) = shapes[idx];
            let name = format!("stage{}.layer{}", i + 1, k + 1);
            let work = t * (n_in * n_out) as f64;
            if idx == 0 {
                layers.push(layer(name, work, 0.0));
            } else {
                layers.push(layer(name, 0.0, profile.layer_input_density[idx] * work));
            }
            idx += 1;
        }
        if let Some(next) = spec.stages.get(i + 1) {
            let width = *stage.hidden_sizes.last().expect("validated stage") as f64;
            let nnz = profile.shrink_input_density[i] * t * width;
            layers.push(layer(
                format!("shrink{}", i + 1),
                t * next.timesteps as f64,
                nnz + nnz * next.timesteps as f64,
            ));
        }
    }
    let t_final = spec.stages.last().expect("validated spec").timesteps as f64;
    let (n_in, n_out) = shapes[idx];
    let work = t_final * (n_in * n_out) as f64;
    let out_ac = if idx == 0 { 0.0 } else { profile.layer_input_density[idx] * work };
    let out_mac = if idx == 0 { work } else { 0.0 };
    layers.push(layer("output".into(), out_mac, out_ac));
    layers.push(layer(
        "decoder".into(),
        0.0,
        profile.output_rate * t_final * spec.output_neurons() as f64,
    ));
    let timesteps = spec.stages.iter().map(|s| s.timesteps).sum();
    Ok(OpCount::from_layers(layers, timesteps))
}

/// MACs of a dense network with the same layer widths, run once.
pub fn ann_macs(spec: &NetworkSpec) -> f64 {
    let fc: usize = spec.main_layer_shapes().iter().map(|(i, o)| i * o).sum();
    (fc + spec.act_dim * spec.pop_out) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SavingsRow {
    pub t_final: usize,
    pub ann_pj: f64,
    pub snn_pj: f64,
    pub savings_pct: f64,
    pub mac_ops: f64,
    pub ac_ops: f64,
    pub spike_rate_mean: f64,
}

pub fn compare_with_ann(spec: &NetworkSpec, profile: &ActivityProfile, model: &EnergyModel) -> Result<SavingsRow> {
    let ops = expected_ops(spec, profile)?;
    let ann_pj = model.e_mac * ann_macs(spec);
    let snn_pj = estimate_energy(&ops, model);
    Ok(SavingsRow {
        t_final: spec.stages.last().map_or(0, |s| s.timesteps),
        ann_pj,
        snn_pj,
        savings_pct: 100.0 * (1.0 - snn_pj / ann_pj),
        mac_ops: ops.mac_ops,
        ac_ops: ops.ac_ops,
        spike_rate_mean: profile.mean_spike_rate(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavingsReport {
    pub rows: Vec<SavingsRow>,
}

impl SavingsReport {
    /// One row per final-stage timestep count, each architecture derived
    /// from `spec` by [`NetworkSpec::with_final_timesteps`].
    pub fn sweep(spec: &NetworkSpec, profile: &ActivityProfile, t_finals: &[usize], model: &EnergyModel) -> Result<Self> {
        let rows = t_finals
            .iter()
            .map(|&t| {
                if t == 0 {
                    return Err(Error::Config("final-stage timesteps must be >= 1".into()));
                }
                compare_with_ann(&spec.with_final_timesteps(t), profile, model)
            })
            .collect::<Result<_>>()?;
        Ok(SavingsReport { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Mean and standard deviation of the per-inference energy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyStats {
    pub inferences: usize,
    pub mean_pj: f64,
    pub std_pj: f64,
    pub mean_mac_ops: f64,
    pub mean_ac_ops: f64,
    pub mean_shrink_ac_ops: f64,
}

pub fn energy_stats(counts: &[OpCount], model: &EnergyModel) -> Result<EnergyStats> {
    if counts.is_empty() {
        return Err(Error::EmptyBatch("energy statistics need at least one inference".into()));
    }
    let n = counts.len() as f64;
    let e: Vec<f64> = counts.iter().map(|c| estimate_energy(c, model)).collect();
    let mean = e.iter().sum::<f64>() / n;
    let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(EnergyStats {
        inferences: counts.len(),
        mean_pj: mean,
        std_pj: var.sqrt(),
        mean_mac_ops: counts.iter().map(|c| c.mac_ops).sum::<f64>() / n,
        mean_ac_ops: counts.iter().map(|c| c.ac_ops).sum::<f64>() / n,
        mean_shrink_ac_ops: counts.iter().map(|c| c.shrink_ac_ops).sum::<f64>() / n,
    })
}
