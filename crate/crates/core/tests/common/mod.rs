//! Independent scalar re-implementations used as test oracles. Nothing here
//! calls into the library's numerical code.
#![allow(dead_code)]

use popsan::lif::LifConfig;
use popsan::network::ActorTrace;
use popsan::{NetworkSpec, PopSan64};
use rand::Rng;

/// Per-timestep LIF simulation with plain loops. Returns
/// `(spikes, pre-reset voltages)`, each `[T][n_out]`.
pub fn scalar_lif(
    weight: &[Vec<f64>],
    bias: &[f64],
    inputs: &[Vec<f64>],
    cfg: &LifConfig,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = bias.len();
    let mut c = vec![0.0; n];
    let mut v = vec![cfg.rest; n];
    let mut spikes = Vec::new();
    let mut volts = Vec::new();
    for x in inputs {
        let mut o = vec![0.0; n];
        let mut pre = vec![0.0; n];
        for j in 0..n {
            let mut drive = 0.0;
            for (k, &xk) in x.iter().enumerate() {
                drive += weight[j][k] * xk;
            }
            c[j] = cfg.decay_current * c[j] + drive + bias[j];
            v[j] = cfg.decay_voltage * v[j] + c[j];
            pre[j] = v[j];
            if v[j] > cfg.threshold {
                o[j] = 1.0;
                v[j] = cfg.rest;
            }
        }
        spikes.push(o);
        volts.push(pre);
    }
    (spikes, volts)
}

pub fn rows(m: &popsan::tensor::Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Column-stochastic softmax allocation over the target axis, then `S · O`.
pub fn scalar_shrink(weight: &[Vec<f64>], input: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t_next = weight.len();
    let t_prev = input.len();
    let n = input[0].len();
    let mean: Vec<f64> = input.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let mut alloc = vec![vec![0.0; t_prev]; t_next];
    for t1 in 0..t_prev {
        let logits: Vec<f64> = (0..t_next).map(|t2| weight[t2][t1] * mean[t1]).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for t2 in 0..t_next {
            alloc[t2][t1] = (logits[t2] - mx).exp() / z;
        }
    }
    (0..t_next)
        .map(|t2| {
            (0..n)
                .map(|k| (0..t_prev).map(|t1| alloc[t2][t1] * input[t1][k]).sum())
                .collect()
        })
        .collect()
}

/// Eval-mode spiking forward pass of `net`, re-simulated from its raw
/// parameters with the same random draws as the library.
pub fn replay_forward<R: Rng>(net: &PopSan64, obs: &[f64], rng: &mut R) -> Vec<f64> {
    let spec = &net.spec;
    let p = &net.params;
    let pop = spec.pop_in;
    let mut probs = Vec::new();
    for (i, &s) in obs.iter().enumerate() {
        for j in 0..pop {
            let mu = p.encoder.mu.get(i, j);
            let sd = p.encoder.sigma.get(i, j);
            probs.push((-(s - mu) * (s - mu) / (2.0 * sd * sd)).exp());
        }
    }
    let t1 = spec.stages[0].timesteps;
    let mut x: Vec<Vec<f64>> = (0..t1)
        .map(|_| {
            probs
                .iter()
                .map(|&q| if rng.random::<f64>() < q { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    for (i, stage) in p.stages.iter().enumerate() {
        for layer in stage {
            x = scalar_lif(&rows(&layer.weight), &layer.bias, &x, &spec.lif).0;
        }
        if i + 1 < p.stages.len() {
            x = scalar_shrink(&rows(&p.shrinks[i].weight), &x);
        }
    }
    let out = scalar_lif(&rows(&p.output.weight), &p.output.bias, &x, &spec.lif).0;
    let t = out.len() as f64;
    (0..spec.act_dim)
        .map(|a| {
            let mut acc = p.decoder.bias[a];
            for j in 0..spec.pop_out {
                let k = a * spec.pop_out + j;
                let fr: f64 = out.iter().map(|r| r[k]).sum::<f64>() / t;
                acc += p.decoder.weight.get(a, j) * fr;
            }
            acc
        })
        .collect()
}

/// Synapse-by-synapse operation count over a recorded eval trace:
/// `(mac, ac, shrink_ac)`.
pub fn replay_count(spec: &NetworkSpec, trace: &ActorTrace<f64>) -> (f64, f64, f64) {
    let mut mac = (spec.obs_dim * spec.pop_in) as f64;
    let mut ac = 0.0;
    let mut shrink_ac = 0.0;
    let mut first = true;
    let layers: Vec<_> = trace.stages.iter().collect();
    for (i, stage) in layers.iter().enumerate() {
        for t in stage.iter() {
            for step in 0..t.input.rows() {
                for k in 0..t.input.cols() {
                    for _target in 0..t.spikes.cols() {
                        if first {
                            mac += 1.0;
                        } else if t.input.get(step, k) != 0.0 {
                            ac += 1.0;
                        }
                    }
                }
            }
            first = false;
        }
        if let Some(cache) = trace.shrinks.get(i) {
            let t_next = cache.allocation.rows();
            mac += (t_next * cache.input.rows()) as f64;
            for step in 0..cache.input.rows() {
                for k in 0..cache.input.cols() {
                    if cache.input.get(step, k) != 0.0 {
                        // one accumulate into the population mean, one per target step
                        shrink_ac += 1.0 + t_next as f64;
                    }
                }
            }
        }
    }
    let out = &trace.output;
    for step in 0..out.input.rows() {
        for k in 0..out.input.cols() {
            if out.input.get(step, k) != 0.0 {
                ac += out.spikes.cols() as f64;
            }
        }
    }
    for s in out.spikes.as_slice() {
        if *s != 0.0 {
            ac += 1.0;
        }
    }
    (mac, ac + shrink_ac, shrink_ac)
}

/// A randomly shaped, randomly weighted LIF problem.
pub struct LifInstance {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub inputs: Vec<Vec<f64>>,
}

pub fn random_lif_instance<R: Rng>(rng: &mut R) -> LifInstance {
    let n_in = rng.random_range(1..=8);
    let n_out = rng.random_range(1..=8);
    let t = rng.random_range(1..=8);
    let binary = rng.random_bool(0.5);
    LifInstance {
        weight: (0..n_out)
            .map(|_| (0..n_in).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect(),
        bias: (0..n_out).map(|_| rng.random_range(-0.5..0.5)).collect(),
        inputs: (0..t)
            .map(|_| {
                (0..n_in)
                    .map(|_| {
                        if binary {
                            if rng.random_bool(0.4) {
                                1.0
                            } else {
                                0.0
                            }
                        } else {
                            rng.random_range(0.0..1.0)
                        }
                    })
                    .collect()
            })
            .collect(),
    }
}
