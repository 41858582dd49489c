//! The population-coded spiking actor: encoder, staged LIF layers joined by
//! temporal shrinking, per-stage auxiliary heads, and the rate decoder.

mod decoder;
mod spec;

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use decoder::{firing_rates, Decoder, DecoderGrads};
pub use spec::{NetworkSpec, StageConfig};

use crate::encoder::{encode_spikes, PopulationCoder};
use crate::error::{Error, Result};
use crate::lif::{LifLayer, LifTrace, SpikeMode};
use crate::optim::{Adam, AdamConfig, StepReport};
use crate::rng::{stream, streams};
use crate::scalar::Scalar;
use crate::shrink::{ShrinkCache, ShrinkLayer};
use crate::tensor::Matrix;

/// Whether auxiliary heads run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How spikes are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dynamics {
    /// Bernoulli input spikes and binary LIF spikes.
    Spiking,
    /// Input spikes replaced by their probabilities and LIF spikes by the
    /// surrogate ramp; deterministic and differentiable almost everywhere.
    Smooth,
}

impl Dynamics {
    fn spike_mode(self) -> SpikeMode {
        match self {
            Dynamics::Spiking => SpikeMode::Hard,
            Dynamics::Smooth => SpikeMode::Smooth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxHead<S> {
    pub lif: LifLayer<S>,
    pub decoder: Decoder<S>,
}

/// Every trainable tensor of the network. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopSanParams<S> {
    pub encoder: PopulationCoder<S>,
    /// Hidden LIF layers, grouped by stage.
    pub stages: Vec<Vec<LifLayer<S>>>,
    /// `shrinks[i]` joins stage `i` to stage `i + 1`.
    pub shrinks: Vec<ShrinkLayer<S>>,
    /// Output-population layer of the final stage.
    pub output: LifLayer<S>,
    pub decoder: Decoder<S>,
    /// One head per non-final stage.
    pub aux: Vec<AuxHead<S>>,
    /// State-independent log standard deviation of the Gaussian policy.
    pub log_std: Vec<S>,
}

/// A borrowed view of one named tensor.
pub struct TensorView<'a, S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [S],
}

impl<S: Scalar> PopSanParams<S> {
    /// Named views of every trainable tensor in a fixed order.
    pub fn tensors(&self) -> Vec<TensorView<'_, S>> {
        fn mat<'a, S: Scalar>(name: String, m: &'a Matrix<S>) -> TensorView<'a, S> {
            TensorView {
                name,
                shape: m.shape().to_vec(),
                data: m.as_slice(),
            }
        }
        fn vec<'a, S: Scalar>(name: String, v: &'a [S]) -> TensorView<'a, S> {
            TensorView {
                name,
                shape: vec![v.len()],
                data: v,
            }
        }
        let mut out = vec![
            mat("encoder.mu".into(), &self.encoder.mu),
            mat("encoder.sigma".into(), &self.encoder.sigma),
        ];
        for (i, stage) in self.stages.iter().enumerate() {
            for (k, layer) in stage.iter().enumerate() {
                out.push(mat(format!("stage{}.layer{}.weight", i + 1, k + 1), &layer.weight));
                out.push(vec(format!("stage{}.layer{}.bias", i + 1, k + 1), &layer.bias));
            }
        }
        for (i, s) in self.shrinks.iter().enumerate() {
            out.push(mat(format!("shrink{}.weight", i + 1), &s.weight));
        }
        out.push(mat("output.weight".into(), &self.output.weight));
        out.push(vec("output.bias".into(), &self.output.bias));
        out.push(mat("decoder.weight".into(), &self.decoder.weight));
        out.push(vec("decoder.bias".into(), &self.decoder.bias));
        for (i, head) in self.aux.iter().enumerate() {
            out.push(mat(format!("aux{}.lif.weight", i + 1), &head.lif.weight));
            out.push(vec(format!("aux{}.lif.bias", i + 1), &head.lif.bias));
            out.push(mat(format!("aux{}.decoder.weight", i + 1), &head.decoder.weight));
            out.push(vec(format!("aux{}.decoder.bias", i + 1), &head.decoder.bias));
        }
        out.push(vec("log_std".into(), &self.log_std));
        out
    }

    /// Mutable slices in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> = vec![
            self.encoder.mu.as_mut_slice(),
            self.encoder.sigma.as_mut_slice(),
        ];
        for stage in &mut self.stages {
            for layer in stage {
                out.push(layer.weight.as_mut_slice());
                out.push(&mut layer.bias);
            }
        }
        for s in &mut self.shrinks {
            out.push(s.weight.as_mut_slice());
        }
        out.push(self.output.weight.as_mut_slice());
        out.push(&mut self.output.bias);
        out.push(self.decoder.weight.as_mut_slice());
        out.push(&mut self.decoder.bias);
        for head in &mut self.aux {
            out.push(head.lif.weight.as_mut_slice());
            out.push(&mut head.lif.bias);
            out.push(head.decoder.weight.as_mut_slice());
            out.push(&mut head.decoder.bias);
        }
        out.push(&mut self.log_std);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|x| *x = S::zero());
        }
        z
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &Self) {
        let src = other.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, &s) in dst.iter_mut().zip(src.data) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorOutput<S> {
    pub action: Vec<S>,
    /// One action per auxiliary head; empty in eval mode.
    pub aux_actions: Vec<Vec<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxTrace<S> {
    pub lif: LifTrace<S>,
    pub rates: Vec<S>,
}

/// Forward-pass record consumed by the backward pass and the op counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorTrace<S> {
    pub mode: Mode,
    pub dynamics: Dynamics,
    pub obs: Vec<S>,
    /// Receptive-field activations `[obs_dim × pop_in]`.
    pub activation: Matrix<S>,
    /// Encoder output `[T_1 × obs_dim·pop_in]`.
    pub input_spikes: Matrix<S>,
    pub stages: Vec<Vec<LifTrace<S>>>,
    pub shrinks: Vec<ShrinkCache<S>>,
    pub output: LifTrace<S>,
    pub rates: Vec<S>,
    pub aux: Vec<AuxTrace<S>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopSan<S> {
    pub spec: NetworkSpec,
    pub params: PopSanParams<S>,
}

fn uniform_layer<S: Scalar, R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> LifLayer<S> {
    let bound = 1.0 / (n_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    LifLayer {
        weight: Matrix::from_fn(n_out, n_in, |_, _| S::lit(dist.sample(rng))),
        bias: (0..n_out).map(|_| S::lit(dist.sample(rng))).collect(),
    }
}

fn uniform_decoder<S: Scalar, R: Rng>(act_dim: usize, pop: usize, rng: &mut R) -> Decoder<S> {
    let bound = 1.0 / (pop as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Decoder {
        weight: Matrix::from_fn(act_dim, pop, |_, _| S::lit(dist.sample(rng))),
        bias: vec![S::zero(); act_dim],
    }
}

impl<S: Scalar> PopSan<S> {
    /// Builds a freshly initialised network from `spec.seed`.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(spec.seed, streams::INIT);
        let low: Vec<S> = spec.obs_low.iter().map(|&x| S::lit(x)).collect();
        let high: Vec<S> = spec.obs_high.iter().map(|&x| S::lit(x)).collect();
        let encoder = PopulationCoder::new(&low, &high, spec.pop_in)?;

        let mut width = spec.input_neurons();
        let mut stages = Vec::with_capacity(spec.stages.len());
        let mut aux = Vec::new();
        for (i, stage) in spec.stages.iter().enumerate() {
            let mut layers = Vec::with_capacity(stage.hidden_sizes.len());
            for &h in &stage.hidden_sizes {
                layers.push(uniform_layer(width, h, &mut rng));
                width = h;
            }
            stages.push(layers);
            if i + 1 < spec.stages.len() {
                aux.push(AuxHead {
                    lif: uniform_layer(width, spec.output_neurons(), &mut rng),
                    decoder: uniform_decoder(spec.act_dim, spec.pop_out, &mut rng),
                });
            }
        }
        let shrinks = spec
            .stages
            .windows(2)
            .map(|w| ShrinkLayer::new(w[0].timesteps, w[1].timesteps))
            .collect::<Result<Vec<_>>>()?;
        let output = uniform_layer(width, spec.output_neurons(), &mut rng);
        let decoder = uniform_decoder(spec.act_dim, spec.pop_out, &mut rng);
        let log_std = vec![S::lit(spec.init_log_std); spec.act_dim];
        Ok(PopSan {
            params: PopSanParams {
                encoder,
                stages,
                shrinks,
                output,
                decoder,
                aux,
                log_std,
            },
            spec,
        })
    }

    pub fn act_dim(&self) -> usize {
        self.spec.act_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.spec.obs_dim
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        obs: &[S],
        mode: Mode,
        dynamics: Dynamics,
        rng: &mut R,
    ) -> Result<(ActorOutput<S>, ActorTrace<S>)> {
        let p = &self.params;
        let cfg = &self.spec.lif;
        let spike_mode = dynamics.spike_mode();
        let activation = p.encoder.receptive_field(obs)?;
        let t1 = self.spec.stages[0].timesteps;
        let input_spikes = match dynamics {
            Dynamics::Spiking => encode_spikes(&activation, t1, rng)?.into_matrix(),
            Dynamics::Smooth => Matrix::from_fn(t1, activation.as_slice().len(), |_, k| {
                activation.as_slice()[k]
            }),
        };

        let n_stages = p.stages.len();
        let mut stage_traces = Vec::with_capacity(n_stages);
        let mut shrink_caches = Vec::with_capacity(n_stages.saturating_sub(1));
        let mut aux_traces = Vec::new();
        let mut aux_actions = Vec::new();
        let mut x = input_spikes.clone();
        for (i, stage) in p.stages.iter().enumerate() {
            let mut traces = Vec::with_capacity(stage.len());
            for layer in stage {
                let trace = layer.forward(&x, cfg, spike_mode)?;
                x = trace.spikes.clone();
                traces.push(trace);
            }
            stage_traces.push(traces);
            if i + 1 < n_stages {
                if mode == Mode::Train {
                    let head = &p.aux[i];
                    let lif = head.lif.forward(&x, cfg, spike_mode)?;
                    let rates = firing_rates(&lif.spikes);
                    aux_actions.push(head.decoder.forward(&rates)?);
                    aux_traces.push(AuxTrace { lif, rates });
                }
                let (next, cache) = p.shrinks[i].forward(&x)?;
                shrink_caches.push(cache);
                x = next;
            }
        }
        let output = p.output.forward(&x, cfg, spike_mode)?;
        let rates = firing_rates(&output.spikes);
        let action = p.decoder.forward(&rates)?;
        Ok((
            ActorOutput {
                action,
                aux_actions,
            },
            ActorTrace {
                mode,
                dynamics,
                obs: obs.to_vec(),
                activation,
                input_spikes,
                stages: stage_traces,
                shrinks: shrink_caches,
                output,
                rates,
                aux: aux_traces,
            },
        ))
    }

    /// Deterministic-mean action in eval mode.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[S], rng: &mut R) -> Result<Vec<S>> {
        Ok(self.forward(obs, Mode::Eval, Dynamics::Spiking, rng)?.0.action)
    }

    fn check_trace(&self, trace: &ActorTrace<S>) -> Result<()> {
        let p = &self.params;
        let layers_match = trace.stages.len() == p.stages.len()
            && trace
                .stages
                .iter()
                .zip(&p.stages)
                .all(|(t, s)| t.len() == s.len())
            && trace.shrinks.len() == p.shrinks.len()
            && trace.rates.len() == self.spec.output_neurons()
            && trace.obs.len() == self.spec.obs_dim;
        if !layers_match {
            return Err(Error::Mismatch("trace does not belong to this network".into()));
        }
        if !trace.aux.is_empty() && trace.aux.len() != p.aux.len() {
            return Err(Error::Mismatch(format!(
                "trace has {} auxiliary heads, network has {}",
                trace.aux.len(),
                p.aux.len()
            )));
        }
        Ok(())
    }

    /// Back-propagates action gradients to every parameter.
    ///
    /// `d_action` is the gradient of the final stage's loss and `d_aux[i]` that
    /// of auxiliary head `i`; each is weighted by its stage lambda before the
    /// paths merge. Heads with a zero lambda are skipped entirely. The
    /// returned `log_std` gradient is zero.
    pub fn backward(
        &self,
        trace: &ActorTrace<S>,
        d_action: &[S],
        d_aux: &[Vec<S>],
    ) -> Result<PopSanParams<S>> {
        self.backward_weighted(trace, d_action, d_aux, &self.spec.lambdas())
    }

    /// [`PopSan::backward`] with explicit per-stage weights in place of the
    /// spec's lambdas (one per stage, final stage last).
    pub fn backward_weighted(
        &self,
        trace: &ActorTrace<S>,
        d_action: &[S],
        d_aux: &[Vec<S>],
        lambdas: &[f64],
    ) -> Result<PopSanParams<S>> {
        self.check_trace(trace)?;
        if lambdas.len() != self.params.stages.len() {
            return Err(Error::shape("stage loss weights", self.params.stages.len(), lambdas.len()));
        }
        if d_action.len() != self.spec.act_dim {
            return Err(Error::shape("actor backward gradient", self.spec.act_dim, d_action.len()));
        }
        if d_aux.len() > self.params.aux.len() {
            return Err(Error::shape("auxiliary gradients", self.params.aux.len(), d_aux.len()));
        }
        let p = &self.params;
        let cfg = &self.spec.lif;
        let mut grads = p.zeros_like();
        let n_stages = p.stages.len();

        let lam_final = S::lit(lambdas[n_stages - 1]);
        let d_final: Vec<S> = d_action.iter().map(|&g| g * lam_final).collect();
        let dec = p.decoder.backward(&d_final, &trace.rates)?;
        grads.decoder.weight = dec.weight;
        grads.decoder.bias = dec.bias;
        let d_out_spikes = spread_rates(&dec.rates, trace.output.timesteps());
        let out_grads = p.output.backward(&d_out_spikes, &trace.output, cfg)?;
        grads.output.weight = out_grads.weight;
        grads.output.bias = out_grads.bias;
        let mut d_x = out_grads.input;

        for i in (0..n_stages).rev() {
            if i + 1 < n_stages {
                // d_x is the gradient w.r.t. the shrink output feeding stage i + 1.
                let (d_w, d_in) =
                    p.shrinks[i].backward(&d_x, &trace.shrinks[i], self.spec.shrink_through_mean)?;
                grads.shrinks[i].weight = d_w;
                d_x = d_in;
                let lam = lambdas[i];
                if lam != 0.0 && !trace.aux.is_empty() {
                    if let Some(g) = d_aux.get(i) {
                        let head = &p.aux[i];
                        let aux_trace = &trace.aux[i];
                        let scaled: Vec<S> = g.iter().map(|&x| x * S::lit(lam)).collect();
                        let dec = head.decoder.backward(&scaled, &aux_trace.rates)?;
                        let d_spk = spread_rates(&dec.rates, aux_trace.lif.timesteps());
                        let lg = head.lif.backward(&d_spk, &aux_trace.lif, cfg)?;
                        let gh = &mut grads.aux[i];
                        gh.decoder.weight = dec.weight;
                        gh.decoder.bias = dec.bias;
                        gh.lif.weight = lg.weight;
                        gh.lif.bias = lg.bias;
                        for (a, &b) in d_x.as_mut_slice().iter_mut().zip(lg.input.as_slice()) {
                            *a += b;
                        }
                    }
                }
            }
            for (k, layer) in p.stages[i].iter().enumerate().rev() {
                let lg = layer.backward(&d_x, &trace.stages[i][k], cfg)?;
                grads.stages[i][k].weight = lg.weight;
                grads.stages[i][k].bias = lg.bias;
                d_x = lg.input;
            }
        }

        let (d_mu, d_sigma) = p.encoder.backward(&d_x, &trace.activation, &trace.obs)?;
        grads.encoder.mu = d_mu;
        grads.encoder.sigma = d_sigma;
        Ok(grads)
    }

    /// One adaptive-moment step; the encoder widths are clamped afterwards.
    pub fn apply_update(
        &mut self,
        grads: &PopSanParams<S>,
        adam: &mut Adam<S>,
        config: &AdamConfig,
    ) -> Result<StepReport> {
        let names: Vec<String> = self.params.tensors().into_iter().map(|t| t.name).collect();
        let g: Vec<&[S]> = grads.tensors().into_iter().map(|t| t.data).collect();
        let mut report = adam.step(self.params.tensors_mut(), &g, config)?;
        report.skipped_names = report.skipped.iter().map(|&i| names[i].clone()).collect();
        self.params.encoder.clamp_sigma();
        Ok(report)
    }

    pub fn new_optimizer(&self) -> Adam<S> {
        Adam::new(self.params.tensors().iter().map(|t| t.data.len()))
    }

    /// Mean firing rate of every main-path LIF layer (hidden layers, then
    /// the output layer) recorded in `trace`.
    pub fn layer_spike_rates(trace: &ActorTrace<S>) -> Vec<f64> {
        trace
            .stages
            .iter()
            .flatten()
            .chain(std::iter::once(&trace.output))
            .map(|t| {
                let s = t.spikes.as_slice();
                s.iter().map(|x| x.as_f64()).sum::<f64>() / s.len() as f64
            })
            .collect()
    }
}

/// Rate gradient → per-timestep spike gradient (`fr = Σ_t o(t) / T`).
fn spread_rates<S: Scalar>(d_rates: &[S], timesteps: usize) -> Matrix<S> {
    let inv_t = S::lit(timesteps as f64).recip();
    Matrix::from_fn(timesteps, d_rates.len(), |_, k| d_rates[k] * inv_t)
}

pub mod checkpoint;
