//! Dense tanh networks: the value critic and the ANN baseline actor.

use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::checkpoint::{self, ActorSpec, Checkpoint};
use crate::optim::{Adam, AdamConfig, StepReport};
use crate::rng::{stream, streams};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<S> {
    /// `[n_out × n_in]`
    pub weight: Matrix<S>,
    pub bias: Vec<S>,
}

/// Fully connected network with tanh hidden units and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<S> {
    pub layers: Vec<Dense<S>>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<S> {
    /// Input to each layer; `inputs[0]` is the network input.
    pub inputs: Vec<Vec<S>>,
}

impl<S: Scalar> Mlp<S> {
    /// Glorot-uniform weights, zero biases; the last layer's weights are
    /// multiplied by `out_gain`.
    pub fn new<R: Rng>(sizes: &[usize], out_gain: f64, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!(
                "mlp needs at least input and output sizes, all non-zero: {sizes:?}"
            )));
        }
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let gain = if k + 1 == n { out_gain } else { 1.0 };
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Dense {
                    weight: Matrix::from_fn(w[1], w[0], |_, _| S::lit(gain * dist.sample(rng))),
                    bias: vec![S::zero(); w[1]],
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }

    pub fn forward(&self, x: &[S]) -> Result<(Vec<S>, MlpCache<S>)> {
        if x.len() != self.n_in() {
            return Err(Error::shape("mlp input", self.n_in(), x.len()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = vec![S::zero(); layer.weight.rows()];
            layer.weight.matvec_into(&h, &mut z);
            for (zi, &b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
                if k != last {
                    *zi = zi.tanh();
                }
            }
            inputs.push(std::mem::replace(&mut h, z));
        }
        Ok((h, MlpCache { inputs }))
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(&self, cache: &MlpCache<S>, d_out: &[S], grads: &mut Mlp<S>) -> Result<Vec<S>> {
        if d_out.len() != self.n_out() {
            return Err(Error::shape("mlp backward gradient", self.n_out(), d_out.len()));
        }
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::Mismatch("mlp cache does not match network depth".into()));
        }
        let mut delta = d_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &cache.inputs[k];
            grads.layers[k].weight.add_outer(&delta, input);
            for (b, &d) in grads.layers[k].bias.iter_mut().zip(&delta) {
                *b += d;
            }
            let mut d_in = vec![S::zero(); layer.weight.cols()];
            layer.weight.matvec_t_acc(&delta, &mut d_in);
            if k > 0 {
                // `input` is tanh output of the previous layer.
                for (d, &a) in d_in.iter_mut().zip(input) {
                    *d *= S::one() - a * a;
                }
            }
            delta = d_in;
        }
        Ok(delta)
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![S::zero(); l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{}.weight", k + 1), l.weight.shape().to_vec(), l.weight.as_slice()));
            out.push((format!("layer{}.bias", k + 1), vec![l.bias.len()], l.bias.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias);
        }
        out
    }

    pub fn accumulate(&mut self, other: &Self) {
        let src: Vec<&[S]> = other.tensors().into_iter().map(|t| t.2).collect();
        for (d, s) in self.tensors_mut().into_iter().zip(src) {
            d.iter_mut().zip(s).for_each(|(d, &s)| *d += s);
        }
    }

    pub fn new_optimizer(&self) -> Adam<S> {
        Adam::new(self.tensors().iter().map(|t| t.2.len()))
    }

    pub fn apply_update(&mut self, grads: &Self, adam: &mut Adam<S>, cfg: &AdamConfig) -> Result<StepReport> {
        let g: Vec<&[S]> = grads.tensors().into_iter().map(|t| t.2).collect();
        adam.step(self.tensors_mut(), &g, cfg)
    }
}

/// State-value network `obs → hidden → 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic<S> {
    pub net: Mlp<S>,
}

impl<S: Scalar> Critic<S> {
    pub fn new(obs_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut rng = stream(seed, streams::CRITIC_INIT);
        Ok(Critic {
            net: Mlp::new(&sizes, 1.0, &mut rng)?,
        })
    }

    pub fn value(&self, obs: &[S]) -> Result<S> {
        Ok(self.net.forward(obs)?.0[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenseSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub seed: u64,
}

impl Default for DenseSpec {
    fn default() -> Self {
        DenseSpec {
            obs_dim: 6,
            act_dim: 2,
            hidden: vec![64, 64],
            init_log_std: -0.5,
            seed: 0,
        }
    }
}

impl DenseSpec {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.obs_dim == 0 || self.act_dim == 0 {
            p.push("dense actor needs obs_dim and act_dim >= 1".to_string());
        }
        if self.hidden.contains(&0) {
            p.push(format!("dense hidden widths must be >= 1, got {:?}", self.hidden));
        }
        if !self.init_log_std.is_finite() {
            p.push(format!("dense init_log_std must be finite, got {}", self.init_log_std));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// ANN baseline actor: a tanh MLP producing the Gaussian mean, plus a
/// learnable state-independent log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseActor<S> {
    pub spec: DenseSpec,
    pub net: Mlp<S>,
    pub log_std: Vec<S>,
}

impl<S: Scalar> DenseActor<S> {
    pub fn new(spec: DenseSpec) -> Result<Self> {
        spec.validate()?;
        let mut sizes = vec![spec.obs_dim];
        sizes.extend_from_slice(&spec.hidden);
        sizes.push(spec.act_dim);
        let mut rng = stream(spec.seed, streams::INIT);
        let net = Mlp::new(&sizes, 0.1, &mut rng)?;
        let log_std = vec![S::lit(spec.init_log_std); spec.act_dim];
        Ok(DenseActor { spec, net, log_std })
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        let mut t = self.net.tensors();
        t.push(("log_std".into(), vec![self.log_std.len()], self.log_std.as_slice()));
        t
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(
            &ActorSpec::Dense {
                spec: self.spec.clone(),
            },
            &self.named_tensors(),
        )
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec = match &ckpt.actor {
            ActorSpec::Dense { spec } => spec.clone(),
            ActorSpec::Popsan { .. } => {
                return Err(Error::Mismatch("checkpoint holds a PopSAN, not a dense actor".into()))
            }
        };
        let mut actor = DenseActor::new(spec)?;
        let meta: Vec<(String, Vec<usize>)> = actor
            .named_tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        let mut slots = actor.net.tensors_mut();
        slots.push(&mut actor.log_std);
        ckpt.restore_into(meta.into_iter().zip(slots).map(|((n, s), d)| (n, s, d)).collect())?;
        Ok(actor)
    }
}
