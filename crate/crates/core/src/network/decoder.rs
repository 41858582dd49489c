use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Linear read-out of firing rates. Action `i` sees only its own population
/// block `fr[i·P .. (i+1)·P]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder<S> {
    /// `[act_dim × pop_out]`
    pub weight: Matrix<S>,
    pub bias: Vec<S>,
}

pub struct DecoderGrads<S> {
    pub weight: Matrix<S>,
    pub bias: Vec<S>,
    pub rates: Vec<S>,
}

impl<S: Scalar> Decoder<S> {
    pub fn zeros(act_dim: usize, pop_out: usize) -> Self {
        Decoder {
            weight: Matrix::zeros(act_dim, pop_out),
            bias: vec![S::zero(); act_dim],
        }
    }

    pub fn act_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn pop_size(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, rates: &[S]) -> Result<Vec<S>> {
        let p = self.pop_size();
        if rates.len() != self.act_dim() * p {
            return Err(Error::shape("decoder rates", self.act_dim() * p, rates.len()));
        }
        Ok((0..self.act_dim())
            .map(|i| crate::tensor::dot(self.weight.row(i), &rates[i * p..(i + 1) * p]) + self.bias[i])
            .collect())
    }

    /// `∇W_i = ∇a_i · fr_i`, `∇b_i = ∇a_i`, `∇fr_i = ∇a_i · W_i`.
    pub fn backward(&self, d_action: &[S], rates: &[S]) -> Result<DecoderGrads<S>> {
        let (a, p) = (self.act_dim(), self.pop_size());
        if d_action.len() != a {
            return Err(Error::shape("decoder backward gradient", a, d_action.len()));
        }
        if rates.len() != a * p {
            return Err(Error::shape("decoder backward rates", a * p, rates.len()));
        }
        let mut grads = DecoderGrads {
            weight: Matrix::zeros(a, p),
            bias: d_action.to_vec(),
            rates: vec![S::zero(); a * p],
        };
        for i in 0..a {
            let g = d_action[i];
            for j in 0..p {
                grads.weight.set(i, j, g * rates[i * p + j]);
                grads.rates[i * p + j] = g * self.weight.get(i, j);
            }
        }
        Ok(grads)
    }
}

/// Firing rate of every neuron: spike count divided by the number of steps.
pub fn firing_rates<S: Scalar>(spikes: &Matrix<S>) -> Vec<S> {
    let inv_t = S::lit(spikes.rows() as f64).recip();
    let mut rates = vec![S::zero(); spikes.cols()];
    for t in 0..spikes.rows() {
        for (r, &o) in rates.iter_mut().zip(spikes.row(t)) {
            *r += o;
        }
    }
    rates.iter_mut().for_each(|r| *r *= inv_t);
    rates
}
