//! Temporal shrinking between stages.
//!
//! A stage's output `O` (`[T_prev × n]`) is compressed to `T_next` steps by a
//! learnable allocation: logits `G[t2][t1] = W[t2][t1] · m[t1]`, where `m` is
//! the per-step population mean of `O`, are softmax-normalised over the target
//! axis so every source step distributes exactly its own mass, and the result
//! is `I = S · O`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkLayer<S> {
    /// Allocation logits, `[T_next × T_prev]`.
    pub weight: Matrix<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkCache<S> {
    pub input: Matrix<S>,
    pub mean: Vec<S>,
    /// Column-stochastic allocation `[T_next × T_prev]`.
    pub allocation: Matrix<S>,
}

/// Mean activity of each row of `spikes`.
pub fn pop_mean<S: Scalar>(spikes: &Matrix<S>) -> Result<Vec<S>> {
    if spikes.rows() == 0 || spikes.cols() == 0 {
        return Err(Error::Config("pop_mean of an empty tensor".into()));
    }
    let n = S::lit(spikes.cols() as f64);
    Ok((0..spikes.rows())
        .map(|t| spikes.row(t).iter().copied().sum::<S>() / n)
        .collect())
}

impl<S: Scalar> ShrinkLayer<S> {
    /// Zero logits: uniform allocation.
    pub fn new(t_prev: usize, t_next: usize) -> Result<Self> {
        if t_next == 0 || t_prev <= t_next {
            return Err(Error::Config(format!(
                "shrink needs T_prev > T_next >= 1, got {t_prev} -> {t_next}"
            )));
        }
        Ok(ShrinkLayer {
            weight: Matrix::zeros(t_next, t_prev),
        })
    }

    pub fn t_prev(&self) -> usize {
        self.weight.cols()
    }

    pub fn t_next(&self) -> usize {
        self.weight.rows()
    }

    pub fn allocation(&self, mean: &[S]) -> Matrix<S> {
        let (t_next, t_prev) = (self.t_next(), self.t_prev());
        let mut alloc = Matrix::zeros(t_next, t_prev);
        let mut col = vec![S::zero(); t_next];
        for t1 in 0..t_prev {
            for (t2, g) in col.iter_mut().enumerate() {
                *g = self.weight.get(t2, t1) * mean[t1];
            }
            let max = col.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for g in col.iter_mut() {
                *g = (*g - max).exp();
                total += *g;
            }
            for (t2, g) in col.iter().enumerate() {
                alloc.set(t2, t1, *g / total);
            }
        }
        alloc
    }

    pub fn forward(&self, input: &Matrix<S>) -> Result<(Matrix<S>, ShrinkCache<S>)> {
        if input.rows() != self.t_prev() {
            return Err(Error::shape("shrink input timesteps", self.t_prev(), input.rows()));
        }
        let mean = pop_mean(input)?;
        let alloc = self.allocation(&mean);
        let n = input.cols();
        let mut out = Matrix::zeros(self.t_next(), n);
        for t2 in 0..self.t_next() {
            let row = out.row_mut(t2);
            for t1 in 0..self.t_prev() {
                let s = alloc.get(t2, t1);
                for (o, &x) in row.iter_mut().zip(input.row(t1)) {
                    *o += s * x;
                }
            }
        }
        Ok((
            out,
            ShrinkCache {
                input: input.clone(),
                mean,
                allocation: alloc,
            },
        ))
    }

    /// Exact gradients of `I = softmax(W ⊙ m) · O` with respect to `W` and
    /// `O`. With `through_mean` the dependence of `m` on `O` is included.
    pub fn backward(
        &self,
        d_out: &Matrix<S>,
        cache: &ShrinkCache<S>,
        through_mean: bool,
    ) -> Result<(Matrix<S>, Matrix<S>)> {
        let (t_next, t_prev) = (self.t_next(), self.t_prev());
        let n = cache.input.cols();
        if d_out.shape() != [t_next, n] {
            return Err(Error::shape("shrink backward gradient", [t_next, n], d_out.shape()));
        }
        if cache.allocation.shape() != [t_next, t_prev] || cache.input.rows() != t_prev {
            return Err(Error::shape(
                "shrink backward cache",
                [t_next, t_prev],
                cache.allocation.shape(),
            ));
        }
        let alloc = &cache.allocation;
        let mut d_input = Matrix::zeros(t_prev, n);
        let mut d_weight = Matrix::zeros(t_next, t_prev);
        let mut d_alloc = vec![S::zero(); t_next];
        let inv_n = S::lit(n as f64).recip();
        for t1 in 0..t_prev {
            let o_row = cache.input.row(t1);
            for t2 in 0..t_next {
                d_alloc[t2] = crate::tensor::dot(d_out.row(t2), o_row);
            }
            let weighted: S = (0..t_next).map(|t2| alloc.get(t2, t1) * d_alloc[t2]).sum();
            let mut d_mean = S::zero();
            for t2 in 0..t_next {
                let d_logit = alloc.get(t2, t1) * (d_alloc[t2] - weighted);
                d_weight.set(t2, t1, d_logit * cache.mean[t1]);
                d_mean += d_logit * self.weight.get(t2, t1);
            }
            let row = d_input.row_mut(t1);
            for t2 in 0..t_next {
                let s = alloc.get(t2, t1);
                for (d, &g) in row.iter_mut().zip(d_out.row(t2)) {
                    *d += s * g;
                }
            }
            if through_mean {
                let spread = d_mean * inv_n;
                row.iter_mut().for_each(|d| *d += spread);
            }
        }
        Ok((d_weight, d_input))
    }
}
