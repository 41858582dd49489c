//! Population encoder: each observation dimension drives a block of neurons
//! with learnable Gaussian receptive fields.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Lower bound applied to receptive-field widths after every update.
pub const SIGMA_MIN: f64 = 1e-3;

/// Binary activity of a layer over the timesteps of one stage, `[T × n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrain<S>(Matrix<S>);

impl<S: Scalar> SpikeTrain<S> {
    /// Wraps a matrix after checking it is binary with at least one row.
    pub fn new(data: Matrix<S>) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::Config("spike train needs T >= 1".into()));
        }
        if data
            .as_slice()
            .iter()
            .any(|&x| x != S::zero() && x != S::one())
        {
            return Err(Error::Config("spike train entries must be 0 or 1".into()));
        }
        Ok(SpikeTrain(data))
    }

    pub fn timesteps(&self) -> usize {
        self.0.rows()
    }

    pub fn neurons(&self) -> usize {
        self.0.cols()
    }

    pub fn spike_count(&self) -> usize {
        self.0.as_slice().iter().filter(|&&x| x == S::one()).count()
    }

    pub fn as_matrix(&self) -> &Matrix<S> {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix<S> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationCoder<S> {
    obs_dim: usize,
    pop_size: usize,
    /// Receptive-field centres, `[obs_dim × pop_size]`.
    pub mu: Matrix<S>,
    /// Receptive-field widths, `[obs_dim × pop_size]`, strictly positive.
    pub sigma: Matrix<S>,
    obs_low: Vec<S>,
    obs_high: Vec<S>,
}

impl<S: Scalar> PopulationCoder<S> {
    /// Tiles each dimension's range with evenly spaced centres of equal width
    /// `(high - low) / (2 · pop_size)`.
    pub fn new(obs_low: &[S], obs_high: &[S], pop_size: usize) -> Result<Self> {
        if obs_low.len() != obs_high.len() {
            return Err(Error::shape("encoder range", obs_low.len(), obs_high.len()));
        }
        if obs_low.is_empty() || pop_size == 0 {
            return Err(Error::Config(
                "encoder needs obs_dim >= 1 and pop_size >= 1".into(),
            ));
        }
        for (i, (&lo, &hi)) in obs_low.iter().zip(obs_high).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::Config(format!(
                    "encoder range for dimension {i} must satisfy low < high, got [{lo}, {hi}]"
                )));
            }
        }
        let obs_dim = obs_low.len();
        let mu = Matrix::from_fn(obs_dim, pop_size, |i, j| {
            let (lo, hi) = (obs_low[i], obs_high[i]);
            if pop_size == 1 {
                (lo + hi) / S::lit(2.0)
            } else {
                lo + (hi - lo) * S::lit(j as f64) / S::lit((pop_size - 1) as f64)
            }
        });
        let sigma = Matrix::from_fn(obs_dim, pop_size, |i, _| {
            ((obs_high[i] - obs_low[i]) / S::lit(2.0 * pop_size as f64)).max(S::lit(SIGMA_MIN))
        });
        Ok(PopulationCoder {
            obs_dim,
            pop_size,
            mu,
            sigma,
            obs_low: obs_low.to_vec(),
            obs_high: obs_high.to_vec(),
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn pop_size(&self) -> usize {
        self.pop_size
    }

    /// Total number of input neurons, `obs_dim · pop_size`.
    pub fn neurons(&self) -> usize {
        self.obs_dim * self.pop_size
    }

    pub fn obs_range(&self) -> (&[S], &[S]) {
        (&self.obs_low, &self.obs_high)
    }

    /// Gaussian activations `exp(-(s_i - μ_ij)² / (2σ_ij²))`.
    pub fn receptive_field(&self, obs: &[S]) -> Result<Matrix<S>> {
        if obs.len() != self.obs_dim {
            return Err(Error::shape("encoder observation", self.obs_dim, obs.len()));
        }
        if let Some(i) = obs.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "observation dimension {i} ({})",
                obs[i]
            )));
        }
        let two = S::lit(2.0);
        Ok(Matrix::from_fn(self.obs_dim, self.pop_size, |i, j| {
            let d = obs[i] - self.mu.get(i, j);
            let sd = self.sigma.get(i, j);
            (-(d * d) / (two * sd * sd)).exp()
        }))
    }

    /// Gradients of the loss with respect to `μ` and `σ` given the gradient
    /// with respect to the emitted input spikes. Spike sampling is treated as
    /// straight-through, so `∂o/∂A = 1` at every timestep.
    pub fn backward(
        &self,
        d_spikes: &Matrix<S>,
        activation: &Matrix<S>,
        obs: &[S],
    ) -> Result<(Matrix<S>, Matrix<S>)> {
        if d_spikes.cols() != self.neurons() {
            return Err(Error::shape(
                "encoder backward spike gradient",
                self.neurons(),
                d_spikes.cols(),
            ));
        }
        if activation.shape() != self.mu.shape() {
            return Err(Error::shape(
                "encoder backward activation",
                self.mu.shape(),
                activation.shape(),
            ));
        }
        if obs.len() != self.obs_dim {
            return Err(Error::shape("encoder backward observation", self.obs_dim, obs.len()));
        }
        let mut d_mu = Matrix::zeros(self.obs_dim, self.pop_size);
        let mut d_sigma = Matrix::zeros(self.obs_dim, self.pop_size);
        for i in 0..self.obs_dim {
            for j in 0..self.pop_size {
                let k = i * self.pop_size + j;
                let d_a: S = (0..d_spikes.rows()).map(|t| d_spikes.get(t, k)).sum();
                if d_a == S::zero() {
                    continue;
                }
                let a = activation.get(i, j);
                let diff = obs[i] - self.mu.get(i, j);
                let sd = self.sigma.get(i, j);
                let sd2 = sd * sd;
                d_mu.set(i, j, d_a * a * diff / sd2);
                d_sigma.set(i, j, d_a * a * diff * diff / (sd2 * sd));
            }
        }
        Ok((d_mu, d_sigma))
    }

    pub fn clamp_sigma(&mut self) {
        let floor = S::lit(SIGMA_MIN);
        for s in self.sigma.as_mut_slice() {
            if !(*s >= floor) {
                *s = floor;
            }
        }
    }
}

/// Bernoulli spike generation: neuron `k` fires at step `t` with probability
/// `A[k]`. Draws are taken timestep-major, neurons in dimension-major order.
pub fn encode_spikes<S: Scalar, R: Rng + ?Sized>(
    activation: &Matrix<S>,
    timesteps: usize,
    rng: &mut R,
) -> Result<SpikeTrain<S>> {
    if timesteps == 0 {
        return Err(Error::Config("encode_spikes needs T >= 1".into()));
    }
    let probs = activation.as_slice();
    if let Some(p) = probs.iter().find(|p| !(**p >= S::zero() && **p <= S::one())) {
        return Err(Error::Config(format!(
            "spike probability {p} outside [0, 1]"
        )));
    }
    let n = probs.len();
    let mut out = Matrix::zeros(timesteps, n);
    for t in 0..timesteps {
        let row = out.row_mut(t);
        for (o, &p) in row.iter_mut().zip(probs) {
            let u: f64 = rng.random();
            if u < p.as_f64() {
                *o = S::one();
            }
        }
    }
    Ok(SpikeTrain(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn coder() -> PopulationCoder<f64> {
        PopulationCoder::new(&[-1.0, 0.0], &[1.0, 4.0], 3).unwrap()
    }

    #[test]
    fn initial_tiling_is_even_and_widths_uniform() {
        let c = coder();
        assert_eq!(c.mu.row(0), &[-1.0, 0.0, 1.0]);
        assert_eq!(c.mu.row(1), &[0.0, 2.0, 4.0]);
        assert!(c.sigma.row(0).iter().all(|&s| (s - 2.0 / 6.0).abs() < 1e-15));
        assert!(c.sigma.row(1).iter().all(|&s| (s - 4.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn activation_is_one_at_centre_and_exp_half_one_sigma_away() {
        let c = coder();
        let a = c.receptive_field(&[0.0, 2.0]).unwrap();
        assert_eq!(a.get(0, 1), 1.0);
        assert_eq!(a.get(1, 1), 1.0);
        let s = 2.0 + c.sigma.get(1, 1);
        let a = c.receptive_field(&[0.0, s]).unwrap();
        assert!((a.get(1, 1) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((a.get(1, 1) - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn activation_matches_scalar_recomputation() {
        let mut c = coder();
        c.mu = Matrix::from_rows(&[vec![-0.7, 0.1, 0.9], vec![0.5, 1.5, 3.0]]).unwrap();
        c.sigma = Matrix::from_rows(&[vec![0.2, 0.4, 0.3], vec![1.0, 0.25, 0.6]]).unwrap();
        let s = [0.3, 2.2];
        let a = c.receptive_field(&s).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let mu = c.mu.get(i, j);
                let sd = c.sigma.get(i, j);
                let expect = f64::exp(-((s[i] - mu) * (s[i] - mu)) / (2.0 * sd * sd));
                assert!((a.get(i, j) - expect).abs() < 1e-15);
                assert!(a.get(i, j) > 0.0 && a.get(i, j) <= 1.0);
            }
        }
    }

    #[test]
    fn non_finite_observation_rejected() {
        let err = coder().receptive_field(&[f64::NAN, 0.0]).unwrap_err();
        assert!(err.to_string().contains("dimension 0"));
    }

    #[test]
    fn saturated_probabilities_give_constant_trains() {
        let mut rng = stream(1, 1);
        let zeros = Matrix::<f64>::zeros(2, 3);
        let ones = Matrix::<f64>::filled(2, 3, 1.0);
        assert_eq!(encode_spikes(&zeros, 5, &mut rng).unwrap().spike_count(), 0);
        assert_eq!(encode_spikes(&ones, 5, &mut rng).unwrap().spike_count(), 30);
        assert!(encode_spikes(&ones, 0, &mut rng).is_err());
    }

    #[test]
    fn empirical_rate_matches_probability() {
        let mut rng = stream(11, 1);
        let half = Matrix::<f64>::filled(1, 4, 0.5);
        let train = encode_spikes(&half, 10_000, &mut rng).unwrap();
        let rate = train.spike_count() as f64 / 40_000.0;
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn encoding_is_reproducible_for_a_seed() {
        let c = coder();
        let a = c.receptive_field(&[0.2, 1.7]).unwrap();
        let x = encode_spikes(&a, 8, &mut stream(3, 9)).unwrap();
        let y = encode_spikes(&a, 8, &mut stream(3, 9)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn receptive_field_is_equivariant_under_dimension_permutation() {
        let c = coder();
        let swapped = PopulationCoder {
            obs_dim: 2,
            pop_size: 3,
            mu: Matrix::from_rows(&[c.mu.row(1).to_vec(), c.mu.row(0).to_vec()]).unwrap(),
            sigma: Matrix::from_rows(&[c.sigma.row(1).to_vec(), c.sigma.row(0).to_vec()]).unwrap(),
            obs_low: vec![0.0, -1.0],
            obs_high: vec![4.0, 1.0],
        };
        let a = c.receptive_field(&[0.4, 3.1]).unwrap();
        let b = swapped.receptive_field(&[3.1, 0.4]).unwrap();
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(0));
        // Saturated probabilities make the sampled blocks permute exactly too.
        let sat = |m: &Matrix<f64>| m.map(|x| if x > 0.5 { 1.0 } else { 0.0 });
        let sa = encode_spikes(&sat(&a), 3, &mut stream(5, 0)).unwrap();
        let sb = encode_spikes(&sat(&b), 3, &mut stream(5, 0)).unwrap();
        for t in 0..3 {
            assert_eq!(&sa.as_matrix().row(t)[..3], &sb.as_matrix().row(t)[3..]);
            assert_eq!(&sa.as_matrix().row(t)[3..], &sb.as_matrix().row(t)[..3]);
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero() {
        let c = coder();
        let s = [0.3, 1.0];
        let a = c.receptive_field(&s).unwrap();
        let (dm, ds) = c.backward(&Matrix::zeros(4, 6), &a, &s).unwrap();
        assert!(dm.as_slice().iter().chain(ds.as_slice()).all(|&x| x == 0.0));
    }

    #[test]
    fn backward_vanishes_at_centres() {
        let mut c = PopulationCoder::<f64>::new(&[-1.0], &[1.0], 3).unwrap();
        c.mu = Matrix::from_rows(&[vec![0.25, 0.25, 0.25]]).unwrap();
        let s = [0.25];
        let a = c.receptive_field(&s).unwrap();
        let (dm, ds) = c.backward(&Matrix::filled(2, 3, 1.0), &a, &s).unwrap();
        assert!(dm.as_slice().iter().chain(ds.as_slice()).all(|&x| x == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences_of_surrogate_loss() {
        // Loss with the sampled spikes replaced by their probabilities:
        // L = Σ_t Σ_k g[t][k] · A[k]
        let mut c = PopulationCoder::<f64>::new(&[-1.0], &[1.0], 3).unwrap();
        c.sigma = Matrix::from_rows(&[vec![0.45, 0.6, 0.35]]).unwrap();
        let s = [0.37];
        let g = Matrix::from_rows(&[vec![0.3, -1.2, 0.8], vec![-0.5, 0.9, 0.4]]).unwrap();
        let loss = |c: &PopulationCoder<f64>| -> f64 {
            let a = c.receptive_field(&s).unwrap();
            (0..2)
                .map(|t| (0..3).map(|k| g.get(t, k) * a.get(0, k)).sum::<f64>())
                .sum()
        };
        let a = c.receptive_field(&s).unwrap();
        let (dm, ds) = c.backward(&g, &a, &s).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut p = c.clone();
            p.mu.set(0, j, c.mu.get(0, j) + h);
            let mut m = c.clone();
            m.mu.set(0, j, c.mu.get(0, j) - h);
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - dm.get(0, j)).abs() <= 1e-4 * fd.abs().max(1e-8), "mu {j}: {fd} vs {}", dm.get(0, j));

            let mut p = c.clone();
            p.sigma.set(0, j, c.sigma.get(0, j) + h);
            let mut m = c.clone();
            m.sigma.set(0, j, c.sigma.get(0, j) - h);
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - ds.get(0, j)).abs() <= 1e-4 * fd.abs().max(1e-8), "sigma {j}: {fd} vs {}", ds.get(0, j));
        }
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let c = coder();
        let s = [0.0, 0.0];
        let a = c.receptive_field(&s).unwrap();
        assert!(c.backward(&Matrix::zeros(2, 5), &a, &s).is_err());
    }

    #[test]
    fn clamp_restores_positive_widths() {
        let mut c = coder();
        c.sigma.set(0, 0, -3.0);
        c.sigma.set(1, 2, 0.0);
        c.clamp_sigma();
        assert!(c.sigma.as_slice().iter().all(|&s| s >= SIGMA_MIN));
    }
}
