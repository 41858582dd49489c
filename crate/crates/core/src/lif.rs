//! Current-based leaky integrate-and-fire layers.
//!
//! Per timestep:
//!
//! ```text
//! c ← d_c·c + W·x + b
//! v ← d_v·v·(1 − o_prev) + c
//! o = [v > v_th]          (v reset to v_rest where o = 1)
//! ```
//!
//! Spikes feed the next layer in the same timestep. The backward pass runs
//! the recurrences in reverse with a rectangular surrogate for `∂o/∂v` and
//! treats the reset gate `(1 − o_prev)` as a constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifConfig {
    pub decay_current: f64,
    pub decay_voltage: f64,
    pub threshold: f64,
    pub rest: f64,
    /// Width `a` of the rectangular surrogate window.
    pub surrogate_width: f64,
}

impl Default for LifConfig {
    fn default() -> Self {
        LifConfig {
            decay_current: 0.5,
            decay_voltage: 0.75,
            threshold: 0.5,
            rest: 0.0,
            surrogate_width: 1.0,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..1.0).contains(&x);
        if !in_unit(self.decay_current) {
            return Err(Error::Config(format!(
                "decay_current must be in [0, 1), got {}",
                self.decay_current
            )));
        }
        if !in_unit(self.decay_voltage) {
            return Err(Error::Config(format!(
                "decay_voltage must be in [0, 1), got {}",
                self.decay_voltage
            )));
        }
        if !(self.threshold > self.rest) || !self.threshold.is_finite() {
            return Err(Error::Config(format!(
                "threshold ({}) must exceed rest ({})",
                self.threshold, self.rest
            )));
        }
        if !(self.surrogate_width > 0.0 && self.surrogate_width.is_finite()) {
            return Err(Error::Config(format!(
                "surrogate_width must be positive, got {}",
                self.surrogate_width
            )));
        }
        Ok(())
    }

    /// Rectangular surrogate: `1/a` inside `|v − v_th| < a/2`, else 0.
    #[inline]
    pub fn surrogate_grad<S: Scalar>(&self, v: S) -> S {
        let a = S::lit(self.surrogate_width);
        if (v - S::lit(self.threshold)).abs() < a / S::lit(2.0) {
            a.recip()
        } else {
            S::zero()
        }
    }
}

/// How the spike nonlinearity is evaluated in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    /// Binary Heaviside spikes with hard reset.
    Hard,
    /// Piecewise-linear ramp whose derivative equals the rectangular
    /// surrogate; the reset gate still uses the Heaviside of `v`. This is the
    /// smooth model finite-difference checks are run against.
    Smooth,
}

/// Trainable parameters of one fully connected LIF layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifLayer<S> {
    /// `[n_out × n_in]`
    pub weight: Matrix<S>,
    pub bias: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifState<S> {
    pub current: Vec<S>,
    pub voltage: Vec<S>,
    pub prev_spikes: Vec<S>,
}

impl<S: Scalar> LifState<S> {
    pub fn resting(n: usize, cfg: &LifConfig) -> Self {
        LifState {
            current: vec![S::zero(); n],
            voltage: vec![S::lit(cfg.rest); n],
            prev_spikes: vec![S::zero(); n],
        }
    }
}

/// Everything the backward pass needs from one forward run.
#[derive(Debug, Clone, PartialEq)]
pub struct LifTrace<S> {
    /// `[T × n_in]`
    pub input: Matrix<S>,
    /// `[T × n_out]` currents after integration.
    pub current: Matrix<S>,
    /// `[T × n_out]` voltages before reset.
    pub voltage: Matrix<S>,
    /// `[T × n_out]` emitted spikes.
    pub spikes: Matrix<S>,
    /// `[T × n_out]` reset gate applied to the carried voltage at each step.
    pub gate: Matrix<S>,
}

impl<S: Scalar> LifTrace<S> {
    pub fn timesteps(&self) -> usize {
        self.spikes.rows()
    }
}

/// Per-neuron values produced by a single step.
#[derive(Debug, Clone)]
pub struct StepOutput<S> {
    pub spikes: Vec<S>,
    pub voltage_pre_reset: Vec<S>,
    pub gate: Vec<S>,
}

pub struct LayerGrads<S> {
    pub weight: Matrix<S>,
    pub bias: Vec<S>,
    pub input: Matrix<S>,
}

impl<S: Scalar> LifLayer<S> {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        LifLayer {
            weight: Matrix::zeros(n_out, n_in),
            bias: vec![S::zero(); n_out],
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn n_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn step(
        &self,
        x: &[S],
        state: &mut LifState<S>,
        cfg: &LifConfig,
        mode: SpikeMode,
    ) -> Result<StepOutput<S>> {
        let n = self.n_out();
        if x.len() != self.n_in() {
            return Err(Error::shape("lif step input", self.n_in(), x.len()));
        }
        if state.current.len() != n || state.voltage.len() != n || state.prev_spikes.len() != n {
            return Err(Error::shape(
                "lif step state",
                n,
                (state.current.len(), state.voltage.len(), state.prev_spikes.len()),
            ));
        }
        if state
            .current
            .iter()
            .chain(&state.voltage)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("lif state".into()));
        }

        let d_c = S::lit(cfg.decay_current);
        let d_v = S::lit(cfg.decay_voltage);
        let v_th = S::lit(cfg.threshold);
        let rest = S::lit(cfg.rest);
        let width = S::lit(cfg.surrogate_width);
        let half = S::lit(0.5);

        let mut drive = vec![S::zero(); n];
        self.weight.matvec_into(x, &mut drive);

        let mut out = StepOutput {
            spikes: vec![S::zero(); n],
            voltage_pre_reset: vec![S::zero(); n],
            gate: vec![S::zero(); n],
        };
        for j in 0..n {
            let gate = S::one() - state.prev_spikes[j];
            let c = d_c * state.current[j] + drive[j] + self.bias[j];
            let v = d_v * state.voltage[j] * gate + c;
            if !(c.is_finite() && v.is_finite()) {
                return Err(Error::NonFinite(format!("lif neuron {j}")));
            }
            let fired = v > v_th;
            let o = match mode {
                SpikeMode::Hard => {
                    if fired {
                        S::one()
                    } else {
                        S::zero()
                    }
                }
                SpikeMode::Smooth => ((v - v_th) / width + half).max(S::zero()).min(S::one()),
            };
            state.current[j] = c;
            out.voltage_pre_reset[j] = v;
            out.gate[j] = gate;
            out.spikes[j] = o;
            match mode {
                SpikeMode::Hard => {
                    state.voltage[j] = if fired { rest } else { v };
                    state.prev_spikes[j] = o;
                }
                SpikeMode::Smooth => {
                    state.voltage[j] = v;
                    state.prev_spikes[j] = if fired { S::one() } else { S::zero() };
                }
            }
        }
        Ok(out)
    }

    /// Simulates the layer from rest over every row of `input` (`[T × n_in]`).
    pub fn forward(
        &self,
        input: &Matrix<S>,
        cfg: &LifConfig,
        mode: SpikeMode,
    ) -> Result<LifTrace<S>> {
        let steps = input.rows();
        if steps == 0 {
            return Err(Error::Config("lif forward needs T >= 1".into()));
        }
        if input.cols() != self.n_in() {
            return Err(Error::shape("lif forward input", self.n_in(), input.cols()));
        }
        let n = self.n_out();
        let mut state = LifState::resting(n, cfg);
        let mut trace = LifTrace {
            input: input.clone(),
            current: Matrix::zeros(steps, n),
            voltage: Matrix::zeros(steps, n),
            spikes: Matrix::zeros(steps, n),
            gate: Matrix::zeros(steps, n),
        };
        for t in 0..steps {
            let out = self.step(input.row(t), &mut state, cfg, mode)?;
            trace.current.row_mut(t).copy_from_slice(&state.current);
            trace.voltage.row_mut(t).copy_from_slice(&out.voltage_pre_reset);
            trace.spikes.row_mut(t).copy_from_slice(&out.spikes);
            trace.gate.row_mut(t).copy_from_slice(&out.gate);
        }
        Ok(trace)
    }

    /// Reverse-time recursion through the voltage and current recurrences.
    ///
    /// `d_spikes` is `[T × n_out]`. Returns weight, bias and input gradients;
    /// the weight gradient accumulates `Σ_t ∇_{c(t)}L ⊗ x(t)` and the bias
    /// gradient `Σ_t ∇_{c(t)}L`.
    pub fn backward(
        &self,
        d_spikes: &Matrix<S>,
        trace: &LifTrace<S>,
        cfg: &LifConfig,
    ) -> Result<LayerGrads<S>> {
        let n = self.n_out();
        let steps = trace.timesteps();
        if d_spikes.shape() != [steps, n] {
            return Err(Error::shape("lif backward gradient", [steps, n], d_spikes.shape()));
        }
        if trace.input.shape() != [steps, self.n_in()] || trace.voltage.shape() != [steps, n] {
            return Err(Error::shape(
                "lif backward trace",
                ([steps, self.n_in()], [steps, n]),
                (trace.input.shape(), trace.voltage.shape()),
            ));
        }
        let d_c = S::lit(cfg.decay_current);
        let d_v = S::lit(cfg.decay_voltage);

        let mut grads = LayerGrads {
            weight: Matrix::zeros(n, self.n_in()),
            bias: vec![S::zero(); n],
            input: Matrix::zeros(steps, self.n_in()),
        };
        let mut gv_next = vec![S::zero(); n];
        let mut gc_next = vec![S::zero(); n];
        let mut gc = vec![S::zero(); n];
        for t in (0..steps).rev() {
            for j in 0..n {
                let carried = if t + 1 < steps {
                    gv_next[j] * d_v * trace.gate.get(t + 1, j)
                } else {
                    S::zero()
                };
                let gv = d_spikes.get(t, j) * cfg.surrogate_grad(trace.voltage.get(t, j)) + carried;
                gc[j] = gv + gc_next[j] * d_c;
                gv_next[j] = gv;
            }
            grads.weight.add_outer(&gc, trace.input.row(t));
            for (b, &g) in grads.bias.iter_mut().zip(&gc) {
                *b += g;
            }
            self.weight.matvec_t_acc(&gc, grads.input.row_mut(t));
            gc_next.copy_from_slice(&gc);
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_layer(w: f64) -> LifLayer<f64> {
        LifLayer {
            weight: Matrix::from_rows(&[vec![w]]).unwrap(),
            bias: vec![0.0],
        }
    }

    #[test]
    fn silent_without_input_or_bias() {
        let layer = LifLayer::<f64>::zeros(3, 2);
        let cfg = LifConfig::default();
        let mut state = LifState::resting(2, &cfg);
        let out = layer.step(&[0.0; 3], &mut state, &cfg, SpikeMode::Hard).unwrap();
        assert_eq!(out.spikes, vec![0.0, 0.0]);
        assert_eq!(state.current, vec![0.0, 0.0]);
        assert_eq!(state.voltage, vec![0.0, 0.0]);
    }

    #[test]
    fn single_step_fires_and_resets() {
        let layer = scalar_layer(0.6);
        let cfg = LifConfig::default();
        let mut state = LifState::resting(1, &cfg);
        let out = layer.step(&[1.0], &mut state, &cfg, SpikeMode::Hard).unwrap();
        assert!((state.current[0] - 0.6).abs() < 1e-15);
        assert!((out.voltage_pre_reset[0] - 0.6).abs() < 1e-15);
        assert_eq!(out.spikes, vec![1.0]);
        assert_eq!(state.voltage, vec![0.0]);
    }

    #[test]
    fn second_step_has_no_carried_voltage_after_reset() {
        let layer = scalar_layer(0.6);
        let cfg = LifConfig::default();
        let input = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let trace = layer.forward(&input, &cfg, SpikeMode::Hard).unwrap();
        // c2 = 0.5 · 0.6, v2 = 0.75 · 0 · (1 − 1) + c2
        assert!((trace.current.get(1, 0) - 0.3).abs() < 1e-15);
        assert!((trace.voltage.get(1, 0) - 0.3).abs() < 1e-15);
        assert_eq!(trace.spikes.get(1, 0), 0.0);
    }

    #[test]
    fn bias_above_threshold_fires_immediately() {
        let mut layer = LifLayer::<f64>::zeros(2, 3);
        layer.bias = vec![0.8; 3];
        let cfg = LifConfig {
            decay_voltage: 0.1,
            ..LifConfig::default()
        };
        let trace = layer
            .forward(&Matrix::zeros(4, 2), &cfg, SpikeMode::Hard)
            .unwrap();
        assert_eq!(trace.spikes.row(0), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn surrogate_window() {
        let cfg = LifConfig::default();
        assert_eq!(cfg.surrogate_grad(0.5f64), 1.0);
        assert_eq!(cfg.surrogate_grad(1.5f64), 0.0);
        assert_eq!(cfg.surrogate_grad(0.9f64), 1.0);
        let narrow = LifConfig {
            surrogate_width: 0.5,
            ..cfg
        };
        assert_eq!(narrow.surrogate_grad(0.5f64), 2.0);
        assert_eq!(narrow.surrogate_grad(0.8f64), 0.0);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let layer = LifLayer {
            weight: Matrix::from_rows(&[vec![0.4, -0.3], vec![0.9, 0.2]]).unwrap(),
            bias: vec![0.1, -0.05],
        };
        let cfg = LifConfig::default();
        let input = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let trace = layer.forward(&input, &cfg, SpikeMode::Hard).unwrap();
        let g = layer.backward(&Matrix::zeros(3, 2), &trace, &cfg).unwrap();
        assert!(g.weight.as_slice().iter().chain(&g.bias).chain(g.input.as_slice()).all(|&x| x == 0.0));
    }

    #[test]
    fn closed_surrogate_gate_blocks_gradients() {
        // Strongly negative drive keeps every voltage far below the window.
        let layer = LifLayer {
            weight: Matrix::from_rows(&[vec![-3.0, -2.0]]).unwrap(),
            bias: vec![-1.0],
        };
        let cfg = LifConfig::default();
        let input = Matrix::filled(3, 2, 1.0);
        let trace = layer.forward(&input, &cfg, SpikeMode::Hard).unwrap();
        assert_eq!(trace.spikes.as_slice().iter().sum::<f64>(), 0.0);
        let g = layer.backward(&Matrix::filled(3, 1, 1.0), &trace, &cfg).unwrap();
        assert!(g.weight.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.bias.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_shapes_and_non_finite_state() {
        let layer = LifLayer::<f64>::zeros(2, 1);
        let cfg = LifConfig::default();
        let mut state = LifState::resting(1, &cfg);
        assert!(layer.step(&[0.0], &mut state, &cfg, SpikeMode::Hard).is_err());
        state.voltage[0] = f64::NAN;
        assert!(matches!(
            layer.step(&[0.0, 0.0], &mut state, &cfg, SpikeMode::Hard),
            Err(Error::NonFinite(_))
        ));
        let trace = layer.forward(&Matrix::zeros(2, 2), &cfg, SpikeMode::Hard).unwrap();
        assert!(layer.backward(&Matrix::zeros(3, 1), &trace, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LifConfig::default().validate().is_ok());
        assert!(LifConfig { decay_current: 1.0, ..Default::default() }.validate().is_err());
        assert!(LifConfig { threshold: -0.1, ..Default::default() }.validate().is_err());
        assert!(LifConfig { surrogate_width: 0.0, ..Default::default() }.validate().is_err());
    }
}
