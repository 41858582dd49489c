//! Central finite-difference checks of every analytic gradient, run on the
//! smooth (surrogate) model where forward and backward agree exactly.

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::Serialize;

use crate::encoder::PopulationCoder;
use crate::error::{Error, Result};
use crate::lif::{LifConfig, LifLayer, SpikeMode};
use crate::network::{Decoder, Dynamics, Mode, NetworkSpec, PopSan};
use crate::rng::{stream, streams};
use crate::shrink::ShrinkLayer;
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    /// Largest network the end-to-end suite accepts.
    pub max_params: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            floor: 1e-6,
            max_params: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Offender {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    /// Whether the suite covers a whole network rather than one module.
    pub end_to_end: bool,
    pub checked: usize,
    pub worst: Option<Offender>,
    /// Tensors whose analytic gradient was identically zero.
    pub zero_tensors: Vec<String>,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_error)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub suites: Vec<SuiteReport>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<(&SuiteReport, &Offender)> {
        self.suites
            .iter()
            .filter_map(|s| s.worst.as_ref().map(|w| (s, w)))
            .max_by(|a, b| a.1.rel_error.total_cmp(&b.1.rel_error))
    }

    pub fn max_rel_error(&self, end_to_end: bool) -> f64 {
        self.suites
            .iter()
            .filter(|s| s.end_to_end == end_to_end)
            .map(SuiteReport::max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, module_tol: f64, end_to_end_tol: f64) -> bool {
        self.max_rel_error(false) <= module_tol && self.max_rel_error(true) <= end_to_end_tol
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Accumulates the worst element of one suite.
struct Checker<'a> {
    cfg: &'a GradCheckConfig,
    report: SuiteReport,
}

impl<'a> Checker<'a> {
    fn new(cfg: &'a GradCheckConfig, name: &str, end_to_end: bool) -> Self {
        Checker {
            cfg,
            report: SuiteReport {
                name: name.into(),
                end_to_end,
                checked: 0,
                worst: None,
                zero_tensors: Vec::new(),
            },
        }
    }

    /// Compares `analytic` against central differences of `loss`, where
    /// `loss(k, delta)` evaluates with element `k` shifted by `delta`.
    fn tensor(&mut self, name: &str, analytic: &[f64], mut loss: impl FnMut(usize, f64) -> Result<f64>) -> Result<()> {
        let h = self.cfg.step;
        if analytic.iter().all(|&a| a == 0.0) {
            self.report.zero_tensors.push(name.into());
        }
        for (k, &a) in analytic.iter().enumerate() {
            let numeric = (loss(k, h)? - loss(k, -h)?) / (2.0 * h);
            let rel = rel_error(a, numeric, self.cfg.floor);
            if !rel.is_finite() {
                return Err(Error::NonFinite(format!("gradient check of {name}[{k}]")));
            }
            self.report.checked += 1;
            if self.report.worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                self.report.worst = Some(Offender {
                    tensor: name.into(),
                    index: k,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        Ok(())
    }
}

fn random_matrix<R: Rng>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Matrix<f64> {
    let d = Uniform::new(lo, hi).expect("valid range");
    Matrix::from_fn(rows, cols, |_, _| d.sample(rng))
}

fn random_vec<R: Rng>(n: usize, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    let d = Uniform::new(lo, hi).expect("valid range");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn shifted(m: &Matrix<f64>, k: usize, delta: f64) -> Matrix<f64> {
    let mut m = m.clone();
    m.as_mut_slice()[k] += delta;
    m
}

fn shifted_vec(v: &[f64], k: usize, delta: f64) -> Vec<f64> {
    let mut v = v.to_vec();
    v[k] += delta;
    v
}

/// Decoder gradients for a linear probe loss `r · a`.
pub fn check_decoder(cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut rng = stream(cfg.seed, streams::INIT);
    let dec = Decoder {
        weight: random_matrix(2, 4, -1.0, 1.0, &mut rng),
        bias: random_vec(2, -1.0, 1.0, &mut rng),
    };
    let rates = random_vec(8, 0.0, 1.0, &mut rng);
    let r = random_vec(2, -1.0, 1.0, &mut rng);
    let g = dec.backward(&r, &rates)?;
    let loss = |d: &Decoder<f64>, fr: &[f64]| Ok(dot(&d.forward(fr)?, &r));
    let mut c = Checker::new(cfg, "decoder", false);
    c.tensor("decoder.weight", g.weight.as_slice(), |k, h| {
        let mut d = dec.clone();
        d.weight.as_mut_slice()[k] += h;
        loss(&d, &rates)
    })?;
    c.tensor("decoder.bias", &g.bias, |k, h| {
        let mut d = dec.clone();
        d.bias[k] += h;
        loss(&d, &rates)
    })?;
    c.tensor("decoder.rates", &g.rates, |k, h| loss(&dec, &shifted_vec(&rates, k, h)))?;
    Ok(c.report)
}

/// LIF layer gradients over several timesteps, smooth spikes.
pub fn check_lif(cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut rng = stream(cfg.seed, streams::INIT + 1);
    let lif = LifConfig::default();
    let (t, n_in, n_out) = (4, 5, 4);
    let layer = LifLayer {
        weight: random_matrix(n_out, n_in, -0.6, 0.9, &mut rng),
        bias: random_vec(n_out, -0.2, 0.4, &mut rng),
    };
    let input = random_matrix(t, n_in, 0.0, 1.0, &mut rng);
    let probe = random_matrix(t, n_out, -1.0, 1.0, &mut rng);
    let trace = layer.forward(&input, &lif, SpikeMode::Smooth)?;
    let g = layer.backward(&probe, &trace, &lif)?;
    let loss = |l: &LifLayer<f64>, x: &Matrix<f64>| -> Result<f64> {
        let tr = l.forward(x, &lif, SpikeMode::Smooth)?;
        Ok(dot(tr.spikes.as_slice(), probe.as_slice()))
    };
    let mut c = Checker::new(cfg, "lif", false);
    c.tensor("lif.weight", g.weight.as_slice(), |k, h| {
        let mut l = layer.clone();
        l.weight.as_mut_slice()[k] += h;
        loss(&l, &input)
    })?;
    c.tensor("lif.bias", &g.bias, |k, h| {
        let mut l = layer.clone();
        l.bias[k] += h;
        loss(&l, &input)
    })?;
    c.tensor("lif.input", g.input.as_slice(), |k, h| loss(&layer, &shifted(&input, k, h)))?;
    Ok(c.report)
}

/// Shrink-layer gradients, including the path through the population mean.
pub fn check_shrink(cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut rng = stream(cfg.seed, streams::INIT + 2);
    let mut layer = ShrinkLayer::<f64>::new(4, 2)?;
    layer.weight = random_matrix(2, 4, -2.0, 2.0, &mut rng);
    let input = random_matrix(4, 5, 0.0, 1.0, &mut rng);
    let probe = random_matrix(2, 5, -1.0, 1.0, &mut rng);
    let (_, cache) = layer.forward(&input)?;
    let (d_w, d_in) = layer.backward(&probe, &cache, true)?;
    let loss = |l: &ShrinkLayer<f64>, x: &Matrix<f64>| -> Result<f64> {
        Ok(dot(l.forward(x)?.0.as_slice(), probe.as_slice()))
    };
    let mut c = Checker::new(cfg, "shrink", false);
    c.tensor("shrink.weight", d_w.as_slice(), |k, h| {
        let mut l = layer.clone();
        l.weight.as_mut_slice()[k] += h;
        loss(&l, &input)
    })?;
    c.tensor("shrink.input", d_in.as_slice(), |k, h| loss(&layer, &shifted(&input, k, h)))?;
    Ok(c.report)
}

/// Encoder centre and width gradients through the receptive fields.
pub fn check_encoder(cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut rng = stream(cfg.seed, streams::INIT + 3);
    let coder = PopulationCoder::<f64>::new(&[-1.0, -2.0], &[1.0, 2.0], 4)?;
    let obs = vec![0.3, -0.7];
    let t = 3;
    let probe = random_matrix(t, coder.neurons(), -1.0, 1.0, &mut rng);
    // Smooth input spikes repeat the activation at every timestep.
    let loss = |c: &PopulationCoder<f64>| -> Result<f64> {
        let a = c.receptive_field(&obs)?;
        Ok((0..t).map(|s| dot(a.as_slice(), probe.row(s))).sum())
    };
    let act = coder.receptive_field(&obs)?;
    let (d_mu, d_sigma) = coder.backward(&probe, &act, &obs)?;
    let mut c = Checker::new(cfg, "encoder", false);
    c.tensor("encoder.mu", d_mu.as_slice(), |k, h| {
        let mut e = coder.clone();
        e.mu.as_mut_slice()[k] += h;
        loss(&e)
    })?;
    c.tensor("encoder.sigma", d_sigma.as_slice(), |k, h| {
        let mut e = coder.clone();
        e.sigma.as_mut_slice()[k] += h;
        loss(&e)
    })?;
    Ok(c.report)
}

/// Whether `name` legitimately receives no gradient in `spec`: the log-std,
/// heads with zero weight, and shrinks onto a single timestep (their
/// allocation is identically 1).
pub fn idle_tensor(spec: &NetworkSpec, name: &str) -> bool {
    let lambdas = spec.lambdas();
    name == "log_std"
        || (0..lambdas.len() - 1).any(|i| {
            (lambdas[i] == 0.0 && name.starts_with(&format!("aux{}.", i + 1)))
                || (spec.stages[i + 1].timesteps == 1 && name == format!("shrink{}.weight", i + 1))
        })
}

/// Whole-network check on the smooth model: loss
/// `λ_I · r · a + Σ_i λ_i · r_i · aux_i` against every parameter.
pub fn check_network(spec: &NetworkSpec, cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let count = spec.param_count();
    if count > cfg.max_params {
        return Err(Error::Config(format!(
            "gradient check needs at most {} parameters, spec has {count}",
            cfg.max_params
        )));
    }
    let base = PopSan::<f64>::new(spec.clone())?;
    let mut rng = stream(cfg.seed, streams::INIT + 4);
    let lambdas = spec.lambdas();
    let n = lambdas.len();
    let idle = |name: &str| idle_tensor(spec, name);

    // Re-draw parameters and probe until most neurons sit on the linear part
    // of the smooth spike ramp and every path carries a non-trivial gradient.
    let mut attempt = 0;
    let (net, obs, r, r_aux, grads) = loop {
        let mut net = base.clone();
        let p = &mut net.params;
        let lif_layers = p
            .stages
            .iter_mut()
            .flatten()
            .chain(std::iter::once(&mut p.output))
            .chain(p.aux.iter_mut().map(|h| &mut h.lif));
        for l in lif_layers {
            l.weight = random_matrix(l.n_out(), l.n_in(), -0.8, 0.8, &mut rng);
            l.bias = random_vec(l.n_out(), 0.0, 0.6, &mut rng);
        }
        for s in &mut p.shrinks {
            s.weight = random_matrix(s.t_next(), s.t_prev(), -1.5, 1.5, &mut rng);
        }
        p.decoder.bias = random_vec(spec.act_dim, -0.5, 0.5, &mut rng);
        let obs: Vec<f64> = spec
            .obs_low
            .iter()
            .zip(&spec.obs_high)
            .map(|(&lo, &hi)| Uniform::new(lo, hi).expect("valid range").sample(&mut rng) * 0.8)
            .collect();
        let r = random_vec(spec.act_dim, -1.0, 1.0, &mut rng);
        let r_aux: Vec<Vec<f64>> = (0..spec.aux_heads())
            .map(|_| random_vec(spec.act_dim, -1.0, 1.0, &mut rng))
            .collect();
        let (_, trace) = net.forward(&obs, Mode::Train, Dynamics::Smooth, &mut stream(0, 0))?;
        let grads = net.backward(&trace, &r, &r_aux)?;
        let covered = grads
            .tensors()
            .iter()
            .all(|t| idle(&t.name) || t.data.iter().any(|&g| g != 0.0));
        attempt += 1;
        if covered || attempt == 256 {
            break (net, obs, r, r_aux, grads);
        }
    };

    let loss = |net: &PopSan<f64>| -> Result<f64> {
        let (out, _) = net.forward(&obs, Mode::Train, Dynamics::Smooth, &mut stream(0, 0))?;
        let mut l = lambdas[n - 1] * dot(&out.action, &r);
        for (i, a) in out.aux_actions.iter().enumerate() {
            l += lambdas[i] * dot(a, &r_aux[i]);
        }
        Ok(l)
    };
    let names: Vec<String> = grads.tensors().iter().map(|t| t.name.clone()).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.to_vec()).collect();
    let mut c = Checker::new(cfg, "network", true);
    for (ti, name) in names.iter().enumerate() {
        c.tensor(name, &analytic[ti], |k, h| {
            let mut p = net.clone();
            p.params.tensors_mut()[ti][k] += h;
            loss(&p)
        })?;
    }
    Ok(c.report)
}

/// Every module suite plus the end-to-end suite on `spec`.
pub fn run_all(spec: &NetworkSpec, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if spec.param_count() > cfg.max_params {
        return Err(Error::Config(format!(
            "gradient check needs at most {} parameters, spec has {}",
            cfg.max_params,
            spec.param_count()
        )));
    }
    Ok(GradCheckReport {
        suites: vec![
            check_decoder(cfg)?,
            check_lif(cfg)?,
            check_shrink(cfg)?,
            check_encoder(cfg)?,
            check_network(spec, cfg)?,
        ],
    })
}
