//! Acceptance suite: one pass/fail line per criterion, non-zero exit status
//! if any criterion fails. Artifacts land in `target/tmp/acceptance`.

mod common;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use common::{random_lif_instance, rows, scalar_lif};
use popsan::energy::{count_ops, energy_stats, estimate_energy, ActivityProfile, EnergyModel, LayerOps, OpCount, SavingsReport};
use popsan::envs::{evaluate_tracking, inject_noise, visited_observations, write_comparison_csv, EnvConfig, EvalConfig, TrackingReport};
use popsan::gradcheck::{check_network, idle_tensor, run_all, GradCheckConfig};
use popsan::lif::{LifConfig, LifLayer, LifState, SpikeMode};
use popsan::mlp::{DenseActor, DenseSpec};
use popsan::policy::Policy;
use popsan::ppo::{PpoConfig, UpdateStats};
use popsan::rng::stream;
use popsan::shrink::ShrinkLayer;
use popsan::tensor::Matrix;
use popsan::train::{train, TrainConfig};
use popsan::{NetworkSpec, PopSan64, StageConfig};
use rand::Rng;

const TRAIN_ITERATIONS: usize = 1000;
const SIGMAS: [f64; 4] = [0.0, 0.1, 0.2, 0.3];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

struct Suite {
    failures: usize,
    out: PathBuf,
}

impl Suite {
    fn run(&mut self, id: u32, name: &str, limit: Duration, f: impl FnOnce(&Path) -> Result<Verdict, String>) {
        let start = Instant::now();
        let v = f(&self.out).unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        let took = start.elapsed();
        let in_time = took <= limit;
        let passed = v.passed && in_time;
        if !passed {
            self.failures += 1;
        }
        let timing = if in_time {
            format!("{:.1}s", took.as_secs_f64())
        } else {
            format!("{:.1}s exceeds {:.0}s", took.as_secs_f64(), limit.as_secs_f64())
        };
        println!(
            "[{}] criterion {id}: {name}: {} ({timing})",
            if passed { "PASS" } else { "FAIL" },
            v.detail
        );
    }
}

fn info(line: impl AsRef<str>) {
    println!("       {}", line.as_ref());
}

fn e<T: std::fmt::Display>(err: T) -> String {
    err.to_string()
}

fn three_stage_small() -> NetworkSpec {
    let stage = |timesteps, width, lambda| StageConfig {
        timesteps,
        hidden_sizes: vec![width],
        lambda,
    };
    NetworkSpec {
        obs_dim: 2,
        act_dim: 2,
        pop_in: 3,
        pop_out: 3,
        stages: vec![stage(3, 8, 0.2), stage(2, 6, 0.2), stage(1, 6, 0.6)],
        obs_low: vec![-1.0, -1.0],
        obs_high: vec![1.0, 1.0],
        ..NetworkSpec::default()
    }
}

fn gradient_fidelity() -> Result<Verdict, String> {
    let cfg = GradCheckConfig::default();
    let mut module = 0.0f64;
    let mut e2e = 0.0f64;
    let mut unexpected = Vec::new();
    for spec in [NetworkSpec::tiny(), three_stage_small()] {
        if spec.param_count() > 500 {
            return Ok(verdict(false, format!("spec has {} > 500 parameters", spec.param_count())));
        }
        let r = run_all(&spec, &cfg).map_err(e)?;
        module = module.max(r.max_rel_error(false));
        e2e = e2e.max(r.max_rel_error(true));
        for s in &r.suites {
            unexpected.extend(s.zero_tensors.iter().filter(|t| !idle_tensor(&spec, t)).cloned());
        }
    }
    // A shrink onto more than one timestep, checked end to end as well.
    let mut wide = three_stage_small();
    wide.stages[2].timesteps = 2;
    wide.stages[1].timesteps = 3;
    wide.stages[0].timesteps = 4;
    let r = check_network(&wide, &cfg).map_err(e)?;
    e2e = e2e.max(r.max_rel_error());
    unexpected.extend(r.zero_tensors.iter().filter(|t| !idle_tensor(&wide, t)).cloned());
    let ok = module <= 1e-4 && e2e <= 1e-3 && unexpected.is_empty();
    let mut detail = format!("max rel. error per-module {module:.2e} (<= 1e-4), end-to-end {e2e:.2e} (<= 1e-3)");
    if !unexpected.is_empty() {
        detail.push_str(&format!("; untested tensors {unexpected:?}"));
    }
    Ok(verdict(ok, detail))
}

fn lif_semantics() -> Result<Verdict, String> {
    let cfg = LifConfig::default();
    let mut rng = stream(2024, 2);
    let mut problems = Vec::new();
    for case in 0..1000 {
        let a = random_lif_instance(&mut rng);
        let b = random_lif_instance(&mut rng);
        let la = LifLayer {
            weight: Matrix::from_rows(&a.weight).map_err(e)?,
            bias: a.bias.clone(),
        };
        let x = Matrix::from_rows(&a.inputs).map_err(e)?;
        let tr = la.forward(&x, &cfg, SpikeMode::Hard).map_err(e)?;
        let (spk, volt) = scalar_lif(&a.weight, &a.bias, &a.inputs, &cfg);
        if !tr.spikes.as_slice().iter().all(|&s| s == 0.0 || s == 1.0) {
            problems.push(format!("case {case}: non-binary spike"));
        }
        if rows(&tr.spikes) != spk
            || rows(&tr.voltage).iter().flatten().zip(volt.iter().flatten()).any(|(p, q)| (p - q).abs() > 1e-12)
        {
            problems.push(format!("case {case}: differs from scalar simulation"));
        }
        // Hard reset: the carried voltage after a spike is the resting value.
        let mut state = LifState::resting(la.n_out(), &cfg);
        for xt in &a.inputs {
            let out = la.step(xt, &mut state, &cfg, SpikeMode::Hard).map_err(e)?;
            for j in 0..la.n_out() {
                if out.spikes[j] == 1.0 && state.voltage[j] != cfg.rest {
                    problems.push(format!("case {case}: no reset"));
                }
            }
        }
        // Same-timestep propagation through a second layer fed by the first.
        let n_in = la.n_out();
        let w2: Vec<Vec<f64>> = b.weight.iter().map(|r| (0..n_in).map(|k| r[k % r.len()]).collect()).collect();
        let lb = LifLayer {
            weight: Matrix::from_rows(&w2).map_err(e)?,
            bias: b.bias.clone(),
        };
        let tr2 = lb.forward(&tr.spikes, &cfg, SpikeMode::Hard).map_err(e)?;
        if rows(&tr2.spikes) != scalar_lif(&w2, &b.bias, &spk, &cfg).0 {
            problems.push(format!("case {case}: delayed propagation"));
        }
        // Silence without drive.
        let quiet = LifLayer {
            weight: la.weight.clone(),
            bias: vec![0.0; la.n_out()],
        };
        let zero_in = quiet.forward(&Matrix::zeros(x.rows(), x.cols()), &cfg, SpikeMode::Hard).map_err(e)?;
        let zero_w = LifLayer::<f64>::zeros(la.n_in(), la.n_out()).forward(&x, &cfg, SpikeMode::Hard).map_err(e)?;
        if zero_in.spikes.as_slice().iter().chain(zero_w.spikes.as_slice()).any(|&s| s != 0.0) {
            problems.push(format!("case {case}: spikes without drive"));
        }
    }
    Ok(verdict(
        problems.is_empty(),
        format!("1000 random instances, {} violations{}", problems.len(), problems.first().map(|p| format!(" (first: {p})")).unwrap_or_default()),
    ))
}

fn shrink_conservation() -> Result<Verdict, String> {
    let mut rng = stream(2024, 3);
    let mut col_err = 0.0f64;
    let mut mass_err = 0.0f64;
    for _ in 0..1000 {
        let t_prev = rng.random_range(2..=8);
        let t_next = rng.random_range(1..t_prev);
        let n = rng.random_range(1..=64);
        let mut layer = ShrinkLayer::<f64>::new(t_prev, t_next).map_err(e)?;
        layer.weight = Matrix::from_fn(t_next, t_prev, |_, _| rng.random_range(-10.0..10.0));
        let input = Matrix::from_fn(t_prev, n, |_, _| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let (out, cache) = layer.forward(&input).map_err(e)?;
        for t1 in 0..t_prev {
            let s: f64 = (0..t_next).map(|t2| cache.allocation.get(t2, t1)).sum();
            col_err = col_err.max((s - 1.0).abs());
        }
        for k in 0..n {
            let before: f64 = (0..t_prev).map(|t| input.get(t, k)).sum();
            let after: f64 = (0..t_next).map(|t| out.get(t, k)).sum();
            mass_err = mass_err.max((before - after).abs());
        }
    }
    Ok(verdict(
        col_err <= 1e-12 && mass_err <= 1e-9,
        format!("1000 instances, max column-sum error {col_err:.1e} (<= 1e-12), max mass error {mass_err:.1e} (<= 1e-9)"),
    ))
}

fn stats_bits(s: &UpdateStats) -> Vec<u64> {
    let mut v: Vec<u64> = s.stage_losses.iter().map(|x| x.to_bits()).collect();
    for x in [s.value_loss, s.kl, s.clip_frac, s.entropy, s.grad_norm] {
        v.push(x.to_bits());
    }
    v.push(s.minibatches as u64);
    v.push(s.aborted as u64);
    v
}

fn auxiliary_reduction(out: &Path) -> Result<Verdict, String> {
    let mut spec = NetworkSpec::default();
    for (s, l) in spec.stages.iter_mut().zip([0.0, 0.0, 1.0]) {
        s.lambda = l;
    }
    let cfg = TrainConfig {
        iterations: 5,
        checkpoint_every: 0,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = |auxiliary: bool, dir: &str| -> Result<Vec<UpdateStats>, String> {
        let ppo = PpoConfig {
            auxiliary,
            ..PpoConfig::default()
        };
        let actor = PopSan64::new(spec.clone()).map_err(e)?;
        Ok(train(actor, &EnvConfig::default(), &ppo, &cfg, &out.join(dir)).map_err(e)?.history)
    };
    let staged = run(true, "reduction_staged")?;
    let single = run(false, "reduction_single")?;
    let identical = staged.len() == single.len()
        && staged.iter().zip(&single).all(|(a, b)| stats_bits(a) == stats_bits(b));
    let aux_zero = staged.iter().all(|s| s.stage_losses[..2].iter().all(|&l| l == 0.0));
    Ok(verdict(
        identical && aux_zero,
        format!(
            "{} iterations, UpdateStats bitwise identical: {identical}, auxiliary losses reported 0: {aux_zero}",
            staged.len()
        ),
    ))
}

fn mean_controller<P: Policy>(actor: &P) -> impl Fn(&[f64], u64) -> popsan::Result<Vec<f64>> + Sync + '_ {
    move |obs, seed| Ok(actor.forward(obs, false, seed)?.0.mean)
}

struct Trained {
    snn: PopSan64,
}

fn desk_training(out: &Path, trained: &mut Option<Trained>) -> Result<Verdict, String> {
    let cfg = TrainConfig {
        iterations: TRAIN_ITERATIONS,
        checkpoint_every: 250,
        seed: 0,
        ..TrainConfig::default()
    };
    let actor = PopSan64::new(NetworkSpec::default()).map_err(e)?;
    let initial = actor.clone();
    let result = train(actor, &EnvConfig::default(), &PpoConfig::default(), &cfg, &out.join("snn")).map_err(e)?;
    let eval = EvalConfig {
        episodes: 50,
        ..EvalConfig::default()
    };
    let report = evaluate_tracking(mean_controller(&result.actor), &EnvConfig::default(), &[0.0], &eval).map_err(e)?;
    let before = evaluate_tracking(mean_controller(&initial), &EnvConfig::default(), &[0.0], &eval).map_err(e)?;
    let rel = report.rows[0].relative_error();
    let rel0 = before.rows[0].relative_error();
    let decrease = 1.0 - rel / rel0;
    *trained = Some(Trained { snn: result.actor });
    Ok(verdict(
        rel <= 0.20 && decrease >= 0.5,
        format!(
            "{TRAIN_ITERATIONS} iterations, sigma 0 relative tracking error {:.1}% (<= 20%), down {:.0}% from iteration 0 (>= 50%)",
            100.0 * rel,
            100.0 * decrease
        ),
    ))
}

fn noise_robustness(out: &Path, trained: &Option<Trained>) -> Result<Verdict, String> {
    let t = trained.as_ref().ok_or("needs the trained network from criterion 5")?;
    let cfg = TrainConfig {
        iterations: TRAIN_ITERATIONS,
        checkpoint_every: 250,
        seed: 0,
        ..TrainConfig::default()
    };
    let dense = DenseActor::<f64>::new(DenseSpec::default()).map_err(e)?;
    let dense = train(dense, &EnvConfig::default(), &PpoConfig::default(), &cfg, &out.join("ann")).map_err(e)?.actor;

    let eval = EvalConfig {
        episodes: 50,
        ..EvalConfig::default()
    };
    let max_abs = AtomicU64::new(0);
    let nan = AtomicU64::new(0);
    let watch = |a: &[f64]| {
        for x in a {
            if x.is_finite() {
                max_abs.fetch_max(x.abs().to_bits(), Ordering::Relaxed);
            } else {
                nan.fetch_add(1, Ordering::Relaxed);
            }
        }
    };
    let snn_ctl = |o: &[f64], s: u64| {
        let a = Policy::forward(&t.snn, o, false, s)?.0.mean;
        watch(&a);
        Ok(a)
    };
    let ann_ctl = |o: &[f64], s: u64| {
        let a = Policy::forward(&dense, o, false, s)?.0.mean;
        watch(&a);
        Ok(a)
    };
    let snn = evaluate_tracking(snn_ctl, &EnvConfig::default(), &SIGMAS, &eval).map_err(e)?;
    let ann = evaluate_tracking(ann_ctl, &EnvConfig::default(), &SIGMAS, &eval).map_err(e)?;

    let path = out.join("noise_comparison.csv");
    write_comparison_csv(&path, &[("snn", &snn), ("ann", &ann)]).map_err(e)?;

    // Harness integrity: the wrapper's perturbation variance grows with sigma.
    let obs = [0.0; 6];
    let mut variances = Vec::new();
    for &sigma in &SIGMAS {
        let mut rng = stream(7, 4);
        let d: Vec<f64> = (0..20_000).map(|_| inject_noise(&obs, sigma, &mut rng)[2]).collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        variances.push(d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d.len() as f64);
    }
    let monotone = variances.windows(2).all(|w| w[1] > w[0]);
    let nan_count = nan.load(Ordering::Relaxed);
    let bound = f64::from_bits(max_abs.load(Ordering::Relaxed));
    let rows_ok = snn.rows.len() == SIGMAS.len() && ann.rows.len() == SIGMAS.len();
    for (name, rep) in [("SNN", &snn), ("ANN", &ann)] {
        let errs: Vec<String> = rep.rows.iter().map(|r| format!("{:.3}", r.relative_error())).collect();
        let div: Vec<usize> = rep.rows.iter().map(|r| r.diverged).collect();
        info(format!("{name} relative error at sigma {SIGMAS:?}: {errs:?}, diverged {div:?}"));
    }
    let degrade = |r: &TrackingReport| r.rows[3].relative_error() - r.rows[0].relative_error();
    info(format!(
        "degradation sigma 0 -> 0.3 (reported, not gated): SNN {:+.3}, ANN {:+.3}; SNN degrades less: {}",
        degrade(&snn),
        degrade(&ann),
        degrade(&snn) < degrade(&ann)
    ));
    info(format!("comparison CSV: {}", path.display()));
    Ok(verdict(
        nan_count == 0 && bound < 1e3 && monotone && rows_ok && path.exists(),
        format!(
            "non-finite actions {nan_count}, max |action| {bound:.2}, perturbation variance monotone: {monotone}"
        ),
    ))
}

fn energy_model(out: &Path, trained: &Option<Trained>) -> Result<Verdict, String> {
    let t = trained.as_ref().ok_or("needs the trained network from criterion 5")?;
    let m = EnergyModel::default();
    let fixture = OpCount {
        mac_ops: 100.0,
        ac_ops: 1000.0,
        shrink_mac_ops: 0.0,
        shrink_ac_ops: 0.0,
        layers: vec![LayerOps {
            name: "fixture".into(),
            mac: 100.0,
            ac: 1000.0,
        }],
        timesteps: 1,
    };
    let fixture_ok = estimate_energy(&fixture, &m) == 1360.0 && m.e_mac == 4.6 && m.e_ac == 0.9;

    let obs = visited_observations(mean_controller(&t.snn), &EnvConfig::default(), 2, 0).map_err(e)?;
    let obs: Vec<Vec<f64>> = obs.iter().map(|o| o.to_vec()).collect();
    let runs = count_ops(&t.snn, &obs, &mut stream(0, 5)).map_err(e)?;
    let (counts, traces): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let stats = energy_stats(&counts, &m).map_err(e)?;
    let profile = ActivityProfile::measure(&traces).map_err(e)?;
    let report = SavingsReport::sweep(&t.snn.spec, &profile, &[1, 2, 3], &m).map_err(e)?;
    report.write_csv(&out.join("energy.csv")).map_err(e)?;
    let savings: Vec<f64> = report.rows.iter().map(|r| r.savings_pct).collect();
    let decreasing = savings.windows(2).all(|w| w[1] < w[0]);
    info(format!(
        "measured over {} inferences: {:.0} +- {:.0} pJ per action, shrink accumulates {:.1} per action, mean spike rate {:.3}",
        stats.inferences,
        stats.mean_pj,
        stats.std_pj,
        stats.mean_shrink_ac_ops,
        profile.mean_spike_rate()
    ));
    info(format!(
        "ANN {:.0} pJ; SNN {:?} pJ",
        report.rows[0].ann_pj,
        report.rows.iter().map(|r| r.snn_pj.round()).collect::<Vec<_>>()
    ));
    Ok(verdict(
        fixture_ok && decreasing,
        format!(
            "100 MAC + 1000 AC = 1360 pJ: {fixture_ok}; savings at T_final 1/2/3: {:.2}% > {:.2}% > {:.2}%: {decreasing}",
            savings[0], savings[1], savings[2]
        ),
    ))
}

fn determinism(out: &Path, trained: &Option<Trained>) -> Result<Verdict, String> {
    let cfg = TrainConfig {
        iterations: 5,
        checkpoint_every: 0,
        seed: 3,
        ..TrainConfig::default()
    };
    let run = |dir: &str| -> Result<(Vec<u8>, PathBuf), String> {
        let actor = PopSan64::new(NetworkSpec::default()).map_err(e)?;
        let r = train(actor, &EnvConfig::default(), &PpoConfig::default(), &cfg, &out.join(dir)).map_err(e)?;
        Ok((std::fs::read(&r.metrics_path).map_err(e)?, r.final_checkpoint))
    };
    let (a, ckpt) = run("determinism_a")?;
    let (b, _) = run("determinism_b")?;
    let same_log = a == b;

    let net = match trained {
        Some(t) => t.snn.clone(),
        None => PopSan64::load_checkpoint(&ckpt).map_err(e)?,
    };
    let path = out.join("roundtrip.bin");
    net.save_checkpoint(&path).map_err(e)?;
    let back = PopSan64::load_checkpoint(&path).map_err(e)?;
    let mut same_actions = true;
    for i in 0..200u64 {
        let obs: Vec<f64> = (0..6).map(|k| ((i * 7 + k * 3) % 19) as f64 / 9.5 - 1.0).collect();
        let x = net.act(&obs, &mut stream(i, 1)).map_err(e)?;
        let y = back.act(&obs, &mut stream(i, 1)).map_err(e)?;
        same_actions &= x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits());
    }
    Ok(verdict(
        same_log && same_actions,
        format!("metrics CSV byte-identical across runs: {same_log}; 200 actions bitwise identical after reload: {same_actions}"),
    ))
}

fn main() {
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&out);
    std::fs::create_dir_all(&out).expect("create artifact directory");
    let mut suite = Suite { failures: 0, out };
    let mut trained = None;
    let secs = Duration::from_secs;

    suite.run(1, "gradient fidelity", secs(30), |_| gradient_fidelity());
    suite.run(2, "LIF semantics", secs(10), |_| lif_semantics());
    suite.run(3, "shrinking conservation", secs(5), |_| shrink_conservation());
    suite.run(4, "auxiliary-loss reduction", secs(120), auxiliary_reduction);
    suite.run(5, "desk-scale training", secs(30 * 60), |o| desk_training(o, &mut trained));
    suite.run(6, "noise robustness harness", secs(30 * 60), |o| noise_robustness(o, &trained));
    suite.run(7, "energy model", secs(60), |o| energy_model(o, &trained));
    suite.run(8, "determinism and round-trip", secs(5 * 60), |o| determinism(o, &trained));

    if suite.failures > 0 {
        println!("{} criteria failed", suite.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
