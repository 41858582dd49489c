mod common;

use common::{random_lif_instance, rows, scalar_lif};
use popsan::lif::{LifConfig, LifLayer, LifState, SpikeMode};
use popsan::rng::stream;
use popsan::tensor::Matrix;
use proptest::prelude::*;

fn layer(weight: &[Vec<f64>], bias: &[f64]) -> LifLayer<f64> {
    LifLayer {
        weight: Matrix::from_rows(weight).unwrap(),
        bias: bias.to_vec(),
    }
}

proptest! {
    #[test]
    fn matches_scalar_simulation(seed in any::<u64>()) {
        let inst = random_lif_instance(&mut stream(seed, 0));
        let cfg = LifConfig::default();
        let l = layer(&inst.weight, &inst.bias);
        let trace = l.forward(&Matrix::from_rows(&inst.inputs).unwrap(), &cfg, SpikeMode::Hard).unwrap();
        let (spikes, volts) = scalar_lif(&inst.weight, &inst.bias, &inst.inputs, &cfg);
        prop_assert_eq!(rows(&trace.spikes), spikes);
        for (a, b) in rows(&trace.voltage).iter().flatten().zip(volts.iter().flatten()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!(trace.spikes.as_slice().iter().all(|&s| s == 0.0 || s == 1.0));
    }

    #[test]
    fn voltage_resets_after_every_spike(seed in any::<u64>()) {
        let inst = random_lif_instance(&mut stream(seed, 1));
        let cfg = LifConfig::default();
        let l = layer(&inst.weight, &inst.bias);
        let mut state = LifState::resting(inst.bias.len(), &cfg);
        for x in &inst.inputs {
            let out = l.step(x, &mut state, &cfg, SpikeMode::Hard).unwrap();
            for j in 0..inst.bias.len() {
                if out.spikes[j] == 1.0 {
                    prop_assert_eq!(state.voltage[j], cfg.rest);
                } else {
                    prop_assert_eq!(state.voltage[j], out.voltage_pre_reset[j]);
                }
            }
        }
    }

    #[test]
    fn silent_without_drive(n_in in 1usize..8, n_out in 1usize..8, t in 1usize..8, seed in any::<u64>()) {
        let cfg = LifConfig::default();
        let inst = random_lif_instance(&mut stream(seed, 2));
        // Zero input with zero bias.
        let l = LifLayer { weight: Matrix::filled(n_out, n_in, 1.0), bias: vec![0.0; n_out] };
        let tr = l.forward(&Matrix::zeros(t, n_in), &cfg, SpikeMode::Hard).unwrap();
        prop_assert!(tr.spikes.as_slice().iter().all(|&s| s == 0.0));
        // Zero weights and bias with arbitrary input.
        let z = LifLayer::<f64>::zeros(inst.weight[0].len(), inst.bias.len());
        let tr = z.forward(&Matrix::from_rows(&inst.inputs).unwrap(), &cfg, SpikeMode::Hard).unwrap();
        prop_assert!(tr.spikes.as_slice().iter().all(|&s| s == 0.0));
    }
}

#[test]
fn spikes_cross_layers_within_one_timestep() {
    let cfg = LifConfig::default();
    let a = LifLayer {
        weight: Matrix::filled(1, 1, 1.0),
        bias: vec![0.0],
    };
    let b = a.clone();
    let mut x = Matrix::zeros(3, 1);
    x.set(1, 0, 1.0);
    let s1 = a.forward(&x, &cfg, SpikeMode::Hard).unwrap().spikes;
    let s2 = b.forward(&s1, &cfg, SpikeMode::Hard).unwrap().spikes;
    assert_eq!(s1.as_slice(), &[0.0, 1.0, 0.0]);
    assert_eq!(s2.as_slice(), &[0.0, 1.0, 0.0]);
}
