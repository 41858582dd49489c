mod common;

use popsan::energy::{count_ops, estimate_energy, ActivityProfile, EnergyModel, SavingsReport};
use popsan::rng::stream;
use popsan::{NetworkSpec, PopSan64};

fn observations() -> Vec<Vec<f64>> {
    (0..30)
        .map(|i| (0..6).map(|k| ((i * 5 + k * 11) % 13) as f64 / 6.5 - 1.0).collect())
        .collect()
}

#[test]
fn counts_match_trace_replay() {
    let net = PopSan64::new(NetworkSpec::default()).unwrap();
    let runs = count_ops(&net, &observations(), &mut stream(0, 5)).unwrap();
    for (ops, trace) in &runs {
        let (mac, ac, shrink_ac) = common::replay_count(&net.spec, trace);
        assert_eq!(ops.mac_ops, mac);
        assert_eq!(ops.ac_ops, ac);
        assert_eq!(ops.shrink_ac_ops, shrink_ac);
        let e = estimate_energy(ops, &EnergyModel::default());
        assert!((e - (4.6 * mac + 0.9 * ac)).abs() < 1e-9);
    }
}

#[test]
fn accumulates_grow_with_activity_and_time() {
    let net = PopSan64::new(NetworkSpec::default()).unwrap();
    let runs = count_ops(&net, &observations(), &mut stream(0, 6)).unwrap();
    let traces: Vec<_> = runs.into_iter().map(|r| r.1).collect();
    let p = ActivityProfile::measure(&traces).unwrap();
    let m = EnergyModel::default();
    let spec = NetworkSpec::default();
    let mut last = -1.0;
    for f in [0.0, 0.5, 1.0, 1.5] {
        let r = SavingsReport::sweep(&spec, &p.scaled(f), &[1], &m).unwrap();
        assert!(r.rows[0].ac_ops >= last);
        last = r.rows[0].ac_ops;
    }
    let r = SavingsReport::sweep(&spec, &p, &[1, 2, 3, 4], &m).unwrap();
    for w in r.rows.windows(2) {
        assert!(w[1].ac_ops >= w[0].ac_ops && w[1].snn_pj > w[0].snn_pj);
        assert!(w[1].savings_pct < w[0].savings_pct);
        assert_eq!(w[1].ann_pj, w[0].ann_pj);
    }
}

#[test]
fn report_csv_has_documented_columns() {
    let net = PopSan64::new(NetworkSpec::default()).unwrap();
    let runs = count_ops(&net, &observations()[..3], &mut stream(0, 7)).unwrap();
    let traces: Vec<_> = runs.into_iter().map(|r| r.1).collect();
    let p = ActivityProfile::measure(&traces).unwrap();
    let r = SavingsReport::sweep(&net.spec, &p, &[1, 2, 3], &EnergyModel::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("energy.csv");
    r.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t_final,ann_pj,snn_pj,savings_pct,mac_ops,ac_ops,spike_rate_mean"
    );
    assert_eq!(lines.count(), 3);
}
