use loopseg_model::blocks::calibrate_alss;
use loopseg_model::{audit, build_network, LayerKind, NetworkConfig};

#[test]
fn closed_form_rows_are_exact() {
    let net = build_network(&NetworkConfig::reference(), 0).unwrap();
    let report = audit(&net);
    println!("{}", report.table());
    for (i, n) in [(1, 232), (2, 1184), (3, 2336), (4, 3504), (10, 77968), (18, 20832), (21, 69872)] {
        assert_eq!(report.row(i).unwrap().params, n, "layer {i}");
    }
    assert!(report.hard_failures().is_empty());
    assert_eq!(report.row(16).unwrap().params, 7248);
    assert_eq!(report.row(24).unwrap().params, 918_811);
}

#[test]
fn totals_within_tolerance() {
    let report = audit(&build_network(&NetworkConfig::reference(), 0).unwrap());
    assert!(report.total_gap().unwrap().abs() <= 0.02, "{}", report.table());
    assert!(report.gflops_gap().unwrap().abs() <= 0.10, "{}", report.table());
    let bn: usize = report.total_params - report.fused_params;
    assert!(bn > 0);
}

#[test]
fn bundled_widths_are_the_calibrated_ones() {
    let cfg = NetworkConfig::reference();
    let net = build_network(&cfg, 0).unwrap();
    for layer in net.layers.iter().filter(|l| l.spec.kind == LayerKind::Alss) {
        let cin = net.layers[layer.inputs[0]].out_shape[0];
        let spec = &layer.spec;
        let cal = calibrate_alss(cin, spec.out.unwrap(), spec.s, spec.split, spec.params.unwrap()).unwrap();
        assert_eq!(Some(cal.hidden), spec.hidden, "layer {}", spec.index);
    }
}

#[test]
fn calibrating_from_targets_builds_the_same_network() {
    let mut cfg = NetworkConfig::reference();
    for l in &mut cfg.layers {
        l.hidden = None;
    }
    let a = audit(&build_network(&cfg, 0).unwrap());
    let b = audit(&build_network(&NetworkConfig::reference(), 0).unwrap());
    assert_eq!(a.total_params, b.total_params);
}

#[test]
fn audit_is_cheap() {
    let t = std::time::Instant::now();
    audit(&build_network(&NetworkConfig::reference(), 0).unwrap());
    assert!(t.elapsed().as_secs_f64() < 10.0);
}
