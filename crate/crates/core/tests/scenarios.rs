use std::fs;
use std::io::BufReader;

use qfc_lab::calibration::DeviceConfig;
use qfc_lab::harness::{read_table_csv, run_scenario, Bounds, RunContext, Scenario, ScenarioKind};
use qfc_lab::tagcorr::read_histogram_csv;

fn ctx(dir: &std::path::Path) -> RunContext {
    RunContext::new(DeviceConfig::bundled(), 11, dir.to_path_buf())
}

#[test]
fn fock_demo_reports_quadratic_output_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Scenario::new("fock", ScenarioKind::FockDemo);
    s.amplitudes = vec![0.1, 0.2, 0.4, 0.8];
    let sum = run_scenario(&s, &ctx(dir.path())).unwrap();
    // ⟨n_o⟩ ≈ (γκA²t²)² ∝ P² for weak coupling
    assert!((sum.metrics["output_power_exponent"] - 2.0).abs() < 0.01);
    assert!(sum.metrics["max_pair_ratio_error"] < 0.05);
    let (meta, table) = read_table_csv(BufReader::new(fs::File::open(dir.path().join("fock.csv")).unwrap())).unwrap();
    assert_eq!(meta["config_hash"], DeviceConfig::bundled().hash());
    assert_eq!(table.rows.len(), 4);
    // tabulated ratios agree with the first-order oracle γA_p·t
    let amps = table.column("pump_amplitude").unwrap();
    let pair = table.column("pair_amplitude").unwrap();
    for (a, p) in amps.iter().zip(&pair) {
        assert!((p / (0.05 * a) - 1.0).abs() < 0.01);
    }
}

#[test]
fn expectations_are_checked_in_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Scenario::new("eff", ScenarioKind::EfficiencySweep);
    s.pump_mw = vec![100.0, 200.0];
    s.expect.insert("eta_internal_200mw".into(), Bounds { min: Some(0.095), max: Some(0.115) });
    s.expect.insert("missing_metric".into(), Bounds::default());
    let sum = run_scenario(&s, &ctx(dir.path())).unwrap();
    assert!(!sum.passed);
    let by_name = |n: &str| sum.checks.iter().find(|c| c.metric == n).unwrap();
    assert!(by_name("eta_internal_200mw").passed);
    assert!(!by_name("missing_metric").passed);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eff_summary.json")).unwrap()).unwrap();
    assert_eq!(json["passed"], false);
    assert_eq!(json["config_hash"], DeviceConfig::bundled().hash());
}

#[test]
fn spectrum_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Scenario::new("spec", ScenarioKind::NoiseSpectrum);
    s.pump_mw = vec![200.0];
    let sum = run_scenario(&s, &ctx(dir.path())).unwrap();
    assert!(sum.metrics["peak_reduction"] >= 100.0);
    let text = fs::read_to_string(dir.path().join("spec.csv")).unwrap();
    let (meta, table) = read_table_csv(text.as_bytes()).unwrap();
    let mut again = Vec::new();
    qfc_lab::harness::write_table_csv(&table, &meta, &mut again).unwrap();
    assert_eq!(String::from_utf8(again).unwrap(), text);
    let wl = table.column("wavelength_nm").unwrap();
    assert!(wl.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn coincidence_histogram_artifact_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Scenario::new("si", ScenarioKind::CoincidenceSi);
    s.pump_mw = vec![0.4];
    s.duration_s = Some(1.0);
    let sum = run_scenario(&s, &ctx(dir.path())).unwrap();
    let (hist, hash) = read_histogram_csv(BufReader::new(fs::File::open(dir.path().join("si.csv")).unwrap())).unwrap();
    assert_eq!(hash, DeviceConfig::bundled().hash());
    assert_eq!(hist.n_bins(), 100);
    assert!(sum.metrics["g2"] > 10.0);
}

#[test]
fn io_failure_removes_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    // a directory where the summary file should go makes the last write fail
    fs::create_dir(dir.path().join("eff_summary.json")).unwrap();
    let mut s = Scenario::new("eff", ScenarioKind::EfficiencySweep);
    s.pump_mw = vec![100.0];
    assert!(run_scenario(&s, &ctx(dir.path())).is_err());
    assert!(!dir.path().join("eff.csv").exists());
}

#[test]
fn invalid_scenarios_fail_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut s = Scenario::new("so", ScenarioKind::CoincidenceSo);
    s.pump_mw = vec![100.0, 200.0];
    assert!(matches!(run_scenario(&s, &ctx(&out)), Err(qfc_lab::Error::Config(_))));
    assert!(!out.exists());
}

#[test]
fn snr_sweep_stays_above_two_up_to_200mw() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Scenario::new("snr", ScenarioKind::SnrSweep);
    s.pump_mw = vec![50.0, 200.0, 300.0, 400.0];
    s.duration_s = Some(1.0);
    let sum = run_scenario(&s, &ctx(dir.path())).unwrap();
    assert!(sum.metrics["min_snr_to_200mw_etalon"] > 2.0);
    assert_eq!(sum.metrics["snr_decreasing_above_200mw_etalon"], 1.0);
}
