use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qfc_lab::montecarlo::TagStream;
use qfc_lab::tagio;

fn qfc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfc"))
        .args(args)
        .current_dir(dir)
        .env_remove("QFC_OUT_DIR")
        .output()
        .expect("binary runs")
}

const SMALL_MANIFEST: &str = r#"
schema_version = 1
seed = 7

[[scenarios]]
name = "eff"
kind = "efficiency_sweep"
pump_mw = [0.0, 100.0, 200.0, 400.0]
expect.eta_external_200mw = { min = 0.05, max = 0.06 }

[[scenarios]]
name = "pairs"
kind = "coincidence_si"
pump_mw = [0.4]
duration_s = 0.5
outputs = ["csv", "json", "svg"]

[[scenarios]]
name = "demo"
kind = "fock_demo"
amplitudes = [0.2, 0.5, 1.0]
"#;

#[test]
fn convert_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let stream = TagStream::new(3, 5_000_000, vec![0, 0, 17, 1_234_567, 4_999_999]).unwrap();
    let bin = dir.path().join("tags.qtag");
    tagio::save_binary(&stream, &bin).unwrap();
    let out = qfc(&["convert", "tags.qtag", "tags.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = qfc(&["convert", "tags.csv", "back.qtag"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(&bin).unwrap(), fs::read(dir.path().join("back.qtag")).unwrap());
}

#[test]
fn convert_needs_a_channel_for_multi_channel_csv() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("two.csv"), "# duration_ps=100\nchannel,timestamp_ps\n0,5\n1,7\n").unwrap();
    let out = qfc(&["convert", "two.csv", "x.qtag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = qfc(&["convert", "two.csv", "x.qtag", "--channel", "1"], dir.path());
    assert!(out.status.success());
    assert_eq!(tagio::load_binary(&dir.path().join("x.qtag")).unwrap().timestamps, vec![7]);
}

#[test]
fn run_is_deterministic_and_stamps_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.toml"), SMALL_MANIFEST).unwrap();
    for out_dir in ["a", "b"] {
        let out = qfc(&["run", "--manifest", "m.toml", "--out", out_dir], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    }
    let mut names: Vec<_> = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["demo.csv", "demo_summary.json", "eff.csv", "eff_summary.json", "pairs.csv", "pairs.svg", "pairs_summary.json"]
    );
    let hash = qfc_lab::calibration::DeviceConfig::bundled().hash();
    for n in names.iter().filter(|n| n.ends_with(".csv") || n.ends_with(".json")) {
        let a = fs::read(dir.path().join("a").join(n)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(n)).unwrap(), "{n} differs between runs");
        let text = String::from_utf8(a).unwrap();
        assert!(text.contains(&hash), "{n} lacks the config hash");
        assert!(text.contains(qfc_lab::VERSION), "{n} lacks the tool version");
    }
}

#[test]
fn scenario_filter_and_env_override() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.toml"), SMALL_MANIFEST).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_qfc"))
        .args(["run", "--manifest", "m.toml", "--scenario", "demo"])
        .current_dir(dir.path())
        .env("QFC_OUT_DIR", "from_env")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from_env/demo.csv").exists());
    assert!(!dir.path().join("from_env/eff.csv").exists());

    let out = qfc(&["run", "--manifest", "m.toml", "--scenario", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "schema_version = 9\n").unwrap();
    assert_eq!(qfc(&["run", "--manifest", "bad.toml"], dir.path()).status.code(), Some(2));
    let empty_sweep = "schema_version = 1\n[[scenarios]]\nname = \"s\"\nkind = \"snr_sweep\"\n";
    fs::write(dir.path().join("empty.toml"), empty_sweep).unwrap();
    let out = qfc(&["run", "--manifest", "empty.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty sweep"));
}

#[test]
fn failed_expectation_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let m = "schema_version = 1\n[[scenarios]]\nname = \"e\"\nkind = \"efficiency_sweep\"\npump_mw = [200.0]\nexpect.eta_external_200mw = { min = 0.5 }\n";
    fs::write(dir.path().join("m.toml"), m).unwrap();
    let out = qfc(&["run", "--manifest", "m.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_empty_manifest_passes_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.toml"), "schema_version = 1\n").unwrap();
    let out = qfc(&["verify", "--manifest", "m.toml"], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("warning"));
}

#[test]
fn verify_names_failing_efficiency_criteria_on_corrupted_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let corrupted = qfc_lab::calibration::DeviceConfig::bundled_toml()
        .replace("eta_nor = 0.0082452450993213", "eta_nor = 0.02");
    fs::write(dir.path().join("bad_cal.toml"), corrupted).unwrap();
    let m = "schema_version = 1\nconfig = \"bad_cal.toml\"\n[[scenarios]]\nname = \"e\"\nkind = \"efficiency_sweep\"\npump_mw = [100.0, 200.0]\n";
    fs::write(dir.path().join("m.toml"), m).unwrap();
    let out = qfc(&["verify", "--manifest", "m.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("FAIL") && l.contains("efficiency calibration")), "{text}");
    assert!(text.lines().any(|l| l.starts_with("PASS") && l.contains("energy conservation")), "{text}");
}

#[test]
fn calibrate_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = qfc(&["calibrate", "--out", "cal.toml"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = fs::read_to_string(dir.path().join("cal.toml")).unwrap();
    let cfg = qfc_lab::calibration::DeviceConfig::from_toml(&first).unwrap();
    assert!((cfg.model.eta_nor / qfc_lab::calibration::DeviceConfig::bundled().model.eta_nor - 1.0).abs() < 1e-6);

    let out = qfc(&["calibrate", "--out", "cal.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = qfc(&["calibrate", "--out", "cal.toml", "--force"], dir.path());
    assert!(out.status.success());
}

#[test]
fn calibrate_with_anchor_file_reports_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let anchors = r#"
free = ["eta_nor"]

[[anchors]]
observable = "eta_internal"
pump_mw = 200.0
target = 0.12
"#;
    fs::write(dir.path().join("anchors.toml"), anchors).unwrap();
    let out = qfc(&["calibrate", "--anchors", "anchors.toml", "--out", "fit.toml"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("residual"));
    let cfg = qfc_lab::calibration::DeviceConfig::load(&dir.path().join("fit.toml")).unwrap();
    let eta = qfc_lab::spectral::conversion_efficiency(200.0, &cfg.model, true, &cfg.losses).unwrap();
    assert!((eta - 0.12).abs() < 1e-8);
}
