use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lie_vio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lie-vio")).args(args).output().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn simulate_writes_every_artifact() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("run");
    let o = lie_vio(&["simulate", "--runs", "2", "--seed", "4", "--duration", "5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.contains("RMSE"), "{stdout}");

    let rmse = csv_rows(&out.join("rmse.csv"));
    assert_eq!(rmse[0], ["t_s", "att_deg", "pos_m", "vel_mps", "grav_mps2"]);
    assert_eq!(rmse.len(), 1 + 100);
    for f in ["truth.csv", "estimate.csv"] {
        let rows = csv_rows(&out.join(f));
        assert_eq!(rows.len(), rmse.len(), "{f}");
        assert!(rows.iter().all(|r| r.len() == rows[0].len()));
    }
    let g = csv_rows(&out.join("gramian.csv"));
    assert_eq!(g.len(), 1 + 2);
}

#[test]
fn artifacts_are_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = d.path().join(name);
        let o = lie_vio(&["--runs", "2", "--duration", "3", "--modality", "stereo", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["rmse.csv", "truth.csv", "estimate.csv", "gramian.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn stationary_monocular_is_unobservable() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("obs");
    let o = lie_vio(&["observability", "--modality", "mono", "--stationary", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let g = csv_rows(&out.join("gramian.csv"));
    assert!(g.len() > 1);
    for row in &g[1..] {
        assert_eq!(row[4], "false", "{row:?}");
        assert!(row[2].parse::<f64>().unwrap() < 1e-8);
    }
}

#[test]
fn moving_relative_position_is_observable() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("obs");
    let o = lie_vio(&["observability", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let g = csv_rows(&out.join("gramian.csv"));
    assert!(g[1..].iter().all(|r| r[4] == "true"));
}

#[test]
fn config_file_is_applied() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.json");
    let out = d.path().join("o");
    fs::write(
        &cfg,
        format!(
            r#"{{"command": "observability", "modality": "stereo", "output_dir": {:?}, "gramian_delta": 1.0, "scenario": {{"duration": 4.0}}}}"#,
            out.to_str().unwrap()
        ),
    )
    .unwrap();
    let o = lie_vio(&["--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&out.join("gramian.csv")).len(), 1 + 4);
}

#[test]
fn failures_are_categorized() {
    let o = lie_vio(&["teleport"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let o = lie_vio(&["euroc"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset_path"));

    let d = tempfile::tempdir().unwrap();
    let o = lie_vio(&["euroc", "--dataset", d.path().join("missing").to_str().unwrap(), "--out", d.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let bad = d.path().join("bad.json");
    fs::write(&bad, r#"{"runs": -1}"#).unwrap();
    let o = lie_vio(&["--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("configuration error"));
}

#[test]
fn euroc_on_a_synthetic_sequence() {
    let d = tempfile::tempdir().unwrap();
    let seq = d.path().join("SIM_02");
    let sc = lie_vio::sim::ScenarioConfig {
        duration: 4.0,
        ..Default::default()
    };
    lie_vio::euroc::write_synthetic_sequence(&seq, &sc, 1_403_715_273_262_142_976).unwrap();
    let out = d.path().join("out");
    let o = lie_vio(&["euroc", "--dataset", seq.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("results/SIM_02.json")).unwrap()).unwrap();
    assert!(json["rms_position"].as_f64().unwrap() < 0.5);
}
