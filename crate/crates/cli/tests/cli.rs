use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wla(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wla"))
        .current_dir(dir)
        .args(["--threads", "1"])
        .args(args)
        .output()
        .expect("spawn wla")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = wla(dir, args);
    assert!(
        out.status.success(),
        "wla {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_model(dir: &Path) {
    ok(dir, &["gen-data", "--out", "data", "--subset", "z500,t850,t2m", "--height", "16", "--width", "16", "--steps", "24", "--dynamics", "advective"]);
    ok(dir, &["train-wla", "--data", "data", "--out", "m", "--preset", "tiny", "--steps", "3", "--nb", "8", "--train", "0..16", "--test", "16..24"]);
}

#[test]
fn dry_run_measure_prints_reference_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["measure", "--dry-run"]);
    for ratio in ["625.8681", "325.4514", "150.2083", "200.2778", "600.8333"] {
        assert!(out.contains(ratio), "{ratio} missing from\n{out}");
    }
}

#[test]
fn geometry_sweep_has_fifteen_rows() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["sweep", "--out", "s"]);
    let csv = fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 16);
    assert!(dir.path().join("s/run.json").exists());
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = wla(dir.path(), &["measure", "--no-such-flag"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = wla(dir.path(), &["measure", "--dry-run", "--input", "x.wlat"]);
    assert!(!out.status.success());

    let out = wla(dir.path(), &["build-latent-ds", "--data", "d", "--out", "o", "--family", "bad", "--splits", "1,1,1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("name=checkpoint"));
}

#[test]
fn codec_commands_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_model(d);
    for (i, name) in ["a", "b"].iter().enumerate() {
        let wlat = format!("{name}.wlat");
        ok(d, &["compress", "--model", "m/final.wckp", "--input", "data/t000020.wgrid", "--output", &wlat]);
        ok(d, &["decompress", "--model", "m/final.wckp", "--input", "a.wlat", "--output", &format!("{name}.wgrid")]);
        assert!(d.join("m/run.json").exists(), "run {i}");
    }
    assert_eq!(fs::read(d.join("a.wlat")).unwrap(), fs::read(d.join("b.wlat")).unwrap());
    assert_eq!(fs::read(d.join("a.wgrid")).unwrap(), fs::read(d.join("b.wgrid")).unwrap());

    let m = ok(d, &["measure", "--input", "a.wlat", "--original", "data/t000020.wgrid", "--model", "m/final.wckp"]);
    let v: serde_json::Value = serde_json::from_str(&m).unwrap();
    assert_eq!(v["weighted_rmse"].as_array().unwrap().len(), 3);
    assert!((v["ratio"].as_f64().unwrap() * v["bpsp"].as_f64().unwrap() - 32.0).abs() < 1e-9);
}

#[test]
fn pipeline_through_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_model(d);
    ok(d, &["build-latent-ds", "--data", "data", "--out", "ds", "--family", "surf=m/final.wckp", "--splits", "12,4,8", "--sidecar", "test"]);
    let again = ok(d, &["build-latent-ds", "--data", "data", "--out", "ds", "--family", "surf=m/final.wckp", "--splits", "12,4,8"]);
    assert!(again.contains("0 shards written"), "{again}");
    ok(d, &["train-forecaster", "--dataset", "ds", "--family", "surf", "--out", "f", "--steps", "3", "--d-model", "16", "--heads", "2", "--window", "3", "--depth", "1"]);
    ok(d, &["eval-forecast", "--dataset", "ds", "--family", "surf", "--model", "m/final.wckp", "--forecaster", "f/forecaster.wckp", "--data", "data", "--out", "e", "--leads", "2", "--init-every", "2", "--pixel-steps", "3"]);
    let csv = fs::read_to_string(d.join("e/forecast.csv")).unwrap();
    for model in &["latent", "persistence", "pixel"] {
        assert!(csv.lines().any(|l| l.split(',').nth(1) == Some(*model)), "{model} missing");
    }
    ok(d, &["report", "--input", "e", "--input", "m", "--input", "f", "--out", "r"]);
    assert!(d.join("m/mae.wgrid").exists());
    for f in ["tables.md", "e_rmse_vs_lead_z500.svg", "m_loss.svg", "f_loss.svg", "m_mae_t2m.svg"] {
        assert!(d.join("r").join(f).exists(), "{f} missing");
    }

    // a forecaster evaluated against a model that did not write the family
    ok(d, &["train-wla", "--data", "data", "--out", "m2", "--preset", "tiny", "--steps", "2", "--nb", "8", "--seed", "9"]);
    let out = wla(d, &["eval-forecast", "--dataset", "ds", "--family", "surf", "--model", "m2/final.wckp", "--forecaster", "f/forecaster.wckp", "--data", "data", "--out", "e2"]);
    assert!(!out.status.success());
}

#[test]
fn sweep_retrains_on_level_subsets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--out", "data", "--subset", "t200,t300,t500,t700,t850,t1000", "--height", "16", "--width", "16", "--steps", "6"]);
    ok(d, &["sweep", "--data", "data", "--levels", "6", "--nb", "8,16", "--steps", "2", "--train", "0..4", "--test", "4..6", "--out", "s"]);
    let csv = fs::read_to_string(d.join("s/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].ends_with("norm_error"));
    assert_eq!(lines.len(), 3);
    for l in &lines[1..] {
        let e: f64 = l.rsplit(',').next().unwrap().parse().unwrap();
        assert!(e.is_finite() && e > 0.0);
    }
}
