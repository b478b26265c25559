use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_latefuse");

fn latefuse(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn small_gen(out: &Path) {
    let o = latefuse(&[
        "gen",
        "--equation",
        "advection",
        "--seed",
        "5",
        "--train-count",
        "6",
        "--in-domain-count",
        "3",
        "--out-domain-count",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn small_train(data: &Path, out: &Path, kind: &str) -> Output {
    latefuse(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--kind",
        kind,
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--out",
        out.to_str().unwrap(),
    ])
}

fn trajectories(dir: &Path) -> u64 {
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    m["count"].as_u64().unwrap()
}

#[test]
fn gen_writes_requested_counts() {
    let dir = tempfile::tempdir().unwrap();
    small_gen(dir.path());
    assert_eq!(trajectories(&dir.path().join("train")), 6);
    assert_eq!(trajectories(&dir.path().join("in_domain_test")), 3);
    assert_eq!(trajectories(&dir.path().join("out_domain_test")), 2);
    assert!(dir.path().join("run_config.toml").is_file());
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.toml");
    fs::write(&cfg, "equation = \"advection\"\nresolution = 12\n").unwrap();
    let o = latefuse(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn invalid_thread_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .args(["gen", "--equation", "advection", "--out", dir.path().to_str().unwrap()])
        .env("LATEFUSE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_fails() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let o = latefuse(&[
        "gen",
        "--equation",
        "advection",
        "--train-count",
        "2",
        "--out",
        blocker.join("sub").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn baseline_with_library_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small_gen(dir.path());
    let o = latefuse(&[
        "train",
        "--data",
        dir.path().to_str().unwrap(),
        "--kind",
        "baseline",
        "--library",
        "h0*beta",
        "--out",
        dir.path().join("m").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dataset_compared_with_itself_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    small_gen(dir.path());
    let data = dir.path().to_str().unwrap();
    let out = dir.path().join("ev");
    let o = latefuse(&[
        "eval",
        "--data",
        data,
        "--pred-data",
        data,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("metrics.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        for name in [
            "rmse",
            "nrmse",
            "boundary_rmse",
            "max_error",
            "conserved_error",
            "fourier_rmse",
        ] {
            let i = headers.iter().position(|h| h == name).unwrap();
            assert_eq!(rec[i].parse::<f64>().unwrap(), 0.0, "{name}");
        }
        rows += 1;
    }
    assert_eq!(rows, 2);
}

#[test]
fn train_rerun_from_recorded_config_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    small_gen(dir.path());
    let a = dir.path().join("a");
    let o = small_train(dir.path(), &a, "late_fusion");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let b = dir.path().join("b");
    let o = latefuse(&[
        "train",
        "--config",
        a.join("run_config.toml").to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.json", "weights.bin", "train_report.json", "run_config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn inspect_rejects_baseline_and_exports_samples() {
    let dir = tempfile::tempdir().unwrap();
    small_gen(dir.path());
    let data = dir.path().to_str().unwrap();
    let bl = dir.path().join("bl");
    assert!(small_train(dir.path(), &bl, "baseline").status.success());
    let o = latefuse(&[
        "inspect",
        "--model",
        bl.to_str().unwrap(),
        "--data",
        data,
        "--out",
        dir.path().join("i").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let lf = dir.path().join("lf");
    assert!(small_train(dir.path(), &lf, "late_fusion").status.success());
    let out = dir.path().join("i2");
    let o = latefuse(&[
        "inspect",
        "--model",
        lf.to_str().unwrap(),
        "--data",
        data,
        "--samples",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("inspect_summary.json")).unwrap()).unwrap();
    // 3 in-domain trajectories, each stepped from all but its last snapshot.
    assert_eq!(summary["states"], 30);
    assert!(out.join("sample_001/index.json").is_file());
    assert!(!out.join("sample_002").exists());
}
