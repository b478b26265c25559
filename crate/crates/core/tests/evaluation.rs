//! Rollouts, per-parameter reports and the interpretability dump.

use std::f64::consts::PI;
use std::fs;

use latefuse::evaluation::*;
use latefuse::pde::*;
use latefuse::tensor::Tensor;
use latefuse::{Model, ModelConfig, ModelKind};

fn small_model(kind: ModelKind, seed: u64) -> Model {
    let mut cfg = ModelConfig::preset(kind, Family::Advection, Preset::Desk, seed);
    cfg.width = 6;
    cfg.modes = vec![5];
    Model::new(cfg).unwrap()
}

fn dataset(split: Split, count: usize, seed: u64) -> Dataset {
    let mut cfg = GenerateConfig::preset(Family::Advection, split, Preset::Desk, seed);
    cfg.count = count;
    generate_dataset(&cfg).unwrap()
}

#[test]
fn zero_coefficients_hold_the_state() {
    let model = small_model(ModelKind::LateFusion, 1);
    let ds = dataset(Split::InDomainTest, 3, 2);
    let t = &ds.trajectories[0];
    let r = rollout(&model, &t.initial_state(), &t.params, 6).unwrap();
    let u0 = t.initial_state();
    for n in 0..=6 {
        assert_eq!(r.predicted.index_outer(n), u0);
    }
    assert_eq!(r.blow_up, None);
}

#[test]
fn rollouts_never_read_later_truth() {
    for kind in [ModelKind::LateFusion, ModelKind::Baseline] {
        let mut model = small_model(kind, 3);
        if let Some(xi) = model
            .params_mut()
            .into_iter()
            .last()
            .filter(|_| kind == ModelKind::LateFusion)
        {
            xi.data_mut().copy_from_slice(&[0.3, -0.2]);
        }
        let ds = dataset(Split::OutDomainTest, 4, 5);
        let mut poisoned = ds.clone();
        for t in &mut poisoned.trajectories {
            let per = t.states.numel() / t.snapshots();
            t.states.data_mut()[per..].iter_mut().for_each(|v| *v = f64::NAN);
        }
        let (_, clean) = evaluate_dataset(&model, &ds).unwrap();
        let (_, dirty) = evaluate_dataset(&model, &poisoned).unwrap();
        assert_eq!(clean, dirty);
    }
}

#[test]
fn self_comparison_scores_zero() {
    let ds = dataset(Split::InDomainTest, 2, 8);
    for t in &ds.trajectories {
        let m = sample_metrics(&t.states, &t.states).unwrap();
        assert_eq!(
            m.rmse + m.nrmse + m.max_error + m.conserved_error + m.fourier_rmse + m.boundary_rmse,
            0.0
        );
    }
}

#[test]
fn per_parameter_rows_follow_the_splits() {
    let model = small_model(ModelKind::Baseline, 4);
    let mut runs = Vec::new();
    for (split, seed) in [(Split::InDomainTest, 10), (Split::OutDomainTest, 11)] {
        let (ev, _) = evaluate_dataset(&model, &dataset(split, 5, seed)).unwrap();
        runs.push(("advection".to_string(), "baseline".to_string(), 4u64, ev));
    }
    let (rows, summary) = per_parameter_report(&runs);
    assert_eq!(rows.len(), 10);
    for r in &rows {
        let beta = r.params[0];
        match r.split {
            Split::InDomainTest => assert!(beta > 0.0 && beta < 0.5),
            Split::OutDomainTest => assert!(beta > 0.5 && beta < 1.0),
            Split::Train => unreachable!(),
        }
    }
    assert_eq!(summary.len(), 2);
    assert!(summary.iter().all(|s| s.seeds == 1 && s.std_rmse.is_none()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("summary.csv");
    write_summary_csv(&path, &summary).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let first = text.lines().nth(1).unwrap();
    assert!(first.ends_with(','), "std column should be empty: {first}");
}

#[test]
fn single_trajectory_gives_one_row() {
    let model = small_model(ModelKind::Baseline, 4);
    let (ev, _) = evaluate_dataset(&model, &dataset(Split::InDomainTest, 1, 3)).unwrap();
    let (rows, summary) = per_parameter_report(&[("advection".into(), "baseline".into(), 0, ev)]);
    assert_eq!(rows.len(), 1);
    assert_eq!(summary[0].std_rmse, None);
}

#[test]
fn seed_summary_is_arithmetic_mean() {
    let ds = dataset(Split::InDomainTest, 3, 6);
    let mut runs = Vec::new();
    let mut seed_rmse = Vec::new();
    for seed in 0..3u64 {
        let (ev, _) = evaluate_dataset(&small_model(ModelKind::Baseline, seed), &ds).unwrap();
        seed_rmse.push(ev.aggregate.rmse);
        runs.push(("advection".to_string(), "baseline".to_string(), seed, ev));
    }
    let (_, summary) = per_parameter_report(&runs);
    let mean = seed_rmse.iter().sum::<f64>() / 3.0;
    assert!((summary[0].mean_rmse - mean).abs() < 1e-15);
    assert_eq!(summary[0].seeds, 3);
    assert!(summary[0].std_rmse.is_some());
}

#[test]
fn central_difference_reference() {
    let n = 128;
    let dx = 1.0 / n as f64;
    let u: Vec<f64> = (0..n).map(|j| (2.0 * PI * j as f64 * dx).sin()).collect();
    let (d1, d2) = central_differences(&u, &[n], 0, dx, Boundary::Periodic);
    for j in 0..n {
        let x = j as f64 * dx;
        assert!((d1[j] - 2.0 * PI * (2.0 * PI * x).cos()).abs() < 1e-3);
        assert!((d2[j] + 4.0 * PI * PI * (2.0 * PI * x).sin()).abs() < 1e-2);
    }
}

#[test]
fn interpret_export_with_zero_coefficients() {
    let model = small_model(ModelKind::LateFusion, 2);
    let ds = dataset(Split::InDomainTest, 1, 9);
    let t = &ds.trajectories[0];
    let dir = tempfile::tempdir().unwrap();
    let summary = interpret_export(
        &model,
        &t.initial_state(),
        &t.params,
        &ds.manifest.grid,
        Boundary::Periodic,
        dir.path(),
    )
    .unwrap();
    assert_eq!(summary.rms_param_dependent, vec![0.0]);
    assert_eq!(summary.rms_param_independent, vec![0.0]);

    let index: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("index.json")).unwrap()).unwrap();
    let names: Vec<&str> = index["arrays"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["name"].as_str().unwrap())
        .collect();
    for want in [
        "u0",
        "hidden",
        "theta",
        "xi",
        "param_dependent",
        "param_independent",
        "dudx",
        "d2udx2",
    ] {
        assert!(names.contains(&want), "missing {want}");
    }
    for part in ["param_dependent", "param_independent"] {
        let bytes = fs::read(dir.path().join(format!("{part}.bin"))).unwrap();
        assert_eq!(bytes.len(), 64 * 8);
        assert!(bytes.iter().all(|&b| b == 0));
    }
    let u0 = fs::read(dir.path().join("u0.bin")).unwrap();
    let back: Vec<f64> = u0
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(Tensor::new(vec![1, 64], back).unwrap(), t.initial_state());
}

#[test]
fn checkpoints_predict_identically() {
    let mut model = small_model(ModelKind::LateFusion, 7);
    model
        .params_mut()
        .into_iter()
        .last()
        .unwrap()
        .data_mut()
        .copy_from_slice(&[0.1, 0.2]);
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path(), serde_json::json!({})).unwrap();
    let (back, _) = Model::load(dir.path()).unwrap();
    let ds = dataset(Split::InDomainTest, 2, 1);
    let (a, _) = evaluate_dataset(&model, &ds).unwrap();
    let (b, _) = evaluate_dataset(&back, &ds).unwrap();
    assert_eq!(a, b);
}
