use std::fs;
use std::path::Path;

use latefuse::evaluation::{
    compute_metrics, evaluate_dataset, per_parameter_report, sample_metrics, write_parameter_csv, write_summary_csv,
    DatasetEvaluation, MetricsReport, TrajectoryEvaluation,
};
use latefuse::pde::{Dataset, Family};
use latefuse::tensor::Tensor;
use latefuse::Model;
use serde::Serialize;

use crate::config::{load_split, record, EvalRun};
use crate::error::{CliError, Result};

#[derive(Debug, Serialize)]
struct EvalEntry {
    source: String,
    model: String,
    seed: u64,
    evaluation: DatasetEvaluation,
}

/// Scores a dataset of predictions against the truth trajectory by trajectory.
fn compare_datasets(pred: &Dataset, truth: &Dataset) -> Result<DatasetEvaluation> {
    if pred.len() != truth.len() {
        return Err(CliError::runtime(format!(
            "prediction dataset has {} trajectories, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut trajectories = Vec::with_capacity(truth.len());
    for (i, (p, t)) in pred.trajectories.iter().zip(&truth.trajectories).enumerate() {
        trajectories.push(TrajectoryEvaluation {
            index: i,
            params: t.params.clone(),
            metrics: sample_metrics(&p.states, &t.states)?,
            blow_up: None,
        });
    }
    let stack = |ds: &Dataset| Tensor::stack(&ds.trajectories.iter().map(|t| t.states.clone()).collect::<Vec<_>>());
    let aggregate = compute_metrics(
        &stack(pred).map_err(|e| CliError::runtime(e.to_string()))?,
        &stack(truth).map_err(|e| CliError::runtime(e.to_string()))?,
    )?;
    Ok(DatasetEvaluation {
        split: truth.split(),
        aggregate,
        trajectories,
    })
}

fn metrics_row(m: &MetricsReport) -> [String; 6] {
    [
        m.rmse,
        m.nrmse,
        m.boundary_rmse,
        m.max_error,
        m.conserved_error,
        m.fourier_rmse,
    ]
    .map(|v| v.to_string())
}

pub fn run(run: &EvalRun, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    record(out, "eval", run)?;
    let truths: Vec<Dataset> = run
        .splits
        .iter()
        .map(|&s| load_split(&run.data, s))
        .collect::<Result<_>>()?;
    let family: Family = truths[0].family();
    if truths.iter().any(|d| d.family() != family) {
        return Err(CliError::config("evaluation datasets mix equation families"));
    }

    let mut entries = Vec::new();
    if let Some(pred_root) = &run.pred_data {
        for (split, truth) in run.splits.iter().zip(&truths) {
            let pred = load_split(pred_root, *split)?;
            entries.push(EvalEntry {
                source: pred_root.display().to_string(),
                model: "dataset".into(),
                seed: pred.manifest.seed,
                evaluation: compare_datasets(&pred, truth)?,
            });
        }
    }
    for dir in &run.models {
        let (model, _) = Model::load(dir)?;
        if model.config.family != family {
            return Err(CliError::config(format!(
                "checkpoint {} is a {} model, datasets are {}",
                dir.display(),
                model.config.family,
                family
            )));
        }
        for truth in &truths {
            let (evaluation, rollouts) = evaluate_dataset(&model, truth)?;
            let blown = rollouts.iter().filter(|r| r.blow_up.is_some()).count();
            if blown > 0 {
                eprintln!("warning: {blown} rollouts on {} became non-finite", truth.split());
            }
            entries.push(EvalEntry {
                source: dir.display().to_string(),
                model: model.kind().name().into(),
                seed: model.config.seed,
                evaluation,
            });
        }
    }

    let mut w = csv::Writer::from_path(out.join("metrics.csv"))?;
    w.write_record([
        "source",
        "model",
        "seed",
        "split",
        "rmse",
        "nrmse",
        "boundary_rmse",
        "max_error",
        "conserved_error",
        "fourier_rmse",
        "blown_up",
    ])?;
    for e in &entries {
        let blown = e.evaluation.trajectories.iter().filter(|t| t.blow_up.is_some()).count();
        let mut rec = vec![
            e.source.clone(),
            e.model.clone(),
            e.seed.to_string(),
            e.evaluation.split.name().into(),
        ];
        rec.extend(metrics_row(&e.evaluation.aggregate));
        rec.push(blown.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;

    let runs: Vec<(String, String, u64, DatasetEvaluation)> = entries
        .iter()
        .map(|e| (family.name().to_string(), e.model.clone(), e.seed, e.evaluation.clone()))
        .collect();
    let (rows, summary) = per_parameter_report(&runs);
    write_parameter_csv(&out.join("parameters.csv"), family.param_names(), &rows)?;
    write_summary_csv(&out.join("summary.csv"), &summary)?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&entries)? + "\n")?;

    for e in &entries {
        eprintln!(
            "{} seed {} {}: rmse {:.4e} nrmse {:.4e}",
            e.model, e.seed, e.evaluation.split, e.evaluation.aggregate.rmse, e.evaluation.aggregate.nrmse
        );
    }
    Ok(())
}
