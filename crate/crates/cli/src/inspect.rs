use std::fs;
use std::path::Path;

use latefuse::evaluation::{interpret, interpret_export};
use latefuse::Model;
use serde::Serialize;

use crate::config::{load_split, record, InspectRun};
use crate::error::{CliError, Result};

pub const SUMMARY: &str = "inspect_summary.json";

#[derive(Debug, Clone, Serialize)]
pub struct InspectSummary {
    pub split: String,
    pub states: usize,
    pub library: String,
    /// Mean over states and variables of |corr(param-dependent, -du/dx)|.
    pub mean_abs_corr: f64,
    pub min_abs_corr: f64,
    pub rms_param_dependent: f64,
    pub rms_param_independent: f64,
    /// `rms_param_independent / rms_param_dependent`.
    pub rms_ratio: f64,
}

pub fn run(run: &InspectRun, out: &Path) -> Result<()> {
    let (model, _) = Model::load(&run.model)?;
    let Some(lf) = model.as_late_fusion() else {
        return Err(CliError::config("inspect needs a late-fusion checkpoint"));
    };
    let ds = load_split(&run.data, run.split)?;
    if ds.family() != model.config.family {
        return Err(CliError::config(format!(
            "checkpoint is a {} model, dataset is {}",
            model.config.family,
            ds.family()
        )));
    }
    fs::create_dir_all(out)?;
    record(out, "inspect", run)?;
    let boundary = ds.manifest.boundary;

    // Every state that the model steps from, i.e. all but the last snapshot.
    let (mut corr_sum, mut corr_min, mut n_corr) = (0.0, f64::INFINITY, 0usize);
    let (mut sq_dep, mut sq_indep, mut n_dep, mut states) = (0.0, 0.0, 0usize, 0usize);
    for t in &ds.trajectories {
        for k in 0..t.snapshots() - 1 {
            let it = interpret(&model, &t.state(k), &t.params, &t.grid, boundary)?;
            for (name, arr) in &it.arrays {
                match name.as_str() {
                    "param_dependent" => {
                        sq_dep += arr.data().iter().map(|v| v * v).sum::<f64>();
                        n_dep += arr.numel();
                    }
                    "param_independent" => sq_indep += arr.data().iter().map(|v| v * v).sum::<f64>(),
                    _ => {}
                }
            }
            for c in it.summary.corr_param_dependent_vs_neg_dx {
                let c = if c.is_finite() { c.abs() } else { 0.0 };
                corr_sum += c;
                corr_min = corr_min.min(c);
                n_corr += 1;
            }
            states += 1;
        }
    }
    if states == 0 {
        return Err(CliError::runtime("dataset has no states to inspect"));
    }
    let rms_dep = (sq_dep / n_dep as f64).sqrt();
    let rms_indep = (sq_indep / n_dep as f64).sqrt();
    let summary = InspectSummary {
        split: run.split.name().into(),
        states,
        library: lf.library.to_string(),
        mean_abs_corr: corr_sum / n_corr as f64,
        min_abs_corr: corr_min,
        rms_param_dependent: rms_dep,
        rms_param_independent: rms_indep,
        rms_ratio: rms_indep / rms_dep,
    };
    fs::write(out.join(SUMMARY), serde_json::to_string_pretty(&summary)? + "\n")?;

    for (i, t) in ds.trajectories.iter().take(run.samples).enumerate() {
        interpret_export(
            &model,
            &t.initial_state(),
            &t.params,
            &t.grid,
            boundary,
            &out.join(format!("sample_{i:03}")),
        )?;
    }
    eprintln!(
        "{} states: mean |corr| {:.3}, independent/dependent rms {:.3} -> {}",
        states,
        summary.mean_abs_corr,
        summary.rms_ratio,
        out.display()
    );
    Ok(())
}
