use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use latefuse::evaluation::{evaluate_dataset, mean_std};
use latefuse::fusion::LibrarySpec;
use latefuse::pde::{Dataset, Split};
use latefuse::training::{hyperparameter_sweep, TrainConfig};
use latefuse::{Model, ModelConfig, ModelKind};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{load_split, record, AblateRun, AblateSettings};
use crate::error::{CliError, Result};

const TEST_SPLITS: [Split; 2] = [Split::InDomainTest, Split::OutDomainTest];

#[derive(Debug, Clone, Serialize)]
pub struct CellRow {
    pub library: String,
    pub n_terms: usize,
    pub lambda: f64,
    pub seed: u64,
    pub split: Split,
    pub rmse: Option<f64>,
    pub val_loss: Option<f64>,
    pub status: String,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// All rows of one (library, seed) pair: one sweep over the lambda grid
/// from a shared initialization, then rollouts on both test splits.
fn library_seed_rows(run: &AblateRun, library: &str, seed: u64, train: &Dataset, tests: &[Dataset]) -> Vec<CellRow> {
    let family = train.family();
    let n_terms = LibrarySpec::parse(library, family.param_names(), None)
        .map(|s| s.len())
        .unwrap_or(0);
    let row = |lambda: f64, split: Split, rmse: Option<f64>, val_loss: Option<f64>, status: String| CellRow {
        library: library.to_string(),
        n_terms,
        lambda,
        seed,
        split,
        rmse,
        val_loss,
        status,
    };
    let fail_all = |msg: String| -> Vec<CellRow> {
        run.lambdas
            .iter()
            .flat_map(|&l| TEST_SPLITS.map(|s| row(l, s, None, None, format!("failed: {msg}"))))
            .collect()
    };

    let mut cfg = ModelConfig::preset(ModelKind::LateFusion, family, run.preset, seed);
    cfg.library = Some(library.to_string());
    let init = match Model::new(cfg) {
        Ok(m) => m,
        Err(e) => return fail_all(e.to_string()),
    };
    let base = TrainConfig {
        epochs: run.epochs,
        batch_size: run.batch_size,
        ..TrainConfig::preset(run.preset, seed)
    };
    let (sweep, models) = match hyperparameter_sweep(&init, train, &base, &run.lambdas) {
        Ok(v) => v,
        Err(e) => return fail_all(e.to_string()),
    };
    let mut rows = Vec::new();
    for (cell, trained) in sweep.iter().zip(models) {
        match trained {
            None => {
                let msg = cell.error.clone().unwrap_or_else(|| "training failed".into());
                rows.extend(TEST_SPLITS.map(|s| row(cell.lambda, s, None, None, format!("failed: {msg}"))));
            }
            Some((model, _)) => {
                for test in tests {
                    rows.push(match evaluate_dataset(&model, test) {
                        Ok((ev, _)) => row(
                            cell.lambda,
                            test.split(),
                            Some(ev.aggregate.rmse),
                            cell.val_loss,
                            "ok".into(),
                        ),
                        Err(e) => row(cell.lambda, test.split(), None, cell.val_loss, format!("failed: {e}")),
                    });
                }
            }
        }
    }
    rows
}

pub fn run(settings: AblateSettings, out: &Path) -> Result<()> {
    let data = settings.data.clone().expect("merged settings carry data");
    let train = load_split(&data, Split::Train)?;
    let run = settings.resolve(train.family())?;
    let tests: Vec<Dataset> = TEST_SPLITS
        .iter()
        .map(|&s| load_split(&data, s))
        .collect::<Result<_>>()?;
    fs::create_dir_all(out)?;
    record(out, "ablate", &run)?;

    let pairs: Vec<(&String, u64)> = run
        .libraries
        .iter()
        .flat_map(|l| run.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let rows: Vec<CellRow> = pairs
        .par_iter()
        .map(|(lib, seed)| library_seed_rows(&run, lib, *seed, &train, &tests))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();

    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    w.write_record([
        "library", "n_terms", "lambda", "seed", "split", "rmse", "val_loss", "status",
    ])?;
    for r in &rows {
        w.write_record([
            r.library.clone(),
            r.n_terms.to_string(),
            r.lambda.to_string(),
            r.seed.to_string(),
            r.split.name().to_string(),
            r.rmse.map(|v| v.to_string()).unwrap_or_default(),
            r.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            r.status.clone(),
        ])?;
    }
    w.flush()?;

    // Per (library, lambda, split): statistics over the seeds that finished.
    let mut groups: BTreeMap<(usize, usize, Split), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        let li = run
            .libraries
            .iter()
            .position(|l| *l == r.library)
            .expect("row library comes from the run");
        let ki = run
            .lambdas
            .iter()
            .position(|&l| l == r.lambda)
            .expect("row lambda comes from the run");
        let entry = groups.entry((li, ki, r.split)).or_default();
        if let Some(v) = r.rmse {
            entry.push(v);
        }
    }
    let mut w = csv::Writer::from_path(out.join("ablation_summary.csv"))?;
    w.write_record([
        "library",
        "n_terms",
        "lambda",
        "split",
        "seeds_ok",
        "mean_rmse",
        "std_rmse",
        "median_rmse",
    ])?;
    let mut medians: BTreeMap<(usize, Split), Vec<f64>> = BTreeMap::new();
    for ((li, ki, split), v) in &groups {
        let n_terms = rows
            .iter()
            .find(|r| r.library == run.libraries[*li])
            .map_or(0, |r| r.n_terms);
        let (mean, std) = mean_std(v);
        let med = median(v);
        medians.entry((*li, *split)).or_default().push(med);
        w.write_record([
            run.libraries[*li].clone(),
            n_terms.to_string(),
            run.lambdas[*ki].to_string(),
            split.name().to_string(),
            v.len().to_string(),
            if v.is_empty() { String::new() } else { mean.to_string() },
            std.map(|s| s.to_string()).unwrap_or_default(),
            if v.is_empty() { String::new() } else { med.to_string() },
        ])?;
    }
    w.flush()?;

    // Sensitivity to lambda: largest over smallest median RMSE.
    let mut w = csv::Writer::from_path(out.join("ablation_spread.csv"))?;
    w.write_record(["library", "n_terms", "split", "lambda_spread"])?;
    for ((li, split), meds) in &medians {
        let n_terms = rows
            .iter()
            .find(|r| r.library == run.libraries[*li])
            .map_or(0, |r| r.n_terms);
        let finite: Vec<f64> = meds.iter().copied().filter(|v| !v.is_nan()).collect();
        let spread = if finite.len() == meds.len() && !finite.is_empty() {
            let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
            (max / min).to_string()
        } else {
            String::new()
        };
        w.write_record([
            run.libraries[*li].clone(),
            n_terms.to_string(),
            split.name().to_string(),
            spread,
        ])?;
    }
    w.flush()?;

    let failed = rows.iter().filter(|r| r.status != "ok").count();
    eprintln!("ablation: {} rows, {} failed -> {}", rows.len(), failed, out.display());
    if failed > 0 {
        return Err(CliError::runtime(format!(
            "{failed} of {} ablation rows failed; completed rows are kept in ablation.csv",
            rows.len()
        )));
    }
    Ok(())
}
