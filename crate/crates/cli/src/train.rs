use std::fs;
use std::path::Path;

use latefuse::pde::Split;
use latefuse::training::{train, TrainError, TrainReport};
use latefuse::Model;
use serde_json::json;

use crate::config::{load_split, record, TrainSettings};
use crate::error::{CliError, Result};

pub const REPORT: &str = "train_report.json";

fn write_report(out: &Path, report: &TrainReport, status: &str) -> Result<()> {
    let body = json!({ "status": status, "report": report });
    fs::write(out.join(REPORT), serde_json::to_string_pretty(&body)? + "\n")?;
    Ok(())
}

pub fn run(settings: TrainSettings, out: &Path) -> Result<()> {
    let data = settings.data.clone().expect("merged settings carry data");
    let ds = load_split(&data, Split::Train)?;
    let family = ds.family();
    let run = settings.resolve(family)?;
    fs::create_dir_all(out)?;
    record(out, "train", &run)?;

    let model = Model::new(run.model_config(family))?;
    let cfg = run.train_config();
    match train(model, &ds, &cfg) {
        Ok((model, report)) => {
            let meta = json!({
                "family": family,
                "seed": run.seed,
                "dataset_checksums": ds.manifest.checksums,
                "best_epoch": report.best_epoch,
                "best_val_data_loss": report.best_val_data_loss,
            });
            model.save(out, meta)?;
            write_report(out, &report, "completed")?;
            eprintln!(
                "{} on {}: best epoch {} (validation {:?}) -> {}",
                run.kind.name(),
                family,
                report.best_epoch,
                report.best_val_data_loss,
                out.display()
            );
            Ok(())
        }
        Err(TrainError::Diverged { epoch, reason, report }) => {
            write_report(out, &report, "diverged")?;
            Err(CliError::runtime(format!(
                "training diverged in epoch {epoch}: {reason}"
            )))
        }
        Err(e) => Err(e.into()),
    }
}
