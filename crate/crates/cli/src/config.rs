//! Per-command settings. Each command reads an optional TOML file, lays
//! its command-line flags over it, and resolves the result into a concrete
//! run description. The run description is written next to the artifacts
//! and can be fed back through `--config` to reproduce them.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use latefuse::pde::{read_dataset, Dataset, Family, Preset, Split};
use latefuse::ModelKind;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const RUN_CONFIG: &str = "run_config.toml";

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML settings file; flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Copies every field of `$file` into `$cli` where the flag was not given.
macro_rules! overlay {
    ($cli:expr, $file:expr; $($field:ident),+ $(,)?) => {
        $( if $cli.$field.is_none() { $cli.$field = $file.$field.take(); } )+
    };
}

fn load_file<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text =
        fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Output directory from the flag or the settings file.
pub fn output_dir(flag: &Option<PathBuf>, file: Option<PathBuf>) -> Result<PathBuf> {
    flag.clone()
        .or(file)
        .ok_or_else(|| CliError::config("no output directory: pass --out or set `out` in the config"))
}

/// Writes the resolved run description as `run_config.toml`.
pub fn record<T: Serialize>(dir: &Path, command: &str, run: &T) -> Result<()> {
    let body = toml::to_string(run).map_err(|e| CliError::runtime(format!("cannot serialize run config: {e}")))?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RUN_CONFIG), format!("# latefuse {command}\n{body}"))?;
    Ok(())
}

/// A dataset directory, or the `split` subdirectory of a `gen` output.
pub fn dataset_dir(root: &Path, split: Split) -> PathBuf {
    if is_dataset(root) {
        root.to_path_buf()
    } else {
        root.join(split.name())
    }
}

pub fn is_dataset(dir: &Path) -> bool {
    dir.join("manifest.json").is_file()
}

pub fn load_split(root: &Path, split: Split) -> Result<Dataset> {
    let dir = dataset_dir(root, split);
    if !is_dataset(&dir) {
        return Err(CliError::config(format!("no {split} dataset at {}", dir.display())));
    }
    Ok(read_dataset(&dir)?)
}

fn positive(name: &str, v: usize) -> Result<usize> {
    if v == 0 {
        return Err(CliError::config(format!("{name} must be at least 1")));
    }
    Ok(v)
}

// ---------------------------------------------------------------- gen

#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSettings {
    /// advection | burgers | reaction_diffusion_1d | reaction_diffusion_2d
    #[arg(long)]
    pub equation: Option<Family>,
    /// Grid and split-size preset: desk | full
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub in_domain_count: Option<usize>,
    #[arg(long)]
    pub out_domain_count: Option<usize>,
    /// Sinusoids per 1D initial condition.
    #[arg(long)]
    pub num_waves: Option<usize>,
    /// Largest integer mode of a 1D initial condition.
    #[arg(long)]
    pub max_wavenumber: Option<usize>,
    #[arg(skip)]
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenRun {
    pub equation: Family,
    pub preset: Preset,
    pub seed: u64,
    pub train_count: usize,
    pub in_domain_count: usize,
    pub out_domain_count: usize,
    pub num_waves: usize,
    pub max_wavenumber: usize,
}

impl GenSettings {
    pub fn resolve(mut self, common: &Common) -> Result<(GenRun, PathBuf)> {
        let mut file: GenSettings = load_file(common.config.as_deref())?;
        overlay!(self, file; equation, preset, seed, train_count, in_domain_count, out_domain_count, num_waves, max_wavenumber);
        let out = output_dir(&common.out, file.out.take())?;
        let equation = self
            .equation
            .ok_or_else(|| CliError::config("missing equation (--equation)"))?;
        let preset = self.preset.unwrap_or(Preset::Desk);
        let counts = latefuse::pde::preset_counts(preset);
        let ic = latefuse::pde::InitialConditionSpec::default();
        let run = GenRun {
            equation,
            preset,
            seed: self.seed.unwrap_or(0),
            train_count: positive("train_count", self.train_count.unwrap_or(counts.train))?,
            in_domain_count: positive("in_domain_count", self.in_domain_count.unwrap_or(counts.in_domain_test))?,
            out_domain_count: positive(
                "out_domain_count",
                self.out_domain_count.unwrap_or(counts.out_domain_test),
            )?,
            num_waves: positive("num_waves", self.num_waves.unwrap_or(ic.num_waves))?,
            max_wavenumber: positive("max_wavenumber", self.max_wavenumber.unwrap_or(ic.max_wavenumber))?,
        };
        Ok((run, out))
    }
}

// -------------------------------------------------------------- train

#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    /// Dataset directory, or a `gen` output holding `train/`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// late_fusion | baseline
    #[arg(long)]
    pub kind: Option<ModelKind>,
    /// Architecture and schedule preset: desk | full
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Candidate library, e.g. "h0*beta, h1" (late fusion only).
    #[arg(long)]
    pub library: Option<String>,
    /// Fourier modes per spatial axis, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<usize>>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub initial_lr: Option<f64>,
    #[arg(long)]
    pub lr_halving_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda_sparse: Option<f64>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    #[arg(skip)]
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRun {
    pub data: PathBuf,
    pub kind: ModelKind,
    pub preset: Preset,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub library: Option<String>,
    pub modes: Vec<usize>,
    pub width: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_halving_epoch: usize,
    pub batch_size: usize,
    pub lambda_sparse: f64,
    pub validation_fraction: f64,
}

impl TrainRun {
    pub fn model_config(&self, family: Family) -> latefuse::ModelConfig {
        let mut cfg = latefuse::ModelConfig::preset(self.kind, family, self.preset, self.seed);
        cfg.modes = self.modes.clone();
        cfg.width = self.width;
        cfg.library = self.library.clone();
        cfg
    }

    pub fn train_config(&self) -> latefuse::training::TrainConfig {
        latefuse::training::TrainConfig {
            epochs: self.epochs,
            initial_lr: self.initial_lr,
            lr_halving_epoch: self.lr_halving_epoch,
            batch_size: self.batch_size,
            lambda_sparse: self.lambda_sparse,
            validation_fraction: self.validation_fraction,
            ..latefuse::training::TrainConfig::preset(self.preset, self.seed)
        }
    }
}

impl TrainSettings {
    /// Settings file and flags merged; the family comes from the dataset.
    pub fn merged(mut self, common: &Common) -> Result<(Self, PathBuf)> {
        let mut file: TrainSettings = load_file(common.config.as_deref())?;
        overlay!(self, file; data, kind, preset, seed, library, modes, width, epochs, initial_lr,
            lr_halving_epoch, batch_size, lambda_sparse, validation_fraction);
        let out = output_dir(&common.out, file.out.take())?;
        if self.data.is_none() {
            return Err(CliError::config("missing dataset (--data)"));
        }
        Ok((self, out))
    }

    pub fn resolve(self, family: Family) -> Result<TrainRun> {
        let kind = self.kind.unwrap_or(ModelKind::LateFusion);
        let preset = self.preset.unwrap_or(Preset::Desk);
        let seed = self.seed.unwrap_or(0);
        let library = match kind {
            ModelKind::LateFusion => Some(self.library.unwrap_or_else(|| family.default_library().to_string())),
            ModelKind::Baseline if self.library.is_some() => {
                return Err(CliError::config("a library only applies to late_fusion models"));
            }
            ModelKind::Baseline => None,
        };
        let (modes, width) = latefuse::operator::arch_preset(family.spatial_dims(), preset);
        let schedule = latefuse::training::TrainConfig::preset(preset, seed);
        let run = TrainRun {
            data: self.data.expect("checked in merged"),
            kind,
            preset,
            seed,
            library,
            modes: self.modes.unwrap_or(modes),
            width: self.width.unwrap_or(width),
            epochs: self.epochs.unwrap_or(schedule.epochs),
            initial_lr: self.initial_lr.unwrap_or(schedule.initial_lr),
            lr_halving_epoch: self.lr_halving_epoch.unwrap_or(schedule.lr_halving_epoch),
            batch_size: self.batch_size.unwrap_or(schedule.batch_size),
            lambda_sparse: self.lambda_sparse.unwrap_or(schedule.lambda_sparse),
            validation_fraction: self.validation_fraction.unwrap_or(schedule.validation_fraction),
        };
        run.train_config().validate()?;
        latefuse::Model::new(run.model_config(family))?;
        Ok(run)
    }
}

// --------------------------------------------------------------- eval

#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Checkpoint directory; repeat for several models or seeds.
    #[arg(long = "model")]
    pub models: Option<Vec<PathBuf>>,
    /// Ground-truth dataset directory or `gen` output.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Score this dataset against `--data` instead of running a model.
    #[arg(long)]
    pub pred_data: Option<PathBuf>,
    /// Splits to score (default: both test splits).
    #[arg(long = "split")]
    pub splits: Option<Vec<Split>>,
    #[arg(skip)]
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRun {
    pub models: Vec<PathBuf>,
    pub data: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred_data: Option<PathBuf>,
    pub splits: Vec<Split>,
}

impl EvalSettings {
    pub fn resolve(mut self, common: &Common) -> Result<(EvalRun, PathBuf)> {
        let mut file: EvalSettings = load_file(common.config.as_deref())?;
        overlay!(self, file; models, data, pred_data, splits);
        let out = output_dir(&common.out, file.out.take())?;
        let data = self
            .data
            .ok_or_else(|| CliError::config("missing ground-truth dataset (--data)"))?;
        let models = self.models.unwrap_or_default();
        match (&self.pred_data, models.is_empty()) {
            (Some(_), false) => return Err(CliError::config("give either --model or --pred-data, not both")),
            (None, true) => return Err(CliError::config("nothing to evaluate: pass --model or --pred-data")),
            _ => {}
        }
        let splits = match self.splits {
            Some(s) if s.is_empty() => return Err(CliError::config("empty split list")),
            Some(s) => s,
            None if is_dataset(&data) => vec![read_dataset(&data)?.split()],
            None => vec![Split::InDomainTest, Split::OutDomainTest],
        };
        Ok((
            EvalRun {
                models,
                data,
                pred_data: self.pred_data,
                splits,
            },
            out,
        ))
    }
}

// ------------------------------------------------------------- ablate

#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSettings {
    /// `gen` output holding train and both test splits.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<Preset>,
    /// First of three consecutive seeds, unless `--seeds` is given.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Candidate library; repeat for each (default: the four ablation libraries).
    #[arg(long = "library")]
    pub libraries: Option<Vec<String>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(skip)]
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblateRun {
    pub data: PathBuf,
    pub preset: Preset,
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    pub libraries: Vec<String>,
    pub epochs: usize,
    pub batch_size: usize,
}

/// Libraries of 6, 9, 12 and 18 terms over two hidden fields and one
/// parameter `p`.
pub fn ablation_libraries(p: &str) -> Vec<String> {
    let base = ["1", "h0", "h1"];
    let quad = ["1", "h0", "h1", "h0^2", "h1^2", "h0*h1"];
    let with = |power: &str, terms: &[&str]| -> Vec<String> {
        terms
            .iter()
            .map(|t| {
                if *t == "1" {
                    format!("{p}{power}")
                } else {
                    format!("{p}{power}*{t}")
                }
            })
            .collect()
    };
    let join = |parts: Vec<Vec<String>>| parts.concat().join(", ");
    let strs = |t: &[&str]| t.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    vec![
        join(vec![strs(&base), with("", &base)]),
        join(vec![strs(&base), with("", &base), with("^2", &base)]),
        join(vec![strs(&quad), with("", &quad)]),
        join(vec![strs(&quad), with("", &quad), with("^2", &quad)]),
    ]
}

impl AblateSettings {
    pub fn merged(mut self, common: &Common) -> Result<(Self, PathBuf)> {
        let mut file: AblateSettings = load_file(common.config.as_deref())?;
        overlay!(self, file; data, preset, seed, seeds, lambdas, libraries, epochs, batch_size);
        let out = output_dir(&common.out, file.out.take())?;
        if self.data.is_none() {
            return Err(CliError::config("missing dataset (--data)"));
        }
        Ok((self, out))
    }

    pub fn resolve(self, family: Family) -> Result<AblateRun> {
        let preset = self.preset.unwrap_or(Preset::Desk);
        let seeds = match (self.seeds, self.seed) {
            (Some(s), _) => s,
            (None, seed) => {
                let s = seed.unwrap_or(0);
                vec![s, s + 1, s + 2]
            }
        };
        let libraries = match self.libraries {
            Some(l) => l,
            None if family.n_params() == 1 => ablation_libraries(family.param_names()[0]),
            None => {
                return Err(CliError::config(format!(
                    "{family} has {} parameters; give the libraries explicitly",
                    family.n_params()
                )))
            }
        };
        let lambdas = self.lambdas.unwrap_or_else(|| vec![1e-2, 1e-3, 1e-4]);
        if seeds.is_empty() || lambdas.is_empty() || libraries.is_empty() {
            return Err(CliError::config("seeds, lambdas and libraries must be non-empty"));
        }
        for lib in &libraries {
            latefuse::fusion::LibrarySpec::parse(lib, family.param_names(), None)
                .map_err(|e| CliError::config(format!("library '{lib}': {e}")))?;
        }
        let schedule = latefuse::training::TrainConfig::preset(preset, 0);
        let run = AblateRun {
            data: self.data.expect("checked in merged"),
            preset,
            seeds,
            lambdas,
            libraries,
            epochs: self.epochs.unwrap_or(schedule.epochs),
            batch_size: self.batch_size.unwrap_or(schedule.batch_size),
        };
        for &l in &run.lambdas {
            latefuse::training::TrainConfig {
                lambda_sparse: l,
                epochs: run.epochs,
                batch_size: run.batch_size,
                ..schedule.clone()
            }
            .validate()?;
        }
        Ok(run)
    }
}

// ------------------------------------------------------------ inspect

#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InspectSettings {
    /// Late-fusion checkpoint directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset directory or `gen` output.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split whose states are decomposed (default: in_domain_test).
    #[arg(long)]
    pub split: Option<Split>,
    /// Number of trajectories whose initial state is dumped in full.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(skip)]
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectRun {
    pub model: PathBuf,
    pub data: PathBuf,
    pub split: Split,
    pub samples: usize,
}

impl InspectSettings {
    pub fn resolve(mut self, common: &Common) -> Result<(InspectRun, PathBuf)> {
        let mut file: InspectSettings = load_file(common.config.as_deref())?;
        overlay!(self, file; model, data, split, samples);
        let out = output_dir(&common.out, file.out.take())?;
        Ok((
            InspectRun {
                model: self
                    .model
                    .ok_or_else(|| CliError::config("missing checkpoint (--model)"))?,
                data: self.data.ok_or_else(|| CliError::config("missing dataset (--data)"))?,
                split: self.split.unwrap_or(Split::InDomainTest),
                samples: self.samples.unwrap_or(1),
            },
            out,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_libraries_have_table_sizes() {
        let libs = ablation_libraries("beta");
        let sizes: Vec<usize> = libs
            .iter()
            .map(|l| latefuse::fusion::LibrarySpec::parse(l, &["beta"], None).unwrap().len())
            .collect();
        assert_eq!(sizes, vec![6, 9, 12, 18]);
        assert_eq!(libs[0], "1, h0, h1, beta, beta*h0, beta*h1");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<GenSettings>("equation = \"advection\"\ncolour = 3\n").unwrap_err();
        assert!(err.to_string().contains("colour"));
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.toml");
        fs::write(&path, "equation = \"burgers\"\nseed = 4\ntrain_count = 7\n").unwrap();
        let common = Common {
            config: Some(path),
            out: Some(dir.path().join("o")),
        };
        let cli = GenSettings {
            seed: Some(9),
            ..Default::default()
        };
        let (run, _) = cli.resolve(&common).unwrap();
        assert_eq!((run.equation, run.seed, run.train_count), (Family::Burgers, 9, 7));
    }

    #[test]
    fn recorded_run_parses_back() {
        let run = GenRun {
            equation: Family::Advection,
            preset: Preset::Desk,
            seed: 3,
            train_count: 5,
            in_domain_count: 2,
            out_domain_count: 2,
            num_waves: 2,
            max_wavenumber: 8,
        };
        let text = toml::to_string(&run).unwrap();
        let back: GenSettings = toml::from_str(&text).unwrap();
        let common = Common {
            config: None,
            out: Some(PathBuf::from("x")),
        };
        assert_eq!(back.resolve(&common).unwrap().0, run);
    }
}
