use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    burgers_substeps, sample_initial_condition, sample_noise_field, solve_trajectory, Boundary, EquationSpec, Family,
    GridSpec, InitialConditionSpec, InitialState, PdeError, Result, RD2D_DU, RD2D_DV,
};
use crate::tensor::Tensor;

/// One solution trajectory together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub params: Vec<f64>,
    /// `[snapshots, V, X(, Y)]`
    pub states: Tensor,
    pub equation: EquationSpec,
    pub grid: GridSpec,
}

impl Trajectory {
    pub fn snapshots(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn initial_state(&self) -> Tensor {
        self.states.index_outer(0)
    }

    pub fn state(&self, n: usize) -> Tensor {
        self.states.index_outer(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    InDomainTest,
    OutDomainTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::InDomainTest, Split::OutDomainTest];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::InDomainTest => "in_domain_test",
            Split::OutDomainTest => "out_domain_test",
        }
    }

    /// Short label used in report tables.
    pub fn domain_label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::InDomainTest => "in",
            Split::OutDomainTest => "out",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = PdeError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s || sp.domain_label() == s)
            .ok_or_else(|| PdeError::Manifest(format!("unknown split '{s}'")))
    }
}

/// Open interval `(lo, hi)` for one named parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub fn new(name: &str, lo: f64, hi: f64) -> Self {
        Self {
            name: name.to_string(),
            lo,
            hi,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v > self.lo && v < self.hi
    }
}

/// Sampling ranges per family and split. Training shares the in-domain range.
pub fn table_ranges(family: Family, split: Split) -> Vec<ParamRange> {
    let out = split == Split::OutDomainTest;
    match family {
        Family::Advection => vec![if out {
            ParamRange::new("beta", 0.5, 1.0)
        } else {
            ParamRange::new("beta", 0.0, 0.5)
        }],
        Family::Burgers => vec![if out {
            ParamRange::new("nu", 0.0, 0.01)
        } else {
            ParamRange::new("nu", 0.01, 0.02)
        }],
        Family::ReactionDiffusion1d => vec![
            if out {
                ParamRange::new("nu", 0.1, 0.2)
            } else {
                ParamRange::new("nu", 0.0, 0.1)
            },
            ParamRange::new("rho", 0.0, 1.0),
        ],
        Family::ReactionDiffusion2d => vec![if out {
            ParamRange::new("k", 0.05, 0.075)
        } else {
            ParamRange::new("k", 0.0, 0.05)
        }],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Full,
}

impl FromStr for Preset {
    type Err = PdeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(PdeError::InvalidGrid(format!("unknown preset '{other}' (desk|full)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub in_domain_test: usize,
    pub out_domain_test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::InDomainTest => self.in_domain_test,
            Split::OutDomainTest => self.out_domain_test,
        }
    }
}

pub fn preset_counts(preset: Preset) -> SplitCounts {
    match preset {
        Preset::Desk => SplitCounts {
            train: 40,
            in_domain_test: 20,
            out_domain_test: 20,
        },
        Preset::Full => SplitCounts {
            train: 100,
            in_domain_test: 50,
            out_domain_test: 50,
        },
    }
}

/// Grid and snapshot schedule for a family at a given scale.
pub fn preset_grid(family: Family, preset: Preset) -> GridSpec {
    let n1 = match preset {
        Preset::Desk => 64,
        Preset::Full => 128,
    };
    match family {
        Family::Advection => GridSpec::new_1d(n1, (0.0, 1.0), 0.05, 0.5, 1),
        Family::Burgers => {
            let mut g = GridSpec::new_1d(n1, (0.0, 1.0), 0.005, 0.5, 1);
            let nu_max = [Split::InDomainTest, Split::OutDomainTest]
                .iter()
                .flat_map(|&s| table_ranges(family, s))
                .fold(0.0f64, |m, r| m.max(r.hi));
            let u_max = InitialConditionSpec::default().num_waves as f64;
            g.internal_substeps = burgers_substeps(&g, nu_max, u_max);
            g
        }
        Family::ReactionDiffusion1d => GridSpec::new_1d(n1, (0.0, 1.0), 0.005, 0.5, 5),
        Family::ReactionDiffusion2d => {
            let n2 = match preset {
                Preset::Desk => 32,
                Preset::Full => 64,
            };
            GridSpec {
                points: vec![n2, n2],
                bounds: vec![(-1.0, 1.0), (-1.0, 1.0)],
                snapshot_dt: 0.1,
                horizon: 4.0,
                internal_substeps: 100,
            }
        }
    }
}

/// How initial states were drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialDistribution {
    Sinusoids {
        num_waves: usize,
        max_wavenumber: usize,
        amplitude_range: (f64, f64),
        phase_range: (f64, f64),
    },
    StandardNormalNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub family: Family,
    pub split: Split,
    pub ranges: Vec<ParamRange>,
    pub count: usize,
    pub seed: u64,
    pub grid: GridSpec,
    /// Wave settings for 1D families; its `seed` is replaced per trajectory.
    pub initial: InitialConditionSpec,
}

impl GenerateConfig {
    /// Table ranges and preset grid for `family`/`split`.
    pub fn preset(family: Family, split: Split, preset: Preset, seed: u64) -> Self {
        Self {
            family,
            split,
            ranges: table_ranges(family, split),
            count: preset_counts(preset).get(split),
            seed,
            grid: preset_grid(family, preset),
            initial: InitialConditionSpec::default(),
        }
    }

    fn initial_distribution(&self) -> InitialDistribution {
        match self.family {
            Family::ReactionDiffusion2d => InitialDistribution::StandardNormalNoise,
            _ => InitialDistribution::Sinusoids {
                num_waves: self.initial.num_waves,
                max_wavenumber: self.initial.max_wavenumber,
                amplitude_range: self.initial.amplitude_range,
                phase_range: self.initial.phase_range,
            },
        }
    }
}

/// Dataset metadata; together with the schema it pins the arrays bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub family: Family,
    pub boundary: Boundary,
    pub split: Split,
    pub param_names: Vec<String>,
    pub ranges: Vec<ParamRange>,
    pub count: usize,
    pub seed: u64,
    pub grid: GridSpec,
    pub initial_distribution: InitialDistribution,
    pub equation_constants: BTreeMap<String, f64>,
    /// Draws discarded because the solver blew up.
    pub rejected_draws: usize,
    pub dtype: String,
    pub params_shape: Vec<usize>,
    pub states_shape: Vec<usize>,
    /// SHA-256 of each array file, filled in when written.
    #[serde(default)]
    pub checksums: BTreeMap<String, String>,
}

impl Manifest {
    /// Recovers the generator configuration that produced this dataset.
    pub fn generate_config(&self) -> GenerateConfig {
        let initial = match &self.initial_distribution {
            InitialDistribution::Sinusoids {
                num_waves,
                max_wavenumber,
                amplitude_range,
                phase_range,
            } => InitialConditionSpec {
                num_waves: *num_waves,
                max_wavenumber: *max_wavenumber,
                amplitude_range: *amplitude_range,
                phase_range: *phase_range,
                seed: 0,
            },
            InitialDistribution::StandardNormalNoise => InitialConditionSpec::default(),
        };
        GenerateConfig {
            family: self.family,
            split: self.split,
            ranges: self.ranges.clone(),
            count: self.count,
            seed: self.seed,
            grid: self.grid.clone(),
            initial,
        }
    }

    pub fn snapshots(&self) -> usize {
        self.grid.snapshots()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn split(&self) -> Split {
        self.manifest.split
    }

    pub fn family(&self) -> Family {
        self.manifest.family
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Shared grid and family, parameters inside the declared ranges.
    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.trajectories.iter().enumerate() {
            if t.grid != self.manifest.grid || t.equation.family() != self.manifest.family {
                return Err(PdeError::Manifest(format!(
                    "trajectory {i} disagrees with manifest grid/family"
                )));
            }
            for (v, r) in t.params.iter().zip(&self.manifest.ranges) {
                if !r.contains(*v) {
                    return Err(PdeError::InvalidRange(format!(
                        "trajectory {i}: {} = {v} outside ({}, {})",
                        r.name, r.lo, r.hi
                    )));
                }
            }
        }
        Ok(())
    }
}

const MAX_ATTEMPTS: usize = 32;

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Uniform draw from `(lo, hi)` that stays strictly inside after rounding
/// to the on-disk precision.
fn sample_param(rng: &mut ChaCha8Rng, r: &ParamRange) -> f64 {
    loop {
        let v = quantize(rng.gen_range(r.lo..r.hi));
        if r.contains(v) {
            return v;
        }
    }
}

fn generate_one(cfg: &GenerateConfig, index: usize) -> Result<(Trajectory, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let mut last = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let params: Vec<f64> = cfg.ranges.iter().map(|r| sample_param(&mut rng, r)).collect();
        let eq = EquationSpec::from_params(cfg.family, &params)?;
        let ic_seed: u64 = rng.gen();
        let init = match cfg.family {
            Family::ReactionDiffusion2d => InitialState::Field(sample_noise_field(2, &cfg.grid, ic_seed)),
            _ => {
                let spec = InitialConditionSpec {
                    seed: ic_seed,
                    ..cfg.initial.clone()
                };
                InitialState::Sinusoids(sample_initial_condition(&spec, &cfg.grid)?.0)
            }
        };
        match solve_trajectory(&eq, &cfg.grid, &init) {
            Ok(mut tr) => {
                tr.states.data_mut().iter_mut().for_each(|v| *v = quantize(*v));
                return Ok((tr, attempt));
            }
            Err(e @ PdeError::NonFinite { .. }) => last = e.to_string(),
            Err(e) => return Err(e),
        }
    }
    Err(PdeError::TooManyRejections {
        index,
        attempts: MAX_ATTEMPTS,
        last,
    })
}

/// Draws `count` trajectories with i.i.d. uniform parameters and fresh
/// initial data. Each trajectory uses its own random stream, so the result
/// does not depend on thread scheduling. Stored values are rounded to f32.
pub fn generate_dataset(cfg: &GenerateConfig) -> Result<Dataset> {
    cfg.grid.validate()?;
    if cfg.ranges.len() != cfg.family.n_params() {
        return Err(PdeError::InvalidRange(format!(
            "{} needs {} ranges, got {}",
            cfg.family,
            cfg.family.n_params(),
            cfg.ranges.len()
        )));
    }
    for (r, name) in cfg.ranges.iter().zip(cfg.family.param_names()) {
        if r.name != *name {
            return Err(PdeError::InvalidRange(format!(
                "expected range for '{name}', got '{}'",
                r.name
            )));
        }
        if !(r.lo.is_finite() && r.hi.is_finite() && r.hi > r.lo) {
            return Err(PdeError::InvalidRange(format!(
                "{} range ({}, {}) is empty or inverted",
                r.name, r.lo, r.hi
            )));
        }
    }
    let results: Vec<(Trajectory, usize)> = (0..cfg.count)
        .into_par_iter()
        .map(|i| generate_one(cfg, i))
        .collect::<Result<_>>()?;
    let rejected = results.iter().map(|(_, r)| r).sum();
    let trajectories: Vec<Trajectory> = results.into_iter().map(|(t, _)| t).collect();

    let family = cfg.family;
    let mut states_shape = vec![cfg.count, cfg.grid.snapshots(), family.n_vars()];
    states_shape.extend_from_slice(&cfg.grid.points);
    let mut constants = BTreeMap::new();
    if family == Family::ReactionDiffusion2d {
        constants.insert("du".to_string(), RD2D_DU);
        constants.insert("dv".to_string(), RD2D_DV);
    }
    let manifest = Manifest {
        schema_version: super::SCHEMA_VERSION,
        family,
        boundary: family.boundary(),
        split: cfg.split,
        param_names: family.param_names().iter().map(|s| s.to_string()).collect(),
        ranges: cfg.ranges.clone(),
        count: cfg.count,
        seed: cfg.seed,
        grid: cfg.grid.clone(),
        initial_distribution: cfg.initial_distribution(),
        equation_constants: constants,
        rejected_draws: rejected,
        dtype: "float32".into(),
        params_shape: vec![cfg.count, family.n_params()],
        states_shape,
        checksums: BTreeMap::new(),
    };
    Ok(Dataset { trajectories, manifest })
}
