//! Parameterized PDE trajectories: initial conditions, classical solvers,
//! dataset generation and the on-disk dataset container.

mod dataset;
mod equation;
mod grid;
mod initial;
mod solver;
mod storage;

pub use dataset::{
    generate_dataset, preset_counts, preset_grid, table_ranges, Dataset, GenerateConfig, InitialDistribution, Manifest,
    ParamRange, Preset, Split, SplitCounts, Trajectory,
};
pub use equation::{Boundary, EquationSpec, Family, RD2D_DU, RD2D_DV};
pub use grid::GridSpec;
pub use initial::{sample_initial_condition, sample_noise_field, InitialConditionSpec, InitialState, SinusoidIc, Wave};
pub use solver::{burgers_substeps, solve_trajectory, ADVECTIVE_CFL_LIMIT, DIFFUSIVE_CFL_LIMIT};
pub use storage::{read_dataset, write_dataset, SCHEMA_VERSION};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PdeError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid equation: {0}")]
    InvalidEquation(String),
    #[error("initial condition: {0}")]
    InitialCondition(String),
    #[error("solution blew up before snapshot {snapshot}: {detail}")]
    NonFinite { snapshot: usize, detail: String },
    #[error("{what} CFL number {number:.4} exceeds limit {limit}; raise internal_substeps")]
    CflViolation {
        what: &'static str,
        number: f64,
        limit: f64,
    },
    #[error("invalid parameter range: {0}")]
    InvalidRange(String),
    #[error("trajectory {index} rejected {attempts} times in a row: {last}")]
    TooManyRejections {
        index: usize,
        attempts: usize,
        last: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("dataset schema version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch for {file}")]
    ChecksumMismatch { file: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, PdeError>;
