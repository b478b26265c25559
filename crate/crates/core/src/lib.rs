//! Late-fusion neural operators for parameterized PDEs.
//!
//! A Fourier neural operator maps the current state to hidden fields; those
//! are combined with the physical parameters through a sparse candidate
//! library to form the state increment. The crate also ships the data
//! generators, training loop and evaluation metrics used to compare it with
//! a parameter-as-channel baseline.

pub mod evaluation;
pub mod fusion;
pub mod model;
pub mod operator;
pub mod pde;
pub mod tensor;
pub mod training;

pub use model::{Model, ModelConfig, ModelKind};
