//! Fourier neural operator backbone and the parameter-as-channel baseline.

mod fno;
mod spectral;

pub use fno::{Fno, FnoConfig};
pub use spectral::{spectral_conv, SpectralConvLayer};

use thiserror::Error;

use crate::pde::Preset;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("library: {0}")]
    Library(#[from] crate::fusion::LibraryError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// `(modes per axis, width)` for a spatial dimension and scale preset.
pub fn arch_preset(spatial_dims: usize, preset: Preset) -> (Vec<usize>, usize) {
    match (spatial_dims, preset) {
        (1, Preset::Desk) => (vec![8], 16),
        (1, Preset::Full) => (vec![16], 64),
        (_, Preset::Desk) => (vec![8, 8], 16),
        (_, Preset::Full) => (vec![12, 12], 32),
    }
}

pub const LEVELS: usize = 4;

/// Spatially constant fields `[B, P, X(, Y)]` holding each sample's parameters.
pub fn parameter_channels(beta: &Tensor, spatial: &[usize]) -> Result<Tensor> {
    if beta.rank() != 2 {
        return Err(ModelError::Shape(format!(
            "parameters must be [B, P], got {:?}",
            beta.shape()
        )));
    }
    let s: usize = spatial.iter().product();
    let mut shape = beta.shape().to_vec();
    shape.extend_from_slice(spatial);
    let data = beta.data().iter().flat_map(|&v| std::iter::repeat(v).take(s)).collect();
    Ok(Tensor::new(shape, data)?)
}

/// FNO that sees the parameters as extra constant input channels and
/// predicts the next state directly.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub backbone: Fno,
    pub n_vars: usize,
    pub n_params: usize,
}

impl BaselineModel {
    pub fn new(n_vars: usize, n_params: usize, modes: Vec<usize>, width: usize, seed: u64) -> Result<Self> {
        let config = FnoConfig {
            in_channels: n_vars + n_params,
            out_channels: n_vars,
            width,
            modes,
            levels: LEVELS,
        };
        Ok(Self {
            backbone: Fno::new(config, seed)?,
            n_vars,
            n_params,
        })
    }

    /// Concatenates state and parameter channels, then runs the backbone.
    pub fn step_graph(&self, g: &Graph, vars: &[Var], u: Var, beta: &Tensor) -> Result<Var> {
        let us = g.shape(u);
        if us.len() < 3 || us[1] != self.n_vars || beta.shape() != [us[0], self.n_params] {
            return Err(ModelError::Shape(format!(
                "baseline step: state {us:?}, parameters {:?}",
                beta.shape()
            )));
        }
        let fields = g.constant(parameter_channels(beta, &us[2..])?);
        let x = g.concat(&[u, fields], 1)?;
        self.backbone.forward(g, vars, x)
    }
}
