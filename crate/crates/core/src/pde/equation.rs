use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{PdeError, Result};

pub const RD2D_DU: f64 = 1e-3;
pub const RD2D_DV: f64 = 5e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    NeumannNoFlow,
}

/// The four benchmark families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Advection,
    Burgers,
    ReactionDiffusion1d,
    ReactionDiffusion2d,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Advection,
        Family::Burgers,
        Family::ReactionDiffusion1d,
        Family::ReactionDiffusion2d,
    ];

    /// Parameter names in the order they appear in the parameter vector.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Family::Advection => &["beta"],
            Family::Burgers => &["nu"],
            Family::ReactionDiffusion1d => &["nu", "rho"],
            Family::ReactionDiffusion2d => &["k"],
        }
    }

    pub fn n_params(self) -> usize {
        self.param_names().len()
    }

    /// State variables per grid point.
    pub fn n_vars(self) -> usize {
        match self {
            Family::ReactionDiffusion2d => 2,
            _ => 1,
        }
    }

    pub fn spatial_dims(self) -> usize {
        match self {
            Family::ReactionDiffusion2d => 2,
            _ => 1,
        }
    }

    pub fn boundary(self) -> Boundary {
        match self {
            Family::ReactionDiffusion2d => Boundary::NeumannNoFlow,
            _ => Boundary::Periodic,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Advection => "advection",
            Family::Burgers => "burgers",
            Family::ReactionDiffusion1d => "reaction_diffusion_1d",
            Family::ReactionDiffusion2d => "reaction_diffusion_2d",
        }
    }

    /// Candidate library used for this family's headline runs.
    pub fn default_library(self) -> &'static str {
        match self {
            Family::Advection => "h0*beta, h1",
            Family::Burgers => "h0*nu, h1",
            Family::ReactionDiffusion1d => {
                "1, h0, h1, h0^2, h1^2, h0*h1, rho*h0^2, rho*h1^2, rho*h0*h1, nu*h0^2, nu*h1^2, nu*h0*h1"
            }
            Family::ReactionDiffusion2d => "1, h0, h1, h2, k, k*h0, k*h1, k*h2",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = PdeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "advection" => Ok(Family::Advection),
            "burgers" => Ok(Family::Burgers),
            "reaction_diffusion_1d" | "rd1d" | "fisher_kpp" => Ok(Family::ReactionDiffusion1d),
            "reaction_diffusion_2d" | "rd2d" | "fitzhugh_nagumo" => Ok(Family::ReactionDiffusion2d),
            other => Err(PdeError::InvalidEquation(format!("unknown equation family '{other}'"))),
        }
    }
}

/// A concrete equation instance with its parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum EquationSpec {
    /// `u_t = -beta u_x`
    Advection { beta: f64 },
    /// `u_t = -(u^2/2)_x + nu pi u_xx`
    Burgers { nu: f64 },
    /// `u_t = nu u_xx + rho u (1 - u)`
    #[serde(rename = "reaction_diffusion_1d")]
    ReactionDiffusion1d { nu: f64, rho: f64 },
    /// FitzHugh-Nagumo activator/inhibitor pair with no-flow walls.
    #[serde(rename = "reaction_diffusion_2d")]
    ReactionDiffusion2d { k: f64, du: f64, dv: f64 },
}

impl EquationSpec {
    pub fn family(&self) -> Family {
        match self {
            EquationSpec::Advection { .. } => Family::Advection,
            EquationSpec::Burgers { .. } => Family::Burgers,
            EquationSpec::ReactionDiffusion1d { .. } => Family::ReactionDiffusion1d,
            EquationSpec::ReactionDiffusion2d { .. } => Family::ReactionDiffusion2d,
        }
    }

    pub fn boundary(&self) -> Boundary {
        self.family().boundary()
    }

    /// Parameter vector in [`Family::param_names`] order.
    pub fn params(&self) -> Vec<f64> {
        match *self {
            EquationSpec::Advection { beta } => vec![beta],
            EquationSpec::Burgers { nu } => vec![nu],
            EquationSpec::ReactionDiffusion1d { nu, rho } => vec![nu, rho],
            EquationSpec::ReactionDiffusion2d { k, .. } => vec![k],
        }
    }

    /// Rebuilds an equation from its parameter vector; RD2D takes the fixed
    /// diffusion coefficients.
    pub fn from_params(family: Family, params: &[f64]) -> Result<Self> {
        if params.len() != family.n_params() {
            return Err(PdeError::InvalidEquation(format!(
                "{family} takes {} parameters, got {}",
                family.n_params(),
                params.len()
            )));
        }
        let eq = match family {
            Family::Advection => EquationSpec::Advection { beta: params[0] },
            Family::Burgers => EquationSpec::Burgers { nu: params[0] },
            Family::ReactionDiffusion1d => EquationSpec::ReactionDiffusion1d {
                nu: params[0],
                rho: params[1],
            },
            Family::ReactionDiffusion2d => EquationSpec::ReactionDiffusion2d {
                k: params[0],
                du: RD2D_DU,
                dv: RD2D_DV,
            },
        };
        eq.validate()?;
        Ok(eq)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.params().iter().all(|p| p.is_finite());
        let diffusion_ok = match *self {
            EquationSpec::Advection { .. } => true,
            EquationSpec::Burgers { nu } => nu >= 0.0,
            EquationSpec::ReactionDiffusion1d { nu, .. } => nu >= 0.0,
            EquationSpec::ReactionDiffusion2d { du, dv, .. } => {
                du >= 0.0 && dv >= 0.0 && du.is_finite() && dv.is_finite()
            }
        };
        if !finite || !diffusion_ok {
            return Err(PdeError::InvalidEquation(format!(
                "{self:?}: parameters must be finite, diffusion >= 0"
            )));
        }
        Ok(())
    }
}
