//! Late fusion: hidden fields from the backbone are combined with the
//! physical parameters through a candidate library and a coefficient
//! matrix, and the result is added to the current state.

mod library;

pub use library::{evaluate_library, HiddenFactor, LibrarySpec, LibraryTerm, ParamFactor, Unary};

use thiserror::Error;

use crate::operator::{Fno, FnoConfig, ModelError, LEVELS};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("library text is empty")]
    Empty,
    #[error("syntax error in '{term}': {msg}")]
    Syntax { term: String, msg: String },
    #[error("unknown symbol '{0}'")]
    UnknownSymbol(String),
    #[error("hidden index {index} out of range for {arity} hidden fields")]
    IndexOutOfRange { index: usize, arity: usize },
    #[error("duplicate term '{0}'")]
    DuplicateTerm(String),
    #[error("arity mismatch: {0}")]
    Arity(String),
    #[error("hidden fields contain non-finite values")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LibraryError>;

/// Intermediate values of one late-fusion step.
#[derive(Debug, Clone, Copy)]
pub struct FusionStep {
    pub hidden: Var,
    pub theta: Var,
    pub param_dependent: Var,
    pub param_independent: Var,
    pub residual: Var,
    pub next: Var,
}

/// Contracts the selected library rows with their coefficients:
/// `xi [T, V]`, term vars `[B, 1, S..]` -> `[B, V, S..]`.
fn contract(g: &Graph, xi: Var, terms: &[Var], rows: &[usize], out_shape: &[usize]) -> Result<Var> {
    if rows.is_empty() {
        return Ok(g.constant(Tensor::zeros(out_shape)));
    }
    let b = out_shape[0];
    let s: usize = out_shape[2..].iter().product();
    let parts: Vec<Var> = rows.iter().map(|&r| terms[r]).collect();
    let theta = g.concat(&parts, 1)?;
    let theta = g.reshape(theta, &[b, rows.len(), s])?;
    let coef = g.transpose(g.index_select(xi, 0, rows)?)?;
    let out = g.matmul(coef, theta)?;
    Ok(g.reshape(out, out_shape)?)
}

/// Builds the library, the two partial contractions and their sum.
/// `h [B, H, S..]`, `xi [T, V]`, `beta [B, P]`; returns
/// `(theta, param_dependent, param_independent, residual)`.
pub fn fuse(g: &Graph, spec: &LibrarySpec, xi: Var, h: Var, beta: &Tensor) -> Result<(Var, Var, Var, Var)> {
    let hs = g.shape(h);
    let xs = g.shape(xi);
    if xs.len() != 2 || xs[0] != spec.len() {
        return Err(LibraryError::Arity(format!(
            "coefficients {xs:?} for {} terms",
            spec.len()
        )));
    }
    let terms = spec.term_vars(g, h, beta)?;
    let theta = g.concat(&terms, 1)?;
    let mut out_shape = vec![hs[0], xs[1]];
    out_shape.extend_from_slice(&hs[2..]);
    let (dep, indep) = spec.partition();
    let d = contract(g, xi, &terms, &dep, &out_shape)?;
    let i = contract(g, xi, &terms, &indep, &out_shape)?;
    let residual = g.add(d, i)?;
    Ok((theta, d, i, residual))
}

/// Splits the residual into its parameter-dependent and parameter-free
/// parts for one sample: `h [H, S..]`, `beta [P]`, `xi [T, V]`. The two
/// parts add up to the residual bit for bit.
pub fn split_residual(spec: &LibrarySpec, xi: &Tensor, h: &Tensor, beta: &[f64]) -> Result<(Tensor, Tensor)> {
    if !h.is_finite() {
        return Err(LibraryError::NonFinite);
    }
    let g = Graph::with_checks(true);
    let mut batched = vec![1];
    batched.extend_from_slice(h.shape());
    let hv = g.constant(h.clone().reshape(&batched)?);
    let bt = Tensor::new(vec![1, beta.len()], beta.to_vec())?;
    let xv = g.constant(xi.clone());
    let (_, d, i, _) = fuse(&g, spec, xv, hv, &bt)?;
    let unbatch = |v: Var| -> Result<Tensor> {
        let t = g.value(v).clone();
        let shape = t.shape()[1..].to_vec();
        Ok(t.reshape(&shape)?)
    };
    Ok((unbatch(d)?, unbatch(i)?))
}

/// Backbone + library + coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct LateFusionModel {
    pub backbone: Fno,
    pub library: LibrarySpec,
    /// `[terms, V]`, zero at initialization.
    pub xi: Tensor,
    pub n_vars: usize,
}

impl LateFusionModel {
    pub fn new(
        library: LibrarySpec,
        n_vars: usize,
        modes: Vec<usize>,
        width: usize,
        seed: u64,
    ) -> std::result::Result<Self, ModelError> {
        let config = FnoConfig {
            in_channels: n_vars,
            out_channels: library.hidden_arity,
            width,
            modes,
            levels: LEVELS,
        };
        let xi = Tensor::zeros(&[library.len(), n_vars]);
        Ok(Self {
            backbone: Fno::new(config, seed)?,
            library,
            xi,
            n_vars,
        })
    }

    /// One step with parameters bound to `vars` (backbone arrays, then Ξ).
    pub fn step_graph(
        &self,
        g: &Graph,
        vars: &[Var],
        u: Var,
        beta: &Tensor,
    ) -> std::result::Result<FusionStep, ModelError> {
        let (bvars, xi) = vars.split_at(vars.len() - 1);
        let hidden = self.backbone.forward(g, bvars, u)?;
        let (theta, d, i, residual) = fuse(g, &self.library, xi[0], hidden, beta)?;
        let next = g.add(u, residual)?;
        Ok(FusionStep {
            hidden,
            theta,
            param_dependent: d,
            param_independent: i,
            residual,
            next,
        })
    }
}

/// Advances a batch of states by one late-fusion step:
/// `u [B, V, S..]`, `beta [B, P]`.
pub fn late_fusion_step(model: &LateFusionModel, u: &Tensor, beta: &Tensor) -> std::result::Result<Tensor, ModelError> {
    let g = Graph::with_checks(true);
    let mut vars: Vec<Var> = model.backbone.params.iter().map(|p| g.constant(p.clone())).collect();
    vars.push(g.constant(model.xi.clone()));
    let uv = g.constant(u.clone());
    let step = model.step_graph(&g, &vars, uv, beta)?;
    let out = g.value(step.next).clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn advection() -> LateFusionModel {
        let lib = LibrarySpec::parse("h0*beta, h1", &["beta"], None).unwrap();
        LateFusionModel::new(lib, 1, vec![4], 8, 3).unwrap()
    }

    #[test]
    fn zero_coefficients_are_identity() {
        let m = advection();
        let u = Tensor::from_fn(&[2, 1, 16], |i| (i as f64 * 0.4).sin());
        let beta = Tensor::new(vec![2, 1], vec![0.2, 0.9]).unwrap();
        assert_eq!(late_fusion_step(&m, &u, &beta).unwrap(), u);
    }

    #[test]
    fn single_active_term_is_beta_times_h0() {
        let mut m = advection();
        m.xi = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        let u = Tensor::from_fn(&[1, 1, 16], |i| (i as f64 * 0.4).cos());
        let beta = Tensor::new(vec![1, 1], vec![0.3]).unwrap();
        let next = late_fusion_step(&m, &u, &beta).unwrap();
        let h = m.backbone.hidden(&u).unwrap();
        for j in 0..16 {
            let expect = u.data()[j] + 0.3 * h.data()[j];
            assert!((next.data()[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn split_parts_sum_to_residual_bitwise() {
        let lib = LibrarySpec::parse("h0*beta, h1", &["beta"], None).unwrap();
        let xi = Tensor::new(vec![2, 1], vec![0.37, -1.3]).unwrap();
        let h = Tensor::from_fn(&[2, 8], |i| (i as f64 * 0.91).sin());
        let (d, i) = split_residual(&lib, &xi, &h, &[0.4]).unwrap();
        for j in 0..8 {
            assert_eq!(d.data()[j], 0.37 * (h.data()[j] * 0.4));
            assert_eq!(i.data()[j], -1.3 * h.data()[8 + j]);
        }
        let g = Graph::new();
        let hv = g.constant(h.clone().reshape(&[1, 2, 8]).unwrap());
        let xv = g.constant(xi.clone());
        let (_, _, _, r) = fuse(&g, &lib, xv, hv, &Tensor::new(vec![1, 1], vec![0.4]).unwrap()).unwrap();
        let r = g.value(r).clone();
        for j in 0..8 {
            assert_eq!(r.data()[j], d.data()[j] + i.data()[j]);
        }
    }

    #[test]
    fn zero_beta_zeroes_parameter_part() {
        let lib = LibrarySpec::parse("h0*beta, beta^2*h1, h1", &["beta"], None).unwrap();
        let xi = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let h = Tensor::from_fn(&[2, 8], |i| 1.0 + i as f64);
        let (d, _) = split_residual(&lib, &xi, &h, &[0.0]).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_coefficients_rejected() {
        let lib = LibrarySpec::parse("h0*beta, h1", &["beta"], None).unwrap();
        let xi = Tensor::zeros(&[3, 1]);
        assert!(split_residual(&lib, &xi, &Tensor::zeros(&[2, 4]), &[0.1]).is_err());
    }
}
