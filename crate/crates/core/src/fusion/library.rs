use std::fmt;

use serde::{Deserialize, Serialize};

use super::{LibraryError, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unary {
    Identity,
    Sin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HiddenFactor {
    pub index: usize,
    pub unary: Unary,
    pub power: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamFactor {
    pub index: usize,
    pub power: u32,
}

/// Product of hidden-state and parameter monomials; empty means `1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct LibraryTerm {
    pub hidden: Vec<HiddenFactor>,
    pub params: Vec<ParamFactor>,
}

impl LibraryTerm {
    pub fn is_param_dependent(&self) -> bool {
        !self.params.is_empty()
    }

    /// Total parameter degree.
    pub fn param_degree(&self) -> u32 {
        self.params.iter().map(|f| f.power).sum()
    }

    /// Scalar parameter factor for one sample.
    pub fn param_value(&self, beta: &[f64]) -> f64 {
        self.params
            .iter()
            .fold(1.0, |acc, f| acc * beta[f.index].powi(f.power as i32))
    }

    /// Merges repeated factors and sorts them.
    fn canonicalize(&mut self) {
        let mut hidden: Vec<HiddenFactor> = Vec::new();
        self.hidden.sort();
        for f in self.hidden.drain(..) {
            match hidden.last_mut() {
                Some(last) if last.index == f.index && last.unary == f.unary => last.power += f.power,
                _ => hidden.push(f),
            }
        }
        self.hidden = hidden;
        let mut params: Vec<ParamFactor> = Vec::new();
        self.params.sort();
        for f in self.params.drain(..) {
            match params.last_mut() {
                Some(last) if last.index == f.index => last.power += f.power,
                _ => params.push(f),
            }
        }
        self.params = params;
    }
}

/// Ordered candidate library; the order fixes the rows of the coefficient matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibrarySpec {
    pub terms: Vec<LibraryTerm>,
    pub hidden_arity: usize,
    pub param_names: Vec<String>,
}

fn parse_power(s: &str, factor: &str) -> Result<u32> {
    let p: u32 = s.parse().map_err(|_| LibraryError::Syntax {
        term: factor.to_string(),
        msg: format!("bad exponent '{s}'"),
    })?;
    if p == 0 {
        return Err(LibraryError::Syntax {
            term: factor.to_string(),
            msg: "exponents start at 1 (write the constant as '1')".into(),
        });
    }
    Ok(p)
}

fn parse_hidden_index(s: &str) -> Option<usize> {
    let digits = s.strip_prefix('h')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

impl LibrarySpec {
    /// Parses the term DSL. `hidden_arity = None` infers it from the largest
    /// hidden index used.
    pub fn parse(text: &str, param_names: &[&str], hidden_arity: Option<usize>) -> Result<Self> {
        let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.is_empty() {
            return Err(LibraryError::Empty);
        }
        let mut terms: Vec<LibraryTerm> = Vec::new();
        for raw in compact.split(',') {
            if raw.is_empty() {
                return Err(LibraryError::Syntax {
                    term: raw.into(),
                    msg: "empty term".into(),
                });
            }
            let mut term = LibraryTerm::default();
            if raw != "1" {
                for factor in raw.split('*') {
                    let (base, power) = match factor.split_once('^') {
                        Some((b, p)) => (b, parse_power(p, factor)?),
                        None => (factor, 1),
                    };
                    if let Some(inner) = base.strip_prefix("sin(").and_then(|s| s.strip_suffix(')')) {
                        if factor.contains('^') {
                            return Err(LibraryError::Syntax {
                                term: raw.into(),
                                msg: "sin(h<i>) takes no exponent; repeat the factor instead".into(),
                            });
                        }
                        let index =
                            parse_hidden_index(inner).ok_or_else(|| LibraryError::UnknownSymbol(factor.into()))?;
                        term.hidden.push(HiddenFactor {
                            index,
                            unary: Unary::Sin,
                            power,
                        });
                    } else if let Some(index) = parse_hidden_index(base) {
                        term.hidden.push(HiddenFactor {
                            index,
                            unary: Unary::Identity,
                            power,
                        });
                    } else if let Some(index) = param_names.iter().position(|n| *n == base) {
                        term.params.push(ParamFactor { index, power });
                    } else {
                        return Err(LibraryError::UnknownSymbol(base.into()));
                    }
                }
            }
            term.canonicalize();
            if terms.contains(&term) {
                return Err(LibraryError::DuplicateTerm(raw.into()));
            }
            terms.push(term);
        }
        let max_index = terms.iter().flat_map(|t| t.hidden.iter().map(|f| f.index)).max();
        let hidden_arity = match hidden_arity {
            Some(h) => {
                if let Some(m) = max_index.filter(|&m| m >= h) {
                    return Err(LibraryError::IndexOutOfRange { index: m, arity: h });
                }
                h
            }
            None => max_index.map_or(1, |m| m + 1),
        };
        Ok(Self {
            terms,
            hidden_arity,
            param_names: param_names.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn param_arity(&self) -> usize {
        self.param_names.len()
    }

    /// Indices of parameter-dependent and parameter-free terms.
    pub fn partition(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| self.terms[i].is_param_dependent())
    }

    /// Graph evaluation of every term:
    /// `h [B, H, X(, Y)]`, `beta [B, P]` -> `[B, T, X(, Y)]`.
    pub fn evaluate_graph(&self, g: &Graph, h: Var, beta: &Tensor) -> Result<Var> {
        let terms = self.term_vars(g, h, beta)?;
        Ok(g.concat(&terms, 1)?)
    }

    /// One `[B, 1, X(, Y)]` var per term.
    pub(crate) fn term_vars(&self, g: &Graph, h: Var, beta: &Tensor) -> Result<Vec<Var>> {
        let hs = g.shape(h);
        let b = hs.first().copied().unwrap_or(0);
        if hs.len() < 3 || hs[1] != self.hidden_arity {
            return Err(LibraryError::Arity(format!(
                "library over {} hidden fields got {hs:?}",
                self.hidden_arity
            )));
        }
        if beta.shape() != [b, self.param_arity()] {
            return Err(LibraryError::Arity(format!(
                "library over {} parameters got {:?} for batch {b}",
                self.param_arity(),
                beta.shape()
            )));
        }
        let mut field_shape = vec![b, 1];
        field_shape.extend_from_slice(&hs[2..]);
        let mut scalar_shape = vec![b, 1];
        scalar_shape.extend(std::iter::repeat(1).take(hs.len() - 2));
        let p = self.param_arity();

        let mut out = Vec::with_capacity(self.len());
        for term in &self.terms {
            let mut acc: Option<Var> = None;
            for f in &term.hidden {
                let mut v = g.index_select(h, 1, &[f.index])?;
                if f.unary == Unary::Sin {
                    v = g.sin(v)?;
                }
                if f.power > 1 {
                    v = g.powi(v, f.power as i32)?;
                }
                acc = Some(match acc {
                    Some(a) => g.mul(a, v)?,
                    None => v,
                });
            }
            let var = if term.is_param_dependent() {
                let coef: Vec<f64> = (0..b)
                    .map(|i| term.param_value(&beta.data()[i * p..(i + 1) * p]))
                    .collect();
                match acc {
                    Some(a) => g.mul(a, g.constant(Tensor::new(scalar_shape.clone(), coef)?))?,
                    None => {
                        let per: usize = field_shape[2..].iter().product();
                        let data = coef.iter().flat_map(|&c| std::iter::repeat(c).take(per)).collect();
                        g.constant(Tensor::new(field_shape.clone(), data)?)
                    }
                }
            } else {
                match acc {
                    Some(a) => a,
                    None => g.constant(Tensor::ones(&field_shape)),
                }
            };
            out.push(var);
        }
        Ok(out)
    }
}

/// Evaluates the library for one sample: `h [H, X(, Y)]`, `beta [P]`
/// -> `[T, X(, Y)]`.
pub fn evaluate_library(spec: &LibrarySpec, h: &Tensor, beta: &[f64]) -> Result<Tensor> {
    if !h.is_finite() {
        return Err(LibraryError::NonFinite);
    }
    let g = Graph::with_checks(true);
    let mut batched = vec![1];
    batched.extend_from_slice(h.shape());
    let hv = g.constant(h.clone().reshape(&batched)?);
    let bt = Tensor::new(vec![1, beta.len()], beta.to_vec())?;
    let theta = spec.evaluate_graph(&g, hv, &bt)?;
    let out = g.value(theta).clone();
    let shape = out.shape()[1..].to_vec();
    Ok(out.reshape(&shape)?)
}

fn render_term(term: &LibraryTerm, names: &[String]) -> String {
    if term.hidden.is_empty() && term.params.is_empty() {
        return "1".into();
    }
    let mut factors = Vec::new();
    for h in &term.hidden {
        match h.unary {
            Unary::Identity if h.power == 1 => factors.push(format!("h{}", h.index)),
            Unary::Identity => factors.push(format!("h{}^{}", h.index, h.power)),
            Unary::Sin => factors.extend(std::iter::repeat(format!("sin(h{})", h.index)).take(h.power as usize)),
        }
    }
    for p in &term.params {
        let name = names.get(p.index).cloned().unwrap_or_else(|| format!("p{}", p.index));
        if p.power == 1 {
            factors.push(name);
        } else {
            factors.push(format!("{name}^{}", p.power));
        }
    }
    factors.join("*")
}

impl fmt::Display for LibrarySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.terms.iter().map(|t| render_term(t, &self.param_names)).collect();
        f.write_str(&parts.join(", "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RD1D: &str = "1, h0, h1, h0^2, h1^2, h0*h1, rho*h0^2, rho*h1^2, rho*h0*h1, nu*h0^2, nu*h1^2, nu*h0*h1";

    #[test]
    fn rd1d_library_has_twelve_terms() {
        let spec = LibrarySpec::parse(RD1D, &["nu", "rho"], None).unwrap();
        assert_eq!(spec.len(), 12);
        assert_eq!(spec.hidden_arity, 2);
        assert_eq!(spec.partition().0, vec![6, 7, 8, 9, 10, 11]);
    }

    #[test]
    fn advection_library_flags() {
        let spec = LibrarySpec::parse("h0*beta, h1", &["beta"], None).unwrap();
        assert!(spec.terms[0].is_param_dependent());
        assert!(!spec.terms[1].is_param_dependent());
    }

    #[test]
    fn grammar_errors() {
        let p = ["beta"];
        assert!(matches!(
            LibrarySpec::parse("h0^0", &p, None),
            Err(LibraryError::Syntax { .. })
        ));
        assert!(matches!(
            LibrarySpec::parse("h0, gamma", &p, None),
            Err(LibraryError::UnknownSymbol(_))
        ));
        assert!(matches!(
            LibrarySpec::parse("h0*h1, h1*h0", &p, None),
            Err(LibraryError::DuplicateTerm(_))
        ));
        assert!(matches!(
            LibrarySpec::parse("h0, h3", &p, Some(2)),
            Err(LibraryError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            LibrarySpec::parse("h0,,h1", &p, None),
            Err(LibraryError::Syntax { .. })
        ));
        assert!(matches!(LibrarySpec::parse("  ", &p, None), Err(LibraryError::Empty)));
    }

    #[test]
    fn whitespace_and_repeats_canonicalize() {
        let a = LibrarySpec::parse(" h0 * h0 * beta ,sin( h1 )", &["beta"], None).unwrap();
        let b = LibrarySpec::parse("beta*h0^2, sin(h1)", &["beta"], None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_string(), "h0^2*beta, sin(h1)");
    }

    #[test]
    fn printer_round_trips() {
        for text in [RD1D, "h0*beta, h1", "1, sin(h0)*sin(h0)*h1, beta^2, beta"] {
            let names: &[&str] = if text.contains("nu") { &["nu", "rho"] } else { &["beta"] };
            let spec = LibrarySpec::parse(text, names, None).unwrap();
            let again = LibrarySpec::parse(&spec.to_string(), names, None).unwrap();
            assert_eq!(spec, again);
        }
    }

    #[test]
    fn advection_values_at_a_point() {
        let spec = LibrarySpec::parse("h0*beta, h1", &["beta"], None).unwrap();
        let h = Tensor::new(vec![2, 1], vec![2.0, 3.0]).unwrap();
        let theta = evaluate_library(&spec, &h, &[0.5]).unwrap();
        assert_eq!(theta.data(), &[1.0, 3.0]);
    }

    #[test]
    fn rd2d_library_at_zero_parameter() {
        let spec = LibrarySpec::parse("1, h0, h1, h2, k, k*h0, k*h1, k*h2", &["k"], None).unwrap();
        let h = Tensor::new(vec![3, 1, 1], vec![0.4, -1.5, 2.0]).unwrap();
        let theta = evaluate_library(&spec, &h, &[0.0]).unwrap();
        assert_eq!(theta.shape(), &[8, 1, 1]);
        assert_eq!(theta.data(), &[1.0, 0.4, -1.5, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_hidden_leaves_only_constant_and_parameter_terms() {
        let spec = LibrarySpec::parse("1, h0, beta, beta*h1, beta^2", &["beta"], None).unwrap();
        let theta = evaluate_library(&spec, &Tensor::zeros(&[2, 4]), &[0.7]).unwrap();
        for (t, row) in theta.data().chunks(4).enumerate() {
            let nonzero = row.iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, [0, 2, 4].contains(&t), "term {t}");
        }
    }

    #[test]
    fn non_finite_hidden_rejected() {
        let spec = LibrarySpec::parse("h0", &["beta"], None).unwrap();
        let h = Tensor::new(vec![1, 2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(
            evaluate_library(&spec, &h, &[0.1]),
            Err(LibraryError::NonFinite)
        ));
    }
}
