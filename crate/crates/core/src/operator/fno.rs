use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spectral::{mode_count, spectral_conv, SpectralConvLayer};
use super::{ModelError, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FnoConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    /// Retained modes per spatial axis; its length fixes the dimension.
    pub modes: Vec<usize>,
    pub levels: usize,
}

impl FnoConfig {
    pub fn spatial_dims(&self) -> usize {
        self.modes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.width == 0 || self.levels == 0 {
            return Err(ModelError::Config(format!("degenerate backbone {self:?}")));
        }
        if !(1..=2).contains(&self.modes.len()) || self.modes.contains(&0) {
            return Err(ModelError::Config(format!(
                "modes {:?} must be 1 or 2 positive counts",
                self.modes
            )));
        }
        Ok(())
    }

    /// Parameter names in storage order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["lift.weight".to_string(), "lift.bias".to_string()];
        for l in 0..self.levels {
            names.push(format!("block{l}.spectral"));
            names.push(format!("block{l}.linear.weight"));
            names.push(format!("block{l}.linear.bias"));
        }
        names.push("proj.weight".into());
        names.push("proj.bias".into());
        names
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let w = self.width;
        let k = mode_count(&self.modes);
        let mut shapes = vec![vec![w, self.in_channels], vec![w, 1]];
        for _ in 0..self.levels {
            shapes.push(vec![w, w, k, 2]);
            shapes.push(vec![w, w]);
            shapes.push(vec![w, 1]);
        }
        shapes.push(vec![self.out_channels, w]);
        shapes.push(vec![self.out_channels, 1]);
        shapes
    }
}

/// Lifting, `levels` blocks of spectral convolution plus pointwise bypass
/// followed by GELU, and a pointwise projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Fno {
    pub config: FnoConfig,
    pub params: Vec<Tensor>,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl Fno {
    pub fn new(config: FnoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = config.param_shapes();
        let mut params: Vec<Tensor> = Vec::with_capacity(shapes.len());
        for (name, shape) in config.param_names().iter().zip(&shapes) {
            let t = if name.ends_with(".spectral") {
                SpectralConvLayer::random(shape[0], shape[1], &config.modes, &mut rng).weights
            } else {
                // biases share the fan-in bound of the weight pushed just before
                let fan_in = if name.ends_with(".bias") {
                    params.last().map_or(1, |w| w.shape()[1])
                } else {
                    shape[1]
                };
                uniform(shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
            };
            params.push(t);
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: FnoConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(ModelError::Shape("backbone parameters do not match config".into()));
        }
        Ok(Self { config, params })
    }

    /// Forward pass with parameters already bound to `vars` (storage order).
    /// `x [B, C_in, X(, Y)]` -> `[B, H, X(, Y)]`.
    pub fn forward(&self, g: &Graph, vars: &[Var], x: Var) -> Result<Var> {
        let cfg = &self.config;
        if vars.len() != self.params.len() {
            return Err(ModelError::Shape(format!(
                "{} parameter vars for {} backbone arrays",
                vars.len(),
                self.params.len()
            )));
        }
        let xs = g.shape(x);
        if xs.len() != 2 + cfg.spatial_dims() || xs[1] != cfg.in_channels {
            return Err(ModelError::Shape(format!(
                "backbone expects [B, {}, {}-D grid], got {xs:?}",
                cfg.in_channels,
                cfg.spatial_dims()
            )));
        }
        let b = xs[0];
        let spatial = &xs[2..];
        let s: usize = spatial.iter().product();
        let grid_shape = |c: usize| {
            let mut v = vec![b, c];
            v.extend_from_slice(spatial);
            v
        };
        let linear = |w: Var, bias: Var, h: Var| -> Result<Var> { Ok(g.add(g.matmul(w, h)?, bias)?) };

        let flat = g.reshape(x, &[b, cfg.in_channels, s])?;
        let mut h = linear(vars[0], vars[1], flat)?;
        for l in 0..cfg.levels {
            let base = 2 + 3 * l;
            let hg = g.reshape(h, &grid_shape(cfg.width))?;
            let spec = spectral_conv(g, hg, vars[base], &cfg.modes)?;
            let spec = g.reshape(spec, &[b, cfg.width, s])?;
            let bypass = linear(vars[base + 1], vars[base + 2], h)?;
            h = g.gelu(g.add(spec, bypass)?)?;
        }
        let p = 2 + 3 * cfg.levels;
        let out = linear(vars[p], vars[p + 1], h)?;
        Ok(g.reshape(out, &grid_shape(cfg.out_channels))?)
    }

    /// Hidden fields for a batch of states, outside any training graph.
    pub fn hidden(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::with_checks(true);
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let xv = g.constant(x.clone());
        let h = self.forward(&g, &vars, xv)?;
        let out = g.value(h).clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> FnoConfig {
        FnoConfig {
            in_channels: 1,
            out_channels: 2,
            width: 4,
            modes: vec![3],
            levels: 4,
        }
    }

    #[test]
    fn zero_weights_give_zero_hidden_states() {
        let mut fno = Fno::new(cfg(), 1).unwrap();
        fno.params.iter_mut().for_each(|p| p.data_mut().fill(0.0));
        let h = fno.hidden(&Tensor::from_fn(&[2, 1, 16], |i| i as f64 * 0.1)).unwrap();
        assert_eq!(h.shape(), &[2, 2, 16]);
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let x = Tensor::from_fn(&[1, 1, 16], |i| (i as f64).sin());
        let a = Fno::new(cfg(), 9).unwrap().hidden(&x).unwrap();
        let b = Fno::new(cfg(), 9).unwrap().hidden(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let fno = Fno::new(cfg(), 1).unwrap();
        assert!(fno.hidden(&Tensor::zeros(&[1, 2, 16])).is_err());
    }

    #[test]
    fn level_count_shapes() {
        let c = cfg();
        assert_eq!(c.param_names().len(), 2 + 3 * 4 + 2);
        assert_eq!(c.param_shapes()[2], vec![4, 4, 3, 2]);
    }
}
