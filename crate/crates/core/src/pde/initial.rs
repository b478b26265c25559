use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GridSpec, PdeError, Result};
use crate::tensor::Tensor;

/// Random superposition of sine waves on a periodic interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialConditionSpec {
    pub num_waves: usize,
    pub max_wavenumber: usize,
    pub amplitude_range: (f64, f64),
    pub phase_range: (f64, f64),
    pub seed: u64,
}

impl Default for InitialConditionSpec {
    fn default() -> Self {
        Self {
            num_waves: 2,
            max_wavenumber: 8,
            amplitude_range: (0.0, 1.0),
            phase_range: (0.0, 2.0 * PI),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude: f64,
    /// Integer mode number n; the angular wavenumber is `2 pi n / L`.
    pub mode: usize,
    pub phase: f64,
}

/// `u0(x) = sum_i A_i sin(k_i x + phi_i)` over a domain of length `length`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinusoidIc {
    pub waves: Vec<Wave>,
    pub length: f64,
}

impl SinusoidIc {
    pub fn wavenumber(&self, w: &Wave) -> f64 {
        2.0 * PI * w.mode as f64 / self.length
    }

    /// Value at `x` of the profile translated by `shift`, i.e. `u0(x - shift)`.
    pub fn eval_shifted(&self, x: f64, shift: f64) -> f64 {
        self.waves
            .iter()
            .map(|w| w.amplitude * (self.wavenumber(w) * (x - shift) + w.phase).sin())
            .sum()
    }

    /// Samples the (shifted) profile at the given coordinates as `[1, X]`.
    pub fn field(&self, coords: &[f64], shift: f64) -> Tensor {
        Tensor::from_fn(&[1, coords.len()], |j| self.eval_shifted(coords[j], shift))
    }
}

/// Initial data handed to a solver.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    /// Analytic sinusoid sum (lets advection be evaluated exactly).
    Sinusoids(SinusoidIc),
    /// Raw field `[V, X(, Y)]`.
    Field(Tensor),
}

fn open_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    loop {
        let v = rng.gen_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}

/// Draws the sinusoid superposition for a 1D grid and returns it with its
/// sampled field `[1, X]`.
pub fn sample_initial_condition(spec: &InitialConditionSpec, grid: &GridSpec) -> Result<(SinusoidIc, Tensor)> {
    if grid.spatial_dims() != 1 {
        return Err(PdeError::InitialCondition("sinusoid sampler needs a 1D grid".into()));
    }
    if spec.num_waves == 0 || spec.max_wavenumber == 0 {
        return Err(PdeError::InitialCondition(
            "num_waves and max_wavenumber must be >= 1".into(),
        ));
    }
    if grid.points[0] < 2 * spec.max_wavenumber {
        return Err(PdeError::InitialCondition(format!(
            "{} points alias wavenumbers up to {}",
            grid.points[0], spec.max_wavenumber
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let waves = (0..spec.num_waves)
        .map(|_| Wave {
            amplitude: open_uniform(&mut rng, spec.amplitude_range),
            mode: rng.gen_range(1..=spec.max_wavenumber),
            phase: open_uniform(&mut rng, spec.phase_range),
        })
        .collect();
    let ic = SinusoidIc {
        waves,
        length: grid.length(0),
    };
    let coords = grid.coords(0, super::Boundary::Periodic);
    let field = ic.field(&coords, 0.0);
    Ok((ic, field))
}

/// I.i.d. standard-normal field `[vars, X, Y...]`.
pub fn sample_noise_field(vars: usize, grid: &GridSpec, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![vars];
    shape.extend_from_slice(&grid.points);
    Tensor::from_fn(&shape, |_| rng.sample(StandardNormal))
}
