use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::tensor::fft::half_len;
use crate::tensor::{Graph, Tensor, Var};

/// Retained frequency indices along each transformed axis.
///
/// The last spatial axis uses rfft bins `0..m`. A leading axis (2D only)
/// keeps `m` non-negative and `m` negative frequencies, listed in that order
/// so the weight layout does not depend on the grid size.
pub(crate) fn mode_indices(spatial: &[usize], modes: &[usize]) -> Result<Vec<Vec<usize>>> {
    if spatial.len() != modes.len() {
        return Err(ModelError::Config(format!(
            "{} spatial axes but {} mode counts",
            spatial.len(),
            modes.len()
        )));
    }
    let d = spatial.len();
    let mut out = Vec::with_capacity(d);
    for (axis, (&n, &m)) in spatial.iter().zip(modes).enumerate() {
        if m == 0 {
            return Err(ModelError::Config("mode count must be at least 1".into()));
        }
        if axis + 1 == d {
            if m > half_len(n) {
                return Err(ModelError::Config(format!(
                    "{m} modes exceed the {} rfft bins of a {n}-point axis",
                    half_len(n)
                )));
            }
            out.push((0..m).collect());
        } else {
            if 2 * m > n {
                return Err(ModelError::Config(format!(
                    "{m} modes need at least {} points, got {n}",
                    2 * m
                )));
            }
            out.push((0..m).chain(n - m..n).collect());
        }
    }
    Ok(out)
}

/// Number of complex weights per channel pair.
pub(crate) fn mode_count(modes: &[usize]) -> usize {
    match modes {
        [m] => *m,
        [mx, my] => 2 * mx * my,
        _ => 0,
    }
}

/// Spectral convolution inside a graph.
/// `x [B, I, X(, Y)]`, `w [I, O, K, 2]` -> `[B, O, X(, Y)]`.
pub fn spectral_conv(g: &Graph, x: Var, w: Var, modes: &[usize]) -> Result<Var> {
    let xs = g.shape(x);
    let ws = g.shape(w);
    if xs.len() < 3 || ws.len() != 4 || ws[0] != xs[1] {
        return Err(ModelError::Shape(format!(
            "spectral_conv input {xs:?} with weights {ws:?}"
        )));
    }
    let (b, cin, cout) = (xs[0], xs[1], ws[1]);
    let spatial = xs[2..].to_vec();
    let idx = mode_indices(&spatial, modes)?;
    match spatial.as_slice() {
        &[n] => {
            let f = g.rfft(x)?;
            let sel = g.index_select(f, 2, &idx[0])?;
            let mixed = g.complex_mix(sel, w)?;
            let full = g.index_scatter(mixed, 2, &idx[0], half_len(n))?;
            Ok(g.irfft(full, n)?)
        }
        &[nx, ny] => {
            let (kx, ky) = (idx[0].len(), idx[1].len());
            let f = g.rfft(x)?;
            let f = g.fft_axis(f, 2, false)?;
            let sel = g.index_select(f, 2, &idx[0])?;
            let sel = g.index_select(sel, 3, &idx[1])?;
            let flat = g.reshape(sel, &[b, cin, kx * ky, 2])?;
            let mixed = g.complex_mix(flat, w)?;
            let mixed = g.reshape(mixed, &[b, cout, kx, ky, 2])?;
            let full = g.index_scatter(mixed, 3, &idx[1], half_len(ny))?;
            let full = g.index_scatter(full, 2, &idx[0], nx)?;
            let full = g.fft_axis(full, 2, true)?;
            Ok(g.irfft(full, ny)?)
        }
        _ => Err(ModelError::Shape(format!(
            "spectral_conv supports 1 or 2 spatial axes, got {xs:?}"
        ))),
    }
}

/// Standalone spectral layer, mainly for inspection and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub modes: Vec<usize>,
    /// `[in, out, K, 2]` with `K` the flattened retained modes.
    pub weights: Tensor,
}

impl SpectralConvLayer {
    pub fn zeros(in_channels: usize, out_channels: usize, modes: &[usize]) -> Self {
        let k = mode_count(modes);
        Self {
            in_channels,
            out_channels,
            modes: modes.to_vec(),
            weights: Tensor::zeros(&[in_channels, out_channels, k, 2]),
        }
    }

    /// Real and imaginary parts drawn from `U[0, 1) / (in * out)`.
    pub fn random(in_channels: usize, out_channels: usize, modes: &[usize], rng: &mut impl Rng) -> Self {
        let mut layer = Self::zeros(in_channels, out_channels, modes);
        let scale = 1.0 / (in_channels * out_channels) as f64;
        layer
            .weights
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = scale * rng.gen::<f64>());
        layer
    }

    /// `x [C_in, X(, Y)]` -> `[C_out, X(, Y)]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() < 2 || x.shape()[0] != self.in_channels {
            return Err(ModelError::Shape(format!(
                "layer expects {} input channels, got {:?}",
                self.in_channels,
                x.shape()
            )));
        }
        let mut batched = vec![1];
        batched.extend_from_slice(x.shape());
        let g = Graph::with_checks(true);
        let xv = g.constant(x.clone().reshape(&batched)?);
        let wv = g.constant(self.weights.clone());
        let y = spectral_conv(&g, xv, wv, &self.modes)?;
        let out = g.value(y).clone();
        let shape = out.shape()[1..].to_vec();
        Ok(out.reshape(&shape)?)
    }
}
