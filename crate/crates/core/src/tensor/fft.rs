//! Buffer-level FFT kernels used by the differentiable spectral ops.
//!
//! Conventions: forward transforms are unnormalized, inverse transforms carry
//! the `1/n` factor, so `irfft(rfft(x)) == x`. Complex values are interleaved
//! `(re, im)` pairs.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Number of half-spectrum bins for a real signal of length `n`.
pub fn half_len(n: usize) -> usize {
    n / 2 + 1
}

/// Real-to-half-complex transform of every contiguous row of length `n`.
/// Output rows hold `half_len(n)` interleaved complex bins.
pub fn rfft_rows(data: &[f64], n: usize) -> Vec<f64> {
    let rows = data.len() / n;
    let m = half_len(n);
    let fft = plan(n, false);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut out = Vec::with_capacity(rows * m * 2);
    for r in 0..rows {
        for (b, &x) in buf.iter_mut().zip(&data[r * n..(r + 1) * n]) {
            *b = Complex64::new(x, 0.0);
        }
        fft.process(&mut buf);
        for c in &buf[..m] {
            out.push(c.re);
            out.push(c.im);
        }
    }
    out
}

/// Inverse of [`rfft_rows`]. Imaginary parts of the DC bin (and the Nyquist
/// bin for even `n`) are ignored.
pub fn irfft_rows(data: &[f64], n: usize) -> Vec<f64> {
    let m = half_len(n);
    let rows = data.len() / (2 * m);
    let fft = plan(n, true);
    let scale = 1.0 / n as f64;
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut out = Vec::with_capacity(rows * n);
    for r in 0..rows {
        let row = &data[r * 2 * m..(r + 1) * 2 * m];
        for k in 0..m {
            buf[k] = Complex64::new(row[2 * k], row[2 * k + 1]);
        }
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        for k in 1..n - m + 1 {
            buf[n - k] = buf[k].conj();
        }
        fft.process(&mut buf);
        out.extend(buf.iter().map(|c| c.re * scale));
    }
    out
}

/// Adjoint of [`rfft_rows`] as a real-linear map: half spectra of length
/// `half_len(n)` back to real rows of length `n`.
pub fn rfft_rows_adjoint(grad: &[f64], n: usize) -> Vec<f64> {
    let m = half_len(n);
    let rows = grad.len() / (2 * m);
    // x̄_j = Re Σ_k G_k e^{+2πi jk/n} over the retained bins only.
    let fft = plan(n, true);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut out = Vec::with_capacity(rows * n);
    for r in 0..rows {
        let row = &grad[r * 2 * m..(r + 1) * 2 * m];
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for k in 0..m {
            buf[k] = Complex64::new(row[2 * k], row[2 * k + 1]);
        }
        fft.process(&mut buf);
        out.extend(buf.iter().map(|c| c.re));
    }
    out
}

/// Adjoint of [`irfft_rows`]: real rows of length `n` to half spectra.
pub fn irfft_rows_adjoint(grad: &[f64], n: usize) -> Vec<f64> {
    let m = half_len(n);
    let mut out = rfft_rows(grad, n);
    let rows = out.len() / (2 * m);
    for r in 0..rows {
        let row = &mut out[r * 2 * m..(r + 1) * 2 * m];
        for k in 0..m {
            let boundary = k == 0 || (n % 2 == 0 && k == n / 2);
            let w = if boundary { 1.0 } else { 2.0 } / n as f64;
            row[2 * k] *= w;
            row[2 * k + 1] = if boundary { 0.0 } else { row[2 * k + 1] * w };
        }
    }
    out
}

/// Complex transform along one axis of an interleaved complex buffer whose
/// logical (complex) shape is `shape`. The inverse is normalized by `1/n`.
pub fn fft_axis(data: &[f64], shape: &[usize], axis: usize, inverse: bool) -> Vec<f64> {
    let (outer, n, inner) = super::split_at_axis(shape, axis);
    let fft = plan(n, inverse);
    let scale = if inverse { 1.0 / n as f64 } else { 1.0 };
    let mut out = data.to_vec();
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for o in 0..outer {
        for i in 0..inner {
            for (k, b) in buf.iter_mut().enumerate() {
                let idx = 2 * ((o * n + k) * inner + i);
                *b = Complex64::new(data[idx], data[idx + 1]);
            }
            fft.process(&mut buf);
            for (k, b) in buf.iter().enumerate() {
                let idx = 2 * ((o * n + k) * inner + i);
                out[idx] = b.re * scale;
                out[idx + 1] = b.im * scale;
            }
        }
    }
    out
}

/// Full unnormalized complex DFT of a real field over its trailing
/// `spatial.len()` axes (1 or 2). Leading axes are batched.
pub fn fft_real_full(data: &[f64], spatial: &[usize]) -> Vec<Complex64> {
    let size: usize = spatial.iter().product();
    let mut out: Vec<Complex64> = data.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let batches = data.len() / size;
    match spatial {
        [n] => {
            let fft = plan(*n, false);
            for b in 0..batches {
                fft.process(&mut out[b * n..(b + 1) * n]);
            }
        }
        [nx, ny] => {
            let fy = plan(*ny, false);
            let fx = plan(*nx, false);
            let mut col = vec![Complex64::new(0.0, 0.0); *nx];
            for b in 0..batches {
                let block = &mut out[b * size..(b + 1) * size];
                for row in block.chunks_mut(*ny) {
                    fy.process(row);
                }
                for j in 0..*ny {
                    for i in 0..*nx {
                        col[i] = block[i * ny + j];
                    }
                    fx.process(&mut col);
                    for i in 0..*nx {
                        block[i * ny + j] = col[i];
                    }
                }
            }
        }
        _ => panic!("fft_real_full supports 1 or 2 spatial axes"),
    }
    out
}
