//! FFT conventions and spectral-layer properties, checked against a dense
//! DFT written here.

use std::f64::consts::PI;

use latefuse::operator::{Fno, FnoConfig, SpectralConvLayer};
use latefuse::tensor::fft::{fft_real_full, half_len, irfft_rows, rfft_rows};
use latefuse::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dense_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter().enumerate().fold((0.0, 0.0), |(re, im), (j, &v)| {
                let a = -2.0 * PI * (k * j) as f64 / n as f64;
                (re + v * a.cos(), im + v * a.sin())
            })
        })
        .collect()
}

fn signal(n: usize, seed: f64) -> Vec<f64> {
    (0..n)
        .map(|j| ((j as f64 + seed) * 1.37).sin() + 0.3 * ((j * j) as f64 * 0.11).cos())
        .collect()
}

#[test]
fn rfft_round_trip() {
    for n in [7usize, 8, 128] {
        let x = signal(n, 0.2);
        let back = irfft_rows(&rfft_rows(&x, n), n);
        let worst = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12, "n={n}: {worst:e}");
    }
}

#[test]
fn rfft_matches_dense_dft() {
    for n in [7usize, 8, 128] {
        let x = signal(n, 1.1);
        let f = rfft_rows(&x, n);
        let d = dense_dft(&x);
        for k in 0..half_len(n) {
            assert!((f[2 * k] - d[k].0).abs() < 1e-9 * n as f64);
            assert!((f[2 * k + 1] - d[k].1).abs() < 1e-9 * n as f64);
        }
    }
}

#[test]
fn parseval_unnormalized_forward() {
    for n in [7usize, 8, 128] {
        let x = signal(n, 2.5);
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let spec = fft_real_full(&x, &[n]);
        let spectral: f64 = spec.iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
        assert!((energy - spectral).abs() / energy < 1e-10);
    }
}

#[test]
fn cosine_lands_in_its_bin() {
    let n = 64;
    let x: Vec<f64> = (0..n).map(|j| (2.0 * PI * 5.0 * j as f64 / n as f64).cos()).collect();
    let f = rfft_rows(&x, n);
    for k in 0..half_len(n) {
        let mag = f[2 * k].hypot(f[2 * k + 1]);
        let expect = if k == 5 { n as f64 / 2.0 } else { 0.0 };
        assert!((mag - expect).abs() < 1e-10, "bin {k}: {mag}");
    }
}

fn random_layer(cin: usize, cout: usize, modes: &[usize], seed: u64) -> SpectralConvLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SpectralConvLayer::random(cin, cout, modes, &mut rng)
}

#[test]
fn spectral_layer_is_linear() {
    let layer = random_layer(2, 3, &[5], 1);
    let a = Tensor::from_fn(&[2, 32], |i| (i as f64 * 0.3).sin());
    let b = Tensor::from_fn(&[2, 32], |i| (i as f64 * 0.7).cos());
    let (p, q) = (1.7, -0.4);
    let combo = Tensor::from_fn(&[2, 32], |i| p * a.data()[i] + q * b.data()[i]);
    let (fa, fb, fc) = (
        layer.forward(&a).unwrap(),
        layer.forward(&b).unwrap(),
        layer.forward(&combo).unwrap(),
    );
    for i in 0..fc.numel() {
        assert!((fc.data()[i] - p * fa.data()[i] - q * fb.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn modes_above_cutoff_are_dropped() {
    let layer = random_layer(1, 1, &[4], 2);
    let n = 32;
    let high = Tensor::from_fn(&[1, n], |j| (2.0 * PI * 6.0 * j as f64 / n as f64).sin());
    assert!(layer.forward(&high).unwrap().max_abs() < 1e-12);

    let layer2d = random_layer(1, 1, &[3, 3], 3);
    let high2d = Tensor::from_fn(&[1, 16, 16], |i| {
        let (x, y) = ((i / 16) as f64, (i % 16) as f64);
        (2.0 * PI * 5.0 * x / 16.0).cos() * (2.0 * PI * 1.0 * y / 16.0).cos()
    });
    assert!(layer2d.forward(&high2d).unwrap().max_abs() < 1e-12);
}

#[test]
fn identity_weights_low_pass() {
    let mut layer = SpectralConvLayer::zeros(1, 1, &[4]);
    for k in 0..4 {
        layer.weights.data_mut()[2 * k] = 1.0;
    }
    let n = 32;
    let low = |j: usize| 0.5 + (2.0 * PI * 3.0 * j as f64 / n as f64).sin();
    let x = Tensor::from_fn(&[1, n], |j| low(j) + (2.0 * PI * 9.0 * j as f64 / n as f64).cos());
    let y = layer.forward(&x).unwrap();
    for j in 0..n {
        assert!((y.data()[j] - low(j)).abs() < 1e-12);
    }
}

#[test]
fn spectral_layer_transfers_across_resolutions() {
    let layer = random_layer(1, 2, &[6], 4);
    let field = |n: usize| {
        Tensor::from_fn(&[1, n], |j| {
            let x = j as f64 / n as f64;
            (2.0 * PI * 2.0 * x).sin() + 0.4 * (2.0 * PI * 5.0 * x + 0.3).cos()
        })
    };
    let coarse = layer.forward(&field(32)).unwrap();
    let fine = layer.forward(&field(64)).unwrap();
    for c in 0..2 {
        for j in 0..32 {
            assert!((coarse.data()[c * 32 + j] - fine.data()[c * 64 + 2 * j]).abs() < 1e-12);
        }
    }
}

#[test]
fn backbone_commutes_with_periodic_shifts() {
    let fno = Fno::new(
        FnoConfig {
            in_channels: 1,
            out_channels: 2,
            width: 8,
            modes: vec![6],
            levels: 4,
        },
        5,
    )
    .unwrap();
    let n = 32;
    let u = Tensor::from_fn(&[1, 1, n], |j| (j as f64 * 0.41).sin() + 0.2 * (j as f64 * 1.9).cos());
    let k = 7;
    let shifted = Tensor::from_fn(&[1, 1, n], |j| u.data()[(j + n - k) % n]);
    let (h, hs) = (fno.hidden(&u).unwrap(), fno.hidden(&shifted).unwrap());
    for c in 0..2 {
        for j in 0..n {
            assert!((hs.data()[c * n + j] - h.data()[c * n + (j + n - k) % n]).abs() < 1e-12);
        }
    }
}
