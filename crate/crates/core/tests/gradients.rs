//! Reverse-mode gradients against central differences.

use latefuse::fusion::{fuse, LibrarySpec};
use latefuse::operator::{spectral_conv, Fno, FnoConfig};
use latefuse::pde::{Family, Preset};
use latefuse::tensor::{finite_diff_check, Graph, Tensor, TensorError, Var};
use latefuse::training::loss_graph;
use latefuse::{Model, ModelConfig, ModelKind};

const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

fn wavy(shape: &[usize], phase: f64) -> Tensor {
    Tensor::from_fn(shape, |i| {
        ((i as f64) * 0.618 + phase).sin() * 0.7 + 0.1 * ((i as f64) * 1.7).cos()
    })
}

fn model_err(e: impl std::fmt::Display) -> TensorError {
    TensorError::Invalid(e.to_string())
}

/// Weighted sum so every output entry gets a distinct cotangent.
fn probe(g: &Graph, out: Var) -> Result<Var, TensorError> {
    let w = g.constant(wavy(&g.shape(out), 0.3));
    g.sum_all(g.mul(out, w)?)
}

#[test]
fn spectral_conv_1d() {
    let x = wavy(&[2, 3, 16], 0.0);
    let w = wavy(&[3, 2, 5, 2], 1.0);
    let worst = finite_diff_check(
        |g, v| probe(g, spectral_conv(g, v[0], v[1], &[5]).map_err(model_err)?),
        &[x, w],
        H,
    )
    .unwrap();
    assert!(worst < TOL, "{worst:e}");
}

#[test]
fn spectral_conv_2d() {
    let x = wavy(&[1, 2, 8, 6], 0.5);
    let w = wavy(&[2, 2, 2 * 2 * 3, 2], 2.0);
    let worst = finite_diff_check(
        |g, v| probe(g, spectral_conv(g, v[0], v[1], &[2, 3]).map_err(model_err)?),
        &[x, w],
        H,
    )
    .unwrap();
    assert!(worst < TOL, "{worst:e}");
}

#[test]
fn full_backbone() {
    let cfg = FnoConfig {
        in_channels: 1,
        out_channels: 2,
        width: 4,
        modes: vec![4],
        levels: 4,
    };
    let fno = Fno::new(cfg, 9).unwrap();
    let mut point = fno.params.clone();
    point.push(wavy(&[2, 1, 16], 0.2));
    let worst = finite_diff_check(
        |g, v| {
            let (params, x) = v.split_at(v.len() - 1);
            probe(g, fno.forward(g, params, x[0]).map_err(model_err)?)
        },
        &point,
        H,
    )
    .unwrap();
    assert!(worst < TOL, "{worst:e}");
}

#[test]
fn library_evaluation() {
    let spec = LibrarySpec::parse(
        "1, h0, h1, h0^2, h0*h1, sin(h1), beta*h0, beta^2*h1, nu*rho*h0^2*h1",
        &["beta", "nu", "rho"],
        None,
    )
    .unwrap();
    let beta = Tensor::new(vec![2, 3], vec![0.3, 0.7, -0.4, 1.2, 0.05, 0.9]).unwrap();
    let h = wavy(&[2, 2, 16], 0.9);
    let worst = finite_diff_check(
        |g, v| probe(g, spec.evaluate_graph(g, v[0], &beta).map_err(model_err)?),
        &[h],
        H,
    )
    .unwrap();
    assert!(worst < TOL, "{worst:e}");
}

#[test]
fn late_fusion_step_with_composite_loss() {
    let mut cfg = ModelConfig::preset(ModelKind::LateFusion, Family::ReactionDiffusion1d, Preset::Desk, 2);
    cfg.modes = vec![4];
    cfg.width = 4;
    let mut model = Model::new(cfg).unwrap();
    // Nonzero coefficients so the L1 term and every library row are live.
    let xi = model.params_mut().pop().unwrap();
    let n = xi.numel();
    *xi = Tensor::from_fn(xi.shape(), |i| 0.2 * ((i as f64) - n as f64 / 2.0 + 0.37));
    let u = wavy(&[2, 1, 16], 0.4).map(|v| 0.5 + 0.4 * v);
    let y = wavy(&[2, 1, 16], 1.4).map(|v| 0.5 + 0.4 * v);
    let beta = Tensor::new(vec![2, 2], vec![0.05, 0.6, 0.08, 0.3]).unwrap();
    let point: Vec<Tensor> = model.params().into_iter().cloned().chain([u]).collect();
    let worst = finite_diff_check(
        |g, v| {
            let (params, x) = v.split_at(v.len() - 1);
            let pred = model.step_graph(g, params, x[0], &beta).map_err(model_err)?;
            let yv = g.constant(y.clone());
            let (total, _, _) = loss_graph(g, pred, yv, Some(params[params.len() - 1]), 0.01).map_err(model_err)?;
            Ok(total)
        },
        &point,
        H,
    )
    .unwrap();
    assert!(worst < TOL, "{worst:e}");
}

#[test]
fn fusion_contraction_wrt_coefficients_and_hidden() {
    let spec = LibrarySpec::parse("h0*beta, h1, beta^2", &["beta"], None).unwrap();
    let beta = Tensor::new(vec![2, 1], vec![0.4, -0.8]).unwrap();
    let worst = finite_diff_check(
        |g, v| {
            let (_, _, _, r) = fuse(g, &spec, v[0], v[1], &beta).map_err(model_err)?;
            probe(g, r)
        },
        &[wavy(&[3, 1], 0.1), wavy(&[2, 2, 16], 0.6)],
        H,
    )
    .unwrap();
    assert!(worst < TOL, "{worst:e}");
}
