use super::{Graph, Result, Tensor, TensorError, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Returns the largest `|analytic - fd| / max(1, |fd|)` over
/// every coordinate of every input tensor.
pub fn finite_diff_check<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(TensorError::Invalid(format!("step must be positive, got {h}")));
    }
    let g = Graph::with_checks(false);
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::with_checks(false);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        let v = g.value(out).item();
        Ok(v)
    };

    let mut work = point.to_vec();
    let mut worst: f64 = 0.0;
    for (ti, grad) in analytic.iter().enumerate() {
        for c in 0..grad.numel() {
            let orig = work[ti].data()[c];
            work[ti].data_mut()[c] = orig + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[c] = orig - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let err = (grad.data()[c] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = finite_diff_check(|g, v| g.powi(v[0], 2), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn dead_parameter_contributes_zero_error() {
        let err = finite_diff_check(
            |g, v| {
                let s = g.sin(v[0])?;
                g.sum_all(s)
            },
            &[Tensor::from_fn(&[3], |i| i as f64 * 0.4), Tensor::full(&[2], 5.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_diff_check(|g, v| g.sum_all(v[0]), &[Tensor::scalar(1.0)], 0.0).is_err());
    }

    #[test]
    fn kink_inside_the_stencil_is_reported() {
        // Symmetric stencil around the kink of |x| agrees with subgradient 0.
        let err = finite_diff_check(|g, v| g.abs(v[0]), &[Tensor::scalar(0.0)], 1e-5).unwrap();
        assert_eq!(err, 0.0);
        // Stencil straddling the kink off-centre: fd = 0.1, analytic = 1.
        let err = finite_diff_check(
            |g, v| {
                let a = g.abs(v[0])?;
                g.add_scalar(a, 0.0)
            },
            &[Tensor::scalar(1e-6)],
            1e-5,
        )
        .unwrap();
        assert!(err > 0.5);
    }
}
