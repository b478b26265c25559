//! Library grammar and evaluation properties.

use latefuse::fusion::{evaluate_library, LibrarySpec};
use latefuse::tensor::Tensor;
use proptest::prelude::*;

const RD1D: [&str; 12] = [
    "1",
    "h0",
    "h1",
    "h0^2",
    "h1^2",
    "h0*h1",
    "rho*h0^2",
    "rho*h1^2",
    "rho*h0*h1",
    "nu*h0^2",
    "nu*h1^2",
    "nu*h0*h1",
];

fn hidden(values: &[f64], h: usize) -> Tensor {
    let s = values.len() / h;
    Tensor::new(vec![h, s], values[..h * s].to_vec()).unwrap()
}

proptest! {
    #[test]
    fn parameter_homogeneity(
        h in prop::collection::vec(-2.0f64..2.0, 16),
        nu in 0.01f64..1.0,
        rho in 0.01f64..1.0,
        c in 0.1f64..3.0,
    ) {
        let spec = LibrarySpec::parse(&RD1D.join(", "), &["nu", "rho"], None).unwrap();
        let h = hidden(&h, 2);
        let base = evaluate_library(&spec, &h, &[nu, rho]).unwrap();
        let scaled = evaluate_library(&spec, &h, &[c * nu, c * rho]).unwrap();
        let s = h.shape()[1];
        for (t, term) in spec.terms.iter().enumerate() {
            let factor = c.powi(term.param_degree() as i32);
            for j in 0..s {
                let (a, b) = (scaled.data()[t * s + j], factor * base.data()[t * s + j]);
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn term_order_permutes_rows(
        h in prop::collection::vec(-2.0f64..2.0, 16),
        perm in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let names = ["nu", "rho"];
        let beta = [0.07, 0.6];
        let h = hidden(&h, 2);
        let spec = LibrarySpec::parse(&RD1D.join(", "), &names, None).unwrap();
        let text: Vec<&str> = perm.iter().map(|&i| RD1D[i]).collect();
        let permuted = LibrarySpec::parse(&text.join(", "), &names, None).unwrap();
        let a = evaluate_library(&spec, &h, &beta).unwrap();
        let b = evaluate_library(&permuted, &h, &beta).unwrap();
        let s = h.shape()[1];
        for (row, &src) in perm.iter().enumerate() {
            prop_assert_eq!(&b.data()[row * s..(row + 1) * s], &a.data()[src * s..(src + 1) * s]);
        }
    }

    #[test]
    fn rendering_round_trips(mask in prop::collection::vec(any::<bool>(), 12)) {
        let picked: Vec<&str> = RD1D.iter().zip(&mask).filter(|(_, &m)| m).map(|(t, _)| *t).collect();
        prop_assume!(!picked.is_empty());
        let spec = LibrarySpec::parse(&picked.join(", "), &["nu", "rho"], None).unwrap();
        let again = LibrarySpec::parse(&spec.to_string(), &["nu", "rho"], Some(spec.hidden_arity)).unwrap();
        prop_assert_eq!(spec, again);
    }
}

#[test]
fn hand_evaluated_points() {
    let spec = LibrarySpec::parse(
        "1, nu*h0^2, rho*h0*h1, sin(h1)*sin(h1), beta",
        &["nu", "rho", "beta"],
        None,
    )
    .unwrap();
    let h = Tensor::new(vec![2, 2], vec![3.0, -1.0, 0.5, 2.0]).unwrap();
    let theta = evaluate_library(&spec, &h, &[0.5, 2.0, -0.25]).unwrap();
    let expect = [
        [1.0, 1.0],
        [0.5 * 9.0, 0.5 * 1.0],
        [2.0 * 3.0 * 0.5, 2.0 * -1.0 * 2.0],
        [0.5f64.sin().powi(2), 2.0f64.sin().powi(2)],
        [-0.25, -0.25],
    ];
    for (t, row) in expect.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((theta.data()[t * 2 + j] - v).abs() < 1e-15, "term {t} point {j}");
        }
    }
}

#[test]
fn grammar_errors_are_reported() {
    for bad in ["", "h0**2", "gamma*h0", "h0, h0", "h0^", "cos(h0)", "h0 + h1"] {
        assert!(LibrarySpec::parse(bad, &["beta"], None).is_err(), "{bad:?} accepted");
    }
    assert!(LibrarySpec::parse("h3", &["beta"], Some(2)).is_err());
}

#[test]
fn advection_partition() {
    let spec = LibrarySpec::parse("h0*beta, h1", &["beta"], None).unwrap();
    assert_eq!(spec.partition(), (vec![0], vec![1]));
    assert_eq!(spec.hidden_arity, 2);
}
