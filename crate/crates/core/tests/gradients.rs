//! Analytic gradients of every primitive and network against central
//! finite differences.

mod common;

use common::{network_cases, primitive_cases, worst_errors, TOL};
use ddvi::autodiff::RowScalarFn;

fn assert_all_within(cases: &[common::Case]) {
    let bad: Vec<String> = worst_errors(cases)
        .into_iter()
        .filter(|(_, e)| !(*e < TOL))
        .map(|(n, e)| format!("{n}: {e:.3e}"))
        .collect();
    assert!(bad.is_empty(), "relative error above {TOL:e}: {bad:?}");
}

#[test]
fn primitives_match_finite_differences() {
    assert_all_within(&primitive_cases());
}

#[test]
fn networks_match_finite_differences() {
    assert_all_within(&network_cases());
}

/// `sum(q^2)` reporting the gradient of `sum(q^3) / 3`.
struct WrongGradient;

impl RowScalarFn for WrongGradient {
    fn eval(&self, _index: usize, row: &[f64]) -> (f64, Vec<f64>) {
        (row.iter().map(|v| v * v).sum(), row.iter().map(|v| v * v).collect())
    }
}

#[test]
fn checker_flags_a_wrong_gradient() {
    let mut r = ddvi::rng::rng(1);
    let x = common::rand_tensor(&mut r, 3, 2, 1.0);
    let e = common::fd_error(vec![x], &|g, v| Ok(g.row_fn(v[0], &WrongGradient)), 1);
    assert!(e > 1e-2, "{e}");
}
