//! Central finite-difference gradient checking.
//!
//! The checker never touches the reverse-mode machinery: it re-evaluates the
//! scalar function at `x ± h` per input element, which makes it an independent
//! oracle for the analytic gradients. Functions under test are expressed as a
//! closure from leaf values to a scalar [`Tensor`]; the harness builds a fresh
//! tape per evaluation so perturbed runs cannot share state.

use super::{Tape, Tensor};

/// Step size used throughout the test suites.
pub const DEFAULT_H: f64 = 1e-5;
/// Relative-error budget for 64-bit central differences.
pub const DEFAULT_TOL: f64 = 1e-4;

/// One differentiable input to the function under test.
#[derive(Clone)]
pub struct LeafSpec {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl LeafSpec {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data,
        }
    }
}

/// Outcome of a single gradient comparison.
#[derive(Debug)]
pub struct GradMismatch {
    pub leaf: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Checks ∂f/∂leaf for every element of every leaf against central finite
/// differences with step `h`.
///
/// The relative error uses `max(|analytic|, |numeric|, 1)`-style damping via
/// the `floor` argument: elements where both magnitudes are below `floor`
/// compare absolutely, which avoids meaningless ratios on near-zero
/// gradients.
pub fn check(
    f: impl Fn(&Tape, &[Tensor]) -> Tensor,
    leaves: &[LeafSpec],
    h: f64,
    tol: f64,
) -> Result<(), GradMismatch> {
    let floor = 1e-6;
    // Analytic gradients from one recorded pass.
    let tape = Tape::new();
    let ts: Vec<Tensor> = leaves
        .iter()
        .map(|l| tape.leaf(l.data.clone(), &l.shape).expect("valid leaf"))
        .collect();
    let out = f(&tape, &ts);
    assert_eq!(out.numel(), 1, "gradcheck target must be scalar");
    out.backward().expect("backward on scalar");
    let analytic: Vec<Vec<f64>> = ts
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |datas: &[Vec<f64>]| -> f64 {
        let tape = Tape::new();
        let ts: Vec<Tensor> = leaves
            .iter()
            .zip(datas.iter())
            .map(|(l, d)| tape.constant(d.clone(), &l.shape).expect("valid leaf"))
            .collect();
        f(&tape, &ts).item()
    };

    let mut datas: Vec<Vec<f64>> = leaves.iter().map(|l| l.data.clone()).collect();
    for (li, leaf) in leaves.iter().enumerate() {
        for e in 0..leaf.data.len() {
            let orig = datas[li][e];
            datas[li][e] = orig + h;
            let up = eval(&datas);
            datas[li][e] = orig - h;
            let down = eval(&datas);
            datas[li][e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[li][e];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            if rel > tol {
                return Err(GradMismatch {
                    leaf: li,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(())
}

/// Panicking wrapper for use in tests.
pub fn assert_gradients(f: impl Fn(&Tape, &[Tensor]) -> Tensor, leaves: &[LeafSpec]) {
    if let Err(m) = check(f, leaves, DEFAULT_H, DEFAULT_TOL) {
        panic!(
            "gradient mismatch at leaf {} element {}: analytic {:.9e} vs numeric {:.9e} (rel err {:.3e})",
            m.leaf, m.element, m.analytic, m.numeric, m.rel_err
        );
    }
}
