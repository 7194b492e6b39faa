//! Finite-difference gradient checking.
//!
//! `check_gradients` rebuilds a computation from scratch for every probe, so
//! the closure must be a pure function of the leaf values it is given. The
//! comparison uses central differences with h = 1e-5 and a relative error
//! that tolerates tiny absolute magnitudes.

use super::tape::{Tape, TensorId};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Absolute difference below which a coordinate passes regardless of
/// relative error. Central differences carry O(h^2) truncation noise, so a
/// mathematically zero gradient shows up as ~1e-11 and would otherwise fail
/// any relative threshold.
pub const FD_ABS_TOL: f64 = 1e-7;

/// Result of one probed coordinate.
#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub leaf: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare analytic gradients of `f` against central differences at `inputs`.
///
/// `f` receives a fresh tape and the leaf ids (all created with
/// `requires_grad`) and must return a scalar output id. Every coordinate of
/// every leaf is probed. Returns all coordinates whose relative error
/// exceeds `tol`.
pub fn check_gradients(
    inputs: &[(Vec<f64>, Vec<usize>)],
    tol: f64,
    f: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
) -> Vec<GradCheckFailure> {
    let run = |values: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = values
            .iter()
            .zip(inputs)
            .map(|(v, (_, shape))| tape.leaf(v.clone(), shape, true).expect("leaf"))
            .collect();
        let out = f(&mut tape, &ids);
        let loss = tape.value(out);
        tape.backward(out).expect("backward");
        let grads = ids
            .iter()
            .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.data(id).len()]))
            .collect();
        (loss, grads)
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let (_, analytic) = run(&base);

    let mut failures = Vec::new();
    for (li, vals) in base.iter().enumerate() {
        for ci in 0..vals.len() {
            let mut plus = base.clone();
            plus[li][ci] += FD_STEP;
            let mut minus = base.clone();
            minus[li][ci] -= FD_STEP;
            let (fp, _) = run(&plus);
            let (fm, _) = run(&minus);
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[li][ci];
            let e = rel_err(a, numeric);
            if e > tol && (a - numeric).abs() > FD_ABS_TOL {
                failures.push(GradCheckFailure {
                    leaf: li,
                    coord: ci,
                    analytic: a,
                    numeric,
                    rel_err: e,
                });
            }
        }
    }
    failures
}
