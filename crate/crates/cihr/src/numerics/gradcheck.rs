//! Central finite-difference verification of tape gradients.

use super::tensor::{Tape, Tensor};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Relative error with a floored denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare backward() gradients of `f` against central differences at `x`.
///
/// `f` must build a scalar loss on the supplied tape from the current
/// contents of `x`; it is re-invoked for every perturbed coordinate, so it
/// has to be deterministic. Returns the max relative error over all
/// coordinates of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> f64
where
    F: Fn(&Tape, &Tensor) -> Tensor,
{
    finite_diff_check_params(|tape| f(tape, x), std::slice::from_ref(x), step)
}

/// Multi-parameter variant: `build` reads the current values of `params`
/// (shared leaves) and returns the scalar loss.
pub fn finite_diff_check_params<F>(build: F, params: &[Tensor], step: f64) -> f64
where
    F: Fn(&Tape) -> Tensor,
{
    for p in params {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = build(&tape);
    tape.backward(&loss).expect("scalar loss expected");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    for p in params {
        p.zero_grad();
    }

    let eval = |params_idx: usize, coord: usize, delta: f64| -> f64 {
        let p = &params[params_idx];
        let orig = p.to_vec();
        let mut bumped = orig.clone();
        bumped[coord] += delta;
        p.set_values(&bumped);
        let tape = Tape::new();
        let loss = build(&tape);
        p.set_values(&orig);
        loss.value()
    };

    let mut max_err: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        for c in 0..p.numel() {
            let fp = eval(pi, c, step);
            let fm = eval(pi, c, -step);
            let numeric = (fp - fm) / (2.0 * step);
            max_err = max_err.max(rel_err(analytic[pi][c], numeric));
        }
    }
    max_err
}
