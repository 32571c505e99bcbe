//! Central finite-difference gradient check.
//!
//! Independent oracle for the backward pass: evaluates the target function
//! twice per coordinate and compares the difference quotient against the
//! analytic gradient. Meant to be run with `F = f64`, where truncation error
//! dominates and rounding noise is negligible.

use super::real::Real;
use super::tape::{Tape, Tensor, TensorError, TensorResult};

/// Maximum relative disagreement between the analytic gradient of `f` at `x`
/// and central finite differences with step `h`.
///
/// For each coordinate the discrepancy is
/// `|analytic − central| / (|analytic| + |central| + 1e-8)`.
/// The closure builds the scalar loss on the supplied tape; it is invoked
/// once for the analytic pass and twice per coordinate for the quotients.
pub fn finite_difference_check<F: Real>(
    f: impl Fn(&mut Tape<F>, &Tensor) -> TensorResult<Tensor>,
    x: &[F],
    shape: &[usize],
    h: F,
) -> TensorResult<F> {
    if !(h > F::zero()) || !h.is_finite() {
        return Err(TensorError::BadStep { h: h.to_f64() });
    }

    let eval = |data: Vec<F>| -> TensorResult<F> {
        let mut tape = Tape::new();
        let xt = tape.leaf(data, shape, false)?;
        let loss = f(&mut tape, &xt)?;
        let v = tape.scalar(&loss);
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_difference_check",
            });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let xt = tape.leaf(x.to_vec(), shape, true)?;
    let loss = f(&mut tape, &xt)?;
    if !tape.scalar(&loss).is_finite() {
        return Err(TensorError::NonFinite {
            op: "finite_difference_check",
        });
    }
    tape.backward(&loss)?;
    let analytic: Vec<F> = match tape.grad(&xt) {
        Some(g) => g.to_vec(),
        None => vec![F::zero(); x.len()],
    };

    let two = F::from_f64(2.0);
    let floor = F::from_f64(1e-8);
    let mut worst = F::zero();
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] = plus[i] + h;
        let mut minus = x.to_vec();
        minus[i] = minus[i] - h;
        let central = (eval(plus)? - eval(minus)?) / (two * h);
        if !central.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_difference_check",
            });
        }
        let rel = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + floor);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
