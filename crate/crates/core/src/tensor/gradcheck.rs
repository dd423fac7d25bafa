//! Finite-difference gradient oracle.
//!
//! Independent of the tape: evaluates the target function as a black box at
//! perturbed inputs. Stochastic layers must be frozen during the sweep —
//! either eval mode or an rng re-pinned to the same `(seed, counter)` before
//! every evaluation — so both evaluations of a coordinate see the same masks.

use super::Tensor;
use crate::scalar::Scalar;

/// Central-difference estimate of `df/dx` per coordinate:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_grad<F: Scalar>(
    mut f: impl FnMut(&Tensor<F>) -> F,
    x: &Tensor<F>,
    h: f64,
) -> Tensor<F> {
    let hf = F::from_f64(h);
    let two_h = F::from_f64(2.0 * h);
    let mut grad = vec![F::zero(); x.numel()];
    let base = x.data().to_vec();
    for i in 0..x.numel() {
        let mut plus = base.clone();
        plus[i] += hf;
        let fp = f(&Tensor::from_vec(x.shape().to_vec(), plus));
        let mut minus = base.clone();
        minus[i] -= hf;
        let fm = f(&Tensor::from_vec(x.shape().to_vec(), minus));
        grad[i] = (fp - fm) / two_h;
    }
    Tensor::from_vec(x.shape().to_vec(), grad)
}

/// Bounded-denominator relative error: relative for large values, absolute
/// below magnitude 1 (where finite-difference noise would otherwise dominate
/// a pure ratio).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Largest [`rel_err`] over all coordinates of two same-shape tensors.
pub fn max_rel_err<F: Scalar>(analytic: &Tensor<F>, numeric: &Tensor<F>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_err(a.as_f64(), n.as_f64()))
        .fold(0.0, f64::max)
}
