//! Central finite-difference gradient checking.
//!
//! The checker only evaluates the forward function, so it is independent of
//! the backward rules it is used to verify.

use crate::tensor::Tensor;

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn numerical_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error `|a - n| / max(|a|, |n|, floor)` maximized over entries.
///
/// The floor keeps entries whose true gradient is (numerically) zero from
/// dominating the ratio with pure round-off.
pub fn compare(analytic: &Tensor, numeric: &Tensor, floor: f64) -> GradCheck {
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        let abs = (a - n).abs();
        let scale = a.abs().max(n.abs()).max(floor);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / scale);
    }
    GradCheck {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
    }
}
