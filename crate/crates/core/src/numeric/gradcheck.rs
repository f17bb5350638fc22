//! Central finite differences for checking analytic gradients.

use crate::numeric::{Scalar, Tensor};

/// Default perturbation step.
pub const STEP: f64 = 1e-3;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for one coordinate.
pub fn central_difference<F: Scalar>(
    x: &mut Tensor<F>,
    index: usize,
    step: f64,
    mut f: impl FnMut(&Tensor<F>) -> f64,
) -> f64 {
    let orig = x.data()[index];
    x.data_mut()[index] = orig + F::lit(step);
    let plus = f(x);
    x.data_mut()[index] = orig - F::lit(step);
    let minus = f(x);
    x.data_mut()[index] = orig;
    (plus - minus) / (2.0 * step)
}

/// Numeric gradient of `f` at `x` over every coordinate.
pub fn numeric_gradient<F: Scalar>(
    x: &Tensor<F>,
    step: f64,
    mut f: impl FnMut(&Tensor<F>) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| central_difference(&mut probe, i, step, &mut f))
        .collect()
}

/// Outcome of comparing analytic against numeric derivatives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckSummary {
    pub checked: usize,
    pub skipped_small: usize,
    pub max_rel_error: f64,
    pub worst: Option<String>,
}

impl CheckSummary {
    /// Record one coordinate; derivatives with both magnitudes at or below
    /// `floor` are counted as skipped.
    pub fn record(
        &mut self,
        label: impl FnOnce() -> String,
        analytic: f64,
        numeric: f64,
        floor: f64,
    ) {
        if analytic.abs() <= floor && numeric.abs() <= floor {
            self.skipped_small += 1;
            return;
        }
        self.checked += 1;
        let err = relative_error(analytic, numeric);
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            if err >= self.max_rel_error {
                self.worst = Some(label());
            }
        }
    }

    pub fn merge(&mut self, other: CheckSummary) {
        self.checked += other.checked;
        self.skipped_small += other.skipped_small;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst.or(self.worst.take());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let x = Tensor::<f64>::new([2], vec![1.5, -2.0]).unwrap();
        let g = numeric_gradient(&x, STEP, |t| t.data().iter().map(|v| v * v).sum());
        assert!((g[0] - 3.0).abs() < 1e-9);
        assert!((g[1] + 4.0).abs() < 1e-9);
    }
}
