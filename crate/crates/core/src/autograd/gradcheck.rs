//! Central finite differences, for checking analytic gradients.

use crate::tensor::Tensor;

/// Default step for float64 central differences.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Numerical gradient of `f` at `x` by central differences, one
/// coordinate at a time.
pub fn numeric_gradient(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both are exactly zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).norm();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = numeric_gradient(&x, DEFAULT_STEP, |t| t.data().iter().map(|v| v * v).sum());
        let exact = x.map(|v| 2.0 * v);
        assert!(relative_error(&g, &exact) < 1e-8);
    }
}
