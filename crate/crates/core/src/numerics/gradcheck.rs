use super::Tensor;
use crate::error::{LabError, Result};

/// Central-difference gradient of a scalar function, one element at a time.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(LabError::Config(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(LabError::NonFinite(format!(
                "objective not finite around element {i} (f+={up}, f-={down})"
            )));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Normwise relative error `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`.
///
/// Returns the absolute error when both tensors are (numerically) zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.max_abs().max(b.max_abs());
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let x = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let g = finite_difference_gradient(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5)
            .unwrap();
        for (gv, xv) in g.data().iter().zip(x.data()) {
            assert!((gv - 2.0 * xv).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_gives_zero() {
        let x = Tensor::filled(&[3], 2.0);
        let g = finite_difference_gradient(|_| 4.0, &x, 1e-5).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn non_finite_names_the_element() {
        let x = Tensor::new(vec![3], vec![1.0, 0.0, 1.0]).unwrap();
        let err = finite_difference_gradient(
            |t| if t.data()[2] > 1.0 { f64::NAN } else { 0.0 },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("element 2"), "{err}");
    }
}
