//! Central finite-difference oracle for analytic gradients.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Step size used by the finite-difference probes.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Central difference gradient of a scalar-valued function at `point`.
pub fn central_difference<F: Real>(
    f: &mut dyn FnMut(&[F]) -> Result<F>,
    point: &[F],
    h: F,
) -> Result<Vec<F>> {
    let mut x = point.to_vec();
    let two_h = h + h;
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x)?;
        x[i] = orig - h;
        let minus = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value at finite-difference probe for coordinate {i}"
            )));
        }
        grad.push((plus - minus) / two_h);
    }
    Ok(grad)
}

/// Max over coordinates of |analytic − numeric| / max(1, |analytic|).
pub fn max_relative_error<F: Real>(analytic: &[F], numeric: &[F]) -> F {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / F::one().max(a.abs()))
        .fold(F::zero(), F::max)
}

/// Compare an analytic gradient against central differences with step `h`,
/// returning the max relative error.
pub fn grad_check<F: Real>(
    f: &mut dyn FnMut(&[F]) -> Result<F>,
    point: &[F],
    analytic: &[F],
    h: F,
) -> Result<F> {
    if point.len() != analytic.len() {
        return Err(Error::Dimension(format!(
            "point has {} coordinates, analytic gradient {}",
            point.len(),
            analytic.len()
        )));
    }
    let numeric = central_difference(f, point, h)?;
    Ok(max_relative_error(analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::{sigmoid, sigmoid_derivative};

    #[test]
    fn square_at_three() {
        let mut f = |x: &[f64]| Ok(x[0] * x[0]);
        let err = grad_check(&mut f, &[3.0], &[6.0], DEFAULT_STEP).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn sigmoid_at_point_seven() {
        let mut f = |x: &[f64]| Ok(sigmoid(x[0]));
        let analytic = [sigmoid_derivative(0.7f64)];
        let err = grad_check(&mut f, &[0.7], &analytic, DEFAULT_STEP).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn non_finite_probe_is_numeric_error() {
        let mut f = |x: &[f64]| Ok(x[0].ln());
        let res = central_difference(&mut f, &[0.0], 1e-4);
        assert!(matches!(res, Err(Error::Numeric(_))));
    }
}
