//! Central finite differences as a gradient oracle.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct FdReport {
    /// max over checked coordinates of |analytic - central| / (|central| + 1e-12)
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub coords: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares `grad(point)` against central differences of `value` on every coordinate.
pub fn finite_difference_check(
    value: impl Fn(&[f64]) -> Result<f64>,
    grad: impl Fn(&[f64]) -> Result<Vec<f64>>,
    point: &[f64],
    eps: f64,
) -> Result<FdReport> {
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_difference_check_at(value, grad, point, eps, &coords)
}

/// Like [`finite_difference_check`] but only on the listed coordinates.
///
/// A coordinate whose one-sided slopes disagree by more than a smooth
/// function allows is reported as [`Error::NonDifferentiable`].
pub fn finite_difference_check_at(
    value: impl Fn(&[f64]) -> Result<f64>,
    grad: impl Fn(&[f64]) -> Result<Vec<f64>>,
    point: &[f64],
    eps: f64,
    coords: &[usize],
) -> Result<FdReport> {
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    let eval = |x: &[f64]| -> Result<f64> {
        let v = value(x)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("function value {v}")));
        }
        Ok(v)
    };
    let full = grad(point)?;
    if full.len() != point.len() {
        return Err(Error::invalid("gradient length differs from point length"));
    }
    let center = eval(point)?;
    let mut x = point.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_coord: coords.first().copied().unwrap_or(0),
        coords: coords.to_vec(),
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
    };
    for &c in coords {
        let orig = x[c];
        x[c] = orig + eps;
        let plus = eval(&x)?;
        x[c] = orig - eps;
        let minus = eval(&x)?;
        x[c] = orig;
        let right = (plus - center) / eps;
        let left = (center - minus) / eps;
        let gap = (right - left).abs();
        if gap > 1e-3 * right.abs().max(left.abs()).max(1.0) && gap > 1e3 * eps {
            return Err(Error::NonDifferentiable { coord: c, left, right });
        }
        let central = (plus - minus) / (2.0 * eps);
        let rel = (full[c] - central).abs() / (central.abs() + REL_FLOOR);
        if rel.is_nan() || rel > report.max_rel_error {
            report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            report.worst_coord = c;
        }
        report.analytic.push(full[c]);
        report.numeric.push(central);
    }
    Ok(report)
}

/// Checks the tape gradient of `build(x)` w.r.t. `x` on selected coordinates.
pub fn check_graph_gradient(
    point: &Tensor,
    eps: f64,
    coords: &[usize],
    build: impl Fn(&mut Graph, &Var) -> Result<Var>,
) -> Result<FdReport> {
    let shape = point.shape().to_vec();
    let dtype = point.dtype();
    let value = |x: &[f64]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let v = g.constant(Tensor::with_dtype(shape.clone(), x.to_vec(), dtype)?);
        Ok(build(&mut g, &v)?.value().item())
    };
    let grad = |x: &[f64]| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = g.param(&Tensor::with_dtype(shape.clone(), x.to_vec(), dtype)?);
        let out = build(&mut g, &v)?;
        let grads = g.backward(&out)?;
        Ok(grads.get_or_zeros(&v).data().to_vec())
    };
    finite_difference_check_at(value, grad, point.data(), eps, coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let r = finite_difference_check(|x| Ok(x[0] * x[0]), |x| Ok(vec![2.0 * x[0]]), &[1.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn kink_is_flagged() {
        let r = finite_difference_check(|x| Ok(x[0].abs()), |_| Ok(vec![0.0]), &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::NonDifferentiable { coord: 0, .. })));
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let r = finite_difference_check(|x| Ok(x[0].ln()), |x| Ok(vec![1.0 / x[0]]), &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let r = finite_difference_check(|x| Ok(x[0].sin()), |x| Ok(vec![x[0].cos() * 1.01]), &[0.4], 1e-5).unwrap();
        assert!(r.max_rel_error > 5e-3);
    }
}
