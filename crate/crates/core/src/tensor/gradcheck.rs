use serde::Serialize;

use super::Tensor;
use crate::error::{DeptError, Result};

/// Outcome of comparing analytic gradients to central differences.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub passed: bool,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tol: f64,
}

/// Check the gradient of scalar function `f` with respect to leaf `x`.
///
/// Each coordinate is compared against `(f(x+h·e) − f(x−h·e)) / 2h`; the
/// relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
/// Only 64-bit tensors are accepted: 32-bit differences are too noisy.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if !x.is_leaf() || !x.requires_grad() {
        return Err(DeptError::Contract(
            "finite_diff_check needs a gradient-tracking leaf".into(),
        ));
    }
    x.zero_grad();
    f(x)?.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    x.zero_grad();

    let mut report = GradCheckReport {
        passed: true,
        coordinates: x.numel(),
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        tol,
    };
    for i in 0..x.numel() {
        let orig = x.values()[i];
        x.update(|d| d[i] = orig + h)?;
        let plus = f(x)?.item()?;
        x.update(|d| d[i] = orig - h)?;
        let minus = f(x)?.item()?;
        x.update(|d| d[i] = orig)?;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error || i == 0 {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    x.zero_grad();
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<f64> {
        (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect()
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let r = finite_diff_check(|x| Ok(x.mul(x)?.sum()), &x, 1e-4, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
        assert!((r.worst_analytic - 6.0).abs() < 1e-12);
        assert!((r.worst_numeric - 6.0).abs() < 1e-6);
    }

    #[test]
    fn matmul_sum_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::param(random(&mut rng, &[3, 3]), &[3, 3]).unwrap();
        let w = Tensor::<f64>::new(random(&mut rng, &[3, 3]), &[3, 3]).unwrap();
        let r = finite_diff_check(|x| Ok(x.matmul(&w)?.sum()), &x, 1e-5, 1e-5).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn wrong_backward_is_caught() {
        fn square(v: f64) -> f64 {
            v * v
        }
        fn doubled_deriv(v: f64, _: f64) -> f64 {
            4.0 * v
        }
        let x = Tensor::<f64>::param(vec![3.0, -1.5], &[2]).unwrap();
        let r = finite_diff_check(|x| Ok(x.map(square, doubled_deriv).sum()), &x, 1e-4, 1e-5).unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rejects_untracked_input() {
        let x = Tensor::<f64>::new(vec![1.0], &[1]).unwrap();
        assert!(finite_diff_check(|x| Ok(x.sum()), &x, 1e-4, 1e-5).is_err());
    }
}
