use crate::error::{Error, Result};

/// Compares an analytic gradient against central finite differences.
///
/// `f` returns the scalar value and its analytic gradient at the given
/// point. The gradient is taken once at `x0`; each coordinate is then
/// perturbed by `±step`. Returns the maximum over coordinates of
/// `|g_fd − g_an| / max(1e-8, |g_fd| + |g_an|)`.
pub fn grad_check<F>(f: F, x0: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = f(x0)?;
    grad_check_value(|x| f(x).map(|(v, _)| v), &analytic, x0, step)
}

/// Finite-difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error `O(h²)`.
    #[default]
    Central,
    /// Five-point stencil, error `O(h⁴)`. Tolerates larger steps, which
    /// keeps roundoff small when the value dwarfs some gradient entries.
    FivePoint,
}

/// Same metric as [`grad_check`] for a precomputed analytic gradient, with a
/// value-only `f` for the perturbed evaluations.
pub fn grad_check_value<F>(f: F, analytic: &[f64], x0: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    grad_check_stencil(f, analytic, x0, step, Stencil::Central)
}

pub fn grad_check_stencil<F>(f: F, analytic: &[f64], x0: &[f64], step: f64, stencil: Stencil) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {step}")));
    }
    let v0 = f(x0)?;
    if !v0.is_finite() {
        return Err(Error::Evaluation(format!("f(x0) = {v0}")));
    }
    if analytic.len() != x0.len() {
        return Err(Error::shape(
            "grad_check",
            format!("gradient of length {} for {} parameters", analytic.len(), x0.len()),
        ));
    }
    let mut x = x0.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        let mut at = |h: f64| -> Result<f64> {
            x[i] = orig + h;
            let v = f(&x)?;
            x[i] = orig;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Evaluation(format!("non-finite value perturbing coordinate {i}")))
            }
        };
        let fd = match stencil {
            Stencil::Central => (at(step)? - at(-step)?) / (2.0 * step),
            Stencil::FivePoint => {
                let near = at(step)? - at(-step)?;
                let far = at(2.0 * step)? - at(-2.0 * step)?;
                (8.0 * near - far) / (12.0 * step)
            }
        };
        let an = analytic[i];
        let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm() {
        let x0: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let err = grad_check(
            |x| Ok((x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect())),
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn five_point_beats_central_on_a_cubic() {
        let f = |x: &[f64]| Ok(x[0].powi(3));
        let an = [3.0];
        let central = grad_check_stencil(f, &an, &[1.0], 1e-2, Stencil::Central).unwrap();
        let five = grad_check_stencil(f, &an, &[1.0], 1e-2, Stencil::FivePoint).unwrap();
        assert!(central > 1e-6);
        assert!(five < 1e-12, "{five:e}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let err = grad_check(|x| Ok((x[0] * x[0], vec![x[0]])), &[1.5], 1e-6).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            grad_check(|_| Ok((f64::NAN, vec![0.0])), &[0.0], 1e-6),
            Err(Error::Evaluation(_))
        ));
        assert!(grad_check(|x| Ok((x[0], vec![1.0, 2.0])), &[0.0], 1e-6).is_err());
    }
}
