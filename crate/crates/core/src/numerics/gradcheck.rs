use crate::error::{Error, Result};

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub parameter_count: usize,
    /// Coordinate where the worst error occurred.
    pub worst_index: Option<usize>,
}

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait ScalarObjective {
    fn value(&mut self, theta: &[f64]) -> Result<f64>;
    fn gradient(&mut self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// Adapts a value closure and a gradient closure into a [`ScalarObjective`].
pub struct FnObjective<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> ScalarObjective for FnObjective<V, G>
where
    V: FnMut(&[f64]) -> Result<f64>,
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    fn value(&mut self, theta: &[f64]) -> Result<f64> {
        (self.value)(theta)
    }

    fn gradient(&mut self, theta: &[f64]) -> Result<Vec<f64>> {
        (self.gradient)(theta)
    }
}

/// Checks every coordinate of `theta`.
pub fn finite_difference_check(f: &mut impl ScalarObjective, theta: &[f64], h: f64) -> Result<GradCheckReport> {
    let coords: Vec<usize> = (0..theta.len()).collect();
    finite_difference_check_coords(f, theta, h, &coords)
}

/// Like [`finite_difference_check`] but restricted to `coords`.
///
/// The error per coordinate is `|analytic - central| / max(1, |central|)`.
pub fn finite_difference_check_coords(f: &mut impl ScalarObjective, theta: &[f64], h: f64, coords: &[usize]) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::domain(format!("finite-difference step {h} outside [1e-6, 1e-4]")));
    }
    let analytic = f.gradient(theta)?;
    if analytic.len() != theta.len() {
        return Err(Error::dim(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    let mut worst_index = None;
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f.value(&probe)?;
        probe[i] = orig - h;
        let minus = f.value(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!("objective not finite near coordinate {i}")));
        }
        let central = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - central).abs() / central.abs().max(1.0);
        if err > worst || worst_index.is_none() {
            worst = worst.max(err);
            worst_index = Some(i);
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        parameter_count: coords.len(),
        worst_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut f = FnObjective {
            value: |t: &[f64]| Ok(t[0] * t[0]),
            gradient: |t: &[f64]| Ok(vec![2.0 * t[0]]),
        };
        let report = finite_difference_check(&mut f, &[3.0], 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-8);
        assert_eq!(report.parameter_count, 1);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let mut f = FnObjective {
            value: |t: &[f64]| Ok(t[0] * t[0]),
            gradient: |t: &[f64]| Ok(vec![3.0 * t[0]]),
        };
        let report = finite_difference_check(&mut f, &[3.0], 1e-5).unwrap();
        assert!(report.max_relative_error > 0.4);
    }

    #[test]
    fn non_finite_objective_errors() {
        let mut f = FnObjective {
            value: |t: &[f64]| Ok(t[0].ln()),
            gradient: |t: &[f64]| Ok(vec![1.0 / t[0]]),
        };
        assert!(matches!(finite_difference_check(&mut f, &[0.0], 1e-5), Err(Error::Evaluation(_))));
    }

    #[test]
    fn step_outside_range_rejected() {
        let mut f = FnObjective {
            value: |t: &[f64]| Ok(t[0]),
            gradient: |_: &[f64]| Ok(vec![1.0]),
        };
        assert!(finite_difference_check(&mut f, &[1.0], 0.1).is_err());
    }
}
