//! Fixed-effects (inverse-variance) meta-analysis of per-cohort fits.
//!
//! Each cohort is fitted separately with its own selection model, and the
//! coefficient estimates are combined coordinate-wise with weights equal to
//! the reciprocal sandwich variances. Valid only when the per-cohort
//! estimates are independent, so overlapping cohort memberships trigger a
//! mandatory warning.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};

/// One study entering the meta-analysis.
#[derive(Debug, Clone)]
pub struct MetaInput {
    pub label: String,
    pub estimate: Array1<f64>,
    pub covariance: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct MetaResult {
    pub estimate: Array1<f64>,
    pub se: Array1<f64>,
    pub warnings: Vec<String>,
}

/// Coordinate-wise fixed-effects combination:
/// `theta_j = sum_i w_ij theta_ij / sum_i w_ij` with `w_ij = 1 / var_ij` and
/// `se_j = (sum_i w_ij)^{-1/2}`.
///
/// `overlapping` should be `true` when any individual belongs to more than
/// one input cohort; independence then fails and a warning is attached.
pub fn combine_fixed_effects(inputs: &[MetaInput], overlapping: bool) -> Result<MetaResult> {
    if inputs.len() < 2 {
        return Err(Error::Config("meta-analysis needs at least two inputs".into()));
    }
    let p = inputs[0].estimate.len();
    for inp in inputs {
        if inp.estimate.len() != p || inp.covariance.nrows() != p || inp.covariance.ncols() != p {
            return Err(Error::Config(format!(
                "meta input `{}` has mismatched dimensions",
                inp.label
            )));
        }
        for j in 0..p {
            let v = inp.covariance[(j, j)];
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::ZeroVariance { cohort: inp.label.clone(), coordinate: j });
            }
        }
    }
    let mut estimate = Array1::zeros(p);
    let mut se = Array1::zeros(p);
    for j in 0..p {
        let mut wsum = 0.0;
        let mut wtheta = 0.0;
        for inp in inputs {
            let w = 1.0 / inp.covariance[(j, j)];
            wsum += w;
            wtheta += w * inp.estimate[j];
        }
        estimate[j] = wtheta / wsum;
        se[j] = wsum.powf(-0.5);
    }
    let mut warnings = Vec::new();
    if overlapping {
        warnings.push(
            "cohort memberships overlap; per-cohort estimates are not independent and the combined standard errors are anti-conservative"
                .into(),
        );
    }
    Ok(MetaResult { estimate, se, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn input(label: &str, est: Array1<f64>, vars: &[f64]) -> MetaInput {
        let p = vars.len();
        let mut cov = Array2::zeros((p, p));
        for j in 0..p {
            cov[(j, j)] = vars[j];
        }
        MetaInput { label: label.into(), estimate: est, covariance: cov }
    }

    #[test]
    fn two_study_hand_computation() {
        // w1 = 1/0.04 = 25, w2 = 1/0.01 = 100
        // theta = (25*1.0 + 100*2.0) / 125 = 1.8; se = 125^{-1/2}
        let a = input("a", array![1.0], &[0.04]);
        let b = input("b", array![2.0], &[0.01]);
        let res = combine_fixed_effects(&[a, b], false).unwrap();
        assert_abs_diff_eq!(res.estimate[0], 1.8, epsilon = 1e-12);
        assert_abs_diff_eq!(res.se[0], (125.0f64).powf(-0.5), epsilon = 1e-12);
        assert!(res.warnings.is_empty());
    }

    #[test]
    fn equal_variances_give_plain_average() {
        let a = input("a", array![1.0, -1.0], &[0.5, 0.2]);
        let b = input("b", array![3.0, 1.0], &[0.5, 0.2]);
        let res = combine_fixed_effects(&[a, b], false).unwrap();
        assert_abs_diff_eq!(res.estimate[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(res.estimate[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(res.se[0], (2.0 / 0.5f64).powf(-0.5), epsilon = 1e-12);
    }

    #[test]
    fn overlap_produces_mandatory_warning() {
        let a = input("a", array![1.0], &[1.0]);
        let b = input("b", array![2.0], &[1.0]);
        let res = combine_fixed_effects(&[a, b], true).unwrap();
        assert_eq!(res.warnings.len(), 1);
    }

    #[test]
    fn nonpositive_variance_is_rejected() {
        let a = input("a", array![1.0], &[1.0]);
        let b = input("b", array![2.0], &[0.0]);
        let err = combine_fixed_effects(&[a, b], false).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance { coordinate: 0, .. }));
    }
}
