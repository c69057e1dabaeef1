use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};

/// Exact (Clopper-Pearson) two-sided interval for `k` successes in `n` trials.
pub fn clopper_pearson(k: u64, n: u64, alpha: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::invalid("binomial interval needs n > 0"));
    }
    if k > n {
        return Err(Error::invalid(format!("{k} successes out of {n} trials")));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    let (kf, nf) = (k as f64, n as f64);
    let lower = if k == 0 {
        0.0
    } else {
        Beta::new(kf, nf - kf + 1.0)
            .expect("positive shape")
            .inverse_cdf(alpha / 2.0)
    };
    let upper = if k == n {
        1.0
    } else {
        Beta::new(kf + 1.0, nf - kf)
            .expect("positive shape")
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    Ok((lower, upper))
}

/// Interval method for the predictive values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictiveInterval {
    /// Clopper-Pearson on the predicted-positive (or negative) column.
    #[default]
    Exact,
    /// Logit interval whose variance comes from sensitivity, specificity
    /// and the class sizes. Falls back to `Exact` when either rate is 0 or 1.
    Logit,
}

impl std::str::FromStr for PredictiveInterval {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Ok(PredictiveInterval::Exact),
            "logit" => Ok(PredictiveInterval::Logit),
            _ => Err(Error::invalid(format!("unknown predictive interval `{s}`"))),
        }
    }
}

/// Logit intervals `(ppv, npv)` from 2x2 counts; `None` unless sensitivity
/// and specificity both lie strictly inside (0, 1).
pub fn logit_predictive_intervals(
    tp: u64,
    fp: u64,
    tn: u64,
    fn_: u64,
    alpha: f64,
) -> Option<((f64, f64), (f64, f64))> {
    if tp == 0 || fp == 0 || tn == 0 || fn_ == 0 {
        return None;
    }
    let (tp, fp, tn, fn_) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
    let (n_pos, n_neg) = (tp + fn_, tn + fp);
    let sens = tp / n_pos;
    let spec = tn / n_neg;
    let z = super::delong::z_two_sided(1.0 - alpha);
    let expit = |x: f64| 1.0 / (1.0 + (-x).exp());
    let interval = |logit: f64, var: f64| {
        let h = z * var.sqrt();
        (expit(logit - h), expit(logit + h))
    };
    let ppv = interval(
        (tp / fp).ln(),
        (1.0 - sens) / (sens * n_pos) + spec / ((1.0 - spec) * n_neg),
    );
    let npv = interval(
        (tn / fn_).ln(),
        sens / ((1.0 - sens) * n_pos) + (1.0 - spec) / (spec * n_neg),
    );
    Some((ppv, npv))
}

/// A proportion with its exact interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub k: u64,
    pub n: u64,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    /// Empty denominator: value is NaN and the interval is `[0, 1]`.
    pub undefined: bool,
}

impl Rate {
    pub fn new(k: u64, n: u64, alpha: f64) -> Result<Self> {
        if n == 0 {
            return Ok(Rate {
                k,
                n,
                value: f64::NAN,
                lower: 0.0,
                upper: 1.0,
                undefined: true,
            });
        }
        let (lower, upper) = clopper_pearson(k, n, alpha)?;
        Ok(Rate {
            k,
            n,
            value: k as f64 / n as f64,
            lower,
            upper,
            undefined: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_successes_lower_bound() {
        let (lo, hi) = clopper_pearson(10, 10, 0.05).unwrap();
        assert!((lo - 0.025f64.powf(0.1)).abs() < 1e-9, "{lo}");
        assert_eq!(hi, 1.0);
        assert_eq!(format!("{lo:.3}"), "0.692");
    }

    #[test]
    fn no_successes() {
        let (lo, hi) = clopper_pearson(0, 10, 0.05).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - (1.0 - 0.025f64.powf(0.1))).abs() < 1e-9);
    }

    #[test]
    fn matches_reference_interval() {
        // 17 of 20: reference bounds 0.621073, 0.967929
        let (lo, hi) = clopper_pearson(17, 20, 0.05).unwrap();
        assert!(
            (lo - 0.621_073).abs() < 1e-5 && (hi - 0.967_929).abs() < 1e-5,
            "{lo} {hi}"
        );
    }

    #[test]
    fn logit_interval_known_values() {
        // tp 75, fp 44, tn 90, fn 9: ppv 0.5696..0.6871, npv 0.8421..0.9494
        let ((pl, pu), (nl, nu)) = logit_predictive_intervals(75, 44, 90, 9, 0.05).unwrap();
        for (got, want) in [(pl, 0.5696), (pu, 0.6871), (nl, 0.8421), (nu, 0.9494)] {
            assert!((got - want).abs() < 1e-4, "{got} {want}");
        }
        assert!(logit_predictive_intervals(10, 0, 5, 3, 0.05).is_none());
    }

    #[test]
    fn empty_denominator_is_flagged() {
        let r = Rate::new(0, 0, 0.05).unwrap();
        assert!(r.undefined && r.lower == 0.0 && r.upper == 1.0);
    }
}
