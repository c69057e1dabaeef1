use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::roc::{check_binary, doubled_midranks};
use crate::error::{Error, Result};

pub const Z_975: f64 = 1.959_963_984_540_054;

/// Normal quantile with `level` central mass.
pub(crate) fn z_two_sided(level: f64) -> f64 {
    if (level - 0.95).abs() < 1e-15 {
        Z_975
    } else {
        use statrs::distribution::{ContinuousCDF, Normal};
        Normal::standard().inverse_cdf(0.5 + level / 2.0)
    }
}

/// Two-sided normal tail probability of `z`.
pub fn two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// Placement values and AUC of one score vector.
#[derive(Debug, Clone)]
struct Placements {
    auc: f64,
    /// Per positive case: fraction of negatives it outranks.
    v10: Vec<f64>,
    /// Per negative case: fraction of positives that outrank it.
    v01: Vec<f64>,
}

fn placements(scores: &[f64], labels: &[bool]) -> Result<Placements> {
    let (m, n) = check_binary(scores, labels)?;
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(s, _)| *s)
        .collect();
    let all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let rz = doubled_midranks(&all);
    let rx = doubled_midranks(&pos);
    let ry = doubled_midranks(&neg);
    let v10: Vec<f64> = (0..m)
        .map(|i| (rz[i] - rx[i]) as f64 / (2 * n) as f64)
        .collect();
    let v01: Vec<f64> = (0..n)
        .map(|j| 1.0 - (rz[m + j] - ry[j]) as f64 / (2 * m) as f64)
        .collect();
    let mut sorted = v10.clone();
    sorted.sort_by(f64::total_cmp);
    let auc = sorted.iter().sum::<f64>() / m as f64;
    Ok(Placements { auc, v10, v01 })
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len();
    if k < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / k as f64;
    let mb = b.iter().sum::<f64>() / k as f64;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (k - 1) as f64
}

fn variance(p: &Placements) -> f64 {
    covariance(&p.v10, &p.v10) / p.v10.len() as f64
        + covariance(&p.v01, &p.v01) / p.v01.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub cov_ab: f64,
    pub z: f64,
    pub p_value: f64,
    /// Variance of the difference is zero; `z` and `p` follow by convention.
    pub degenerate: bool,
}

fn finish(auc_a: f64, auc_b: f64, var_a: f64, var_b: f64, cov_ab: f64) -> DelongResult {
    let var = var_a + var_b - 2.0 * cov_ab;
    let diff = auc_a - auc_b;
    let (z, p, degenerate) = if var > 1e-300 {
        let z = diff / var.sqrt();
        (z, two_sided_p(z), false)
    } else if diff == 0.0 {
        (0.0, 1.0, true)
    } else {
        (diff.signum() * f64::INFINITY, 0.0, true)
    };
    DelongResult {
        auc_a,
        auc_b,
        var_a,
        var_b,
        cov_ab,
        z,
        p_value: p,
        degenerate,
    }
}

/// Paired comparison of two correlated AUCs on the same cases.
pub fn delong_compare(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DelongResult> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::invalid("paired score vectors differ in length"));
    }
    let a = placements(scores_a, labels)?;
    let b = placements(scores_b, labels)?;
    let (m, n) = (a.v10.len() as f64, a.v01.len() as f64);
    let cov_ab = covariance(&a.v10, &b.v10) / m + covariance(&a.v01, &b.v01) / n;
    Ok(finish(a.auc, b.auc, variance(&a), variance(&b), cov_ab))
}

/// Comparison of AUCs from two independent samples: `z = (A1 - A2) / sqrt(V1 + V2)`.
pub fn delong_unpaired(a: (&[f64], &[bool]), b: (&[f64], &[bool])) -> Result<DelongResult> {
    let pa = placements(a.0, a.1)?;
    let pb = placements(b.0, b.1)?;
    Ok(finish(pa.auc, pb.auc, variance(&pa), variance(&pb), 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucCi {
    pub auc: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    /// Zero standard error; the interval collapses onto the point.
    pub degenerate: bool,
}

/// Normal-theory interval `AUC ± z * SE`, clipped to `[0, 1]`.
pub fn delong_ci(scores: &[f64], labels: &[bool], level: f64) -> Result<AucCi> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::invalid(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let p = placements(scores, labels)?;
    let se = variance(&p).max(0.0).sqrt();
    let z = z_two_sided(level);
    Ok(AucCi {
        auc: p.auc,
        se,
        lower: (p.auc - z * se).clamp(0.0, 1.0),
        upper: (p.auc + z * se).clamp(0.0, 1.0),
        degenerate: se == 0.0,
    })
}
