use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::delong::two_sided_p;
use super::roc::doubled_midranks;
use crate::error::{Error, Result};

/// Largest sample size per group handled by exact enumeration.
pub const EXACT_LIMIT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
    /// Every observation is tied; `p_value` is 1.
    pub all_tied: bool,
}

/// Two-sided Mann-Whitney U test with mid-ranks for ties.
///
/// Exact permutation distribution of the rank sum when both samples have at
/// most eight observations, tie-corrected normal approximation with
/// continuity correction otherwise.
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<MannWhitney> {
    let (nx, ny) = (x.len(), y.len());
    if nx == 0 || ny == 0 {
        return Err(Error::invalid(
            "Mann-Whitney U needs both samples non-empty",
        ));
    }
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    if all.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("Mann-Whitney U input contains NaN"));
    }
    let ranks = doubled_midranks(&all);
    let r2: u64 = ranks[..nx].iter().sum();
    let u = r2 as f64 / 2.0 - (nx * (nx + 1)) as f64 / 2.0;
    let all_tied = all.iter().all(|&v| v == all[0]);
    if all_tied {
        return Ok(MannWhitney {
            u,
            p_value: 1.0,
            exact: nx <= EXACT_LIMIT && ny <= EXACT_LIMIT,
            all_tied,
        });
    }
    if nx <= EXACT_LIMIT && ny <= EXACT_LIMIT {
        return Ok(MannWhitney {
            u,
            p_value: exact_p(&ranks, nx, r2),
            exact: true,
            all_tied,
        });
    }
    let n = (nx + ny) as f64;
    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    for run in sorted.chunk_by(|a, b| a == b) {
        let t = run.len() as f64;
        tie_term += t * t * t - t;
    }
    let (nxf, nyf) = (nx as f64, ny as f64);
    let var = nxf * nyf / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let z = ((u - nxf * nyf / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(MannWhitney {
        u,
        p_value: two_sided_p(z),
        exact: false,
        all_tied,
    })
}

/// `P(|S - mu| >= |s_obs - mu|)` for the doubled rank sum `S` of `nx` cases
/// drawn without replacement from `ranks`.
fn exact_p(ranks: &[u64], nx: usize, observed: u64) -> f64 {
    let total: u64 = ranks.iter().sum();
    // counts[k][s]: subsets of size k with doubled rank sum s
    let mut counts = vec![vec![0f64; total as usize + 1]; nx + 1];
    counts[0][0] = 1.0;
    for &r in ranks {
        for k in (1..=nx).rev() {
            let (lo, hi) = counts.split_at_mut(k);
            for s in (r as usize..=total as usize).rev() {
                hi[0][s] += lo[k - 1][s - r as usize];
            }
        }
    }
    let n = ranks.len() as i64;
    // mean rank sum in doubled units
    let mu2 = nx as i64 * (n + 1);
    let dev = |s: i64| (s - mu2).abs();
    let obs = dev(observed as i64);
    let all: f64 = counts[nx].iter().sum();
    let extreme: f64 = counts[nx]
        .iter()
        .enumerate()
        .filter(|&(s, _)| dev(s as i64) >= obs)
        .map(|(_, c)| c)
        .sum();
    (extreme / all).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

fn chi_sf(stat: f64, df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    let d = ChiSquared::new(df as f64).expect("positive df");
    (1.0 - d.cdf(stat)).clamp(0.0, 1.0)
}

/// Pearson chi-square test of independence on an `r x c` count table,
/// without continuity correction. All-zero rows and columns are dropped.
pub fn chi_square(table: &[Vec<u64>]) -> Result<ChiSquare> {
    let cols = table.first().map_or(0, Vec::len);
    if table.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid("ragged contingency table"));
    }
    let rows: Vec<&Vec<u64>> = table.iter().filter(|r| r.iter().sum::<u64>() > 0).collect();
    let keep: Vec<usize> = (0..cols)
        .filter(|&c| rows.iter().map(|r| r[c]).sum::<u64>() > 0)
        .collect();
    if rows.len() < 2 || keep.len() < 2 {
        return Ok(ChiSquare {
            statistic: 0.0,
            df: 0,
            p_value: 1.0,
        });
    }
    let total: f64 = rows
        .iter()
        .flat_map(|r| keep.iter().map(|&c| r[c] as f64))
        .sum();
    let row_sums: Vec<f64> = rows
        .iter()
        .map(|r| keep.iter().map(|&c| r[c] as f64).sum())
        .collect();
    let col_sums: Vec<f64> = keep
        .iter()
        .map(|&c| rows.iter().map(|r| r[c] as f64).sum())
        .collect();
    let mut stat = 0.0;
    for (i, r) in rows.iter().enumerate() {
        for (j, &c) in keep.iter().enumerate() {
            let e = row_sums[i] * col_sums[j] / total;
            stat += (r[c] as f64 - e).powi(2) / e;
        }
    }
    let df = (rows.len() - 1) * (keep.len() - 1);
    Ok(ChiSquare {
        statistic: stat,
        df,
        p_value: chi_sf(stat, df),
    })
}

/// Goodness of fit of observed counts to expected proportions.
pub fn chi_square_gof(observed: &[u64], expected: &[f64]) -> Result<ChiSquare> {
    if observed.len() != expected.len() || observed.len() < 2 {
        return Err(Error::invalid(
            "need matching observed/expected vectors of length >= 2",
        ));
    }
    let total: f64 = observed.iter().map(|&o| o as f64).sum();
    let mass: f64 = expected.iter().sum();
    if expected.iter().any(|&e| e <= 0.0 || !e.is_finite()) {
        return Err(Error::invalid("expected proportions must be positive"));
    }
    let statistic = observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| {
            let e = total * e / mass;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let df = observed.len() - 1;
    Ok(ChiSquare {
        statistic,
        df,
        p_value: chi_sf(statistic, df),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_triples() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.exact);
        assert!((r.p_value - 0.1).abs() < 1e-12);
    }

    #[test]
    fn identical_samples() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert_eq!(r.p_value, 1.0);
        let r = mann_whitney_u(&[2.0; 12], &[2.0; 9]).unwrap();
        assert!(r.all_tied && r.p_value == 1.0);
    }

    #[test]
    fn normal_branch_matches_reference() {
        // two-sided, continuity corrected, no ties: U=3, nx=ny=10
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = (0..10).map(|i| f64::from(i) + 7.5).collect();
        let r = mann_whitney_u(&x, &y).unwrap();
        assert!(!r.exact);
        let z: f64 = (47.0 - 0.5) / (100.0f64 * 21.0 / 12.0).sqrt();
        assert!((r.p_value - two_sided_p(z)).abs() < 1e-12);
    }

    #[test]
    fn independent_table() {
        let r = chi_square(&[vec![5, 5], vec![5, 5]]).unwrap();
        assert_eq!((r.statistic, r.df, r.p_value), (0.0, 1, 1.0));
    }

    #[test]
    fn chi_square_reference() {
        let r = chi_square(&[vec![20, 10], vec![10, 20]]).unwrap();
        assert!((r.statistic - 6.666_666_666_666_667).abs() < 1e-12);
        let g = chi_square_gof(&[30, 10], &[0.5, 0.5]).unwrap();
        assert!((g.statistic - 10.0).abs() < 1e-12);
        let g = chi_square_gof(&[12, 8], &[0.5, 0.5]).unwrap();
        assert!((g.statistic - 0.8).abs() < 1e-12);
        // upper tail of chi-square(1) at 4.0
        assert!((chi_sf(4.0, 1) - 0.045_500_263_896_358).abs() < 1e-9);
    }
}
