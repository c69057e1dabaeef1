use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    /// L2 strength on the coefficients (the intercept is not penalized).
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            lambda: 1.0,
            tol: 1e-6,
            max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// The training classes are linearly separable by the fitted model.
    pub separated: bool,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl LogisticModel {
    pub fn linear_predictor(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.coef.len() {
            return Err(Error::Shape {
                expected: format!("n x {}", self.coef.len()),
                actual: format!("{} x {}", x.nrows(), x.ncols()),
            });
        }
        Ok(x.rows()
            .into_iter()
            .map(|r| self.intercept + r.iter().zip(&self.coef).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.linear_predictor(x)?.into_iter().map(sigmoid).collect())
    }
}

/// Gradient of the penalized negative log-likelihood at `(b0, w)`.
pub fn penalized_gradient(
    x: ArrayView2<f64>,
    y: &[bool],
    lambda: f64,
    b0: f64,
    w: &[f64],
) -> Vec<f64> {
    let p = x.ncols();
    let mut g = vec![0.0; p + 1];
    for (row, &yi) in x.rows().into_iter().zip(y) {
        let eta = b0 + row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        let r = sigmoid(eta) - f64::from(u8::from(yi));
        g[0] += r;
        for j in 0..p {
            g[j + 1] += r * row[j];
        }
    }
    for j in 0..p {
        g[j + 1] += lambda * w[j];
    }
    g
}

/// Penalized negative log-likelihood.
pub fn penalized_nll(x: ArrayView2<f64>, y: &[bool], lambda: f64, b0: f64, w: &[f64]) -> f64 {
    let mut nll = 0.0;
    for (row, &yi) in x.rows().into_iter().zip(y) {
        let eta = b0 + row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        // log(1 + e^eta) - y * eta, evaluated stably
        let softplus = if eta > 0.0 {
            eta + (-eta).exp().ln_1p()
        } else {
            eta.exp().ln_1p()
        };
        nll += softplus - if yi { eta } else { 0.0 };
    }
    nll + 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>()
}

/// L2-penalized maximum likelihood by Newton's method.
pub fn fit_logistic(x: ArrayView2<f64>, y: &[bool], cfg: &LogisticConfig) -> Result<LogisticModel> {
    let (n, p) = x.dim();
    if n != y.len() {
        return Err(Error::invalid(format!("{n} rows for {} labels", y.len())));
    }
    if n == 0 {
        return Err(Error::invalid("no observations"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("design matrix contains non-finite values"));
    }
    let mut beta = DVector::<f64>::zeros(p + 1);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_iter {
        iterations = it;
        let w: Vec<f64> = beta.iter().skip(1).copied().collect();
        let g = DVector::from_vec(penalized_gradient(x, y, cfg.lambda, beta[0], &w));
        if g.norm() < cfg.tol {
            converged = true;
            break;
        }
        let mut h = DMatrix::<f64>::zeros(p + 1, p + 1);
        for row in x.rows() {
            let eta = beta[0] + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let s = sigmoid(eta);
            let wt = (s * (1.0 - s)).max(1e-12);
            let z: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
            for a in 0..=p {
                for b in 0..=p {
                    h[(a, b)] += wt * z[a] * z[b];
                }
            }
        }
        for j in 1..=p {
            h[(j, j)] += cfg.lambda;
        }
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => h
                .lu()
                .solve(&g)
                .ok_or_else(|| Error::Diverged("singular Hessian in logistic fit".into()))?,
        };
        // backtracking keeps the penalized likelihood monotone
        let f0 = penalized_nll(x, y, cfg.lambda, beta[0], &w);
        let mut t = 1.0;
        loop {
            let cand = &beta - t * &step;
            let cw: Vec<f64> = cand.iter().skip(1).copied().collect();
            if penalized_nll(x, y, cfg.lambda, cand[0], &cw) <= f0 || t < 1e-10 {
                beta = cand;
                break;
            }
            t *= 0.5;
        }
        iterations = it + 1;
    }
    let model = LogisticModel {
        intercept: beta[0],
        coef: beta.iter().skip(1).copied().collect(),
        iterations,
        converged,
        separated: false,
    };
    let eta = model.linear_predictor(x)?;
    let max_neg = eta
        .iter()
        .zip(y)
        .filter(|(_, &l)| !l)
        .map(|(e, _)| *e)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_pos = eta
        .iter()
        .zip(y)
        .filter(|(_, &l)| l)
        .map(|(e, _)| *e)
        .fold(f64::INFINITY, f64::min);
    let separated = p > 0 && max_neg.is_finite() && min_pos.is_finite() && max_neg < min_pos;
    if separated {
        log::warn!("training classes are perfectly separated; coefficients are bounded only by the L2 penalty");
    }
    if !converged {
        log::warn!("logistic fit stopped after {iterations} iterations without meeting tolerance");
    }
    Ok(LogisticModel { separated, ..model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn intercept_only_gives_prior() {
        let x = Array2::<f64>::zeros((10, 0));
        let y: Vec<bool> = (0..10).map(|i| i < 3).collect();
        let m = fit_logistic(x.view(), &y, &LogisticConfig::default()).unwrap();
        for p in m.predict_proba(x.view()).unwrap() {
            assert!((p - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn separable_data_is_ranked_perfectly() {
        let x = Array2::from_shape_vec((6, 1), vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]).unwrap();
        let y = [false, false, false, true, true, true];
        let m = fit_logistic(x.view(), &y, &LogisticConfig::default()).unwrap();
        assert!(m.converged && m.separated);
        let p = m.predict_proba(x.view()).unwrap();
        assert_eq!(crate::stats::roc_auc(&p, &y).unwrap(), 1.0);
    }
}
