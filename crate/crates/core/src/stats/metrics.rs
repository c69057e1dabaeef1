use serde::{Deserialize, Serialize};

use super::delong::{delong_ci, AucCi};
use super::proportion::{logit_predictive_intervals, PredictiveInterval, Rate};
use super::roc::check_binary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryRates {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub acc: Rate,
    pub sens: Rate,
    pub spec: Rate,
    pub ppv: Rate,
    pub npv: Rate,
}

/// Threshold metrics from the 2x2 table. Every interval is exact except
/// PPV and NPV under [`PredictiveInterval::Logit`].
pub fn binary_metrics(
    preds: &[bool],
    labels: &[bool],
    alpha: f64,
    predictive: PredictiveInterval,
) -> Result<BinaryRates> {
    if preds.len() != labels.len() {
        return Err(Error::invalid("predictions and labels differ in length"));
    }
    let count = |p: bool, l: bool| {
        preds
            .iter()
            .zip(labels)
            .filter(|&(&a, &b)| a == p && b == l)
            .count() as u64
    };
    let (tp, fp, tn, fn_) = (
        count(true, true),
        count(true, false),
        count(false, false),
        count(false, true),
    );
    let mut ppv = Rate::new(tp, tp + fp, alpha)?;
    let mut npv = Rate::new(tn, tn + fn_, alpha)?;
    if predictive == PredictiveInterval::Logit {
        if let Some((p, n)) = logit_predictive_intervals(tp, fp, tn, fn_, alpha) {
            (ppv.lower, ppv.upper) = p;
            (npv.lower, npv.upper) = n;
        }
    }
    Ok(BinaryRates {
        tp,
        fp,
        tn,
        fn_,
        acc: Rate::new(tp + tn, tp + fp + tn + fn_, alpha)?,
        sens: Rate::new(tp, tp + fn_, alpha)?,
        spec: Rate::new(tn, tn + fp, alpha)?,
        ppv,
        npv,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cohort: String,
    pub n: usize,
    pub n_pos: usize,
    pub threshold: f64,
    pub auc: AucCi,
    pub rates: BinaryRates,
}

impl MetricsReport {
    /// Cells in table order: AUC, ACC, SENS, SPEC, PPV, NPV.
    pub fn cells(&self) -> [String; 6] {
        let r = &self.rates;
        [
            auc_cell(&self.auc),
            percent_cell(&r.acc),
            percent_cell(&r.sens),
            percent_cell(&r.spec),
            percent_cell(&r.ppv),
            percent_cell(&r.npv),
        ]
    }

    /// `label & AUC & ACC & SENS & SPEC & PPV & NPV`
    pub fn row(&self, label: &str) -> String {
        std::iter::once(label.to_string())
            .chain(self.cells())
            .collect::<Vec<_>>()
            .join(" & ")
    }
}

pub const TABLE_HEADER: [&str; 6] = [
    "AUC", "ACC (%)", "SENS (%)", "SPEC (%)", "PPV (%)", "NPV (%)",
];

/// `0.831 [0.775, 0.878]`
pub fn auc_cell(ci: &AucCi) -> String {
    format!("{:.3} [{:.3}, {:.3}]", ci.auc, ci.lower, ci.upper)
}

/// `75.69 [69.44, 81.23]`; `NA [0.00, 100.00]` for an empty denominator.
pub fn percent_cell(r: &Rate) -> String {
    let v = if r.undefined {
        "NA".to_string()
    } else {
        format!("{:.2}", 100.0 * r.value)
    };
    format!("{v} [{:.2}, {:.2}]", 100.0 * r.lower, 100.0 * r.upper)
}

/// Full report for one cohort: AUC with its interval plus threshold metrics
/// where `score >= threshold` is called positive.
pub fn metrics_report(
    cohort: &str,
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
    alpha: f64,
    predictive: PredictiveInterval,
) -> Result<MetricsReport> {
    let (n_pos, _) = check_binary(scores, labels)?;
    let auc = delong_ci(scores, labels, 1.0 - alpha)?;
    let preds: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    Ok(MetricsReport {
        cohort: cohort.to_string(),
        n: scores.len(),
        n_pos,
        threshold,
        auc,
        rates: binary_metrics(&preds, labels, alpha, predictive)?,
    })
}

/// Aligned plain-text table with one row per report.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("Cohort".to_string())
        .chain(TABLE_HEADER.iter().map(|s| s.to_string()))
        .collect()];
    for r in reports {
        rows.push(std::iter::once(r.cohort.clone()).chain(r.cells()).collect());
    }
    align(&rows)
}

pub(crate) fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion3 {
    /// Rows are truth, columns are predictions.
    pub matrix: [[u64; 3]; 3],
    /// `None` when nothing was predicted as the class.
    pub precision: [Option<f64>; 3],
    /// `None` when the class is absent from the truth.
    pub recall: [Option<f64>; 3],
}

impl Confusion3 {
    pub fn from_matrix(matrix: [[u64; 3]; 3]) -> Self {
        let mut precision = [None; 3];
        let mut recall = [None; 3];
        for c in 0..3 {
            let col: u64 = (0..3).map(|r| matrix[r][c]).sum();
            let row: u64 = matrix[c].iter().sum();
            precision[c] = (col > 0).then(|| matrix[c][c] as f64 / col as f64);
            recall[c] = (row > 0).then(|| matrix[c][c] as f64 / row as f64);
        }
        Confusion3 {
            matrix,
            precision,
            recall,
        }
    }

    pub fn render(&self, names: [&str; 3]) -> String {
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.3}"));
        let mut rows = vec![[
            "truth \\ pred",
            names[0],
            names[1],
            names[2],
            "precision",
            "recall",
        ]
        .map(String::from)
        .to_vec()];
        for (c, name) in names.iter().enumerate() {
            let mut row = vec![name.to_string()];
            row.extend(self.matrix[c].iter().map(u64::to_string));
            row.push(fmt(self.precision[c]));
            row.push(fmt(self.recall[c]));
            rows.push(row);
        }
        align(&rows)
    }
}

/// 3x3 confusion matrix of class indices in `0..3`.
pub fn confusion_3class(preds: &[usize], labels: &[usize]) -> Result<Confusion3> {
    if preds.len() != labels.len() {
        return Err(Error::invalid("predictions and labels differ in length"));
    }
    let mut m = [[0u64; 3]; 3];
    for (&p, &l) in preds.iter().zip(labels) {
        if p > 2 || l > 2 {
            return Err(Error::invalid(format!(
                "class index out of range ({l}, {p})"
            )));
        }
        m[l][p] += 1;
    }
    Ok(Confusion3::from_matrix(m))
}
