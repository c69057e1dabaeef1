//! Slide-level prediction by aggregating per-bag class probabilities.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::AlnLabel;
use crate::mil::{softmax, MilModel};

/// A bag whose instances are already embedded.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedBag {
    pub bag_id: String,
    pub slide_id: String,
    /// `N x D`
    pub features: Array2<f64>,
    pub clinical: Option<Vec<f64>>,
    pub label: Option<AlnLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
    Median,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            "median" => Ok(Aggregation::Median),
            _ => Err(Error::invalid(format!("unknown aggregation `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictConfig {
    pub aggregation: Aggregation,
    pub threshold: f64,
    /// Aggregate bag logits and apply softmax once, instead of aggregating
    /// probabilities.
    pub merge_logits: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            aggregation: Aggregation::Mean,
            threshold: 0.5,
            merge_logits: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub class_probs: Vec<f64>,
    /// Predicted class index: thresholded for 2 classes, argmax for 3.
    pub predicted: usize,
    pub bag_probs: Vec<Vec<f64>>,
}

impl SlidePrediction {
    /// `P(N+)`, i.e. one minus the N0 probability.
    pub fn positive_prob(&self) -> f64 {
        1.0 - self.class_probs[0]
    }

    pub fn n_bags(&self) -> usize {
        self.bag_probs.len()
    }

    pub fn predicted_positive(&self) -> bool {
        self.predicted > 0
    }
}

pub fn class_names(n_classes: usize) -> &'static [&'static str] {
    if n_classes == 2 {
        &["N0", "N+"]
    } else {
        &["N0", "N+(1-2)", "N+(>=3)"]
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Element-wise aggregation of equally sized vectors.
pub fn aggregate(vectors: &[Vec<f64>], how: Aggregation) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    let k = first.len();
    if vectors.iter().any(|v| v.len() != k) {
        return Err(Error::invalid("bag outputs differ in width"));
    }
    Ok((0..k)
        .map(|c| {
            let mut col: Vec<f64> = vectors.iter().map(|v| v[c]).collect();
            match how {
                Aggregation::Mean => {
                    col.sort_by(f64::total_cmp);
                    col.iter().sum::<f64>() / col.len() as f64
                }
                Aggregation::Max => col.into_iter().fold(f64::NEG_INFINITY, f64::max),
                Aggregation::Median => median(&mut col),
            }
        })
        .collect())
}

/// Aggregates bag probability vectors and renormalizes to sum 1.
pub fn aggregate_probs(bag_probs: &[Vec<f64>], how: Aggregation) -> Result<Vec<f64>> {
    let agg = aggregate(bag_probs, how)?;
    let s: f64 = agg.iter().sum();
    Ok(agg.into_iter().map(|v| v / s).collect())
}

pub fn decide(class_probs: &[f64], threshold: f64) -> usize {
    if class_probs.len() == 2 {
        usize::from(class_probs[1] >= threshold)
    } else {
        class_probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                if p > best.1 {
                    (i, p)
                } else {
                    best
                }
            })
            .0
    }
}

pub fn predict_slide(
    bags: &[EmbeddedBag],
    model: &MilModel,
    cfg: &PredictConfig,
) -> Result<SlidePrediction> {
    let first = bags
        .first()
        .ok_or_else(|| Error::invalid("a slide prediction needs at least one bag"))?;
    if let Some(b) = bags.iter().find(|b| b.slide_id != first.slide_id) {
        return Err(Error::invalid(format!(
            "bags from different slides (`{}` and `{}`)",
            first.slide_id, b.slide_id
        )));
    }
    let preds = bags
        .iter()
        .map(|b| model.forward(b.features.view(), b.clinical.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    let bag_probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
    let class_probs = if cfg.merge_logits {
        let logits: Vec<Vec<f64>> = preds.into_iter().map(|p| p.logits).collect();
        softmax(&aggregate(&logits, cfg.aggregation)?)
    } else {
        aggregate_probs(&bag_probs, cfg.aggregation)?
    };
    Ok(SlidePrediction {
        slide_id: first.slide_id.clone(),
        predicted: decide(&class_probs, cfg.threshold),
        class_probs,
        bag_probs,
    })
}

/// Groups bags by slide and predicts each slide; output is sorted by id.
pub fn predict_all(
    bags: &[EmbeddedBag],
    model: &MilModel,
    cfg: &PredictConfig,
) -> Result<Vec<SlidePrediction>> {
    let mut groups: BTreeMap<&str, Vec<EmbeddedBag>> = BTreeMap::new();
    for b in bags {
        groups
            .entry(b.slide_id.as_str())
            .or_default()
            .push(b.clone());
    }
    groups
        .into_par_iter()
        .map(|(_, g)| predict_slide(&g, model, cfg))
        .collect()
}

pub fn write_predictions_csv(path: &Path, preds: &[SlidePrediction]) -> Result<()> {
    let n_classes = preds.first().map_or(2, |p| p.class_probs.len());
    let names = class_names(n_classes);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header = vec!["slide_id".to_string()];
    if n_classes == 2 {
        header.extend(["p_N0".into(), "p_pos".into()]);
    } else {
        header.extend(["p_N0".into(), "p_low".into(), "p_high".into()]);
    }
    header.extend(["label".into(), "n_bags".into()]);
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for p in preds {
        let mut rec = vec![p.slide_id.clone()];
        rec.extend(p.class_probs.iter().map(|v| format!("{v:.9}")));
        rec.push(names[p.predicted].to_string());
        rec.push(p.n_bags().to_string());
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Row of a predictions CSV as read back for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub slide_id: String,
    pub class_probs: Vec<f64>,
    pub label: String,
}

impl PredictionRow {
    pub fn positive_prob(&self) -> f64 {
        1.0 - self.class_probs[0]
    }
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let id = col("slide_id").ok_or_else(|| Error::invalid("predictions CSV lacks slide_id"))?;
    let label = col("label").ok_or_else(|| Error::invalid("predictions CSV lacks label"))?;
    let prob_cols: Vec<usize> = ["p_N0", "p_pos", "p_low", "p_high"]
        .iter()
        .filter_map(|n| col(n))
        .collect();
    if prob_cols.len() < 2 || col("p_N0").is_none() {
        return Err(Error::invalid("predictions CSV lacks probability columns"));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let class_probs = prob_cols
                .iter()
                .map(|&c| {
                    rec[c].parse::<f64>().map_err(|_| {
                        Error::invalid(format!(
                            "{}: row {}: bad probability `{}`",
                            path.display(),
                            i + 1,
                            &rec[c]
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PredictionRow {
                slide_id: rec[id].to_string(),
                class_probs,
                label: rec[label].to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_two_bags() {
        let p = aggregate_probs(&[vec![0.2, 0.8], vec![0.6, 0.4]], Aggregation::Mean).unwrap();
        assert!((p[0] - 0.4).abs() < 1e-12 && (p[1] - 0.6).abs() < 1e-12);
        assert_eq!(decide(&p, 0.5), 1);
    }

    #[test]
    fn max_is_renormalized() {
        let p = aggregate_probs(&[vec![0.2, 0.8], vec![0.6, 0.4]], Aggregation::Max).unwrap();
        assert!((p[0] - 0.6 / 1.4).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ternary_decision_is_argmax() {
        assert_eq!(decide(&[0.3, 0.3, 0.4], 0.5), 2);
        assert_eq!(decide(&[0.5, 0.1, 0.4], 0.5), 0);
        assert_eq!(decide(&[0.5, 0.5], 0.5), 1);
    }
}
