//! Optimization loop, learning-rate schedule and the synthetic corpus.

mod optim;
mod schedule;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{predict_all, EmbeddedBag, PredictConfig};
use crate::mil::{MilModel, MilParams, ParamSet};
use crate::stats::roc_auc;

pub use optim::{Adam, AdamConfig};
pub use schedule::{lr_at, ScheduleConfig, WarmRestarts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub batch_bags: usize,
    pub seed: u64,
    /// Inverse-frequency class weights in the loss.
    pub class_weights: bool,
    /// Backpropagate into the convolutional backbone. Not supported: the
    /// backbone is frozen and features are precomputed.
    pub finetune_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-4,
            weight_decay: 1e-3,
            schedule: ScheduleConfig::default(),
            epochs: 40,
            batch_bags: 8,
            seed: 0,
            class_weights: false,
            finetune_backbone: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::invalid("lr_max must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if self.batch_bags == 0 {
            return Err(Error::invalid("batch_bags must be at least 1"));
        }
        if self.finetune_backbone {
            return Err(Error::invalid(
                "finetune_backbone is not supported; the backbone runs frozen on cached features",
            ));
        }
        WarmRestarts::new(self.lr_max, &self.schedule).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: MilModel,
    /// 1-based epoch of the selected model; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in history {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Slide-level AUC of `P(N+)` under mean aggregation.
pub fn slide_auc(bags: &[EmbeddedBag], model: &MilModel) -> Result<f64> {
    let labels = slide_labels(bags)?;
    let preds = predict_all(bags, model, &PredictConfig::default())?;
    let scores: Vec<f64> = preds.iter().map(|p| p.positive_prob()).collect();
    let truth: Vec<bool> = preds.iter().map(|p| labels[p.slide_id.as_str()]).collect();
    roc_auc(&scores, &truth)
}

fn slide_labels(bags: &[EmbeddedBag]) -> Result<BTreeMap<&str, bool>> {
    let mut out = BTreeMap::new();
    for b in bags {
        let label = b
            .label
            .ok_or_else(|| Error::invalid(format!("bag `{}` has no label", b.bag_id)))?;
        out.insert(b.slide_id.as_str(), label.is_positive());
    }
    Ok(out)
}

fn class_weights(bags: &[EmbeddedBag], n_classes: usize, enabled: bool) -> Vec<f64> {
    if !enabled {
        return vec![1.0; n_classes];
    }
    let mut counts = vec![0usize; n_classes];
    for b in bags {
        counts[b.label.expect("checked").class_index(n_classes)] += 1;
    }
    let total = bags.len() as f64;
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                total / (n_classes as f64 * c as f64)
            }
        })
        .collect()
}

/// Mini-batch Adam on the bag cross-entropy with a per-epoch warm-restart
/// schedule. The model with the highest validation AUC is kept; ties go to
/// the earlier epoch.
pub fn train(
    train_bags: &[EmbeddedBag],
    val_bags: &[EmbeddedBag],
    model: MilModel,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            best: model,
            best_epoch: None,
            history: Vec::new(),
        });
    }
    if train_bags.is_empty() {
        return Err(Error::invalid("no training bags"));
    }
    let train_slides: HashSet<&str> = train_bags.iter().map(|b| b.slide_id.as_str()).collect();
    if let Some(b) = val_bags
        .iter()
        .find(|b| train_slides.contains(b.slide_id.as_str()))
    {
        return Err(Error::invalid(format!(
            "slide `{}` appears in both training and validation cohorts",
            b.slide_id
        )));
    }
    slide_labels(train_bags)?;
    let val_labels = slide_labels(val_bags)?;
    let n_pos = val_labels.values().filter(|&&p| p).count();
    if n_pos == 0 || n_pos == val_labels.len() {
        return Err(Error::invalid(
            "validation cohort has a single class; AUC is undefined",
        ));
    }

    let n_classes = model.config().n_classes;
    let weights = class_weights(train_bags, n_classes, cfg.class_weights);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut schedule = WarmRestarts::new(cfg.lr_max, &cfg.schedule)?;
    let mut model = model;
    let mut opt = Adam::new(
        model.params(),
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, MilModel)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_bags) {
            let scale = 1.0 / batch.len() as f64;
            let grads = batch
                .par_iter()
                .map(|&i| {
                    let b = &train_bags[i];
                    let class = b.label.expect("checked").class_index(n_classes);
                    model.loss_and_grad(
                        b.features.view(),
                        b.clinical.as_deref(),
                        class,
                        scale * weights[class],
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = MilParams::zeros(model.config());
            for g in &grads {
                total.add_scaled(&g.params, 1.0);
                loss_sum += g.loss;
            }
            opt.step(model.params_mut(), &total, lr);
        }
        let train_loss = loss_sum / train_bags.len() as f64;
        if !train_loss.is_finite() || !model.params().squared_norm().is_finite() {
            return Err(Error::Diverged(format!(
                "epoch {epoch}: train loss {train_loss}, lr {lr}"
            )));
        }
        let val_auc = slide_auc(val_bags, &model)?;
        log::info!("epoch {epoch}: loss {train_loss:.5} val_auc {val_auc:.4} lr {lr:.3e}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_auc,
            lr,
        });
        if best.as_ref().is_none_or(|(a, _, _)| val_auc > *a) {
            best = Some((val_auc, epoch, model.clone()));
        }
        schedule.step();
    }
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch: Some(best_epoch),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::AlnLabel;
    use crate::mil::MilConfig;
    use ndarray::Array2;
    use rand::Rng;

    fn toy_bags(n_slides: usize, shift: f64, seed: u64) -> Vec<EmbeddedBag> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_slides)
            .flat_map(|s| {
                let pos = s % 2 == 1;
                let label = if pos { AlnLabel::Low } else { AlnLabel::N0 };
                let mut bags = Vec::new();
                for m in 0..2 {
                    let f = Array2::from_shape_fn((5, 4), |(_, j)| {
                        rng.random_range(-1.0..1.0) + if pos && j == 0 { shift } else { 0.0 }
                    });
                    bags.push(EmbeddedBag {
                        bag_id: format!("s{seed}-{s}#{m}"),
                        slide_id: format!("s{seed}-{s}"),
                        features: f,
                        clinical: None,
                        label: Some(label),
                    });
                }
                bags
            })
            .collect()
    }

    fn fresh_model() -> MilModel {
        let mut cfg = MilConfig::new(4, 0, 2);
        cfg.attention_hidden = 8;
        MilModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let m = fresh_model();
        let out = train(&[], &[], m.clone(), &cfg).unwrap();
        assert_eq!(out.best, m);
        assert!(out.history.is_empty());
        assert_eq!(out.best_epoch, None);
    }

    #[test]
    fn single_class_validation_fails_up_front() {
        let tr = toy_bags(6, 2.0, 1);
        let va: Vec<_> = toy_bags(6, 2.0, 2)
            .into_iter()
            .filter(|b| b.label == Some(AlnLabel::N0))
            .collect();
        let err = train(&tr, &va, fresh_model(), &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("single class"));
    }

    #[test]
    fn overlapping_cohorts_are_rejected() {
        let tr = toy_bags(6, 2.0, 1);
        assert!(train(&tr, &tr, fresh_model(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn learns_and_is_deterministic() {
        let tr = toy_bags(20, 2.5, 1);
        let va = toy_bags(10, 2.5, 2);
        let cfg = TrainConfig {
            lr_max: 1e-2,
            epochs: 10,
            batch_bags: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(&tr, &va, fresh_model(), &cfg).unwrap();
        let b = train(&tr, &va, fresh_model(), &cfg).unwrap();
        let bits = |h: &[EpochRecord]| h.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.history), bits(&b.history));
        assert_eq!(a.best, b.best);
        assert!(a.history.last().unwrap().val_auc > 0.9);
        let best = a.history.iter().map(|r| r.val_auc).fold(f64::MIN, f64::max);
        let first_best = a.history.iter().find(|r| r.val_auc == best).unwrap().epoch;
        assert_eq!(a.best_epoch, Some(first_best));
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_gradient() {
        let mut m = fresh_model();
        let zero = MilParams::zeros(m.config());
        let mut opt = Adam::new(m.params(), AdamConfig::default());
        let mut norm = m.params().squared_norm();
        for _ in 0..20 {
            opt.step(m.params_mut(), &zero, 1e-4);
            let next = m.params().squared_norm();
            assert!(next < norm);
            norm = next;
        }
    }
}
