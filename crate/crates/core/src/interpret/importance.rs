//! Feature importance by re-training attention pooling over the eight
//! nucleus-feature instances of each slide.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::feature_bags::NucleusFeatureBag;
use super::morphometry::{wrap_axial, PatchMorphometry, FEATURE_NAMES, N_FEATURES, ORIENTATION};
use crate::error::{Error, Result};
use crate::mil::{MilConfig, MilModel, MilParams, ParamSet};
use crate::stats::mann_whitney_u;
use crate::training::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMode {
    /// Compare out-of-fold per-slide attention weights between classes.
    SlideWeights,
    /// Compare per-slide mean feature values between classes.
    RawFeatures,
}

impl std::str::FromStr for PValueMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slide-weights" | "slide_weights" | "weights" => Ok(PValueMode::SlideWeights),
            "raw-features" | "raw_features" | "raw" => Ok(PValueMode::RawFeatures),
            _ => Err(Error::invalid(format!("unknown p-value mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImportanceConfig {
    pub projector_dim: usize,
    pub folds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: PValueMode,
    /// Also report Holm-adjusted p-values.
    pub holm: bool,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        ImportanceConfig {
            projector_dim: 16,
            folds: 5,
            epochs: 200,
            lr: 5e-3,
            weight_decay: 1e-4,
            seed: 0,
            mode: PValueMode::SlideWeights,
            holm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    /// Mean out-of-fold attention weight over all slides.
    pub mean_weight: f64,
    /// Mean weight among N0 slides and among N+ slides.
    pub mean_weight_negative: f64,
    pub mean_weight_positive: f64,
    pub p_value: f64,
    pub p_holm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideWeights {
    pub slide_id: String,
    pub positive: bool,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub mode: PValueMode,
    pub features: Vec<FeatureImportance>,
    pub slides: Vec<SlideWeights>,
}

impl ImportanceReport {
    /// Feature indices by decreasing mean attention weight.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.features.len()).collect();
        idx.sort_by(|&a, &b| {
            self.features[b]
                .mean_weight
                .total_cmp(&self.features[a].mean_weight)
        });
        idx
    }

    /// `density (p = 0.015), circumference (p = 0.009), ...` in ranking order.
    pub fn render(&self) -> String {
        self.ranking()
            .into_iter()
            .map(|i| {
                let f = &self.features[i];
                format!("{} ({})", f.feature.replace('_', " "), p_phrase(f.p_value))
            })
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// `p = 0.009`, or `p < 0.001`.
pub fn p_phrase(p: f64) -> String {
    if p < 1e-3 {
        "p < 0.001".to_string()
    } else {
        format!("p = {p:.3}")
    }
}

/// Holm step-down adjustment, returned in input order.
pub fn holm(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running = 0.0f64;
    for (rank, &i) in idx.iter().enumerate() {
        running = running.max(((m - rank) as f64 * p[i]).min(1.0));
        out[i] = running;
    }
    out
}

/// Per-slide mean of every feature over all nuclei (density over patches,
/// orientation as an axial mean).
pub fn slide_feature_means(patches: &[PatchMorphometry]) -> [f64; N_FEATURES] {
    let mut out = [f64::NAN; N_FEATURES];
    for (i, o) in out.iter_mut().enumerate() {
        if i == super::morphometry::DENSITY {
            if !patches.is_empty() {
                *o = patches.iter().map(|p| p.density).sum::<f64>() / patches.len() as f64;
            }
            continue;
        }
        let vals: Vec<f64> = patches
            .iter()
            .flat_map(|p| p.nuclei.iter().filter_map(move |n| n.value(i, p.density)))
            .collect();
        if vals.is_empty() {
            continue;
        }
        *o = if i == ORIENTATION {
            let (s, c) = vals.iter().fold((0.0, 0.0), |(s, c), v| {
                let t = (2.0 * v).to_radians();
                (s + t.sin(), c + t.cos())
            });
            wrap_axial(s.atan2(c).to_degrees() / 2.0)
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        };
    }
    out
}

/// One row per feature: its mean histogram followed by a one-hot feature id.
pub fn instance_matrix(bag: &NucleusFeatureBag) -> Array2<f64> {
    let hists = bag.mean_histograms();
    let bins = hists.first().map_or(0, Vec::len);
    let mut x = Array2::zeros((N_FEATURES, bins + N_FEATURES));
    for (i, h) in hists.iter().enumerate() {
        for (b, v) in h.iter().enumerate() {
            x[[i, b]] = *v;
        }
        x[[i, bins + i]] = 1.0;
    }
    x
}

/// Trainable `tanh` projector in front of an attention MIL head.
#[derive(Debug, Clone)]
pub struct FeatureNet {
    pub proj_w: Array2<f64>,
    pub proj_b: Array1<f64>,
    pub mil: MilModel,
}

impl ParamSet for FeatureNet {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = vec![
            self.proj_w.as_slice().expect("standard layout"),
            self.proj_b.as_slice().expect("standard layout"),
        ];
        t.extend(self.mil.params().tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = vec![
            self.proj_w.as_slice_mut().expect("standard layout"),
            self.proj_b.as_slice_mut().expect("standard layout"),
        ];
        t.extend(self.mil.params_mut().tensors_mut());
        t
    }
}

impl FeatureNet {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        projector_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (input_dim as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let proj_w = Array2::from_shape_fn((projector_dim, input_dim), |_| u.sample(rng));
        let proj_b = Array1::from_shape_fn(projector_dim, |_| u.sample(rng));
        let mil = MilModel::new(MilConfig::new(projector_dim, 0, 2), rng)?;
        Ok(FeatureNet {
            proj_w,
            proj_b,
            mil,
        })
    }

    fn zeros_like(&self) -> Result<Self> {
        Ok(FeatureNet {
            proj_w: Array2::zeros(self.proj_w.raw_dim()),
            proj_b: Array1::zeros(self.proj_b.len()),
            mil: MilModel::from_parts(*self.mil.config(), MilParams::zeros(self.mil.config()))?,
        })
    }

    fn project(&self, x: &Array2<f64>) -> Array2<f64> {
        (x.dot(&self.proj_w.t()) + &self.proj_b).mapv(f64::tanh)
    }

    /// Attention weights over the feature instances of one slide.
    pub fn attention(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.mil.attention_pool(self.project(x).view())?.weights)
    }

    /// Loss of one slide and its gradient scaled by `scale`, accumulated
    /// into `grad`.
    fn accumulate(
        &self,
        x: &Array2<f64>,
        label: usize,
        scale: f64,
        grad: &mut FeatureNet,
    ) -> Result<f64> {
        let e = self.project(x);
        let g = self.mil.loss_and_grad(e.view(), None, label, scale)?;
        let dpre = &g.features * &e.mapv(|t| 1.0 - t * t);
        grad.proj_w += &dpre.t().dot(x);
        grad.proj_b += &dpre.sum_axis(Axis(0));
        let mut mil_grad = grad.mil.params().clone();
        mil_grad.add_scaled(&g.params, 1.0);
        *grad.mil.params_mut() = mil_grad;
        Ok(g.loss)
    }
}

/// Stratified fold assignment for binary labels.
fn assign_folds(labels: &[bool], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut fold = vec![0; labels.len()];
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(rng);
        for (j, i) in idx.into_iter().enumerate() {
            fold[i] = j % k;
        }
    }
    fold
}

fn train_net(
    xs: &[&Array2<f64>],
    ys: &[usize],
    input_dim: usize,
    cfg: &ImportanceConfig,
    seed: u64,
) -> Result<FeatureNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = FeatureNet::new(input_dim, cfg.projector_dim, &mut rng)?;
    let mut adam = Adam::new(
        &net,
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let scale = 1.0 / xs.len() as f64;
    for epoch in 0..cfg.epochs {
        let mut grad = net.zeros_like()?;
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            loss += net.accumulate(x, y, scale, &mut grad)? * scale;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "feature-importance loss {loss} at epoch {epoch} (lr {}, {} slides)",
                cfg.lr,
                xs.len()
            )));
        }
        adam.step(&mut net, &grad, cfg.lr);
    }
    Ok(net)
}

/// Cross-fitted attention weights per feature and class comparison.
/// `raw` supplies per-slide feature means for [`PValueMode::RawFeatures`].
pub fn rank_feature_importance(
    bags: &[NucleusFeatureBag],
    raw: Option<&[[f64; N_FEATURES]]>,
    cfg: &ImportanceConfig,
) -> Result<ImportanceReport> {
    let labels: Vec<bool> = bags
        .iter()
        .map(|b| {
            b.label
                .map(|l| l.is_positive())
                .ok_or_else(|| Error::invalid(format!("slide {} has no label", b.slide_id)))
        })
        .collect::<Result<_>>()?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos < 2 || labels.len() - n_pos < 2 {
        return Err(Error::invalid(format!(
            "feature importance needs at least 2 slides per class (have {} N0, {n_pos} N+)",
            labels.len() - n_pos
        )));
    }
    if cfg.folds < 2 {
        return Err(Error::invalid("cross-fitting needs at least 2 folds"));
    }
    if cfg.mode == PValueMode::RawFeatures && raw.is_none_or(|r| r.len() != bags.len()) {
        return Err(Error::invalid(
            "raw-feature mode needs per-slide feature means for every slide",
        ));
    }
    let xs: Vec<Array2<f64>> = bags.iter().map(instance_matrix).collect();
    let input_dim = xs[0].ncols();
    if xs.iter().any(|x| x.ncols() != input_dim) {
        return Err(Error::invalid(
            "feature bags disagree on the histogram width",
        ));
    }
    let ys: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.folds.min(bags.len());
    let folds = assign_folds(&labels, k, &mut rng);

    let mut weights = vec![Vec::new(); bags.len()];
    for f in 0..k {
        let train_idx: Vec<usize> = (0..bags.len()).filter(|&i| folds[i] != f).collect();
        let tx: Vec<&Array2<f64>> = train_idx.iter().map(|&i| &xs[i]).collect();
        let ty: Vec<usize> = train_idx.iter().map(|&i| ys[i]).collect();
        let net = train_net(
            &tx,
            &ty,
            input_dim,
            cfg,
            cfg.seed.wrapping_add(f as u64 + 1),
        )?;
        for i in (0..bags.len()).filter(|&i| folds[i] == f) {
            weights[i] = net.attention(&xs[i])?;
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut features: Vec<FeatureImportance> = (0..N_FEATURES)
        .map(|j| {
            let col: Vec<f64> = weights.iter().map(|w| w[j]).collect();
            let pos: Vec<f64> = col
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l)
                .map(|(v, _)| *v)
                .collect();
            let neg: Vec<f64> = col
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| !l)
                .map(|(v, _)| *v)
                .collect();
            let p_value = match cfg.mode {
                PValueMode::SlideWeights => mann_whitney_u(&pos, &neg)?.p_value,
                PValueMode::RawFeatures => {
                    let r = raw.expect("checked above");
                    let (rp, rn): (Vec<_>, Vec<_>) = (0..bags.len())
                        .filter(|&i| r[i][j].is_finite())
                        .partition(|&i| labels[i]);
                    let rp: Vec<f64> = rp.into_iter().map(|i| r[i][j]).collect();
                    let rn: Vec<f64> = rn.into_iter().map(|i| r[i][j]).collect();
                    if rp.is_empty() || rn.is_empty() {
                        f64::NAN
                    } else {
                        mann_whitney_u(&rp, &rn)?.p_value
                    }
                }
            };
            Ok(FeatureImportance {
                feature: FEATURE_NAMES[j].to_string(),
                mean_weight: mean(&col),
                mean_weight_negative: mean(&neg),
                mean_weight_positive: mean(&pos),
                p_value,
                p_holm: None,
            })
        })
        .collect::<Result<_>>()?;
    if cfg.holm {
        let adj = holm(&features.iter().map(|f| f.p_value).collect::<Vec<_>>());
        for (f, a) in features.iter_mut().zip(adj) {
            f.p_holm = Some(a);
        }
    }
    Ok(ImportanceReport {
        mode: cfg.mode,
        features,
        slides: bags
            .iter()
            .zip(&labels)
            .zip(weights)
            .map(|((b, &positive), weights)| SlideWeights {
                slide_id: b.slide_id.clone(),
                positive,
                weights,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holm_matches_hand_values() {
        let adj = holm(&[0.01, 0.04, 0.03]);
        let expect = [0.03, 0.06, 0.06];
        for (a, e) in adj.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn p_phrase_format() {
        assert_eq!(p_phrase(0.009), "p = 0.009");
        assert_eq!(p_phrase(0.0151), "p = 0.015");
        assert_eq!(p_phrase(0.0002), "p < 0.001");
    }

    #[test]
    fn projector_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((8, 6), |_| rng.random::<f64>());
        let net = FeatureNet::new(6, 4, &mut rng).unwrap();
        let mut grad = net.zeros_like().unwrap();
        net.accumulate(&x, 1, 1.0, &mut grad).unwrap();
        let loss = |n: &FeatureNet| {
            let mut g = n.zeros_like().unwrap();
            n.accumulate(&x, 1, 1.0, &mut g).unwrap()
        };
        for (r, c) in [(0, 0), (2, 5), (3, 1)] {
            let eps = 1e-5;
            let (mut a, mut b) = (net.clone(), net.clone());
            a.proj_w[[r, c]] += eps;
            b.proj_w[[r, c]] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            let an = grad.proj_w[[r, c]];
            assert!((fd - an).abs() <= 1e-6 + 1e-4 * an.abs(), "{fd} vs {an}");
        }
    }
}
