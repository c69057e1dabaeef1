use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

pub const ATTENTION_HIDDEN: usize = 128;
pub const CLINICAL_REPEAT: usize = 10;
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilConfig {
    /// Instance feature width `D`.
    pub feature_dim: usize,
    /// Attention hidden width `H`.
    pub attention_hidden: usize,
    /// Encoded clinical width `C`; 0 disables fusion.
    pub clinical_dim: usize,
    pub n_classes: usize,
    pub clinical_repeat: usize,
}

impl MilConfig {
    pub fn new(feature_dim: usize, clinical_dim: usize, n_classes: usize) -> Self {
        MilConfig {
            feature_dim,
            attention_hidden: ATTENTION_HIDDEN,
            clinical_dim,
            n_classes,
            clinical_repeat: CLINICAL_REPEAT,
        }
    }

    pub fn classifier_width(&self) -> usize {
        self.feature_dim + self.clinical_repeat * self.clinical_dim
    }

    fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.attention_hidden == 0 {
            return Err(Error::invalid(
                "feature and attention widths must be positive",
            ));
        }
        if !(2..=3).contains(&self.n_classes) {
            return Err(Error::invalid(format!(
                "{} classes; expected 2 or 3",
                self.n_classes
            )));
        }
        Ok(())
    }
}

/// Attention network `a_k = w . tanh(V h_k + c)` and linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MilParams {
    /// `H x D`
    pub att_v: Array2<f64>,
    pub att_c: Array1<f64>,
    pub att_w: Array1<f64>,
    /// `K x F`
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
}

impl MilParams {
    pub const NAMES: [&'static str; 5] = ["att_v", "att_c", "att_w", "cls_w", "cls_b"];

    pub fn zeros(cfg: &MilConfig) -> Self {
        let (h, d, k, f) = (
            cfg.attention_hidden,
            cfg.feature_dim,
            cfg.n_classes,
            cfg.classifier_width(),
        );
        MilParams {
            att_v: Array2::zeros((h, d)),
            att_c: Array1::zeros(h),
            att_w: Array1::zeros(h),
            cls_w: Array2::zeros((k, f)),
            cls_b: Array1::zeros(k),
        }
    }

    pub fn shapes(cfg: &MilConfig) -> [Vec<usize>; 5] {
        let (h, d, k, f) = (
            cfg.attention_hidden,
            cfg.feature_dim,
            cfg.n_classes,
            cfg.classifier_width(),
        );
        [vec![h, d], vec![h], vec![h], vec![k, f], vec![k]]
    }
}

impl ParamSet for MilParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.att_v.as_slice().expect("standard layout"),
            self.att_c.as_slice().expect("standard layout"),
            self.att_w.as_slice().expect("standard layout"),
            self.cls_w.as_slice().expect("standard layout"),
            self.cls_b.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.att_v.as_slice_mut().expect("standard layout"),
            self.att_c.as_slice_mut().expect("standard layout"),
            self.att_w.as_slice_mut().expect("standard layout"),
            self.cls_w.as_slice_mut().expect("standard layout"),
            self.cls_b.as_slice_mut().expect("standard layout"),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionOutput {
    pub weights: Vec<f64>,
    pub pooled: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagPrediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub attention: AttentionOutput,
}

#[derive(Debug, Clone)]
pub struct BagGradient {
    pub loss: f64,
    pub params: MilParams,
    /// Gradient with respect to the `N x D` instance features.
    pub features: Array2<f64>,
}

/// Numerically stable softmax. The normalizer is summed in sorted order so
/// permuting the input permutes the output bit for bit.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let mut sorted = e.clone();
    sorted.sort_by(f64::total_cmp);
    let s: f64 = sorted.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-ln p[label]`, with `p[label]` floored at 1e-12.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = *probs.get(label).ok_or_else(|| {
        Error::invalid(format!(
            "label {label} out of range for {} classes",
            probs.len()
        ))
    })?;
    if p < PROB_FLOOR {
        log::warn!("p(label)={p:e} clamped to {PROB_FLOOR:e}");
    }
    Ok(-p.max(PROB_FLOOR).ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    config: MilConfig,
    params: MilParams,
}

struct Attended {
    /// `N x H` hidden activations.
    hidden: Array2<f64>,
    out: AttentionOutput,
}

impl MilModel {
    /// Linear layers use uniform `±1/sqrt(fan_in)` initialisation.
    pub fn new<R: Rng + ?Sized>(config: MilConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = MilParams::zeros(&config);
        let fill = |a: &mut [f64], fan_in: usize, rng: &mut R| {
            let b = 1.0 / (fan_in as f64).sqrt();
            let u = Uniform::new_inclusive(-b, b).expect("finite bound");
            a.iter_mut().for_each(|v| *v = u.sample(rng));
        };
        let (d, h, f) = (
            config.feature_dim,
            config.attention_hidden,
            config.classifier_width(),
        );
        let mut t = params.tensors_mut();
        fill(t[0], d, rng);
        fill(t[1], d, rng);
        fill(t[2], h, rng);
        fill(t[3], f, rng);
        fill(t[4], f, rng);
        Ok(MilModel { config, params })
    }

    pub fn from_parts(config: MilConfig, params: MilParams) -> Result<Self> {
        config.validate()?;
        let expected = MilParams::shapes(&config);
        let actual = [
            params.att_v.shape().to_vec(),
            params.att_c.shape().to_vec(),
            params.att_w.shape().to_vec(),
            params.cls_w.shape().to_vec(),
            params.cls_b.shape().to_vec(),
        ];
        if expected != actual {
            return Err(Error::Shape {
                expected: format!("{expected:?}"),
                actual: format!("{actual:?}"),
            });
        }
        Ok(MilModel { config, params })
    }

    pub fn config(&self) -> &MilConfig {
        &self.config
    }

    pub fn params(&self) -> &MilParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut MilParams {
        &mut self.params
    }

    fn check_features(&self, features: &ArrayView2<f64>) -> Result<()> {
        if features.nrows() == 0 {
            return Err(Error::invalid(
                "attention pooling needs at least one instance",
            ));
        }
        if features.ncols() != self.config.feature_dim {
            return Err(Error::Shape {
                expected: format!("N x {}", self.config.feature_dim),
                actual: format!("{} x {}", features.nrows(), features.ncols()),
            });
        }
        Ok(())
    }

    fn attend(&self, features: ArrayView2<f64>) -> Result<Attended> {
        self.check_features(&features)?;
        let p = &self.params;
        let mut hidden = features.dot(&p.att_v.t());
        hidden += &p.att_c;
        hidden.mapv_inplace(f64::tanh);
        let scores = hidden.dot(&p.att_w);
        let weights = softmax(scores.as_slice().expect("contiguous"));
        let pooled = Array1::from(weights.clone()).dot(&features).to_vec();
        Ok(Attended {
            hidden,
            out: AttentionOutput { weights, pooled },
        })
    }

    pub fn attention_pool(&self, features: ArrayView2<f64>) -> Result<AttentionOutput> {
        Ok(self.attend(features)?.out)
    }

    /// `concat(pooled, clinical repeated clinical_repeat times)`.
    pub fn classifier_input(&self, pooled: &[f64], clinical: Option<&[f64]>) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if pooled.len() != cfg.feature_dim {
            return Err(Error::Shape {
                expected: format!("pooled width {}", cfg.feature_dim),
                actual: pooled.len().to_string(),
            });
        }
        let mut x = Vec::with_capacity(cfg.classifier_width());
        x.extend_from_slice(pooled);
        match (cfg.clinical_dim, clinical) {
            (0, None) => {}
            (0, Some(c)) => {
                return Err(Error::Shape {
                    expected: "no clinical vector (model trained without fusion)".into(),
                    actual: format!("clinical width {}", c.len()),
                })
            }
            (w, Some(c)) if c.len() == w => {
                for _ in 0..cfg.clinical_repeat {
                    x.extend_from_slice(c);
                }
            }
            (w, c) => {
                return Err(Error::Shape {
                    expected: format!("clinical width {w}"),
                    actual: c.map_or("absent".into(), |c| c.len().to_string()),
                })
            }
        }
        Ok(x)
    }

    /// Returns `(logits, probs)`.
    pub fn fuse_and_classify(
        &self,
        pooled: &[f64],
        clinical: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.classifier_input(pooled, clinical)?;
        let logits = (self.params.cls_w.dot(&Array1::from(x)) + &self.params.cls_b).to_vec();
        let probs = softmax(&logits);
        Ok((logits, probs))
    }

    pub fn forward(
        &self,
        features: ArrayView2<f64>,
        clinical: Option<&[f64]>,
    ) -> Result<BagPrediction> {
        let attention = self.attention_pool(features)?;
        let (logits, probs) = self.fuse_and_classify(&attention.pooled, clinical)?;
        Ok(BagPrediction {
            logits,
            probs,
            attention,
        })
    }

    /// Cross-entropy of one bag and its gradients, all scaled by `scale`
    /// (the reported loss is unscaled).
    pub fn loss_and_grad(
        &self,
        features: ArrayView2<f64>,
        clinical: Option<&[f64]>,
        label: usize,
        scale: f64,
    ) -> Result<BagGradient> {
        let cfg = &self.config;
        let p = &self.params;
        let Attended { hidden, out } = self.attend(features)?;
        let x = Array1::from(self.classifier_input(&out.pooled, clinical)?);
        let logits = p.cls_w.dot(&x) + &p.cls_b;
        let probs = softmax(logits.as_slice().expect("contiguous"));
        let loss = cross_entropy(&probs, label)?;

        let mut g = MilParams::zeros(cfg);
        let mut dlogits = Array1::from(probs);
        dlogits[label] -= 1.0;
        dlogits *= scale;
        g.cls_w = dlogits
            .view()
            .insert_axis(Axis(1))
            .dot(&x.view().insert_axis(Axis(0)));
        g.cls_b = dlogits.clone();
        let dx = p.cls_w.t().dot(&dlogits);
        let dz = dx.slice(ndarray::s![..cfg.feature_dim]);

        let w = Array1::from(out.weights);
        let dw = features.dot(&dz);
        let mean_dw = w.dot(&dw);
        let da = &w * &(dw - mean_dw);
        g.att_w = hidden.t().dot(&da);
        // dpre[k, j] = da[k] * u[j] * (1 - t[k, j]^2)
        let mut dpre = hidden.mapv(|t| 1.0 - t * t);
        dpre *= &p.att_w;
        dpre *= &da.view().insert_axis(Axis(1));
        g.att_v = dpre.t().dot(&features);
        g.att_c = dpre.sum_axis(Axis(0));

        let mut dfeat = w.view().insert_axis(Axis(1)).dot(&dz.insert_axis(Axis(0)));
        dfeat += &dpre.dot(&p.att_v);
        g.att_v = g.att_v.as_standard_layout().into_owned();
        g.cls_w = g.cls_w.as_standard_layout().into_owned();
        Ok(BagGradient {
            loss,
            params: g,
            features: dfeat,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(d: usize, c: usize, k: usize, seed: u64) -> MilModel {
        let mut cfg = MilConfig::new(d, c, k);
        cfg.attention_hidden = 6;
        MilModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_features(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn singleton_bag_gets_full_weight() {
        let m = model(4, 0, 2, 1);
        let f = array![[0.3, -0.2, 0.9, 1.5]];
        let out = m.attention_pool(f.view()).unwrap();
        assert_eq!(out.weights, vec![1.0]);
        assert_eq!(out.pooled, f.row(0).to_vec());
    }

    #[test]
    fn identical_rows_share_weight() {
        let m = model(4, 0, 2, 2);
        let f = array![[0.3, -0.2, 0.9, 1.5], [0.3, -0.2, 0.9, 1.5]];
        let out = m.attention_pool(f.view()).unwrap();
        assert!((out.weights[0] - 0.5).abs() < 1e-6 && (out.weights[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn pooled_matches_explicit_sum() {
        let m = model(7, 0, 2, 3);
        let f = random_features(5, 7, 4);
        let out = m.attention_pool(f.view()).unwrap();
        for j in 0..7 {
            let direct: f64 = (0..5).map(|k| out.weights[k] * f[[k, j]]).sum();
            assert!((direct - out.pooled[j]).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_bag_is_rejected() {
        let m = model(4, 0, 2, 1);
        assert!(m.attention_pool(Array2::zeros((0, 4)).view()).is_err());
        assert!(m.attention_pool(Array2::zeros((2, 3)).view()).is_err());
    }

    #[test]
    fn classifier_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fused = MilModel::new(MilConfig::new(512, 14, 2), &mut rng).unwrap();
        assert_eq!(fused.params().cls_w.ncols(), 652);
        let x = fused
            .classifier_input(&[0.0; 512], Some(&[1.0; 14]))
            .unwrap();
        assert_eq!(x.len(), 652);
        assert!(fused
            .classifier_input(&[0.0; 512], Some(&[1.0; 13]))
            .is_err());
        assert!(fused.classifier_input(&[0.0; 512], None).is_err());
        let plain = MilModel::new(MilConfig::new(512, 0, 2), &mut rng).unwrap();
        assert_eq!(plain.params().cls_w.ncols(), 512);
        assert!(plain
            .classifier_input(&[0.0; 512], Some(&[1.0; 14]))
            .is_err());
    }

    #[test]
    fn zero_input_gives_softmax_of_bias() {
        let m = model(5, 3, 3, 9);
        let (_, probs) = m.fuse_and_classify(&[0.0; 5], Some(&[0.0; 3])).unwrap();
        let b = &m.params().cls_b;
        let z: f64 = b.iter().map(|v| v.exp()).sum();
        for (p, bv) in probs.iter().zip(b) {
            assert!((p - bv.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(cross_entropy(&[1.0, 0.0], 0).unwrap().abs() < 1e-9);
        assert!((cross_entropy(&[0.5, 0.5], 1).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&[0.0, 1.0], 0).unwrap() - 1e12f64.ln()).abs() < 1e-9);
        let p = [0.2, 0.3, 0.5];
        for (i, v) in p.iter().enumerate() {
            assert!((cross_entropy(&p, i).unwrap() + v.ln()).abs() < 1e-15);
        }
        assert!(cross_entropy(&p, 3).is_err());
    }

    fn loss_of(m: &MilModel, f: &Array2<f64>, c: Option<&[f64]>, label: usize) -> f64 {
        let pred = m.forward(f.view(), c).unwrap();
        cross_entropy(&pred.probs, label).unwrap()
    }

    #[test]
    fn gradients_match_central_differences() {
        let eps = 1e-4;
        for (clin, k) in [(0usize, 2usize), (2, 3)] {
            let m = model(4, clin, k, 11);
            let f = random_features(3, 4, 12);
            let c: Vec<f64> = (0..clin).map(|i| 0.5 - i as f64).collect();
            let c = (clin > 0).then_some(c.as_slice());
            let label = k - 1;
            let g = m.loss_and_grad(f.view(), c, label, 1.0).unwrap();
            for (t, name) in MilParams::NAMES.iter().enumerate() {
                let analytic = g.params.tensors()[t].to_vec();
                for (i, a) in analytic.iter().enumerate() {
                    let mut plus = m.clone();
                    plus.params_mut().tensors_mut()[t][i] += eps;
                    let mut minus = m.clone();
                    minus.params_mut().tensors_mut()[t][i] -= eps;
                    let numeric = (loss_of(&plus, &f, c, label) - loss_of(&minus, &f, c, label))
                        / (2.0 * eps);
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    assert!(rel < 1e-3, "{name}[{i}]: analytic {a} numeric {numeric}");
                }
            }
            for i in 0..3 {
                for j in 0..4 {
                    let mut fp = f.clone();
                    fp[[i, j]] += eps;
                    let mut fm = f.clone();
                    fm[[i, j]] -= eps;
                    let numeric =
                        (loss_of(&m, &fp, c, label) - loss_of(&m, &fm, c, label)) / (2.0 * eps);
                    let a = g.features[[i, j]];
                    assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6) < 1e-3);
                }
            }
        }
    }

    #[test]
    fn gradient_scale_is_linear() {
        let m = model(4, 0, 2, 5);
        let f = random_features(3, 4, 6);
        let g1 = m.loss_and_grad(f.view(), None, 1, 1.0).unwrap();
        let g2 = m.loss_and_grad(f.view(), None, 1, 0.25).unwrap();
        assert_eq!(g1.loss, g2.loss);
        for (a, b) in g1.params.tensors().iter().zip(g2.params.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x * 0.25 - y).abs() < 1e-15);
            }
        }
    }
}
