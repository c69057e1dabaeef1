//! Cache of instance embeddings keyed by patch reference.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::embedder::{InstanceEmbedder, Normalization};
use crate::bagging::Bag;
use crate::error::{Error, Result};
use crate::inference::EmbeddedBag;

/// Per-dimension standardization fitted on training instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    /// Population standard deviation; constant dimensions keep scale 1.
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(bags: &[EmbeddedBag]) -> Result<Self> {
        let d = bags
            .first()
            .ok_or_else(|| Error::invalid("cannot fit a scaler on no bags"))?
            .features
            .ncols();
        let rows: Vec<ndarray::ArrayView1<'_, f64>> =
            bags.iter().flat_map(|b| b.features.rows()).collect();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for r in &rows {
            var.iter_mut()
                .zip(r)
                .zip(&mean)
                .for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
        }
        let std = var
            .into_iter()
            .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(FeatureScaler { mean, std })
    }

    pub fn apply(&self, bag: &mut EmbeddedBag) -> Result<()> {
        if bag.features.ncols() != self.mean.len() {
            return Err(Error::Shape {
                expected: format!("{} feature columns", self.mean.len()),
                actual: format!("{}", bag.features.ncols()),
            });
        }
        for mut row in bag.features.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreIndex {
    embedder: String,
    dim: usize,
    refs: Vec<String>,
}

/// One embedding row per unique patch reference.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub embedder: String,
    pub refs: Vec<String>,
    pub features: Array2<f64>,
    index: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn new(
        embedder: impl Into<String>,
        refs: Vec<String>,
        features: Array2<f64>,
    ) -> Result<Self> {
        if refs.len() != features.nrows() {
            return Err(Error::Shape {
                expected: format!("{} rows", refs.len()),
                actual: format!("{}", features.nrows()),
            });
        }
        let index: HashMap<String, usize> = refs
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i))
            .collect();
        if index.len() != refs.len() {
            return Err(Error::invalid(
                "duplicate patch references in feature store",
            ));
        }
        Ok(FeatureStore {
            embedder: embedder.into(),
            refs,
            features,
            index,
        })
    }

    /// Embeds every distinct reference in `bags`; `root` resolves the
    /// relative patch paths.
    pub fn build(
        bags: &[Bag],
        root: &Path,
        embedder: &InstanceEmbedder,
        norm: &Normalization,
    ) -> Result<Self> {
        let mut refs: Vec<String> = bags
            .iter()
            .flat_map(|b| b.instance_refs.iter().cloned())
            .collect();
        refs.sort();
        refs.dedup();
        let rows = refs
            .par_iter()
            .map(|r| {
                let path = root.join(r);
                let img = image::open(&path)
                    .map_err(|e| Error::image(&path, e))?
                    .into_rgb8();
                embedder.embed(&norm.apply(&img))
            })
            .collect::<Result<Vec<_>>>()?;
        let d = embedder.feature_dim();
        let features =
            Array2::from_shape_vec((refs.len(), d), rows.concat()).expect("rows have width D");
        FeatureStore::new(embedder.backbone().name(), refs, features)
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn get(&self, r: &str) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.index.get(r).map(|&i| self.features.row(i))
    }

    pub fn embed_bag(&self, bag: &Bag) -> Result<EmbeddedBag> {
        let mut features = Array2::zeros((bag.instance_refs.len(), self.dim()));
        for (k, r) in bag.instance_refs.iter().enumerate() {
            let row = self.get(r).ok_or_else(|| {
                Error::invalid(format!(
                    "bag {}: patch {r} is not in the feature store",
                    bag.bag_id
                ))
            })?;
            features.row_mut(k).assign(&row);
        }
        Ok(EmbeddedBag {
            bag_id: bag.bag_id.clone(),
            slide_id: bag.slide_id.clone(),
            features,
            clinical: bag.clinical_vec.clone(),
            label: bag.label,
        })
    }

    /// Writes `features.npy` and `index.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let npy = dir.join("features.npy");
        ndarray_npy::write_npy(&npy, &self.features)
            .map_err(|e| Error::invalid(format!("{}: {e}", npy.display())))?;
        let path = dir.join("index.json");
        let index = StoreIndex {
            embedder: self.embedder.clone(),
            dim: self.dim(),
            refs: self.refs.clone(),
        };
        let text = serde_json::to_string(&index).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: StoreIndex = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let npy = dir.join("features.npy");
        let features: Array2<f64> = ndarray_npy::read_npy(&npy)
            .map_err(|e| Error::invalid(format!("{}: {e}", npy.display())))?;
        if features.ncols() != index.dim {
            return Err(Error::Shape {
                expected: format!("{} columns", index.dim),
                actual: format!("{}", features.ncols()),
            });
        }
        FeatureStore::new(index.embedder, index.refs, features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaler_standardizes_training_rows() {
        let bag = EmbeddedBag {
            bag_id: "a#0".into(),
            slide_id: "a".into(),
            features: ndarray::array![[1.0, 5.0], [3.0, 5.0]],
            clinical: None,
            label: None,
        };
        let sc = FeatureScaler::fit(std::slice::from_ref(&bag)).unwrap();
        assert_eq!(sc.mean, vec![2.0, 5.0]);
        assert_eq!(sc.std, vec![1.0, 1.0]);
        let mut b = bag.clone();
        sc.apply(&mut b).unwrap();
        assert_eq!(b.features, ndarray::array![[-1.0, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 / 7.0);
        let s = FeatureStore::new("toy", vec!["a".into(), "b".into(), "c".into()], f).unwrap();
        s.save(dir.path()).unwrap();
        let back = FeatureStore::load(dir.path()).unwrap();
        assert_eq!(back, s);
        let bag = Bag {
            bag_id: "x#0".into(),
            slide_id: "x".into(),
            instance_refs: vec!["c".into(), "a".into(), "c".into()],
            clinical_vec: None,
            label: None,
        };
        let e = back.embed_bag(&bag).unwrap();
        assert_eq!(e.features.row(0), s.features.row(2));
        assert_eq!(e.features.row(1), s.features.row(0));
    }
}
