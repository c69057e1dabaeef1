//! Per-patch histograms of nucleus features stacked into one matrix per
//! feature.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::morphometry::{PatchMorphometry, FEATURE_NAMES, N_FEATURES, ORIENTATION};
use crate::error::{Error, Result};
use crate::ingest::AlnLabel;

pub const DEFAULT_BINS: usize = 10;

/// Linear-interpolation percentile of unsorted data, `q` in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    Some(if i + 1 < v.len() {
        v[i] + frac * (v[i + 1] - v[i])
    } else {
        v[i]
    })
}

/// Histogram ranges, one per feature, frozen on a training cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanges {
    pub lo: [f64; N_FEATURES],
    pub hi: [f64; N_FEATURES],
}

impl FeatureRanges {
    /// 1st to 99th percentiles of every feature over `patches`; orientation
    /// keeps its natural [-90, 90) range. Density is taken per patch.
    pub fn fit<'a>(patches: impl IntoIterator<Item = &'a PatchMorphometry>) -> Result<Self> {
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); N_FEATURES];
        for p in patches {
            values[super::morphometry::DENSITY].push(p.density);
            for n in &p.nuclei {
                for (i, vals) in values.iter_mut().enumerate() {
                    if i != super::morphometry::DENSITY {
                        if let Some(v) = n.value(i, p.density) {
                            vals.push(v);
                        }
                    }
                }
            }
        }
        let mut lo = [0.0; N_FEATURES];
        let mut hi = [0.0; N_FEATURES];
        for i in 0..N_FEATURES {
            if i == ORIENTATION {
                lo[i] = -90.0;
                hi[i] = 90.0;
                continue;
            }
            lo[i] = percentile(&values[i], 1.0).ok_or_else(|| {
                Error::invalid(format!(
                    "no observations of {} to fit ranges",
                    FEATURE_NAMES[i]
                ))
            })?;
            hi[i] = percentile(&values[i], 99.0).expect("non-empty");
        }
        Ok(FeatureRanges { lo, hi })
    }

    /// Bin of `v` for feature `i`; values outside the range go to the edge
    /// bins and a degenerate range maps everything to bin 0.
    pub fn bin(&self, i: usize, v: f64, bins: usize) -> usize {
        let (lo, hi) = (self.lo[i], self.hi[i]);
        if !(hi > lo) {
            return 0;
        }
        let b = ((v - lo) / (hi - lo) * bins as f64).floor();
        b.clamp(0.0, (bins - 1) as f64) as usize
    }
}

/// `N_FEATURES` matrices of shape (patches, bins) for one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct NucleusFeatureBag {
    pub slide_id: String,
    pub label: Option<AlnLabel>,
    pub origins: Vec<(u32, u32)>,
    pub matrices: Vec<Array2<f64>>,
    /// Per feature, the patch rows left all-zero for lack of observations.
    pub zero_rows: Vec<Vec<usize>>,
}

impl NucleusFeatureBag {
    pub fn n_patches(&self) -> usize {
        self.origins.len()
    }

    /// Mean histogram over the non-zero rows of each matrix; all-zero when
    /// every row is empty.
    pub fn mean_histograms(&self) -> Vec<Vec<f64>> {
        self.matrices
            .iter()
            .zip(&self.zero_rows)
            .map(|(m, zeros)| {
                let bins = m.ncols();
                let used = m.nrows() - zeros.len();
                let mut out = vec![0.0; bins];
                if used == 0 {
                    return out;
                }
                for (r, row) in m.rows().into_iter().enumerate() {
                    if !zeros.contains(&r) {
                        for (o, v) in out.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                out.iter_mut().for_each(|o| *o /= used as f64);
                out
            })
            .collect()
    }
}

pub fn build_feature_bags(
    slide_id: &str,
    label: Option<AlnLabel>,
    patches: &[PatchMorphometry],
    ranges: &FeatureRanges,
    bins: usize,
) -> Result<NucleusFeatureBag> {
    if bins == 0 {
        return Err(Error::invalid("histograms need at least one bin"));
    }
    let mut matrices = vec![Array2::<f64>::zeros((patches.len(), bins)); N_FEATURES];
    let mut zero_rows = vec![Vec::new(); N_FEATURES];
    for (r, p) in patches.iter().enumerate() {
        for (i, m) in matrices.iter_mut().enumerate() {
            let vals: Vec<f64> = p
                .nuclei
                .iter()
                .filter_map(|n| n.value(i, p.density))
                .collect();
            // density is one value per patch, counted once
            let vals = if i == super::morphometry::DENSITY && !vals.is_empty() {
                vec![p.density]
            } else {
                vals
            };
            if vals.is_empty() {
                zero_rows[i].push(r);
                continue;
            }
            let w = 1.0 / vals.len() as f64;
            for v in vals {
                m[[r, ranges.bin(i, v, bins)]] += w;
            }
        }
    }
    let flagged: usize = zero_rows.iter().map(Vec::len).sum();
    if flagged > 0 {
        log::debug!("{slide_id}: {flagged} zero histogram rows");
    }
    Ok(NucleusFeatureBag {
        slide_id: slide_id.to_string(),
        label,
        origins: patches.iter().map(|p| p.origin).collect(),
        matrices,
        zero_rows,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    slide_id: String,
    label: Option<AlnLabel>,
    origins: Vec<(u32, u32)>,
    zero_rows: Vec<Vec<usize>>,
    files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BagIndex {
    features: Vec<String>,
    bins: usize,
    ranges: FeatureRanges,
    slides: Vec<IndexEntry>,
}

/// Writes `<dir>/<slide>/<feature>.npy` plus `<dir>/index.json`.
pub fn write_feature_bags(
    dir: &Path,
    bags: &[NucleusFeatureBag],
    ranges: &FeatureRanges,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut slides = Vec::new();
    for b in bags {
        let sdir = dir.join(&b.slide_id);
        std::fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let mut files = Vec::new();
        for (name, m) in FEATURE_NAMES.iter().zip(&b.matrices) {
            let rel = format!("{}/{name}.npy", b.slide_id);
            let path = dir.join(&rel);
            ndarray_npy::write_npy(&path, m)
                .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
            files.push(rel);
        }
        slides.push(IndexEntry {
            slide_id: b.slide_id.clone(),
            label: b.label,
            origins: b.origins.clone(),
            zero_rows: b.zero_rows.clone(),
            files,
        });
    }
    let index = BagIndex {
        features: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        bins: bags.first().map_or(DEFAULT_BINS, |b| b.matrices[0].ncols()),
        ranges: ranges.clone(),
        slides,
    };
    let path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads an archive written by [`write_feature_bags`].
pub fn read_feature_bags(dir: &Path) -> Result<(Vec<NucleusFeatureBag>, FeatureRanges)> {
    let path = dir.join("index.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: BagIndex = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let bags = index
        .slides
        .into_iter()
        .map(|s| {
            let matrices = s
                .files
                .iter()
                .map(|f| {
                    let p = dir.join(f);
                    ndarray_npy::read_npy::<_, Array2<f64>>(&p)
                        .map_err(|e| Error::invalid(format!("{}: {e}", p.display())))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(NucleusFeatureBag {
                slide_id: s.slide_id,
                label: s.label,
                origins: s.origins,
                matrices,
                zero_rows: s.zero_rows,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((bags, index.ranges))
}
