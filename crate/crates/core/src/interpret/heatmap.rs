//! Per-patch attention maps and their colour overlays.

use std::collections::HashMap;

use image::{imageops, Rgb, RgbImage, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Patch;

/// Attention weights of one scored bag, aligned with its patch references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBag {
    pub patch_refs: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapEntry {
    pub origin: (u32, u32),
    pub extent: u32,
    /// Mean attention over the bags that contain the patch.
    pub raw: Option<f64>,
    /// `raw` min-max scaled to [0, 1] within the slide.
    pub weight: Option<f64>,
    pub n_bags: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapLayer {
    pub slide_id: String,
    pub entries: Vec<HeatmapEntry>,
    /// Fraction of tiled patches that appear in at least one bag.
    pub coverage: f64,
    /// Every covered patch had the same mean weight; all are shown at 0.5.
    pub constant: bool,
}

/// Builds the layer for `patches`, keyed by `patch_key(patch)` against
/// the bag references. A patch repeated within one bag contributes its
/// summed weight for that bag.
pub fn heatmap_layer(
    slide_id: &str,
    patches: &[Patch],
    patch_key: impl Fn(&Patch) -> String,
    bags: &[ScoredBag],
) -> Result<HeatmapLayer> {
    if bags.is_empty() {
        return Err(Error::invalid(format!(
            "slide {slide_id} has no scored bags"
        )));
    }
    let index: HashMap<String, usize> = patches
        .iter()
        .enumerate()
        .map(|(i, p)| (patch_key(p), i))
        .collect();
    let mut sums = vec![0.0; patches.len()];
    let mut counts = vec![0usize; patches.len()];
    for (b, bag) in bags.iter().enumerate() {
        if bag.patch_refs.len() != bag.weights.len() {
            return Err(Error::Shape {
                expected: format!("{} weights", bag.patch_refs.len()),
                actual: format!("{}", bag.weights.len()),
            });
        }
        let total: f64 = bag.weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "bag {b} of {slide_id}: weights sum to {total}"
            )));
        }
        let mut per_patch: HashMap<usize, f64> = HashMap::new();
        for (r, w) in bag.patch_refs.iter().zip(&bag.weights) {
            let i = *index.get(r).ok_or_else(|| {
                Error::invalid(format!(
                    "bag {b} of {slide_id} references unknown patch {r}"
                ))
            })?;
            *per_patch.entry(i).or_default() += w;
        }
        for (i, w) in per_patch {
            sums[i] += w;
            counts[i] += 1;
        }
    }
    let raw: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let covered: Vec<f64> = raw.iter().flatten().copied().collect();
    let lo = covered.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = covered.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let constant = hi - lo < 1e-12;
    let entries = patches
        .iter()
        .zip(raw)
        .zip(&counts)
        .map(|((p, r), &n)| HeatmapEntry {
            origin: p.origin,
            extent: p.extent,
            raw: r,
            weight: r.map(|v| if constant { 0.5 } else { (v - lo) / (hi - lo) }),
            n_bags: n,
        })
        .collect::<Vec<_>>();
    let coverage = if patches.is_empty() {
        0.0
    } else {
        counts.iter().filter(|&&c| c > 0).count() as f64 / patches.len() as f64
    };
    Ok(HeatmapLayer {
        slide_id: slide_id.to_string(),
        entries,
        coverage,
        constant,
    })
}

/// Jet-like colour for `t` in [0, 1].
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |c: f64| ((1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Slide thumbnail downsampled by `factor` with the weights alpha-blended on
/// top; uncovered patches are left untouched.
pub fn render_overlay(
    slide: &RgbImage,
    layer: &HeatmapLayer,
    factor: u32,
    alpha: f64,
) -> Result<RgbImage> {
    if factor == 0 {
        return Err(Error::invalid("downsample factor must be positive"));
    }
    let (w, h) = (
        (slide.width() / factor).max(1),
        (slide.height() / factor).max(1),
    );
    let mut out = imageops::resize(slide, w, h, imageops::FilterType::Triangle);
    for e in &layer.entries {
        let Some(t) = e.weight else { continue };
        let c = colormap(t);
        let (x0, y0) = (e.origin.0 / factor, e.origin.1 / factor);
        let (x1, y1) = (
            ((e.origin.0 + e.extent) / factor).min(w),
            ((e.origin.1 + e.extent) / factor).min(h),
        );
        for y in y0..y1 {
            for x in x0..x1 {
                let p = out.get_pixel_mut(x, y);
                for k in 0..3 {
                    p[k] =
                        (f64::from(p[k]) * (1.0 - alpha) + f64::from(c[k]) * alpha).round() as u8;
                }
            }
        }
    }
    Ok(out)
}

/// Weight layer alone at `factor` downsampling; uncovered patches are fully
/// transparent.
pub fn render_layer(
    width: u32,
    height: u32,
    layer: &HeatmapLayer,
    factor: u32,
    alpha: f64,
) -> RgbaImage {
    let factor = factor.max(1);
    let (w, h) = ((width / factor).max(1), (height / factor).max(1));
    let mut out = RgbaImage::from_pixel(w, h, Rgba([0, 0, 0, 0]));
    let a = (alpha.clamp(0.0, 1.0) * 255.0).round() as u8;
    for e in &layer.entries {
        let Some(t) = e.weight else { continue };
        let [r, g, b] = colormap(t);
        let (x0, y0) = (e.origin.0 / factor, e.origin.1 / factor);
        let (x1, y1) = (
            ((e.origin.0 + e.extent) / factor).min(w),
            ((e.origin.1 + e.extent) / factor).min(h),
        );
        for y in y0..y1 {
            for x in x0..x1 {
                out.put_pixel(x, y, Rgba([r, g, b, a]));
            }
        }
    }
    out
}

impl HeatmapLayer {
    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Pure white used where no slide image is available.
pub fn blank_slide(width: u32, height: u32) -> RgbImage {
    RgbImage::from_pixel(width, height, Rgb([255, 255, 255]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patches(n: u32) -> Vec<Patch> {
        (0..n)
            .map(|i| Patch {
                slide_id: "s".into(),
                origin: (i * 256, 0),
                size: 256,
                extent: 256,
            })
            .collect()
    }

    fn key(p: &Patch) -> String {
        p.file_name()
    }

    #[test]
    fn single_bag_keeps_softmax_outputs() {
        let ps = patches(3);
        let bag = ScoredBag {
            patch_refs: ps.iter().map(key).collect(),
            weights: vec![0.2, 0.5, 0.3],
        };
        let layer = heatmap_layer("s", &ps, key, &[bag]).unwrap();
        let raw: Vec<f64> = layer.entries.iter().map(|e| e.raw.unwrap()).collect();
        assert_eq!(raw, vec![0.2, 0.5, 0.3]);
        assert_eq!(layer.entries[1].weight, Some(1.0));
        assert_eq!(layer.coverage, 1.0);
    }

    #[test]
    fn equal_weights_are_constant() {
        let ps = patches(4);
        let bag = ScoredBag {
            patch_refs: ps.iter().map(key).collect(),
            weights: vec![0.25; 4],
        };
        let layer = heatmap_layer("s", &ps, key, &[bag]).unwrap();
        assert!(layer.constant);
        assert!(layer.entries.iter().all(|e| e.weight == Some(0.5)));
    }

    #[test]
    fn uncovered_patch_is_missing() {
        let ps = patches(3);
        let bag = ScoredBag {
            patch_refs: vec![key(&ps[0]), key(&ps[1])],
            weights: vec![0.4, 0.6],
        };
        let layer = heatmap_layer("s", &ps, key, &[bag]).unwrap();
        assert_eq!(layer.entries[2].weight, None);
        assert!((layer.coverage - 2.0 / 3.0).abs() < 1e-12);
        let img = render_layer(768, 256, &layer, 16, 0.5);
        assert_eq!(img.get_pixel(40, 8)[3], 0);
        assert!(img.get_pixel(2, 2)[3] > 0);
    }

    #[test]
    fn unnormalized_bag_is_rejected() {
        let ps = patches(2);
        let bag = ScoredBag {
            patch_refs: ps.iter().map(key).collect(),
            weights: vec![0.4, 0.4],
        };
        assert!(heatmap_layer("s", &ps, key, &[bag]).is_err());
    }
}
