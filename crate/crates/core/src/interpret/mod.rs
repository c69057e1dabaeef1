//! Attention heat maps and nucleus-morphometry feature importance.

mod feature_bags;
mod heatmap;
mod importance;
mod morphometry;
mod segment;

use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use feature_bags::{
    build_feature_bags, percentile, read_feature_bags, write_feature_bags, FeatureRanges,
    NucleusFeatureBag, DEFAULT_BINS,
};
pub use heatmap::{
    blank_slide, colormap, heatmap_layer, render_layer, render_overlay, HeatmapEntry, HeatmapLayer,
    ScoredBag,
};
pub use importance::{
    holm, instance_matrix, p_phrase, rank_feature_importance, slide_feature_means,
    FeatureImportance, FeatureNet, ImportanceConfig, ImportanceReport, PValueMode, SlideWeights,
};
pub use morphometry::{
    convex_hull, min_bounding_rect_area, nucleus_morphometry, perimeter, wrap_axial,
    NucleusFeatures, PatchMorphometry, DENSITY, FEATURE_NAMES, ISOTROPY_TOL, N_FEATURES,
    ORIENTATION,
};
pub use segment::{
    distance_transform, fill_holes, h_maxima_seeds, hematoxylin, otsu, watershed,
    ClassicalSegmenter, Mask, Segmenter,
};

use crate::error::{Error, Result};

/// Segments and measures every patch in parallel, preserving input order.
pub fn slide_morphometry<S: Segmenter>(
    patches: &[((u32, u32), RgbImage)],
    segmenter: &S,
) -> Vec<PatchMorphometry> {
    patches
        .par_iter()
        .map(|(origin, img)| {
            let masks = segmenter.segment(img);
            PatchMorphometry::new(*origin, img.width(), img.height(), &masks)
        })
        .collect()
}

/// One nucleus as written to the nucleus CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NucleusRow {
    pub slide_id: String,
    pub patch_x: u32,
    pub patch_y: u32,
    pub major_axis: f64,
    pub minor_axis: f64,
    pub area: f64,
    pub orientation: Option<f64>,
    pub circumference: f64,
    pub density: f64,
    pub circularity: f64,
    pub rectangularity: f64,
}

pub fn nucleus_rows(slide_id: &str, patches: &[PatchMorphometry]) -> Vec<NucleusRow> {
    patches
        .iter()
        .flat_map(|p| {
            p.nuclei.iter().map(move |n| NucleusRow {
                slide_id: slide_id.to_string(),
                patch_x: p.origin.0,
                patch_y: p.origin.1,
                major_axis: n.major_axis,
                minor_axis: n.minor_axis,
                area: n.area,
                orientation: n.orientation,
                circumference: n.circumference,
                density: p.density,
                circularity: n.circularity,
                rectangularity: n.rectangularity,
            })
        })
        .collect()
}

pub fn write_nucleus_csv(path: &Path, rows: &[NucleusRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_nucleus_csv(path: &Path) -> Result<Vec<NucleusRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::csv(path, e)))
        .collect()
}
