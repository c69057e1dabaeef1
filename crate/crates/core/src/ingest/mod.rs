//! Slide manifests, polygon annotations, clinical tables and patch tiling.

mod clinical;
mod polygon;
mod tiling;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use clinical::{
    load_clinical_csv, preprocess_clinical, write_clinical_csv, Categorical, CategoricalColumn,
    ClinicalEncoder, ClinicalRecord, MolecularSubtype, NumericColumn, ReceptorStatus, TStage,
    TumorType, CATEGORICAL_COLUMNS, NUMERIC_COLUMNS,
};
pub use polygon::{PixelBounds, Polygon};
pub use tiling::{
    extract_patches, read_patch_index, tile_tumor_regions, write_patch_index, Patch, PatchIndexRow,
    TileConfig, Tiling,
};

/// Axillary lymph-node status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AlnLabel {
    N0,
    /// One or two metastatic nodes.
    Low,
    /// Three or more metastatic nodes.
    High,
}

impl AlnLabel {
    pub const ALL: [AlnLabel; 3] = [AlnLabel::N0, AlnLabel::Low, AlnLabel::High];

    pub fn is_positive(self) -> bool {
        self != AlnLabel::N0
    }

    /// Class index under a 2-class (N0 vs N+) or 3-class scheme.
    pub fn class_index(self, n_classes: usize) -> usize {
        match (n_classes, self) {
            (2, l) => usize::from(l.is_positive()),
            (_, AlnLabel::N0) => 0,
            (_, AlnLabel::Low) => 1,
            (_, AlnLabel::High) => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AlnLabel::N0 => "N0",
            AlnLabel::Low => "N+(1-2)",
            AlnLabel::High => "N+(>=3)",
        }
    }
}

impl fmt::Display for AlnLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlnLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        match compact.to_ascii_uppercase().as_str() {
            "N0" | "0" | "NEG" | "NEGATIVE" => Ok(AlnLabel::N0),
            "N+(1-2)" | "N1-2" | "N+1-2" | "LOW" => Ok(AlnLabel::Low),
            "N+(>=3)" | "N+(≥3)" | "N>=3" | "N+>=3" | "HIGH" => Ok(AlnLabel::High),
            _ => Err(Error::invalid(format!("unknown ALN label `{s}`"))),
        }
    }
}

impl Serialize for AlnLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for AlnLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideRecord {
    pub slide_id: String,
    pub image_uri: PathBuf,
    /// `(width, height)` in level-0 pixels.
    pub level0_size: (u32, u32),
    pub regions: Vec<Polygon>,
    pub clinical: Option<ClinicalRecord>,
    pub label: Option<AlnLabel>,
}

/// On-disk annotation layout: one JSON file per slide.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub slide_id: String,
    pub polygons: Vec<Polygon>,
}

impl AnnotationFile {
    pub fn path_in(dir: &Path, slide_id: &str) -> PathBuf {
        dir.join(format!("{slide_id}.json"))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub slide_id: String,
    pub image_uri: String,
    #[serde(default)]
    pub label: String,
}

pub fn read_manifest_rows(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Joins manifest rows with their annotations and (optionally) clinical rows.
///
/// Slides lacking an annotation file or a clinical row are collected and
/// reported together as [`Error::MissingJoin`]. Relative image paths resolve
/// against the manifest's directory.
pub fn load_manifest(
    manifest_path: &Path,
    annotation_dir: &Path,
    clinical_path: Option<&Path>,
) -> Result<Vec<SlideRecord>> {
    let rows = read_manifest_rows(manifest_path)?;
    let clinical = clinical_path.map(load_clinical_csv).transpose()?;
    if !annotation_dir.is_dir() {
        return Err(Error::io(
            annotation_dir,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "annotation directory not found",
            ),
        ));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut seen = HashSet::new();
    let mut missing_clinical = Vec::new();
    let mut missing_annotations = Vec::new();
    let mut records = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        if !seen.insert(row.slide_id.clone()) {
            return Err(Error::DuplicateSlide(row.slide_id));
        }
        let label = if row.label.is_empty() {
            None
        } else {
            Some(
                row.label
                    .parse::<AlnLabel>()
                    .map_err(|_| Error::UnknownCategory {
                        row: i + 1,
                        field: "label".into(),
                        value: row.label.clone(),
                    })?,
            )
        };
        let clin = match &clinical {
            Some(table) => match table.get(&row.slide_id) {
                Some(c) => Some(c.clone()),
                None => {
                    missing_clinical.push(row.slide_id.clone());
                    None
                }
            },
            None => None,
        };
        let ann_path = AnnotationFile::path_in(annotation_dir, &row.slide_id);
        if !ann_path.is_file() {
            missing_annotations.push(row.slide_id.clone());
            continue;
        }
        let ann = AnnotationFile::read(&ann_path)?;
        if ann.slide_id != row.slide_id {
            return Err(Error::invalid(format!(
                "{}: annotation slide_id `{}` does not match manifest `{}`",
                ann_path.display(),
                ann.slide_id,
                row.slide_id
            )));
        }
        let image_uri = {
            let p = PathBuf::from(&row.image_uri);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let level0_size =
            image::image_dimensions(&image_uri).map_err(|e| Error::image(&image_uri, e))?;
        if let Some(bad) = ann
            .polygons
            .iter()
            .position(|p| !p.within(level0_size.0, level0_size.1))
        {
            return Err(Error::invalid(format!(
                "slide `{}`: polygon {bad} leaves the {}x{} level-0 bounds",
                row.slide_id, level0_size.0, level0_size.1
            )));
        }
        records.push(SlideRecord {
            slide_id: row.slide_id,
            image_uri,
            level0_size,
            regions: ann.polygons,
            clinical: clin,
            label,
        });
    }
    if !missing_clinical.is_empty() || !missing_annotations.is_empty() {
        return Err(Error::MissingJoin {
            missing_clinical,
            missing_annotations,
        });
    }
    Ok(records)
}

/// `slide_id -> label` from any CSV with `slide_id` and `label` columns.
pub fn load_labels_csv(path: &Path) -> Result<HashMap<String, AlnLabel>> {
    #[derive(Deserialize)]
    struct Row {
        slide_id: String,
        label: String,
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let mut out = HashMap::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        if row.label.is_empty() {
            continue;
        }
        out.insert(row.slide_id, row.label.parse()?);
    }
    Ok(out)
}
