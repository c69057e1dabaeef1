use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::polygon::Polygon;
use super::SlideRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileConfig {
    /// Output patch edge in pixels.
    pub patch_size: u32,
    /// Pyramid level; a patch covers `patch_size << level` level-0 pixels.
    pub level: u32,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            patch_size: 256,
            level: 0,
        }
    }
}

impl TileConfig {
    pub fn extent(&self) -> u32 {
        self.patch_size << self.level
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Patch {
    pub slide_id: String,
    /// Top-left corner in level-0 pixels.
    pub origin: (u32, u32),
    pub size: u32,
    /// Side length in level-0 pixels.
    pub extent: u32,
}

impl Patch {
    pub fn file_name(&self) -> String {
        format!("{}_{}.png", self.origin.0, self.origin.1)
    }

    pub fn overlaps(&self, other: &Patch) -> bool {
        let (ax, ay) = (i64::from(self.origin.0), i64::from(self.origin.1));
        let (bx, by) = (i64::from(other.origin.0), i64::from(other.origin.1));
        ax < bx + i64::from(other.extent)
            && bx < ax + i64::from(self.extent)
            && ay < by + i64::from(other.extent)
            && by < ay + i64::from(self.extent)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tiling {
    pub patches: Vec<Patch>,
    pub warnings: Vec<String>,
}

/// Cells of the grid anchored at `polygon`'s bounding-box corner that lie
/// entirely inside its raster mask and inside the image.
fn polygon_cells(polygon: &Polygon, extent: u32, width: u32, height: u32) -> Vec<(u32, u32)> {
    let b = polygon.bounds();
    let ext = i64::from(extent);
    let x_end = b.x1.min(i64::from(width));
    let y_end = b.y1.min(i64::from(height));
    if b.x0 < 0 || b.y0 < 0 || x_end - b.x0 < ext || y_end - b.y0 < ext {
        return Vec::new();
    }
    let rows: Vec<Vec<(i64, i64)>> = (b.y0..y_end).map(|py| polygon.row_intervals(py)).collect();
    let mut cells = Vec::new();
    let mut gy = b.y0;
    while gy + ext <= y_end {
        let mut gx = b.x0;
        while gx + ext <= x_end {
            let inside = rows[(gy - b.y0) as usize..(gy - b.y0 + ext) as usize]
                .iter()
                .all(|ivs| ivs.iter().any(|&(a, e)| a <= gx && gx + ext <= e));
            if inside {
                cells.push((gx as u32, gy as u32));
            }
            gx += ext;
        }
        gy += ext;
    }
    cells
}

/// Crops non-overlapping square patches from every tumor polygon of a slide.
///
/// Cells already covered by a patch of an earlier polygon are skipped so
/// patches of one slide never overlap. Output is row-major by origin.
pub fn tile_tumor_regions(record: &SlideRecord, cfg: &TileConfig) -> Result<Tiling> {
    if cfg.patch_size == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    if record.regions.is_empty() {
        return Err(Error::invalid(format!(
            "slide `{}` has no tumor regions",
            record.slide_id
        )));
    }
    let extent = cfg.extent();
    let (width, height) = record.level0_size;
    let mut buckets: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    let mut patches: Vec<Patch> = Vec::new();
    for polygon in &record.regions {
        for (x, y) in polygon_cells(polygon, extent, width, height) {
            let candidate = Patch {
                slide_id: record.slide_id.clone(),
                origin: (x, y),
                size: cfg.patch_size,
                extent,
            };
            let (bx, by) = (x / extent, y / extent);
            let clash = (bx.saturating_sub(1)..=bx + 1)
                .flat_map(|i| (by.saturating_sub(1)..=by + 1).map(move |j| (i, j)))
                .filter_map(|k| buckets.get(&k))
                .flatten()
                .any(|&idx| patches[idx].overlaps(&candidate));
            if !clash {
                buckets.entry((bx, by)).or_default().push(patches.len());
                patches.push(candidate);
            }
        }
    }
    patches.sort_by_key(|p| (p.origin.1, p.origin.0));
    let mut warnings = Vec::new();
    if patches.is_empty() {
        let msg = format!(
            "slide `{}`: no {extent}px cell fits inside any tumor region",
            record.slide_id
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(Tiling { patches, warnings })
}

/// Writes each patch as an 8-bit RGB PNG at `<out_dir>/<slide_id>/<x>_<y>.png`.
pub fn extract_patches(
    record: &SlideRecord,
    patches: &[Patch],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if patches.is_empty() {
        return Ok(Vec::new());
    }
    let slide = image::open(&record.image_uri)
        .map_err(|e| Error::image(&record.image_uri, e))?
        .into_rgb8();
    let dir = out_dir.join(&record.slide_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    patches
        .iter()
        .map(|p| {
            let crop =
                image::imageops::crop_imm(&slide, p.origin.0, p.origin.1, p.extent, p.extent)
                    .to_image();
            let out: RgbImage = if p.extent == p.size {
                crop
            } else {
                image::imageops::resize(
                    &crop,
                    p.size,
                    p.size,
                    image::imageops::FilterType::Triangle,
                )
            };
            let path = dir.join(p.file_name());
            out.save(&path).map_err(|e| Error::image(&path, e))?;
            Ok(path)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchIndexRow {
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub size: u32,
    pub extent: u32,
    pub path: PathBuf,
}

impl PatchIndexRow {
    pub fn patch(&self) -> Patch {
        Patch {
            slide_id: self.slide_id.clone(),
            origin: (self.x, self.y),
            size: self.size,
            extent: self.extent,
        }
    }
}

pub fn write_patch_index(path: &Path, rows: &[PatchIndexRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_patch_index(path: &Path) -> Result<Vec<PatchIndexRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}
