//! Pseudo-slides with planted class signal, for desk-scale end-to-end runs.
//!
//! Each slide is a pink field scattered with non-overlapping dark elliptical
//! "nuclei" and one rectangular tumor annotation. Positive slides carry more
//! nuclei per unit area (`density_gap`), more elongated nuclei of equal area
//! (`elongation_gap`) and a younger age distribution (`age_gap`).

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    write_clinical_csv, write_manifest, AlnLabel, AnnotationFile, ClinicalRecord, ManifestRow,
    MolecularSubtype, Polygon, ReceptorStatus, TStage, TumorType,
};

pub const BACKGROUND: [u8; 3] = [232, 184, 212];
pub const NUCLEUS: [u8; 3] = [72, 38, 118];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_slides: usize,
    pub seed: u64,
    /// Square slide edge in pixels.
    pub slide_size: u32,
    /// Nuclei per 256 x 256 area on negative slides.
    pub base_density: f64,
    /// Positive density is `base_density * (1 + density_gap)`.
    pub density_gap: f64,
    /// Positive aspect ratio is `1 + 0.8 * elongation_gap`.
    pub elongation_gap: f64,
    /// Positive mean age is `60 - 8 * age_gap` years.
    pub age_gap: f64,
    pub positive_fraction: f64,
    /// Radius of a circle with the nucleus area.
    pub nucleus_radius: f64,
    pub noise: u8,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_slides: 20,
            seed: 0,
            slide_size: 2048,
            base_density: 10.0,
            density_gap: 1.0,
            elongation_gap: 1.0,
            age_gap: 1.0,
            positive_fraction: 0.4,
            nucleus_radius: 5.5,
            noise: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    /// Semi-major axis.
    pub a: f64,
    /// Semi-minor axis.
    pub b: f64,
    /// Major-axis angle in radians, image coordinates.
    pub angle: f64,
}

impl Blob {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    /// Paints the blob; pixel centres inside the ellipse take `color`.
    pub fn paint(&self, img: &mut RgbImage, color: [u8; 3]) {
        let r = self.a.ceil() as i64 + 1;
        let (w, h) = (i64::from(img.width()), i64::from(img.height()));
        let (cx, cy) = (self.cx.floor() as i64, self.cy.floor() as i64);
        for y in (cy - r).max(0)..(cy + r + 1).min(h) {
            for x in (cx - r).max(0)..(cx + r + 1).min(w) {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    img.put_pixel(x as u32, y as u32, Rgb(color));
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideTruth {
    pub slide_id: String,
    pub label: AlnLabel,
    /// Nuclei per 256 x 256 area.
    pub density: f64,
    pub aspect: f64,
    pub n_blobs: usize,
    /// `[x, y, width, height]`
    pub tumor: [u32; 4],
    pub blobs: Vec<Blob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub slides: Vec<SlideTruth>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub manifest: PathBuf,
    pub annotations: PathBuf,
    pub clinical: PathBuf,
    pub ground_truth: PathBuf,
    pub truth: GroundTruth,
}

/// Places `count` non-overlapping blobs of the given shape, at least two
/// pixels apart, by rejection sampling on a spatial hash.
pub fn place_blobs<R: Rng>(
    rng: &mut R,
    width: u32,
    height: u32,
    count: usize,
    radius: f64,
    aspect: f64,
) -> Result<Vec<Blob>> {
    let a = radius * aspect.sqrt();
    let b = radius / aspect.sqrt();
    let reach = 2.0 * a + 2.0;
    let cell = reach.ceil();
    let (gw, gh) = (
        (f64::from(width) / cell).ceil() as usize,
        (f64::from(height) / cell).ceil() as usize,
    );
    let mut grid: Vec<Vec<usize>> = vec![Vec::new(); gw * gh];
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    let margin = a + 1.0;
    if f64::from(width) <= 2.0 * margin || f64::from(height) <= 2.0 * margin {
        return Err(Error::invalid("slide too small for a single nucleus"));
    }
    let max_attempts = 200 * count.max(1);
    let mut attempts = 0;
    while blobs.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::invalid(format!(
                "could not place {count} nuclei without overlap on {width}x{height}"
            )));
        }
        let cx = rng.random_range(margin..f64::from(width) - margin);
        let cy = rng.random_range(margin..f64::from(height) - margin);
        let (gx, gy) = ((cx / cell) as usize, (cy / cell) as usize);
        let clash = (gx.saturating_sub(1)..=(gx + 1).min(gw - 1))
            .flat_map(|i| (gy.saturating_sub(1)..=(gy + 1).min(gh - 1)).map(move |j| (i, j)))
            .flat_map(|(i, j)| grid[j * gw + i].iter())
            .any(|&k| (blobs[k].cx - cx).hypot(blobs[k].cy - cy) < reach);
        if clash {
            continue;
        }
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        grid[gy * gw + gx].push(blobs.len());
        blobs.push(Blob {
            cx,
            cy,
            a,
            b,
            angle,
        });
    }
    Ok(blobs)
}

/// Renders a field of blobs on a lightly noised background.
pub fn render<R: Rng>(rng: &mut R, width: u32, height: u32, blobs: &[Blob], noise: u8) -> RgbImage {
    let n = i16::from(noise);
    let mut img = RgbImage::from_fn(width, height, |_, _| {
        let mut px = BACKGROUND;
        for c in &mut px {
            let d = if n > 0 { rng.random_range(-n..=n) } else { 0 };
            *c = (i16::from(*c) + d).clamp(0, 255) as u8;
        }
        Rgb(px)
    });
    for blob in blobs {
        blob.paint(&mut img, NUCLEUS);
    }
    img
}

fn clinical_record<R: Rng>(rng: &mut R, positive: bool, age_gap: f64) -> ClinicalRecord {
    let mean_age = if positive { 60.0 - 8.0 * age_gap } else { 60.0 };
    let age = Normal::new(mean_age, 10.0)
        .expect("finite")
        .sample(rng)
        .clamp(25.0, 90.0);
    let tumor_size: f64 = rng.random_range(0.5..6.0);
    let status = |rng: &mut R, p: f64| {
        if rng.random_bool(p) {
            ReceptorStatus::Positive
        } else {
            ReceptorStatus::Negative
        }
    };
    let er = status(rng, 0.7);
    let pr = status(rng, 0.6);
    let her2 = status(rng, 0.25);
    let molecular_subtype = match (er, pr, her2) {
        (_, _, ReceptorStatus::Positive) => MolecularSubtype::Her2Positive,
        (ReceptorStatus::Negative, ReceptorStatus::Negative, _) => MolecularSubtype::TripleNegative,
        _ if rng.random_bool(0.5) => MolecularSubtype::LuminalA,
        _ => MolecularSubtype::LuminalB,
    };
    ClinicalRecord {
        age,
        tumor_size,
        tumor_type: *[
            TumorType::InvasiveDuctal,
            TumorType::InvasiveDuctal,
            TumorType::InvasiveLobular,
            TumorType::Other,
        ]
        .choose(rng)
        .expect("non-empty"),
        t_stage: if tumor_size <= 2.0 {
            TStage::T1
        } else {
            TStage::T2
        },
        er,
        pr,
        her2,
        molecular_subtype,
    }
}

/// Writes `images/`, `annotations/`, `manifest.csv`, `clinical.csv` and
/// `ground_truth.json` under `out_dir`.
pub fn generate_synthetic_corpus(out_dir: &Path, cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.n_slides < 10 {
        return Err(Error::invalid(
            "the synthetic corpus needs at least 10 slides",
        ));
    }
    if cfg.slide_size < 256 {
        return Err(Error::invalid("slide_size must be at least 256"));
    }
    let images = out_dir.join("images");
    let annotations = out_dir.join("annotations");
    for d in [&images, &annotations] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_pos =
        ((cfg.n_slides as f64 * cfg.positive_fraction).round() as usize).clamp(1, cfg.n_slides - 1);
    let mut labels: Vec<AlnLabel> = (0..cfg.n_slides)
        .map(|i| match i {
            i if i >= n_pos => AlnLabel::N0,
            i if i % 2 == 0 => AlnLabel::Low,
            _ => AlnLabel::High,
        })
        .collect();
    labels.shuffle(&mut rng);
    let slide_seeds: Vec<u64> = (0..cfg.n_slides).map(|_| rng.random()).collect();

    let size = cfg.slide_size;
    let scale = f64::from(size) / 2048.0;
    let unit_areas = f64::from(size) * f64::from(size) / 65536.0;
    let width = (cfg.n_slides - 1).to_string().len().max(3);
    let slides: Vec<(SlideTruth, ClinicalRecord)> = (0..cfg.n_slides)
        .into_par_iter()
        .map(|i| {
            let (label, seed) = (labels[i], slide_seeds[i]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let slide_id = format!("synth{i:0width$}");
            let positive = label.is_positive();
            let density = cfg.base_density * if positive { 1.0 + cfg.density_gap } else { 1.0 };
            let aspect = if positive {
                1.0 + 0.8 * cfg.elongation_gap
            } else {
                1.0
            };
            let count = (density * unit_areas).round() as usize;
            let blobs = place_blobs(&mut rng, size, size, count, cfg.nucleus_radius, aspect)?;
            let img = render(&mut rng, size, size, &blobs, cfg.noise);
            let side = |rng: &mut ChaCha8Rng| {
                ((rng.random_range(768.0..=1280.0) * scale).round() as u32).clamp(256, size)
            };
            let (tw, th) = (side(&mut rng), side(&mut rng));
            let tx = rng.random_range(0..=size - tw);
            let ty = rng.random_range(0..=size - th);
            let path = images.join(format!("{slide_id}.png"));
            img.save(&path).map_err(|e| Error::image(&path, e))?;
            AnnotationFile {
                slide_id: slide_id.clone(),
                polygons: vec![Polygon::rect(
                    f64::from(tx),
                    f64::from(ty),
                    f64::from(tw),
                    f64::from(th),
                )?],
            }
            .write(&AnnotationFile::path_in(&annotations, &slide_id))?;
            let clinical = clinical_record(&mut rng, positive, cfg.age_gap);
            Ok((
                SlideTruth {
                    slide_id,
                    label,
                    density,
                    aspect,
                    n_blobs: blobs.len(),
                    tumor: [tx, ty, tw, th],
                    blobs,
                },
                clinical,
            ))
        })
        .collect::<Result<_>>()?;

    let manifest = out_dir.join("manifest.csv");
    let rows: Vec<ManifestRow> = slides
        .iter()
        .map(|(t, _)| ManifestRow {
            slide_id: t.slide_id.clone(),
            image_uri: format!("images/{}.png", t.slide_id),
            label: t.label.to_string(),
        })
        .collect();
    write_manifest(&manifest, &rows)?;
    let clinical = out_dir.join("clinical.csv");
    let clin_rows: Vec<(String, ClinicalRecord)> = slides
        .iter()
        .map(|(t, c)| (t.slide_id.clone(), c.clone()))
        .collect();
    write_clinical_csv(&clinical, &clin_rows)?;
    let truth = GroundTruth {
        config: cfg.clone(),
        slides: slides.into_iter().map(|(t, _)| t).collect(),
    };
    let ground_truth = out_dir.join("ground_truth.json");
    let text = serde_json::to_string(&truth).map_err(|e| Error::json(&ground_truth, e))?;
    std::fs::write(&ground_truth, text).map_err(|e| Error::io(&ground_truth, e))?;
    Ok(SynthCorpus {
        manifest,
        annotations,
        clinical,
        ground_truth,
        truth,
    })
}
