//! Subcommand bodies operating on a workdir.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::bagging::{
    build_bags, read_bags_jsonl, split_cohorts, write_bags_jsonl, Bag, Cohort, CohortSplit,
};
use crate::error::{Error, Result};
use crate::inference::{
    class_names, predict_all, read_predictions_csv, write_predictions_csv, EmbeddedBag,
    SlidePrediction,
};
use crate::ingest::{
    extract_patches, load_clinical_csv, load_labels_csv, load_manifest, read_manifest_rows,
    read_patch_index, tile_tumor_regions, write_patch_index, AlnLabel, ClinicalEncoder,
    PatchIndexRow,
};
use crate::interpret::{
    build_feature_bags, heatmap_layer, nucleus_rows, rank_feature_importance, read_feature_bags,
    render_overlay, slide_feature_means, slide_morphometry, write_feature_bags, write_nucleus_csv,
    FeatureRanges, ImportanceReport, PValueMode, ScoredBag, FEATURE_NAMES, N_FEATURES,
};
use crate::mil::{
    Checkpoint, FeatureScaler, FeatureStore, InstanceEmbedder, MilConfig, MilModel, Normalization,
};
use crate::stats::{
    confusion_3class, delong_compare, metrics_report, render_subgroups, render_table,
    subgroup_report, DelongResult, Grouping, MetricsReport, SlideOutcome, SubgroupComparison,
};
use crate::training::synth::{generate_synthetic_corpus, SynthConfig, SynthCorpus};
use crate::training::{train, write_history_csv, EpochRecord};

/// Artifact locations under a workdir.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout {
            root: root.to_path_buf(),
        }
    }
    pub fn patches_dir(&self) -> PathBuf {
        self.root.join("patches")
    }
    pub fn patch_index(&self) -> PathBuf {
        self.root.join("patches").join("index.csv")
    }
    pub fn split_csv(&self) -> PathBuf {
        self.root.join("split.csv")
    }
    pub fn bags_jsonl(&self) -> PathBuf {
        self.root.join("bags.jsonl")
    }
    pub fn encoder_json(&self) -> PathBuf {
        self.root.join("clinical_encoder.json")
    }
    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }
    pub fn history_csv(&self) -> PathBuf {
        self.root.join("history.csv")
    }
    pub fn predictions(&self, cohort: Cohort) -> PathBuf {
        self.root
            .join(format!("predictions_{}.csv", cohort.as_str()))
    }
    pub fn metrics_json(&self, cohort: Cohort) -> PathBuf {
        self.root.join(format!("metrics_{}.json", cohort.as_str()))
    }
    pub fn metrics_txt(&self, cohort: Cohort) -> PathBuf {
        self.root.join(format!("metrics_{}.txt", cohort.as_str()))
    }
    pub fn subgroups_txt(&self, cohort: Cohort) -> PathBuf {
        self.root.join(format!("subgroups_{}.txt", cohort.as_str()))
    }
    pub fn subgroups_json(&self, cohort: Cohort) -> PathBuf {
        self.root
            .join(format!("subgroups_{}.json", cohort.as_str()))
    }
    pub fn heatmaps_dir(&self) -> PathBuf {
        self.root.join("heatmaps")
    }
    pub fn nuclei_dir(&self) -> PathBuf {
        self.root.join("nuclei")
    }
    pub fn nucleus_csv(&self) -> PathBuf {
        self.nuclei_dir().join("nuclei.csv")
    }
    pub fn feature_bags_dir(&self) -> PathBuf {
        self.nuclei_dir().join("feature_bags")
    }
    pub fn slide_means_json(&self) -> PathBuf {
        self.nuclei_dir().join("slide_means.json")
    }
    pub fn importance_json(&self) -> PathBuf {
        self.root.join("importance.json")
    }
    pub fn importance_txt(&self) -> PathBuf {
        self.root.join("importance.txt")
    }
}

/// Short cohort label used in report tables.
pub fn cohort_label(c: Cohort) -> &'static str {
    match c {
        Cohort::Train => "T",
        Cohort::Val => "V",
        Cohort::Test => "I-T",
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn manifest_labels(cfg: &RunConfig) -> Result<HashMap<String, AlnLabel>> {
    load_labels_csv(cfg.require("manifest", &cfg.paths.manifest)?)
}

fn patches_by_slide(rows: Vec<PatchIndexRow>) -> BTreeMap<String, Vec<PatchIndexRow>> {
    let mut m: BTreeMap<String, Vec<PatchIndexRow>> = BTreeMap::new();
    for r in rows {
        m.entry(r.slide_id.clone()).or_default().push(r);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSummary {
    pub slides: usize,
    pub patches: usize,
    pub empty_slides: Vec<String>,
}

pub fn tile(cfg: &RunConfig) -> Result<TileSummary> {
    let layout = Layout::new(cfg.workdir());
    let records = load_manifest(
        cfg.require("manifest", &cfg.paths.manifest)?,
        cfg.require("annotations", &cfg.paths.annotations)?,
        cfg.paths.clinical.as_deref(),
    )?;
    let out = layout.patches_dir();
    let per_slide = records
        .par_iter()
        .map(|r| {
            let tiling = tile_tumor_regions(r, &cfg.tile)?;
            extract_patches(r, &tiling.patches, &out)?;
            Ok(tiling
                .patches
                .iter()
                .map(|p| PatchIndexRow {
                    slide_id: r.slide_id.clone(),
                    x: p.origin.0,
                    y: p.origin.1,
                    size: p.size,
                    extent: p.extent,
                    path: PathBuf::from(&r.slide_id).join(p.file_name()),
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let empty_slides: Vec<String> = records
        .iter()
        .zip(&per_slide)
        .filter(|(_, rows)| rows.is_empty())
        .map(|(r, _)| r.slide_id.clone())
        .collect();
    let rows: Vec<PatchIndexRow> = per_slide.into_iter().flatten().collect();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_patch_index(&layout.patch_index(), &rows)?;
    Ok(TileSummary {
        slides: records.len(),
        patches: rows.len(),
        empty_slides,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagSummary {
    pub train_slides: usize,
    pub val_slides: usize,
    pub test_slides: usize,
    pub bags: usize,
}

pub fn build_bag_set(cfg: &RunConfig) -> Result<BagSummary> {
    let layout = Layout::new(cfg.workdir());
    let by_slide = patches_by_slide(read_patch_index(&layout.patch_index())?);
    let labels = manifest_labels(cfg)?;
    let slides: Vec<(String, AlnLabel)> = by_slide
        .keys()
        .filter_map(|id| match labels.get(id) {
            Some(l) => Some((id.clone(), *l)),
            None => {
                log::warn!("slide `{id}` has patches but no label; excluded");
                None
            }
        })
        .collect();
    let split = split_cohorts(&slides, &cfg.split)?;
    split.write_csv(&layout.split_csv())?;
    let clinical_vecs: Option<HashMap<String, Vec<f64>>> = match &cfg.paths.clinical {
        Some(path) => {
            let table = load_clinical_csv(path)?;
            let fit: Vec<_> = split
                .train
                .iter()
                .map(|id| {
                    table
                        .get(id)
                        .ok_or_else(|| Error::invalid(format!("no clinical row for `{id}`")))
                })
                .collect::<Result<_>>()?;
            let (encoder, warnings) = ClinicalEncoder::fit(fit)?;
            for w in warnings {
                log::warn!("{w}");
            }
            write_json(&layout.encoder_json(), &encoder)?;
            let mut vecs = HashMap::new();
            for (id, _) in &slides {
                if let Some(r) = table.get(id) {
                    vecs.insert(id.clone(), encoder.encode(r)?);
                }
            }
            Some(vecs)
        }
        None if cfg.bags.attach_clinical => {
            return Err(Error::invalid(
                "attach_clinical needs a clinical table (--clinical)",
            ));
        }
        None => None,
    };
    let mut bags = Vec::new();
    for (id, label) in &slides {
        let refs: Vec<String> = by_slide[id]
            .iter()
            .map(|r| r.path.to_string_lossy().into_owned())
            .collect();
        let clin = clinical_vecs
            .as_ref()
            .and_then(|m| m.get(id))
            .map(Vec::as_slice);
        bags.extend(build_bags(id, &refs, Some(*label), clin, &cfg.bags)?);
    }
    write_bags_jsonl(&layout.bags_jsonl(), &bags)?;
    Ok(BagSummary {
        train_slides: split.train.len(),
        val_slides: split.val.len(),
        test_slides: split.test.len(),
        bags: bags.len(),
    })
}

fn embedder_tag(cfg: &RunConfig) -> String {
    match cfg.embedder.backbone {
        crate::mil::Backbone::Toy => "toy".to_string(),
        b => format!("{}:seed{}", b.name(), cfg.embedder.seed),
    }
}

/// Loads the cached feature store or embeds every patch referenced by the
/// bags and caches the result.
pub fn feature_store(cfg: &RunConfig, bags: &[Bag]) -> Result<FeatureStore> {
    let layout = Layout::new(cfg.workdir());
    let tag = embedder_tag(cfg);
    if layout.features_dir().join("index.json").is_file() {
        let store = FeatureStore::load(&layout.features_dir())?;
        if store.embedder == tag
            && bags
                .iter()
                .all(|b| b.instance_refs.iter().all(|r| store.get(r).is_some()))
        {
            return Ok(store);
        }
        log::info!("feature cache is stale; re-embedding");
    }
    let embedder = InstanceEmbedder::new(
        cfg.embedder.backbone,
        cfg.embedder.pretrained,
        cfg.embedder.seed,
    )?;
    let mut store = FeatureStore::build(
        bags,
        &layout.patches_dir(),
        &embedder,
        &Normalization::default(),
    )?;
    store.embedder = tag;
    store.save(&layout.features_dir())?;
    Ok(store)
}

fn embedded_cohort(store: &FeatureStore, bags: &[Bag], ids: &[String]) -> Result<Vec<EmbeddedBag>> {
    let keep: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
    bags.iter()
        .filter(|b| keep.contains(b.slide_id.as_str()))
        .map(|b| store.embed_bag(b))
        .collect()
}

fn cohort_ids(split: &CohortSplit, c: Cohort) -> &[String] {
    match c {
        Cohort::Train => &split.train,
        Cohort::Val => &split.val,
        Cohort::Test => &split.test,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    pub history: Vec<EpochRecord>,
}

pub fn train_model(cfg: &RunConfig) -> Result<TrainSummary> {
    let layout = Layout::new(cfg.workdir());
    let bags = read_bags_jsonl(&layout.bags_jsonl())?;
    let split = CohortSplit::read_csv(&layout.split_csv())?;
    let store = feature_store(cfg, &bags)?;
    let mut train_bags = embedded_cohort(&store, &bags, &split.train)?;
    let mut val_bags = embedded_cohort(&store, &bags, &split.val)?;
    let scaler = if cfg.embedder.standardize {
        let sc = FeatureScaler::fit(&train_bags)?;
        for b in train_bags.iter_mut().chain(val_bags.iter_mut()) {
            sc.apply(b)?;
        }
        Some(sc)
    } else {
        None
    };
    let clinical_dim = train_bags
        .first()
        .and_then(|b| b.clinical.as_ref())
        .map_or(0, Vec::len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = MilModel::new(
        MilConfig::new(store.dim(), clinical_dim, cfg.classes),
        &mut rng,
    )?;
    let outcome = train(&train_bags, &val_bags, model, &cfg.train)?;
    write_history_csv(&layout.history_csv(), &outcome.history)?;
    let best_val_auc = outcome.best_epoch.map(|e| outcome.history[e - 1].val_auc);
    let mut ckpt = Checkpoint::new(store.embedder.clone(), outcome.best);
    ckpt.extra = serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "best_val_auc": best_val_auc,
        "train": cfg.train,
        "scaler": scaler,
    });
    ckpt.save(&layout.checkpoint())?;
    Ok(TrainSummary {
        best_epoch: outcome.best_epoch,
        best_val_auc,
        history: outcome.history,
    })
}

/// Trained model plus the feature scaler stored beside it.
struct Scorer {
    model: MilModel,
    scaler: Option<FeatureScaler>,
}

impl Scorer {
    fn embed(&self, store: &FeatureStore, bag: &Bag) -> Result<EmbeddedBag> {
        let mut e = store.embed_bag(bag)?;
        if let Some(sc) = &self.scaler {
            sc.apply(&mut e)?;
        }
        Ok(e)
    }
}

fn load_model(cfg: &RunConfig, store: &FeatureStore) -> Result<Scorer> {
    let path = Layout::new(cfg.workdir()).checkpoint();
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.embedder != store.embedder {
        return Err(Error::invalid(format!(
            "checkpoint was trained on `{}` features but the cache holds `{}`",
            ckpt.embedder, store.embedder
        )));
    }
    let scaler = match ckpt.extra.get("scaler") {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => Some(serde_json::from_value(v.clone()).map_err(|e| Error::json(&path, e))?),
    };
    Ok(Scorer {
        model: ckpt.model,
        scaler,
    })
}

pub fn predict(cfg: &RunConfig, cohort: Cohort) -> Result<Vec<SlidePrediction>> {
    let layout = Layout::new(cfg.workdir());
    let bags = read_bags_jsonl(&layout.bags_jsonl())?;
    let split = CohortSplit::read_csv(&layout.split_csv())?;
    let store = feature_store(cfg, &bags)?;
    let scorer = load_model(cfg, &store)?;
    let mut cohort_bags = embedded_cohort(&store, &bags, cohort_ids(&split, cohort))?;
    if let Some(sc) = &scorer.scaler {
        for b in &mut cohort_bags {
            sc.apply(b)?;
        }
    }
    let preds = predict_all(&cohort_bags, &scorer.model, &cfg.predict)?;
    write_predictions_csv(&layout.predictions(cohort), &preds)?;
    Ok(preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub subgroups: Option<Vec<SubgroupComparison>>,
}

/// Scores a predictions CSV against the manifest labels.
pub fn evaluate(cfg: &RunConfig, cohort: Cohort, subgroups: bool) -> Result<Evaluation> {
    let layout = Layout::new(cfg.workdir());
    let rows = read_predictions_csv(&layout.predictions(cohort))?;
    let labels = manifest_labels(cfg)?;
    let mut outcomes = Vec::with_capacity(rows.len());
    for r in &rows {
        let l = labels.get(&r.slide_id).ok_or_else(|| {
            Error::invalid(format!("no label for predicted slide `{}`", r.slide_id))
        })?;
        outcomes.push(SlideOutcome {
            slide_id: r.slide_id.clone(),
            score: r.positive_prob(),
            positive: l.is_positive(),
        });
    }
    let scores: Vec<f64> = outcomes.iter().map(|o| o.score).collect();
    let truth: Vec<bool> = outcomes.iter().map(|o| o.positive).collect();
    let name = cohort_label(cohort);
    let report = metrics_report(
        name,
        &scores,
        &truth,
        cfg.predict.threshold,
        cfg.eval.alpha,
        cfg.eval.predictive_interval,
    )?;
    let mut text = render_table(std::slice::from_ref(&report));
    if cfg.classes == 3 && rows.iter().all(|r| r.class_probs.len() == 3) {
        let preds: Vec<usize> = rows
            .iter()
            .map(|r| crate::inference::decide(&r.class_probs, cfg.predict.threshold))
            .collect();
        let idx: Vec<usize> = rows
            .iter()
            .map(|r| labels[&r.slide_id].class_index(3))
            .collect();
        let names = class_names(3);
        text.push('\n');
        text.push_str(&confusion_3class(&preds, &idx)?.render([names[0], names[1], names[2]]));
    }
    write_json(&layout.metrics_json(cohort), &report)?;
    write_text(&layout.metrics_txt(cohort), &text)?;
    let subgroups = if subgroups {
        let table = load_clinical_csv(cfg.require("clinical", &cfg.paths.clinical)?)?;
        let groups = subgroup_report(
            &outcomes,
            &table,
            &Grouping::STANDARD,
            cfg.predict.threshold,
            cfg.eval.alpha,
            cfg.eval.predictive_interval,
        )?;
        write_json(&layout.subgroups_json(cohort), &groups)?;
        write_text(
            &layout.subgroups_txt(cohort),
            &render_subgroups(&groups, name),
        )?;
        Some(groups)
    } else {
        None
    };
    Ok(Evaluation { report, subgroups })
}

/// Paired DeLong comparison of two prediction files over their common slides.
pub fn compare_auc(a: &Path, b: &Path, labels: &HashMap<String, AlnLabel>) -> Result<DelongResult> {
    let ra = read_predictions_csv(a)?;
    let rb: HashMap<String, f64> = read_predictions_csv(b)?
        .into_iter()
        .map(|r| (r.slide_id.clone(), r.positive_prob()))
        .collect();
    let (mut sa, mut sb, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for r in &ra {
        if let (Some(&s), Some(l)) = (rb.get(&r.slide_id), labels.get(&r.slide_id)) {
            sa.push(r.positive_prob());
            sb.push(s);
            y.push(l.is_positive());
        }
    }
    if sa.len() < ra.len() || sa.len() < rb.len() {
        log::warn!("comparing {} slides common to both files", sa.len());
    }
    delong_compare(&sa, &sb, &y)
}

fn slide_images(cfg: &RunConfig) -> Result<HashMap<String, PathBuf>> {
    let manifest = cfg.require("manifest", &cfg.paths.manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    Ok(read_manifest_rows(manifest)?
        .into_iter()
        .map(|r| {
            let p = PathBuf::from(&r.image_uri);
            (r.slide_id, if p.is_absolute() { p } else { base.join(p) })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSummary {
    pub slide_id: String,
    pub coverage: f64,
    pub overlay: PathBuf,
}

/// Attention heat maps for `slides`, or for every slide of `cohort`.
pub fn heatmaps(cfg: &RunConfig, slides: &[String], cohort: Cohort) -> Result<Vec<HeatmapSummary>> {
    let layout = Layout::new(cfg.workdir());
    let bags = read_bags_jsonl(&layout.bags_jsonl())?;
    let store = feature_store(cfg, &bags)?;
    let scorer = load_model(cfg, &store)?;
    let targets: Vec<String> = if slides.is_empty() {
        cohort_ids(&CohortSplit::read_csv(&layout.split_csv())?, cohort).to_vec()
    } else {
        slides.to_vec()
    };
    let by_slide = patches_by_slide(read_patch_index(&layout.patch_index())?);
    let images = slide_images(cfg)?;
    let out = layout.heatmaps_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    targets
        .par_iter()
        .map(|id| {
            let scored = bags
                .iter()
                .filter(|b| &b.slide_id == id)
                .map(|b| {
                    let e = scorer.embed(&store, b)?;
                    Ok(ScoredBag {
                        patch_refs: b.instance_refs.clone(),
                        weights: scorer.model.attention_pool(e.features.view())?.weights,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let rows = by_slide
                .get(id)
                .ok_or_else(|| Error::invalid(format!("slide `{id}` has no patches")))?;
            let patches: Vec<_> = rows.iter().map(PatchIndexRow::patch).collect();
            let key = |p: &crate::ingest::Patch| {
                PathBuf::from(&p.slide_id)
                    .join(p.file_name())
                    .to_string_lossy()
                    .into_owned()
            };
            let layer = heatmap_layer(id, &patches, key, &scored)?;
            let img_path = images
                .get(id)
                .ok_or_else(|| Error::invalid(format!("slide `{id}` is not in the manifest")))?;
            let slide = image::open(img_path)
                .map_err(|e| Error::image(img_path, e))?
                .into_rgb8();
            let overlay =
                render_overlay(&slide, &layer, cfg.heatmap.downsample, cfg.heatmap.alpha)?;
            let png = out.join(format!("{id}.png"));
            overlay.save(&png).map_err(|e| Error::image(&png, e))?;
            layer.write_json(&out.join(format!("{id}.json")))?;
            Ok(HeatmapSummary {
                slide_id: id.clone(),
                coverage: layer.coverage,
                overlay: png,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NucleiSummary {
    pub slides: usize,
    pub nuclei: usize,
    pub ranges: FeatureRanges,
}

/// Segments every tiled patch, writes the nucleus table, the per-slide
/// feature means and the feature-bag archive. Histogram ranges are fitted on
/// the training cohort when a split exists.
pub fn nuclei(cfg: &RunConfig) -> Result<NucleiSummary> {
    let layout = Layout::new(cfg.workdir());
    let by_slide = patches_by_slide(read_patch_index(&layout.patch_index())?);
    let labels = manifest_labels(cfg).unwrap_or_default();
    let root = layout.patches_dir();
    let mut morph = Vec::with_capacity(by_slide.len());
    for (id, rows) in &by_slide {
        let patches = rows
            .iter()
            .map(|r| {
                let p = root.join(&r.path);
                Ok((
                    (r.x, r.y),
                    image::open(&p)
                        .map_err(|e| Error::image(&p, e))?
                        .into_rgb8(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        morph.push((
            id.clone(),
            slide_morphometry(&patches, &cfg.nuclei.segmenter),
        ));
    }
    let dir = layout.nuclei_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let rows: Vec<_> = morph
        .iter()
        .flat_map(|(id, m)| nucleus_rows(id, m))
        .collect();
    write_nucleus_csv(&layout.nucleus_csv(), &rows)?;

    let train: Option<std::collections::HashSet<String>> = layout
        .split_csv()
        .is_file()
        .then(|| CohortSplit::read_csv(&layout.split_csv()))
        .transpose()?
        .map(|s| s.train.into_iter().collect());
    let ranges = FeatureRanges::fit(
        morph
            .iter()
            .filter(|(id, _)| train.as_ref().is_none_or(|t| t.contains(id)))
            .flat_map(|(_, m)| m.iter()),
    )?;
    let bags = morph
        .iter()
        .map(|(id, m)| build_feature_bags(id, labels.get(id).copied(), m, &ranges, cfg.nuclei.bins))
        .collect::<Result<Vec<_>>>()?;
    write_feature_bags(&layout.feature_bags_dir(), &bags, &ranges)?;
    let means: BTreeMap<String, Vec<Option<f64>>> = morph
        .iter()
        .map(|(id, m)| {
            (
                id.clone(),
                slide_feature_means(m)
                    .iter()
                    .map(|v| v.is_finite().then_some(*v))
                    .collect(),
            )
        })
        .collect();
    write_json(&layout.slide_means_json(), &means)?;
    Ok(NucleiSummary {
        slides: morph.len(),
        nuclei: rows.len(),
        ranges,
    })
}

/// Cross-fitted feature importance from the archive written by [`nuclei`].
pub fn feature_importance(cfg: &RunConfig) -> Result<ImportanceReport> {
    let layout = Layout::new(cfg.workdir());
    let (bags, _) = read_feature_bags(&layout.feature_bags_dir())?;
    let bags: Vec<_> = bags.into_iter().filter(|b| b.label.is_some()).collect();
    let raw: Option<Vec<[f64; N_FEATURES]>> = if cfg.importance.mode == PValueMode::RawFeatures {
        let means: BTreeMap<String, Vec<Option<f64>>> = read_json(&layout.slide_means_json())?;
        Some(
            bags.iter()
                .map(|b| {
                    let v = means.get(&b.slide_id).ok_or_else(|| {
                        Error::invalid(format!("no feature means for `{}`", b.slide_id))
                    })?;
                    let mut out = [f64::NAN; N_FEATURES];
                    for (o, x) in out.iter_mut().zip(v) {
                        *o = x.unwrap_or(f64::NAN);
                    }
                    Ok(out)
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let report = rank_feature_importance(&bags, raw.as_deref(), &cfg.importance)?;
    write_json(&layout.importance_json(), &report)?;
    let mut text = format!("{}\n\n", report.render());
    text.push_str("feature & mean weight & N0 & N+ & p\n");
    for f in &report.features {
        text.push_str(&format!(
            "{} & {:.4} & {:.4} & {:.4} & {:.4}\n",
            f.feature, f.mean_weight, f.mean_weight_negative, f.mean_weight_positive, f.p_value
        ));
    }
    debug_assert_eq!(report.features.len(), FEATURE_NAMES.len());
    write_text(&layout.importance_txt(), &text)?;
    Ok(report)
}

pub fn synth(out: &Path, cfg: &SynthConfig) -> Result<SynthCorpus> {
    generate_synthetic_corpus(out, cfg)
}
