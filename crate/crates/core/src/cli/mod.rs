//! Command-line front end.
//!
//! Workdir layout:
//!
//! ```text
//! resolved/<command>.toml   resolved configuration of the last run of each command
//! patches/index.csv         tiled patches; images at patches/<slide>/<x>_<y>.png
//! split.csv                 slide_id, cohort
//! clinical_encoder.json     encoder fitted on the training cohort
//! bags.jsonl                one bag per line
//! features/                 features.npy + index.json (instance embeddings)
//! model.ckpt, history.csv   trained model and per-epoch log
//! predictions_<cohort>.csv  slide predictions
//! metrics_<cohort>.{json,txt}, subgroups_<cohort>.{json,txt}
//! heatmaps/<slide>.{png,json}
//! nuclei/nuclei.csv, nuclei/slide_means.json, nuclei/feature_bags/
//! importance.{json,txt}
//! ```

pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::bagging::Cohort;
use crate::error::Result;
use crate::inference::Aggregation;
use crate::interpret::PValueMode;
use crate::mil::Backbone;
use crate::stats::p_cell;
use crate::training::synth::SynthConfig;
use config::{RunConfig, WorkdirLock};

#[derive(Debug, Parser)]
#[command(
    name = "amilpath",
    version,
    about = "Attention MIL for biopsy slides with clinical fusion"
)]
pub struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Artifact directory (default: $AMILPATH_WORKDIR, then ./amilpath-work).
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// Master seed for every stochastic step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub clinical: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tile annotated tumor regions into patches.
    Tile {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        patch_size: Option<u32>,
        #[arg(long)]
        level: Option<u32>,
    },
    /// Split cohorts and sample bags of patches.
    BuildBags {
        #[command(flatten)]
        data: DataArgs,
        /// Instances per bag.
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        bags_per_slide: Option<usize>,
        /// Attach encoded clinical variables to every bag.
        #[arg(long)]
        with_clinical: bool,
        /// Exact number of test slides instead of the default ratio.
        #[arg(long)]
        test_count: Option<usize>,
    },
    /// Embed patches and train the attention MIL model.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        backbone: Option<Backbone>,
        /// 2 or 3 output classes.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Predict slides of a cohort.
    Predict {
        #[arg(long, default_value = "test")]
        cohort: Cohort,
        #[arg(long)]
        aggregation: Option<Aggregation>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score predictions: AUC with DeLong CI and exact-CI rates.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        cohort: Cohort,
        /// Also report clinical subgroups.
        #[arg(long)]
        subgroups: bool,
        /// PPV/NPV interval method: exact or logit.
        #[arg(long)]
        predictive_interval: Option<crate::stats::PredictiveInterval>,
    },
    /// Paired DeLong test between two prediction files.
    CompareAuc {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Attention heat maps.
    Heatmap {
        #[command(flatten)]
        data: DataArgs,
        /// Slides to render (default: every slide of --cohort).
        #[arg(long = "slide")]
        slides: Vec<String>,
        #[arg(long, default_value = "test")]
        cohort: Cohort,
        #[arg(long)]
        downsample: Option<u32>,
    },
    /// Segment nuclei and build feature matrices.
    Nuclei {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Rank nucleus features by re-trained attention.
    FeatureImportance {
        /// `slide-weights` or `raw-features`.
        #[arg(long)]
        mode: Option<PValueMode>,
        /// Add Holm-adjusted p-values.
        #[arg(long)]
        holm: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate a synthetic corpus.
    Synth {
        /// Output directory (default: <workdir>/synth).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "n")]
        n_slides: Option<usize>,
        #[arg(long)]
        slide_size: Option<u32>,
        #[arg(long)]
        density_gap: Option<f64>,
        #[arg(long)]
        elongation_gap: Option<f64>,
        #[arg(long)]
        age_gap: Option<f64>,
        /// Set every class difference to zero.
        #[arg(long)]
        null: bool,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Tile { .. } => "tile",
            Command::BuildBags { .. } => "build-bags",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::CompareAuc { .. } => "compare-auc",
            Command::Heatmap { .. } => "heatmap",
            Command::Nuclei { .. } => "nuclei",
            Command::FeatureImportance { .. } => "feature-importance",
            Command::Synth { .. } => "synth",
        }
    }
}

fn apply_data(cfg: &mut RunConfig, data: &DataArgs) {
    if let Some(p) = &data.manifest {
        cfg.paths.manifest = Some(p.clone());
    }
    if let Some(p) = &data.annotations {
        cfg.paths.annotations = Some(p.clone());
    }
    if let Some(p) = &data.clinical {
        cfg.paths.clinical = Some(p.clone());
    }
}

/// Folds the flags into the configuration.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_toml_file(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(w) = &cli.workdir {
        cfg.paths.workdir = Some(w.clone());
    }
    match &cli.command {
        Command::Tile {
            data,
            patch_size,
            level,
        } => {
            apply_data(&mut cfg, data);
            cfg.tile.patch_size = patch_size.unwrap_or(cfg.tile.patch_size);
            cfg.tile.level = level.unwrap_or(cfg.tile.level);
        }
        Command::BuildBags {
            data,
            instances,
            bags_per_slide,
            with_clinical,
            test_count,
        } => {
            apply_data(&mut cfg, data);
            cfg.bags.instances = instances.unwrap_or(cfg.bags.instances);
            if bags_per_slide.is_some() {
                cfg.bags.bags_per_slide = *bags_per_slide;
            }
            cfg.bags.attach_clinical |= *with_clinical;
            if let Some(c) = test_count {
                cfg.split.test = crate::bagging::CohortSize::Count(*c);
            }
        }
        Command::Train {
            epochs,
            lr,
            batch,
            backbone,
            classes,
        } => {
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.train.lr_max = lr.unwrap_or(cfg.train.lr_max);
            cfg.train.batch_bags = batch.unwrap_or(cfg.train.batch_bags);
            cfg.embedder.backbone = backbone.unwrap_or(cfg.embedder.backbone);
            cfg.classes = classes.unwrap_or(cfg.classes);
        }
        Command::Predict {
            aggregation,
            threshold,
            ..
        } => {
            cfg.predict.aggregation = aggregation.unwrap_or(cfg.predict.aggregation);
            cfg.predict.threshold = threshold.unwrap_or(cfg.predict.threshold);
        }
        Command::Evaluate {
            data,
            predictive_interval,
            ..
        } => {
            apply_data(&mut cfg, data);
            cfg.eval.predictive_interval =
                predictive_interval.unwrap_or(cfg.eval.predictive_interval);
        }
        Command::CompareAuc { data, .. } => apply_data(&mut cfg, data),
        Command::Heatmap {
            data, downsample, ..
        } => {
            apply_data(&mut cfg, data);
            cfg.heatmap.downsample = downsample.unwrap_or(cfg.heatmap.downsample);
        }
        Command::Nuclei { data, bins } => {
            apply_data(&mut cfg, data);
            cfg.nuclei.bins = bins.unwrap_or(cfg.nuclei.bins);
        }
        Command::FeatureImportance { mode, holm, epochs } => {
            cfg.importance.mode = mode.unwrap_or(cfg.importance.mode);
            cfg.importance.holm |= *holm;
            cfg.importance.epochs = epochs.unwrap_or(cfg.importance.epochs);
        }
        Command::Synth { .. } => {}
    }
    cfg.propagate_seed();
    cfg.resolve_workdir();
    cfg.validate()?;
    Ok(cfg)
}

fn synth_config(cli: &Cli) -> SynthConfig {
    let mut s = SynthConfig::default();
    if let Command::Synth {
        n_slides,
        slide_size,
        density_gap,
        elongation_gap,
        age_gap,
        null,
        ..
    } = &cli.command
    {
        s.n_slides = n_slides.unwrap_or(s.n_slides);
        s.slide_size = slide_size.unwrap_or(s.slide_size);
        s.density_gap = density_gap.unwrap_or(s.density_gap);
        s.elongation_gap = elongation_gap.unwrap_or(s.elongation_gap);
        s.age_gap = age_gap.unwrap_or(s.age_gap);
        if *null {
            s.density_gap = 0.0;
            s.elongation_gap = 0.0;
            s.age_gap = 0.0;
        }
    }
    s.seed = cli.seed.unwrap_or(0);
    s
}

/// Runs one parsed command.
pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    let _lock = WorkdirLock::acquire(cfg.workdir())?;
    cfg.write_snapshot(cli.command.name())?;
    match &cli.command {
        Command::Tile { .. } => {
            let s = pipeline::tile(&cfg)?;
            println!("tiled {} slides into {} patches", s.slides, s.patches);
            if !s.empty_slides.is_empty() {
                println!("{} slides produced no patches", s.empty_slides.len());
            }
        }
        Command::BuildBags { .. } => {
            let s = pipeline::build_bag_set(&cfg)?;
            println!(
                "{} bags; cohorts train {} / val {} / test {}",
                s.bags, s.train_slides, s.val_slides, s.test_slides
            );
        }
        Command::Train { .. } => {
            let s = pipeline::train_model(&cfg)?;
            match (s.best_epoch, s.best_val_auc) {
                (Some(e), Some(a)) => println!("best validation AUC {a:.4} at epoch {e}"),
                _ => println!("no training epochs run"),
            }
        }
        Command::Predict { cohort, .. } => {
            let p = pipeline::predict(&cfg, *cohort)?;
            println!("predicted {} slides", p.len());
        }
        Command::Evaluate {
            cohort, subgroups, ..
        } => {
            let e = pipeline::evaluate(&cfg, *cohort, *subgroups)?;
            print!(
                "{}",
                crate::stats::render_table(std::slice::from_ref(&e.report))
            );
            if let Some(g) = &e.subgroups {
                print!(
                    "{}",
                    crate::stats::render_subgroups(g, pipeline::cohort_label(*cohort))
                );
            }
        }
        Command::CompareAuc { a, b, .. } => {
            let labels =
                crate::ingest::load_labels_csv(cfg.require("manifest", &cfg.paths.manifest)?)?;
            let r = pipeline::compare_auc(a, b, &labels)?;
            println!(
                "AUC {:.3} vs {:.3}; z = {:.3}; p = {}",
                r.auc_a,
                r.auc_b,
                r.z,
                p_cell(r.p_value)
            );
        }
        Command::Heatmap { slides, cohort, .. } => {
            for h in pipeline::heatmaps(&cfg, slides, *cohort)? {
                println!(
                    "{}: coverage {:.3} -> {}",
                    h.slide_id,
                    h.coverage,
                    h.overlay.display()
                );
            }
        }
        Command::Nuclei { .. } => {
            let s = pipeline::nuclei(&cfg)?;
            println!("{} nuclei over {} slides", s.nuclei, s.slides);
        }
        Command::FeatureImportance { .. } => {
            let r = pipeline::feature_importance(&cfg)?;
            println!("{}", r.render());
        }
        Command::Synth { out, .. } => {
            let out = out.clone().unwrap_or_else(|| cfg.workdir().join("synth"));
            let c = pipeline::synth(&out, &synth_config(cli))?;
            println!(
                "{} slides written to {}",
                c.truth.slides.len(),
                out.display()
            );
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs it. Returns 0 on
/// success, 2 on a usage error and 1 on a runtime failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{} failed: {e}", cli.command.name());
            eprintln!("error: {e}");
            1
        }
    }
}
