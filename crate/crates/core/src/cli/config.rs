use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bagging::{BagConfig, SplitConfig};
use crate::error::{Error, Result};
use crate::inference::PredictConfig;
use crate::ingest::TileConfig;
use crate::interpret::{ClassicalSegmenter, ImportanceConfig, DEFAULT_BINS};
use crate::mil::Backbone;
use crate::stats::PredictiveInterval;
use crate::training::TrainConfig;

pub const WORKDIR_ENV: &str = "AMILPATH_WORKDIR";
pub const DEFAULT_WORKDIR: &str = "amilpath-work";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub clinical: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub backbone: Backbone,
    pub pretrained: bool,
    pub seed: u64,
    /// Z-score each feature dimension with training-cohort statistics.
    pub standardize: bool,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            backbone: Backbone::Toy,
            pretrained: false,
            seed: 0,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub alpha: f64,
    /// Interval method for PPV and NPV.
    pub predictive_interval: PredictiveInterval,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alpha: 0.05,
            predictive_interval: PredictiveInterval::Exact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapConfig {
    pub downsample: u32,
    pub alpha: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        HeatmapConfig {
            downsample: 8,
            alpha: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NucleiConfig {
    pub segmenter: ClassicalSegmenter,
    pub bins: usize,
}

impl Default for NucleiConfig {
    fn default() -> Self {
        NucleiConfig {
            segmenter: ClassicalSegmenter::default(),
            bins: DEFAULT_BINS,
        }
    }
}

/// Everything a run needs, read from one TOML file and overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; when set it replaces every component seed.
    pub seed: Option<u64>,
    /// 2 (N0 / N+) or 3 (N0 / N+(1-2) / N+(>=3)).
    pub classes: usize,
    pub paths: Paths,
    pub tile: TileConfig,
    pub split: SplitConfig,
    pub bags: BagConfig,
    pub embedder: EmbedderConfig,
    pub train: TrainConfig,
    pub predict: PredictConfig,
    pub eval: EvalConfig,
    pub heatmap: HeatmapConfig,
    pub nuclei: NucleiConfig,
    pub importance: ImportanceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            classes: 2,
            paths: Paths::default(),
            tile: TileConfig::default(),
            split: SplitConfig::default(),
            bags: BagConfig::default(),
            embedder: EmbedderConfig::default(),
            train: TrainConfig::default(),
            predict: PredictConfig::default(),
            eval: EvalConfig::default(),
            heatmap: HeatmapConfig::default(),
            nuclei: NucleiConfig::default(),
            importance: ImportanceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    /// Copies the master seed into every stochastic component.
    pub fn propagate_seed(&mut self) {
        if let Some(s) = self.seed {
            self.split.seed = s;
            self.bags.seed = s;
            self.embedder.seed = s;
            self.train.seed = s;
            self.importance.seed = s;
        }
    }

    /// Flag, then config file, then `AMILPATH_WORKDIR`, then `./amilpath-work`.
    pub fn resolve_workdir(&mut self) -> PathBuf {
        let w = self
            .paths
            .workdir
            .clone()
            .or_else(|| std::env::var_os(WORKDIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_WORKDIR));
        self.paths.workdir = Some(w.clone());
        w
    }

    pub fn workdir(&self) -> &Path {
        self.paths
            .workdir
            .as_deref()
            .unwrap_or(Path::new(DEFAULT_WORKDIR))
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.classes) {
            return Err(Error::invalid(format!(
                "classes must be 2 or 3, got {}",
                self.classes
            )));
        }
        self.bags.validate()?;
        self.train.validate()?;
        for (name, p) in [
            ("manifest", &self.paths.manifest),
            ("annotations", &self.paths.annotations),
            ("clinical", &self.paths.clinical),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::invalid(format!(
                        "{name} path {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn require<'a>(&self, name: &str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
        p.as_deref().ok_or_else(|| {
            Error::invalid(format!(
                "no {name} path given (flag --{name} or [paths] {name})"
            ))
        })
    }

    /// Writes `resolved/<command>.toml` under the workdir.
    pub fn write_snapshot(&self, command: &str) -> Result<PathBuf> {
        let dir = self.workdir().join("resolved");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{command}.toml"));
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("config snapshot: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Exclusive lock on a workdir, released on drop.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self> {
        std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let path = workdir.join(".amilpath.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WorkdirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::invalid(format!(
                    "workdir {} is locked by another run (remove {} if stale)",
                    workdir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
