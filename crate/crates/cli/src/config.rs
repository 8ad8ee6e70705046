//! TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use posedn::data::{Dataset, SceneSpec, Skeleton};
use posedn::geometry::KsParams;
use posedn::losses::LossConfig;
use posedn::model::{ModelConfig, Preset};
use posedn::train::TrainConfig;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_preset")]
    pub preset: Preset,
    /// Per-keypoint fall-off: one number for all keypoints, or a list.
    #[serde(default)]
    pub kappa: Kappa,
    /// Overrides on top of the preset, e.g. `num_queries` or `k_lqe`.
    #[serde(default)]
    pub model: toml::Table,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(skip)]
    base: PathBuf,
}

fn default_preset() -> Preset {
    Preset::Tiny
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum Kappa {
    Uniform(f64),
    PerKeypoint(Vec<f64>),
}

impl Default for Kappa {
    fn default() -> Self {
        Kappa::Uniform(0.1)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SkeletonKind {
    #[default]
    Human17,
    Star5,
}

impl SkeletonKind {
    pub fn skeleton(self) -> Skeleton {
        match self {
            SkeletonKind::Human17 => Skeleton::human17(),
            SkeletonKind::Star5 => Skeleton::star5(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory written by `gen-data`.
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    /// Scene settings for commands that render their own scenes.
    pub img_size: usize,
    pub max_persons: usize,
    pub skeleton: SkeletonKind,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            img_size: 160,
            max_persons: 4,
            skeleton: SkeletonKind::Human17,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

/// Error for a key that the running command needs but the file lacks.
pub fn missing(key: &str) -> anyhow::Error {
    anyhow::anyhow!("missing config key `{key}`")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
            .with_context(|| format!("in config {}", path.display()))
    }

    /// Parses `text`; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.base = base.to_path_buf();
        cfg.model_config()?;
        cfg.ks_params()?;
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Resolved path stored under `key`, or a missing-key error.
    pub fn path(&self, value: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        value.as_deref().map(|p| self.resolve(p)).ok_or_else(|| missing(key))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut merged = toml::Table::try_from(self.preset.config())?;
        for (k, v) in &self.model {
            merged.insert(k.clone(), v.clone());
        }
        let cfg: ModelConfig = merged.try_into().context("in [model]")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ks_params(&self) -> Result<KsParams> {
        let k = self.model_config()?.num_keypoints;
        Ok(match &self.kappa {
            Kappa::Uniform(v) => KsParams::uniform(k, *v)?,
            Kappa::PerKeypoint(v) => {
                if v.len() != k {
                    bail!("kappa lists {} values for {k} keypoints", v.len());
                }
                KsParams::new(v.clone())?
            }
        })
    }

    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let d = &self.data;
        Ok(SceneSpec::new(
            d.img_size,
            d.max_persons,
            d.skeleton.skeleton(),
            self.seed,
        )?)
    }

    /// Loads a dataset and checks that its keypoint count fits the model.
    pub fn dataset(&self, dir: &Path) -> Result<Dataset> {
        let data = Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
        let k = self.model_config()?.num_keypoints;
        if let Some(p) = data
            .annotations
            .iter()
            .flat_map(|a| &a.instances)
            .find(|p| p.num_keypoints() != k)
        {
            bail!(
                "dataset {} has {}-keypoint instances, model expects {k}",
                dir.display(),
                p.num_keypoints()
            );
        }
        Ok(data)
    }
}
