//! Experiment configuration (TOML) and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use dine_core::distill::AdaptConfig;
use dine_core::finetune::FinetuneConfig;
use dine_core::models::Architecture;
use dine_core::predictor::{DisclosureMode, TeacherEncoding};
use dine_core::scenario::ScenarioSpec;
use dine_core::training::SourceTrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_at, Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Label for reports.
    pub name: String,
    pub scenario: ScenarioSpec,
    pub source: SourceTrainConfig,
    /// Target trunk widths.
    pub target_hidden: Vec<usize>,
    pub bottleneck: usize,
    /// `adapt.seed` and `finetune.seed` are overridden by each entry of `seeds`.
    pub adapt: AdaptConfig,
    pub finetune: FinetuneConfig,
    pub disclosure: DisclosureMode,
    pub seeds: Vec<u64>,
    /// Fraction of each source domain used for training; the rest is the
    /// source test split.
    pub source_train_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "dine".into(),
            scenario: ScenarioSpec::reference(),
            source: SourceTrainConfig::default(),
            target_hidden: vec![64, 64],
            bottleneck: 32,
            adapt: AdaptConfig::default(),
            finetune: FinetuneConfig::default(),
            disclosure: DisclosureMode::TopR(1),
            seeds: vec![2019, 2020, 2021],
            source_train_fraction: 0.8,
        }
    }
}

/// Ablation switches applied on top of a config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ablation {
    pub drop_mi: bool,
    pub drop_mix: bool,
    pub drop_ft: bool,
    pub teacher: Option<TeacherEncoding>,
    pub gamma: Option<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        Ok(toml::from_str(&text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(io_at(path))
    }

    pub fn target_architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.target_hidden.clone(),
            num_classes: self.scenario.num_classes,
            bottleneck: self.bottleneck,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.adapt.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Usage("at least one seed is required".into()));
        }
        if !(self.source_train_fraction > 0.0 && self.source_train_fraction < 1.0) {
            return Err(Error::Usage("source_train_fraction must lie in (0, 1)".into()));
        }
        let k = self.scenario.num_classes;
        let r = match self.adapt.teacher {
            TeacherEncoding::AdaLs(r) => r,
            _ => 1,
        };
        if r > k {
            return Err(Error::Usage(format!("truncation r = {r} exceeds K = {k}")));
        }
        if let DisclosureMode::TopR(d) = self.disclosure {
            if d == 0 || d > k || d < r {
                return Err(Error::Usage(format!("top-{d} disclosure cannot feed r = {r} with K = {k}")));
            }
        }
        Ok(())
    }

    /// A copy with the switches applied. Dropping mixup sets `beta` to zero;
    /// dropping fine-tuning sets its epochs to zero.
    pub fn with_ablation(&self, a: &Ablation) -> Self {
        let mut c = self.clone();
        if a.drop_mi {
            c.adapt.use_mi = false;
        }
        if a.drop_mix {
            c.adapt.beta = 0.0;
        }
        if a.drop_ft {
            c.finetune.epochs = 0;
        }
        if let Some(t) = a.teacher {
            c.adapt.teacher = t;
        }
        if let Some(g) = a.gamma {
            c.adapt.gamma = g;
        }
        c
    }
}

/// Where an adaptation run gets its source predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "paths", rename_all = "snake_case")]
pub enum PredictorSource {
    /// Source checkpoints served in-process.
    Checkpoints(Vec<PathBuf>),
    /// Prediction caches.
    Caches(Vec<PathBuf>),
    /// Running services, as `host:port`.
    Endpoints(Vec<String>),
}

/// Everything needed to rerun an adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    pub predictors: PredictorSource,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(command: &str, predictors: PredictorSource, config: ExperimentConfig) -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            predictors,
            config,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        let m: Manifest = toml::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Version {
                what: "manifest",
                found: m.version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, toml::to_string(self)?).map_err(io_at(path))
    }
}
