use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cwt::CwtConfig;
use crate::error::{Error, Result};
use crate::mask::MaskConfig;
use crate::model::{MpmConfig, TrainConfig};
use crate::probe::GridConfig;
use crate::signal::FeatureConfig;
use crate::tasks::{SynthConfig, Task};

use super::short_hash;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorpusSource {
    Synthetic(SynthConfig),
    /// A directory of `.wav` files with an optional labels manifest.
    Directory { path: PathBuf, labels: Option<PathBuf> },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic(SynthConfig::default())
    }
}

/// One entry of the `representations` list: `raw`, `cwt` or `mpm:<strategy>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RepresentationKind {
    Raw,
    Cwt,
    Mpm(String),
}

impl RepresentationKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(RepresentationKind::Raw),
            "cwt" => Ok(RepresentationKind::Cwt),
            _ => match s.strip_prefix("mpm:") {
                Some(strategy) => {
                    MaskConfig::parse(strategy)?;
                    Ok(RepresentationKind::Mpm(strategy.to_string()))
                }
                None => Err(Error::Config(format!("unknown representation `{s}`"))),
            },
        }
    }

    pub fn name(&self) -> String {
        match self {
            RepresentationKind::Raw => "raw".into(),
            RepresentationKind::Cwt => "cwt".into(),
            RepresentationKind::Mpm(s) => format!("mpm:{s}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    /// Seed for MPM initialisation and training.
    pub seed: u64,
    pub corpus: CorpusSource,
    pub features: FeatureConfig,
    pub cwt: CwtConfig,
    pub model: MpmConfig,
    pub train: TrainConfig,
    /// Masking strategies: span lengths such as `"16"`, or `"random"`.
    pub strategies: Vec<String>,
    pub representations: Vec<String>,
    pub tasks: Vec<String>,
    pub probe: GridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            corpus: CorpusSource::default(),
            features: FeatureConfig::default(),
            cwt: CwtConfig::default(),
            model: MpmConfig::desk(),
            train: TrainConfig::default(),
            strategies: ["4", "16", "128", "random"].map(String::from).to_vec(),
            representations: ["raw", "cwt", "mpm:random"].map(String::from).to_vec(),
            tasks: Task::ALL.iter().map(|t| t.name().to_string()).collect(),
            probe: GridConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// The config with every default filled in.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hash of everything that affects results. The output directory is
    /// excluded so a run can be moved or repeated elsewhere.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Ok(short_hash(c.to_toml()?.as_bytes()))
    }

    pub fn task_list(&self) -> Result<Vec<Task>> {
        self.tasks.iter().map(|t| Task::parse(t)).collect()
    }

    pub fn representation_list(&self) -> Result<Vec<RepresentationKind>> {
        self.representations.iter().map(|r| RepresentationKind::parse(r)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.tasks.is_empty() || self.representations.is_empty() {
            return Err(Error::Config("need at least one strategy, one task and one representation".into()));
        }
        for s in &self.strategies {
            MaskConfig::parse(s)?;
        }
        self.task_list()?;
        for r in self.representation_list()? {
            if let RepresentationKind::Mpm(s) = &r {
                if !self.strategies.contains(s) {
                    return Err(Error::Config(format!("representation mpm:{s} names an undefined strategy")));
                }
            }
        }
        if let CorpusSource::Synthetic(s) = &self.corpus {
            s.validate()?;
        }
        self.cwt.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.probe.train.validate()?;
        Ok(())
    }
}
