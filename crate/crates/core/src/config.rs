//! JSON run configuration with `network`, `train`, `loss` and `data` sections.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, WeightMode};
use crate::network::NetworkSpec;
use crate::train::TrainConfig;

/// Loss settings; the class count comes from the network section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub alpha: Vec<f64>,
    pub kernels: Vec<usize>,
    pub mode: WeightMode,
    pub lambda: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            alpha: vec![1.0],
            kernels: vec![],
            mode: WeightMode::Poly,
            lambda: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory for training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_dir: Option<PathBuf>,
    /// Generated in memory when no directory is given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_synthetic: Option<SyntheticSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub loss: LossSection,
    pub data: DataSection,
}

/// Deserializes `text`, reporting the JSON path of the first offending field.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config {
            path: if path == "." { "(root)".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.loss.alpha.clone(),
            kernels: self.loss.kernels.clone(),
            mode: self.loss.mode,
            lambda: self.loss.lambda,
            class_count: self.network.class_count,
        }
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.loss_config().validate()?;
        for (name, syn) in [("data.synthetic", &self.data.synthetic), ("data.eval_synthetic", &self.data.eval_synthetic)] {
            if let Some(s) = syn {
                s.validate()?;
                if s.class_count != self.network.class_count {
                    return Err(Error::validation(
                        format!("{}.class_count", name),
                        format!("{} does not match network.class_count {}", s.class_count, self.network.class_count),
                    ));
                }
            }
        }
        if self.data.train_dir.is_some() && self.data.synthetic.is_some() {
            return Err(Error::validation("data", "give either train_dir or synthetic, not both"));
        }
        let m = self.network.required_multiple();
        if self.train.crop % m != 0 {
            return Err(Error::validation("train.crop", format!("must be a multiple of {}", m)));
        }
        Ok(())
    }

    /// Loads or generates the training set, relative paths resolved against `base`.
    pub fn training_set(&self, base: &Path) -> Result<Dataset> {
        match (&self.data.train_dir, &self.data.synthetic) {
            (Some(dir), _) => Dataset::load(base.join(dir)),
            (None, Some(spec)) => Dataset::synthetic(spec),
            (None, None) => Err(Error::validation("data", "needs train_dir or synthetic")),
        }
    }

    pub fn evaluation_set(&self, base: &Path) -> Result<Option<Dataset>> {
        match (&self.data.eval_dir, &self.data.eval_synthetic) {
            (Some(dir), _) => Dataset::load(base.join(dir)).map(Some),
            (None, Some(spec)) => Dataset::synthetic(spec).map(Some),
            (None, None) => Ok(None),
        }
    }
}
