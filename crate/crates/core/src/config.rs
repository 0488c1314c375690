//! Run configuration: every module's settings in one TOML document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contour::ContourParams;
use crate::dataset::synthetic::SyntheticConfig;
use crate::error::{io_err, Error, Result};
use crate::evaluation::EvalConfig;
use crate::inpaint::MtnTrainConfig;
use crate::retrieval::DEFAULT_TOP_K;
use crate::shape_matching::SmnTrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Train fraction of the manifest split.
    pub train_ratio: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_ratio: 0.8,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub top_k: usize,
    pub pairs: usize,
    pub allow_ground_truth: bool,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            pairs: 2000,
            allow_ground_truth: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synthetic: SyntheticConfig,
    pub data: DataConfig,
    pub contour: ContourParams,
    pub smn: SmnTrainConfig,
    pub mtn: MtnTrainConfig,
    pub retrieval: RetrievalConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Sets every seed in the document.
    pub fn set_seed(&mut self, seed: u64) {
        self.synthetic.seed = seed;
        self.data.split_seed = seed;
        self.smn.seed = seed;
        self.mtn.seed = seed;
        self.retrieval.seed = seed;
        self.eval.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.contour.validate()?;
        if !(0.0..=1.0).contains(&self.data.train_ratio) {
            return Err(Error::Config(format!("train_ratio {} outside [0,1]", self.data.train_ratio)));
        }
        if self.retrieval.top_k == 0 {
            return Err(Error::Config("retrieval.top_k must be at least 1".into()));
        }
        if self.smn.batch_size == 0 || self.mtn.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}
