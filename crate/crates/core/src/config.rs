//! One TOML run configuration covering every stage. Unknown keys are
//! rejected and everything is validated before any work starts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{PhantomSpec, PreprocessConfig};
use crate::error::{Error, Result};
use crate::metrics::{Connectivity, EvalConfig};
use crate::trainer::TrainConfig;
use crate::unet::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub patch_size: usize,
    pub stride: usize,
    /// Monte-Carlo dropout passes per patch; 0 is a single deterministic pass.
    pub mc_samples: usize,
    pub threshold: f32,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            patch_size: 32,
            stride: 32,
            mc_samples: 0,
            threshold: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub members: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { members: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub phantom: PhantomSpec,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub ensemble: EnsembleConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.phantom.validate().map_err(cfg_err)?;
        self.model.validate()?;
        self.train.validate()?;
        let d = self.model.divisor();
        if !self.train.patch_size.is_multiple_of(d) || !self.inference.patch_size.is_multiple_of(d)
        {
            return Err(Error::Config(format!(
                "patch sizes must be divisible by {d} for a depth-{} network",
                self.model.depth
            )));
        }
        let i = &self.inference;
        crate::data::patches::check_window(i.patch_size, i.stride).map_err(cfg_err)?;
        if !(i.threshold > 0.0 && i.threshold < 1.0) {
            return Err(Error::Config(format!(
                "inference threshold must lie in (0, 1), got {}",
                i.threshold
            )));
        }
        if self.ensemble.members < 2 {
            return Err(Error::Config("an ensemble needs at least 2 members".into()));
        }
        Connectivity::from_count(self.eval.connectivity).map_err(cfg_err)?;
        if !(self.eval.overlap_frac > 0.0 && self.eval.overlap_frac <= 1.0) {
            return Err(Error::Config("eval.overlap_frac must lie in (0, 1]".into()));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config("eval.threshold must lie in (0, 1)".into()));
        }
        if let Some(s) = self.preprocess.target_spacing {
            if s.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Config(
                    "preprocess.target_spacing must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}
