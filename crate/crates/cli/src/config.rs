//! Run configuration files.

use std::path::Path;

use msd_core::data::GenConfig;
use msd_core::eval::EvalConfig;
use msd_core::losses::LossConfig;
use msd_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// One JSON document configuring every stage. Only `seed` is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub seed: u64,
    #[serde(default)]
    pub gen: GenConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfigFile {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            gen: GenConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("config error at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |section: &str, r: msd_core::Result<()>| {
            r.map_err(|e| CliError::Config(format!("config error in `{section}`: {e}")))
        };
        check("gen", self.gen_config().validate())?;
        check("loss", self.loss.validate())?;
        check("train", self.train_config().validate())?;
        if self.eval.recall_ks.contains(&0) {
            return Err(CliError::Config("config error in `eval.recall_ks`: K must be at least 1".into()));
        }
        Ok(())
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig { seed: self.seed, ..self.gen.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, loss: self.loss.clone(), ..self.train.clone() }
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
