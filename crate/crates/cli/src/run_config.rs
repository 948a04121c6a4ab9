use std::path::Path;

use anyhow::Context;
use lgcn_core::config::ModelConfig;
use lgcn_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::args::{ModelPreset, TrainArgs};
use crate::UsageError;

/// Everything that determines a training run. Missing sections and fields
/// fall back to the toy defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        serde_json::from_str(text).map_err(|e| UsageError(format!("bad run config: {e}")).into())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// File, then preset, then flags and `LGCN_` variables, later winning.
    pub fn resolve(a: &TrainArgs) -> anyhow::Result<Self> {
        let mut cfg = match &a.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        match a.preset {
            Some(ModelPreset::Toy) => cfg.model = ModelConfig { arch: cfg.model.arch, ..ModelConfig::toy() },
            Some(ModelPreset::Paper) => {
                cfg.model = ModelConfig { arch: cfg.model.arch, ..ModelConfig::paper() };
                cfg.train = TrainConfig { epochs: cfg.train.epochs, seed: cfg.train.seed, ..TrainConfig::paper() };
            }
            None => {}
        }
        if let Some(arch) = a.arch {
            cfg.model.arch = arch.arch();
        }
        cfg.model.arch = a.ablation.apply(cfg.model.arch);
        let t = &mut cfg.train;
        if let Some(v) = a.seed {
            t.seed = v;
        }
        if let Some(v) = a.epochs {
            t.epochs = v;
        }
        if let Some(v) = a.lr {
            t.lr = v;
        }
        if let Some(v) = a.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = a.margin {
            t.margin = v;
        }
        if let Some(v) = a.freeze_backbone {
            t.freeze_backbone = v;
        }
        cfg.model.validate().map_err(|e| UsageError(e.to_string()))?;
        cfg.train.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.lr = 3e-4;
        cfg.model.arch.fsa = false;
        assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse(r#"{"train": {"lr": 0.1, "momentum": 0.9}}"#).is_err());
        assert!(RunConfig::parse(r#"{"optimizer": {}}"#).is_err());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = RunConfig::parse(r#"{"train": {"epochs": 2}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.lr, TrainConfig::toy().lr);
        assert_eq!(cfg.model, ModelConfig::toy());
    }
}
