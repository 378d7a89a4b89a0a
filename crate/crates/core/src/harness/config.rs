//! Run configuration, read from and written to JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::SynthSpec;
use super::optim::AdamConfig;
use crate::backbone::ViTConfig;
use crate::error::{Error, Result};
use crate::inference::{PruneSchedule, Strategy};
use crate::losses::{KlDirection, LossWeights};

/// Synthetic data used when no IDX directory is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub synth: SynthSpec,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synth: SynthSpec::default(),
            train_per_class: 200,
            val_per_class: 50,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ViTConfig,
    pub data: DataConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Reference rate at batch 1024; the predictor uses
    /// `batch_size / 1024 · base_lr` unless `predictor_lr` is set.
    pub base_lr: f64,
    pub predictor_lr: Option<f64>,
    pub backbone_lr_scale: f64,
    pub freeze_backbone_epochs: usize,
    pub rho: f64,
    /// Blocks before which the stages run; defaults by depth.
    pub stage_blocks: Option<Vec<usize>>,
    /// `prediction` or `static`.
    pub decider: Strategy,
    pub loss: LossWeights,
    pub kl_direction: KlDirection,
    pub tau: f64,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_seed: u64,
    /// Log every this many steps (0 = epoch summaries only).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ViTConfig::desk(),
            data: DataConfig::default(),
            epochs: 30,
            batch_size: 32,
            base_lr: 1e-3,
            predictor_lr: None,
            backbone_lr_scale: 0.01,
            freeze_backbone_epochs: 5,
            rho: 0.7,
            stage_blocks: None,
            decider: Strategy::Prediction,
            loss: LossWeights::default(),
            kl_direction: KlDirection::default(),
            tau: 1.0,
            seed: 0,
            optimizer: AdamConfig::default(),
            pretrain_epochs: 30,
            pretrain_lr: 5e-4,
            pretrain_seed: 0,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn predictor_lr(&self) -> f64 {
        self.predictor_lr
            .unwrap_or(self.batch_size as f64 / 1024.0 * self.base_lr)
    }

    pub fn backbone_lr(&self) -> f64 {
        self.predictor_lr() * self.backbone_lr_scale
    }

    pub fn schedule(&self) -> Result<PruneSchedule> {
        let s = match &self.stage_blocks {
            Some(blocks) => PruneSchedule::new(blocks.clone(), self.rho, self.decider)?,
            None => PruneSchedule::default_for_depth(self.model.depth, self.rho)?.with_strategy(self.decider),
        };
        s.validate(self.model.depth)?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.schedule()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !matches!(self.decider, Strategy::Prediction | Strategy::Static) {
            return Err(Error::Config(format!(
                "decider must be prediction or static, got {}",
                self.decider
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("Gumbel temperature must be positive, got {}", self.tau)));
        }
        let rates = [self.predictor_lr(), self.backbone_lr_scale, self.pretrain_lr];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config(format!("learning rates must be finite and ≥ 0, got {rates:?}")));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_rule() {
        let c = TrainConfig::default();
        assert!((c.predictor_lr() - 32.0 / 1024.0 * 1e-3).abs() < 1e-18);
        assert!((c.backbone_lr() - c.predictor_lr() * 0.01).abs() < 1e-18);
        let c = TrainConfig {
            batch_size: 64,
            base_lr: 0.05,
            ..c
        };
        assert!((c.predictor_lr() - 0.003125).abs() < 1e-15);
        let c = TrainConfig {
            predictor_lr: Some(0.01),
            ..c
        };
        assert_eq!(c.predictor_lr(), 0.01);
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.freeze_backbone_epochs, c.backbone_lr_scale), (30, 5, 0.01));
        assert_eq!(c.schedule().unwrap().stage_blocks, vec![2, 3, 4]);
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "rho": 0.5, "loss": {"lambda_ratio": 0}}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.rho, 0.5);
        assert_eq!(c.loss.lambda_ratio, 0.0);
        assert_eq!(c.loss.lambda_kl, 0.5);
        assert_eq!(c.model, ViTConfig::desk());
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let c = TrainConfig {
            stage_blocks: Some(vec![1, 3, 5]),
            decider: Strategy::Static,
            ..TrainConfig::default()
        };
        c.save(&path).unwrap();
        assert_eq!(TrainConfig::load(&path).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        for c in [
            TrainConfig { rho: 0.0, ..TrainConfig::default() },
            TrainConfig { tau: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { decider: Strategy::Random, ..TrainConfig::default() },
            TrainConfig { stage_blocks: Some(vec![3, 2]), ..TrainConfig::default() },
            TrainConfig { stage_blocks: Some(vec![2, 6]), ..TrainConfig::default() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }
}
