//! Run configuration: a TOML file with `[data]`, `[backbone]`, `[phase]` and
//! `[aggregation]` sections. Every section except `[data]` may be partial or
//! absent; missing keys take the documented defaults.

use crate::agg::AggregationConfig;
use crate::net::BackboneConfig;
use crate::train::PhaseConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Directory holding the volumes (raw pairs or NIfTI).
    pub data_dir: PathBuf,
    /// Split manifest produced by the `manifest` command.
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub phase: PhaseConfig,
    #[serde(default)]
    pub aggregation: AggregationConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.phase.validate()?;
        self.aggregation.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        std::fs::write(path, text).map_err(|_| Error::UnwritablePath(path.to_path_buf()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{OptimizerKind, Phase};

    #[test]
    fn minimal_config_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[data]\ndata_dir = \"vols\"\nmanifest = \"vols/manifest.json\"\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.backbone.stage_channels, [64, 128, 256, 512]);
        assert_eq!(cfg.backbone.input_size, 128);
        assert_eq!(cfg.phase.lr_init, 1e-4);
        assert_eq!(cfg.phase.lr_min, 5e-6);
        assert_eq!(cfg.phase.weight_decay, 1e-5);
        assert_eq!(cfg.phase.batch_size, 32);
        assert_eq!(cfg.phase.temperature, 0.07);
        assert_eq!(cfg.phase.sgd_momentum, 0.9);
        assert!(cfg.aggregation.freeze_backbone);
        assert_eq!(cfg.aggregation.attention_hidden, 32);
    }

    #[test]
    fn partial_sections_override_selected_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            concat!(
                "[data]\ndata_dir = \"d\"\nmanifest = \"m.json\"\n\n",
                "[backbone]\ninput_size = 64\nstage_channels = [8, 16, 32, 64]\n\n",
                "[phase]\nphase = \"multi_exit\"\nepochs = 3\noptimizer = \"sgd\"\n\n",
                "[aggregation]\nloss = \"cross_entropy\"\n",
            ),
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.backbone.input_size, 64);
        assert_eq!(cfg.backbone.stage_channels, [8, 16, 32, 64]);
        assert_eq!(cfg.backbone.num_classes, 2, "untouched key keeps its default");
        assert_eq!(cfg.phase.phase, Phase::MultiExit);
        assert_eq!(cfg.phase.epochs, 3);
        assert_eq!(cfg.phase.optimizer, Some(OptimizerKind::Sgd));
        assert_eq!(cfg.aggregation.loss, crate::agg::AggLossKind::CrossEntropy);
    }

    #[test]
    fn invalid_values_are_rejected_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[data]\ndata_dir = \"d\"\nmanifest = \"m\"\n[backbone]\ninput_size = 50\n",
        )
        .unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::InvalidConfig(_))));

        std::fs::write(&path, "not toml at all [").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::InvalidConfig(_))));

        assert!(matches!(
            RunConfig::load(&dir.path().join("absent.toml")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let cfg = RunConfig {
            data: DataConfig { data_dir: "vols".into(), manifest: "vols/manifest.json".into() },
            backbone: BackboneConfig { input_size: 64, ..Default::default() },
            phase: PhaseConfig { epochs: 7, seed: 42, ..Default::default() },
            aggregation: AggregationConfig::default(),
        };
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }
}
