//! Three-phase training: contrastive pretraining, multi-exit classifier
//! fine-tuning (Adam), attention aggregation (SGD) — all on a cosine
//! learning-rate schedule with deterministic seeding.

pub mod augment;
pub mod checkpoint;
pub mod optim;
pub mod phases;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use optim::{LayerGroup, Optimizer};
pub use phases::{
    evaluate_exit_accuracy, run_aggregation_phase, run_multi_exit_phase, run_pretrain_phase,
    PhaseReport,
};

use crate::agg::{AggregationConfig, AttentionNet, MapHead};
use crate::net::{BackboneConfig, MultiExitNet, NUM_EXITS};
use crate::nn::{self, Conv2d, Layer, Param};
use crate::{Error, Result, Scalar};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

/// Validation accuracy every exit must reach for early stopping. Set above
/// the 0.9 reporting gate: CAMs keep sharpening well after accuracy clears
/// 0.9, and the aggregation phase needs exits with little off-tumor response.
pub const ACCURACY_TARGET: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    MultiExit,
    Aggregation,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Pretrain => "pretrain",
            Phase::MultiExit => "multi_exit",
            Phase::Aggregation => "aggregation",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

fn default_lr_init() -> f64 {
    1e-4
}
fn default_lr_min() -> f64 {
    5e-6
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_epochs() -> usize {
    20
}
fn default_batch_size() -> usize {
    32
}
fn default_temperature() -> f64 {
    0.07
}
fn default_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub lr_init: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// `None` keeps the phase default: Adam for pretrain/multi-exit, SGD for
    /// aggregation. Explicit values are recorded in checkpoint metadata.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub temperature: f64,
    pub sgd_momentum: f64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Pretrain,
            lr_init: default_lr_init(),
            lr_min: default_lr_min(),
            weight_decay: default_weight_decay(),
            optimizer: None,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            temperature: default_temperature(),
            sgd_momentum: default_momentum(),
        }
    }
}

impl PhaseConfig {
    pub fn for_phase(phase: Phase) -> Self {
        Self { phase, ..Self::default() }
    }

    pub fn effective_optimizer(&self) -> OptimizerKind {
        self.optimizer.unwrap_or(match self.phase {
            Phase::Aggregation => OptimizerKind::Sgd,
            _ => OptimizerKind::Adam,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_init) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < lr_min <= lr_init, got {} and {}",
                self.lr_min, self.lr_init
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("negative weight decay".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.phase == Phase::Pretrain && self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "contrastive phases need batch_size >= 2".into(),
            ));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::InvalidConfig("sgd_momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Cosine annealing: `lr_min + (lr_init - lr_min) * (1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64, lr_min: f64) -> Result<f64> {
    if total < 1 || step > total {
        return Err(Error::BadStep { step, total });
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(lr_min + (lr_init - lr_min) * (1.0 + phase.cos()) / 2.0)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
    /// Validation accuracy per exit, shallowest first; absent when no
    /// validation split was supplied.
    pub exit_accuracy: Option<[f64; NUM_EXITS]>,
}

/// Writes the per-epoch log as CSV: epoch, phase, loss, per-exit accuracy, lr.
pub fn write_training_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,phase,loss,acc_exit1,acc_exit2,acc_exit3,acc_exit4,lr\n");
    for log in logs {
        let acc = match &log.exit_accuracy {
            Some(a) => a.map(|v| format!("{v}")).join(","),
            None => ",,,".into(),
        };
        out.push_str(&format!("{},{},{},{},{}\n", log.epoch, log.phase, log.loss, acc, log.lr));
    }
    std::fs::write(path, out).map_err(|_| Error::UnwritablePath(path.to_path_buf()))
}

/// Everything trainable, under stable parameter names: the multi-exit
/// backbone, the attention net, the pixel projector feeding the fg/bg
/// pooling, and the map-classification head of the ablation arm.
#[derive(Debug)]
pub struct ModelBundle<T> {
    pub backbone_cfg: BackboneConfig,
    pub agg_cfg: AggregationConfig,
    pub net: MultiExitNet<T>,
    pub attention: AttentionNet<T>,
    pub pixel_proj: Conv2d<T>,
    pub map_head: MapHead<T>,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(backbone_cfg: &BackboneConfig, agg_cfg: &AggregationConfig, seed: u64) -> Result<Self> {
        backbone_cfg.validate()?;
        agg_cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let net = MultiExitNet::new(backbone_cfg, &mut rng)?;
        let attention = AttentionNet::new(agg_cfg.attention_hidden, &mut rng);
        // The aggregation contrast is measured in the finest exit's feature
        // space: its grid resolves lesion-scale structure, while the deepest
        // exits' few-cell fields cannot tell a lesion-shaped foreground from
        // any coarse surrogate, and pooling them rewards exactly those
        // degenerate partitions.
        let pixel_proj = Conv2d::new(
            backbone_cfg.stage_channels[0],
            backbone_cfg.projector_dim,
            1,
            1,
            0,
            true,
            &mut rng,
        );
        let map_head = MapHead::new(backbone_cfg.num_classes, &mut rng);
        Ok(Self {
            backbone_cfg: backbone_cfg.clone(),
            agg_cfg: agg_cfg.clone(),
            net,
            attention,
            pixel_proj,
            map_head,
        })
    }
}

impl<T: Scalar> Layer<T> for ModelBundle<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.net.visit_params(&nn::join(prefix, "net"), f);
        self.attention.visit_params(&nn::join(prefix, "attention"), f);
        self.pixel_proj.visit_params(&nn::join(prefix, "pixel_proj"), f);
        self.map_head.visit_params(&nn::join(prefix, "map_head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.net.visit_params_mut(&nn::join(prefix, "net"), f);
        self.attention.visit_params_mut(&nn::join(prefix, "attention"), f);
        self.pixel_proj.visit_params_mut(&nn::join(prefix, "pixel_proj"), f);
        self.map_head.visit_params_mut(&nn::join(prefix, "map_head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.net.visit_buffers(&nn::join(prefix, "net"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        self.net.visit_buffers_mut(&nn::join(prefix, "net"), f);
    }
}
