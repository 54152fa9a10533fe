//! Two-stage training: supervised pretraining of the generator, then
//! adversarial training against the image and gradient-map discriminators.

mod adam;
mod run;
mod schedule;
mod trainer;

use std::fmt;
use std::str::FromStr;

pub use adam::{clip_global_norm, Adam};
pub use run::{
    load_generator, resolved_config, run_training, RunOptions, RunSummary, CONFIG_FILE,
    LATEST_CHECKPOINT, LOSS_LOG, PRETRAIN_CHECKPOINT, PRETRAIN_LOG,
};
pub use schedule::{schedule_lr, Schedule, PAPER_DECAY_STEPS};
pub use trainer::{Stage, Trainer};

use crate::arch::GeneratorConfig;
use crate::disc::DiscConfig;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::losses::{GanMode, LossWeights};

/// The model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Ablation {
    /// Gradient branch and gradient losses.
    #[default]
    Full,
    /// No gradient branch; gradient losses on `M(sr)` kept.
    NoGradientBranch,
    /// Gradient branch and its loss kept; `pix_gm` and `adv_gm` off.
    NoGradientLoss,
    /// Neither: the plain RRDB generator with image-space losses.
    Baseline,
}

impl Ablation {
    pub fn use_gradient_branch(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoGradientLoss)
    }

    pub fn use_gradient_loss(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoGradientBranch)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoGradientBranch => "no-gb",
            Ablation::NoGradientLoss => "no-gl",
            Ablation::Baseline => "baseline",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-gb" => Ok(Ablation::NoGradientBranch),
            "no-gl" => Ok(Ablation::NoGradientLoss),
            "baseline" => Ok(Ablation::Baseline),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected full, no-gb, no-gl or baseline)"
            ))),
        }
    }
}

/// Features compared by the perceptual term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PerceptualKind {
    /// Frozen random conv stack with a pinned seed.
    #[default]
    Random,
    /// Raw pixels.
    Identity,
}

impl fmt::Display for PerceptualKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerceptualKind::Random => "random",
            PerceptualKind::Identity => "identity",
        })
    }
}

impl FromStr for PerceptualKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PerceptualKind::Random),
            "identity" => Ok(PerceptualKind::Identity),
            other => Err(Error::Config(format!(
                "unknown perceptual extractor {other:?} (expected random or identity)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// `use_gradient_branch` always agrees with `ablation`.
    pub generator: GeneratorConfig,
    pub disc: DiscConfig,
    pub weights: LossWeights,
    pub gan_mode: GanMode,
    pub ablation: Ablation,
    pub perceptual: PerceptualKind,
    /// Adversarial steps.
    pub total_steps: u64,
    pub pretrain_steps: u64,
    /// Initial learning rate of the pretraining stage.
    pub pretrain_lr: f64,
    /// Halve the pretraining rate at one half and at three quarters of
    /// `pretrain_steps`.
    pub pretrain_decay: bool,
    pub seed: u64,
    pub checkpoint_interval: u64,
    /// Steps between sample grids; 0 disables them.
    pub sample_interval: u64,
    pub schedule: Schedule,
    /// Global gradient-norm limit, if any.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            generator: GeneratorConfig::default(),
            disc: DiscConfig::default(),
            weights: LossWeights::default(),
            gan_mode: GanMode::Ragan,
            ablation: Ablation::Full,
            perceptual: PerceptualKind::Random,
            total_steps: 2000,
            pretrain_steps: 2000,
            pretrain_lr: 5e-4,
            pretrain_decay: true,
            seed: 0,
            checkpoint_interval: 500,
            sample_interval: 500,
            schedule: Schedule::default(),
            clip_grad_norm: None,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "gan_mode",
    "ablation",
    "perceptual",
    "total_steps",
    "pretrain_steps",
    "pretrain_lr",
    "pretrain_decay",
    "checkpoint_interval",
    "sample_interval",
    "clip_grad_norm",
];

impl TrainConfig {
    /// Loss weights with the terms of ablated components zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        self.weights.effective(
            self.ablation.use_gradient_branch(),
            self.ablation.use_gradient_loss(),
        )
    }

    /// Weights used during pretraining: unit image L1 plus unit
    /// gradient-branch L1 when the branch exists.
    pub fn pretrain_weights(&self) -> LossWeights {
        LossWeights {
            beta_img: 1.0,
            gamma_img: 0.0,
            beta_gm: 0.0,
            gamma_gm: 0.0,
            beta_gb: if self.ablation.use_gradient_branch() {
                1.0
            } else {
                0.0
            },
        }
    }

    /// Pretraining learning rate for the update that follows `step`
    /// completed steps.
    pub fn pretrain_lr_at(&self, step: u64) -> f64 {
        let n = self.pretrain_steps;
        let halvings = if self.pretrain_decay {
            [n / 2, n * 3 / 4]
                .iter()
                .filter(|&&b| b > 0 && b <= step)
                .count()
        } else {
            0
        };
        self.pretrain_lr * 0.5f64.powi(halvings as i32)
    }

    pub fn set_ablation(&mut self, ablation: Ablation) {
        self.ablation = ablation;
        self.generator.use_gradient_branch = ablation.use_gradient_branch();
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.disc.validate()?;
        self.weights.validate()?;
        self.schedule.validate()?;
        if self.generator.use_gradient_branch != self.ablation.use_gradient_branch() {
            return Err(Error::Config(format!(
                "model.use_gradient_branch = {} contradicts ablation {}",
                self.generator.use_gradient_branch, self.ablation
            )));
        }
        if self.disc.in_channels != self.generator.in_channels {
            return Err(Error::Config(
                "discriminator and generator channel counts differ".into(),
            ));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be positive".into()));
        }
        if !(self.pretrain_lr.is_finite() && self.pretrain_lr > 0.0) {
            return Err(Error::Config(format!(
                "pretrain_lr must be positive, got {}",
                self.pretrain_lr
            )));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!(
                    "clip_grad_norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }

    /// Writes `seed`, `model.*`, `disc.*`, `loss.*`, `train.*` and
    /// `schedule.*` keys.
    pub fn write_kv(&self, map: &mut KvMap) {
        map.set("seed", self.seed);
        self.generator.write_kv(map, "model.");
        self.disc.write_kv(map, "disc.");
        self.weights.write_kv(map, "loss.");
        self.schedule.write_kv(map, "schedule.");
        map.set("train.gan_mode", self.gan_mode);
        map.set("train.ablation", self.ablation);
        map.set("train.perceptual", self.perceptual);
        map.set("train.total_steps", self.total_steps);
        map.set("train.pretrain_steps", self.pretrain_steps);
        map.set("train.pretrain_lr", self.pretrain_lr);
        map.set("train.pretrain_decay", self.pretrain_decay);
        map.set("train.checkpoint_interval", self.checkpoint_interval);
        map.set("train.sample_interval", self.sample_interval);
        map.set("train.clip_grad_norm", self.clip_grad_norm.unwrap_or(0.0));
    }

    /// Reads the keys written by [`TrainConfig::write_kv`]. When
    /// `model.use_gradient_branch` is absent it follows the ablation.
    pub fn from_kv(map: &KvMap) -> Result<Self> {
        map.check_known("train.", TRAIN_KEYS)?;
        let d = TrainConfig::default();
        let ablation: Ablation = map.parse_or("train.ablation", d.ablation)?;
        let mut generator = GeneratorConfig::from_kv(map, "model.")?;
        if !map.contains("model.use_gradient_branch") {
            generator.use_gradient_branch = ablation.use_gradient_branch();
        }
        let clip: f64 = map.parse_or("train.clip_grad_norm", 0.0)?;
        let cfg = TrainConfig {
            generator,
            disc: DiscConfig::from_kv(map, "disc.")?,
            weights: LossWeights::from_kv(map, "loss.")?,
            gan_mode: map.parse_or("train.gan_mode", d.gan_mode)?,
            ablation,
            perceptual: map.parse_or("train.perceptual", d.perceptual)?,
            total_steps: map.parse_or("train.total_steps", d.total_steps)?,
            pretrain_steps: map.parse_or("train.pretrain_steps", d.pretrain_steps)?,
            pretrain_lr: map.parse_or("train.pretrain_lr", d.pretrain_lr)?,
            pretrain_decay: map.parse_or("train.pretrain_decay", d.pretrain_decay)?,
            seed: map.parse_or("seed", d.seed)?,
            checkpoint_interval: map
                .parse_or("train.checkpoint_interval", d.checkpoint_interval)?,
            sample_interval: map.parse_or("train.sample_interval", d.sample_interval)?,
            schedule: Schedule::from_kv(map, "schedule.")?,
            clip_grad_norm: (clip > 0.0).then_some(clip),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
