use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ObjectiveSpec;
use crate::numerics::Precision;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    #[default]
    Pretrain,
    Finetune,
}

/// Step-halving schedule: `base_lr` for the first `hold_epochs` epochs, then
/// halved at epoch `hold_epochs + 1` and again every `halve_every` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub hold_epochs: u32,
    pub halve_every: u32,
}

impl LrSchedule {
    /// Hold for 15 epochs, then halve at 16, 21, 26, ...
    pub const PRETRAIN: Self = Self {
        hold_epochs: 15,
        halve_every: 5,
    };
    /// Halve every epoch from the 2nd on.
    pub const FINETUNE: Self = Self {
        hold_epochs: 1,
        halve_every: 1,
    };

    /// Learning rate for 1-based `epoch`.
    pub fn lr(&self, base_lr: f64, epoch: u32) -> f64 {
        let halvings = if epoch > self.hold_epochs {
            (epoch - self.hold_epochs - 1) / self.halve_every + 1
        } else {
            0
        };
        base_lr * 0.5f64.powi(halvings as i32)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::PRETRAIN
    }
}

pub fn lr_pretrain(base_lr: f64, epoch: u32) -> f64 {
    LrSchedule::PRETRAIN.lr(base_lr, epoch)
}

pub fn lr_finetune(base_lr: f64, epoch: u32) -> f64 {
    LrSchedule::FINETUNE.lr(base_lr, epoch)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `w -= lr * weight_decay * w`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moving-average mutual distillation between two independent trees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MakdConfig {
    /// Steps between weight syncs.
    pub sync_interval: u64,
    /// Student <- blend * teacher + (1 - blend) * student.
    pub blend: f64,
    /// Decay of the running per-tree loss average.
    pub loss_decay: f64,
}

impl Default for MakdConfig {
    fn default() -> Self {
        Self {
            sync_interval: 100,
            blend: 1.0,
            loss_decay: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub epochs: u32,
    pub base_lr: f64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub objective: ObjectiveSpec,
    pub makd: Option<MakdConfig>,
    /// Arithmetic of the training graph; parameters and moments are kept
    /// representable in it.
    pub precision: Precision,
    /// Record elapsed seconds in each metrics row. Off by default so that
    /// equal seeds give byte-identical metrics files.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Pretrain,
            batch_size: 8,
            epochs: 30,
            base_lr: 5e-5,
            schedule: LrSchedule::PRETRAIN,
            adam: AdamConfig::default(),
            seed: 0,
            objective: ObjectiveSpec::default(),
            makd: None,
            precision: Precision::F32,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    /// Finetuning defaults: base rate 1e-4 halved every epoch from the 2nd.
    pub fn finetune() -> Self {
        Self {
            phase: Phase::Finetune,
            base_lr: 1e-4,
            schedule: LrSchedule::FINETUNE,
            epochs: 10,
            ..Self::default()
        }
    }

    pub fn lr(&self, epoch: u32) -> f64 {
        self.schedule.lr(self.base_lr, epoch)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.schedule.halve_every == 0 {
            return fail("schedule.halve_every must be >= 1".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return fail(format!("adam betas ({}, {}) outside [0, 1)", a.beta1, a.beta2));
        }
        if !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return fail("adam eps must be > 0 and weight_decay >= 0".into());
        }
        if self.precision == Precision::Extended {
            return fail("extended precision is for gradient oracles, not training".into());
        }
        if let Some(m) = &self.makd {
            if m.sync_interval == 0 {
                return fail("makd.sync_interval must be >= 1".into());
            }
            if !(m.blend > 0.0 && m.blend <= 1.0) {
                return fail(format!("makd.blend must lie in (0, 1], got {}", m.blend));
            }
            if !(0.0..1.0).contains(&m.loss_decay) {
                return fail(format!("makd.loss_decay must lie in [0, 1), got {}", m.loss_decay));
            }
        }
        self.objective.weights.validate()
    }
}
