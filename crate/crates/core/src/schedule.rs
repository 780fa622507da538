//! Training phases and the stepped learning-rate rule.
//!
//! A [`TrainPlan`] is a list of phases run back to back. Each phase restarts
//! its own learning-rate schedule from the base rate, which is
//! `base_lr_per_sample * batch_size`. Decays take effect at the start of the
//! named (1-based) epoch of the phase.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BASE_LR_PER_SAMPLE: f64 = 0.00125;
pub const MOMENTUM: f64 = 0.9;
pub const WEIGHT_DECAY: f64 = 0.0001;
pub const DEFAULT_BATCH_SIZE: usize = 16;
/// Length of the 1x schedule.
pub const ONE_X_EPOCHS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhaseKind {
    /// Every image once per epoch, in a seeded shuffle.
    Sequential,
    /// Batches drawn from a soft-balance plan with this lambda.
    Balanced { lambda: f64 },
}

impl PhaseKind {
    pub fn lambda(self) -> Option<f64> {
        match self {
            PhaseKind::Sequential => None,
            PhaseKind::Balanced { lambda } => Some(lambda),
        }
    }
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhaseKind::Sequential => write!(f, "sequential"),
            PhaseKind::Balanced { lambda } => write!(f, "balanced({lambda})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub kind: PhaseKind,
    pub epochs: usize,
    /// `(epoch, multiplier)`, 1-based epochs within the phase, ascending.
    pub lr_schedule: Vec<(usize, f64)>,
}

impl Phase {
    pub fn new(kind: PhaseKind, epochs: usize, lr_schedule: Vec<(usize, f64)>) -> Result<Self> {
        if epochs == 0 {
            return Err(Error::Config("a phase needs at least one epoch".into()));
        }
        let mut prev_epoch = 0;
        let mut prev_mult = f64::INFINITY;
        for &(e, m) in &lr_schedule {
            if e <= prev_epoch || !(m > 0.0) || m > prev_mult {
                return Err(Error::Config(format!(
                    "lr schedule must have ascending epochs and positive, non-increasing multipliers: {lr_schedule:?}"
                )));
            }
            prev_epoch = e;
            prev_mult = m;
        }
        if let PhaseKind::Balanced { lambda } = kind {
            if !(lambda >= 0.0) || !lambda.is_finite() {
                return Err(Error::Config(format!("lambda {lambda} must be finite and >= 0")));
            }
        }
        Ok(Phase {
            kind,
            epochs,
            lr_schedule,
        })
    }

    /// A phase of `epochs` epochs with decays rescaled from the 1x schedule.
    pub fn scaled(kind: PhaseKind, epochs: usize) -> Result<Self> {
        Phase::new(kind, epochs, scaled_lr_schedule(epochs))
    }

    /// Multiplier for 0-based epoch `local` of this phase.
    pub fn multiplier(&self, local: usize) -> f64 {
        let epoch = local + 1;
        self.lr_schedule
            .iter()
            .take_while(|(e, _)| *e <= epoch)
            .last()
            .map_or(1.0, |&(_, m)| m)
    }
}

/// Decay points at `floor(4E/7)` and `floor(6E/7)`, kept at least 1 apart and
/// never before epoch 2; points past the phase end are dropped.
pub fn scaled_lr_schedule(epochs: usize) -> Vec<(usize, f64)> {
    let first = (epochs * 4 / ONE_X_EPOCHS).max(2);
    let second = (epochs * 6 / ONE_X_EPOCHS).max(first + 1);
    [(1, 1.0), (first, 0.1), (second, 0.01)]
        .into_iter()
        .filter(|&(e, _)| e <= epochs)
        .collect()
}

/// Seven epochs; x0.1 from epoch 4, x0.01 from epoch 6.
pub fn one_x_schedule() -> Phase {
    Phase::new(
        PhaseKind::Sequential,
        ONE_X_EPOCHS,
        vec![(1, 1.0), (4, 0.1), (6, 0.01)],
    )
    .expect("1x schedule is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub phases: Vec<Phase>,
    pub base_lr_per_sample: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl TrainPlan {
    /// Plan with the default optimizer settings.
    pub fn new(phases: Vec<Phase>, batch_size: usize) -> Result<Self> {
        if phases.is_empty() {
            return Err(Error::Config("a plan needs at least one phase".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(TrainPlan {
            phases,
            base_lr_per_sample: BASE_LR_PER_SAMPLE,
            batch_size,
            momentum: MOMENTUM,
            weight_decay: WEIGHT_DECAY,
        })
    }

    /// A single phase of `epochs` epochs.
    pub fn single(kind: PhaseKind, epochs: usize, batch_size: usize) -> Result<Self> {
        TrainPlan::new(vec![Phase::scaled(kind, epochs)?], batch_size)
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr_per_sample * self.batch_size as f64
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }
}

impl fmt::Display for TrainPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "batch_size={} base_lr_per_sample={} momentum={} weight_decay={} phases=",
            self.batch_size, self.base_lr_per_sample, self.momentum, self.weight_decay
        )?;
        for (k, p) in self.phases.iter().enumerate() {
            if k > 0 {
                write!(f, ";")?;
            }
            write!(f, "{}x{}@", p.kind, p.epochs)?;
            let sched: Vec<String> = p.lr_schedule.iter().map(|(e, m)| format!("{e}:{m}")).collect();
            write!(f, "{}", sched.join(","))?;
        }
        Ok(())
    }
}

/// Sequential pretraining for `pretrain_epochs` (rescaled decays), then a
/// 1x soft-balance finetune at `finetune_lambda`.
pub fn hybrid_plan(pretrain_epochs: usize, finetune_lambda: f64) -> Result<TrainPlan> {
    if pretrain_epochs == 0 {
        return Err(Error::Config("pretrain_epochs must be >= 1".into()));
    }
    let pretrain = Phase::scaled(PhaseKind::Sequential, pretrain_epochs)?;
    let mut finetune = one_x_schedule();
    finetune.kind = PhaseKind::Balanced {
        lambda: finetune_lambda,
    };
    let finetune = Phase::new(finetune.kind, finetune.epochs, finetune.lr_schedule)?;
    TrainPlan::new(vec![pretrain, finetune], DEFAULT_BATCH_SIZE)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSpec {
    pub phase: usize,
    /// 0-based epoch within the phase.
    pub local_epoch: usize,
    pub kind: PhaseKind,
    pub lr: f64,
}

impl EpochSpec {
    pub fn lambda(&self) -> Option<f64> {
        self.kind.lambda()
    }
}

/// Phase and exact learning rate for 0-based `global_epoch`.
pub fn next_epoch(plan: &TrainPlan, global_epoch: usize) -> Result<EpochSpec> {
    let mut start = 0;
    for (k, phase) in plan.phases.iter().enumerate() {
        if global_epoch < start + phase.epochs {
            let local = global_epoch - start;
            return Ok(EpochSpec {
                phase: k,
                local_epoch: local,
                kind: phase.kind,
                lr: plan.base_lr() * phase.multiplier(local),
            });
        }
        start += phase.epochs;
    }
    Err(Error::EpochOutOfRange {
        epoch: global_epoch,
        total: start,
    })
}

/// Order in which a sequential epoch visits `num_images` images.
pub fn sequential_order(num_images: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_images).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}
