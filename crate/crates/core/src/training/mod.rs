//! Backbone pretraining, teacher prompt learning (Stage I) and student
//! distillation (Stage II).

pub mod distill;
pub mod log;
pub mod optim;
pub mod pretrain;

pub use distill::{distill_batch_gradients, distill_batch_loss_shifted, distill_student, DistillOptions, OwnText};
pub use log::{EpochRecord, StepRecord, TrainingLog};
pub use optim::{adam_step, sgd_step, AdamState, SgdState};
pub use pretrain::{pretrain_backbone, pretrain_teacher, AuxLoss, PretrainConfig, StepContext};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Matrix, Var};
use crate::error::{Error, Result};
use crate::model::{Module, PartitionStage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown lr schedule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub tau: f64,
    pub seed: u64,
    pub schedule: LrSchedule,
    /// Random resized crop and flip on every training image.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 0.005,
            momentum: 0.9,
            tau: 1.0,
            seed: 0,
            schedule: LrSchedule::Cosine,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn snapshot(&self, section: &str) -> Vec<(String, String)> {
        vec![
            (format!("{section}.epochs"), self.epochs.to_string()),
            (format!("{section}.batch_size"), self.batch_size.to_string()),
            (format!("{section}.lr"), format!("{:?}", self.lr)),
            (format!("{section}.momentum"), format!("{:?}", self.momentum)),
            (format!("{section}.tau"), format!("{:?}", self.tau)),
            (format!("{section}.schedule"), self.schedule.as_str().into()),
            (format!("{section}.augment"), self.augment.to_string()),
        ]
    }
}

/// Learning rate for `step` of `total_steps`.
pub fn learning_rate_at(config: &TrainConfig, step: usize, total_steps: usize) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Domain(format!("step {step} outside schedule of {total_steps} steps")));
    }
    Ok(match config.schedule {
        LrSchedule::Constant => config.lr,
        LrSchedule::Cosine => {
            let t = step as f64 / total_steps as f64;
            config.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DistillMode {
    #[default]
    LogitKl,
    FeatureL1,
    FeatureMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TrainableSet {
    #[default]
    PromptsAndProjector,
    ProjectorOnly,
    FullFinetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TextBranch {
    #[default]
    SharedCache,
    OwnTextEncoder,
}

macro_rules! string_enum {
    ($t:ty, $($v:ident => $s:literal),+ $(,)?) => {
        impl $t {
            pub const ALL: &'static [$t] = &[$(<$t>::$v),+];

            pub fn as_str(self) -> &'static str {
                match self { $(<$t>::$v => $s),+ }
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(<$t>::$v),)+
                    other => Err(Error::Config(format!(
                        "unknown value {other:?}; expected one of {}",
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

string_enum!(DistillMode, LogitKl => "logit_kl", FeatureL1 => "feature_l1", FeatureMse => "feature_mse");
string_enum!(
    TrainableSet,
    PromptsAndProjector => "prompts_and_projector",
    ProjectorOnly => "projector_only",
    FullFinetune => "full_finetune",
);
string_enum!(TextBranch, SharedCache => "shared_cache", OwnTextEncoder => "own_text_encoder");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct DistillVariant {
    pub mode: DistillMode,
    pub trainable: TrainableSet,
    pub text_branch: TextBranch,
}

impl DistillVariant {
    /// Rejects combinations with no defined meaning.
    pub fn validate(&self) -> Result<()> {
        if self.text_branch == TextBranch::OwnTextEncoder {
            if self.mode != DistillMode::LogitKl {
                return Err(Error::Config(
                    "feature distillation needs the projector; it cannot use the student's own text encoder".into(),
                ));
            }
            if self.trainable != TrainableSet::PromptsAndProjector {
                return Err(Error::Config(
                    "own_text_encoder trains student prompts on both branches; combine it with prompts_and_projector"
                        .into(),
                ));
            }
        }
        Ok(())
    }

    pub fn partition_stage(&self) -> PartitionStage {
        match (self.text_branch, self.trainable) {
            (TextBranch::OwnTextEncoder, _) => PartitionStage::StudentOwnText,
            (_, TrainableSet::PromptsAndProjector) => PartitionStage::StudentDistill,
            (_, TrainableSet::ProjectorOnly) => PartitionStage::ProjectorOnly,
            (_, TrainableSet::FullFinetune) => PartitionStage::FullFinetune,
        }
    }

    /// Short label used in reports, e.g. `logit_kl`, `projector_only`.
    pub fn label(&self) -> String {
        let mut parts = vec![self.mode.as_str()];
        if self.trainable != TrainableSet::PromptsAndProjector {
            parts.push(self.trainable.as_str());
        }
        if self.text_branch != TextBranch::SharedCache {
            parts.push(self.text_branch.as_str());
        }
        parts.join("+")
    }
}

/// Per-epoch batches of indices into `0..len`: a seeded shuffle, then
/// full batches only. A set smaller than one batch forms a single batch.
pub(crate) fn epoch_batches(len: usize, batch: usize, rng: &mut crate::rng::Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    if len < batch {
        return vec![idx];
    }
    idx.chunks_exact(batch).map(<[usize]>::to_vec).collect()
}

pub(crate) fn batches_per_epoch(len: usize, batch: usize) -> usize {
    if len < batch {
        1
    } else {
        len / batch
    }
}

/// Gradients of the named leaves, in binding order.
pub(crate) fn named_grads(grads: &Gradients, bound: &[(String, Var)]) -> Vec<(String, Matrix)> {
    bound
        .iter()
        .filter_map(|(n, v)| grads.get(*v).map(|g| (n.clone(), g.clone())))
        .collect()
}

/// SHA-256 over every parameter of `modules` outside `trainable`.
pub fn frozen_checksum(modules: &[(&str, &dyn Module)], trainable: &BTreeSet<String>) -> String {
    let mut h = Sha256::new();
    for (root, m) in modules {
        m.visit(root, &mut |n, t| {
            if !trainable.contains(n) {
                t.hash_into(n, &mut h);
            }
        });
    }
    hex::encode(h.finalize())
}
