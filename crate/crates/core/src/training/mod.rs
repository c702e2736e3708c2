//! Training stages: identity pretraining of the anonymizer, encoder
//! initialization, the two-step minimax, feature extraction, anomaly-head
//! training, and the privacy attack and probe trainings used for evaluation.

mod anon;
mod attack;
mod detector;
mod features;
mod trainlog;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use anon::{
    action_accuracy, anonymize_chunked, budget_separation, init_encoders, intra_video_distance, pretrain_identity, train_anonymization, AnonReport, InitReport,
    PretrainReport,
};
pub use attack::{
    attack_cmap, predict_attributes, probe_features, train_feature_probe, train_privacy_attack, AttackReport, ProbeReport,
};
pub use detector::{score_video, train_anomaly_detector, AdReport, FeatureSet, LabeledFeatures};
pub use features::{
    extract_features, read_feature_file, read_feature_dir, write_feature_dir, write_feature_file, FeatureMode,
    FeatureSequence,
};
pub use trainlog::{LogRecord, TrainLog};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;

/// Which anonymization epoch is kept for downstream stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSelection {
    #[default]
    Final,
    /// Epoch with the highest utility accuracy through `f_T(f_A(x))` among
    /// epochs whose budget loss is at least the first epoch's.
    BestUtility,
}

macro_rules! defaults {
    ($($name:ident: $ty:ty = $v:expr;)*) => {
        mod d {
            #![allow(unused_imports)]
            use super::*;
            $(pub fn $name() -> $ty { $v })*
        }
    };
}

defaults! {
    anon_epochs: usize = 80;
    ad_epochs: usize = 1000;
    lr_anonymizer: f64 = 1e-4;
    lr_utility: f64 = 1e-4;
    lr_budget: f64 = 1e-4;
    lr_ad: f64 = 1e-3;
    ad_weight_decay: f64 = 5e-4;
    anon_batch: usize = 8;
    ad_batch: usize = 16;
    attack_batch: usize = 32;
    ad_dropout: f64 = 0.7;
    ad_patience: usize = 50;
    pretrain_epochs: usize = 20;
    pretrain_lr: f64 = 1e-4;
    pretrain_batch: usize = 32;
    pretrain_frames_per_video: usize = 8;
    pretrain_threshold: f64 = 0.05;
    init_utility_epochs: usize = 20;
    init_budget_epochs: usize = 20;
    init_lr: f64 = 1e-3;
    attack_epochs: usize = 100;
    attack_lr: f64 = 1e-3;
    attack_min_lr: f64 = 1e-12;
    probe_epochs: usize = 50;
    probe_lr: f64 = 1e-4;
    probe_batch: usize = 32;
    probe_stack: usize = 16;
    yes: bool = true;
    no: bool = false;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default = "d::anon_epochs")]
    pub anon_epochs: usize,
    #[serde(default = "d::ad_epochs")]
    pub ad_epochs: usize,
    #[serde(default = "d::lr_anonymizer")]
    pub lr_anonymizer: f64,
    #[serde(default = "d::lr_utility")]
    pub lr_utility: f64,
    #[serde(default = "d::lr_budget")]
    pub lr_budget: f64,
    #[serde(default = "d::lr_ad")]
    pub lr_ad: f64,
    #[serde(default = "d::ad_weight_decay")]
    pub ad_weight_decay: f64,
    #[serde(default = "d::anon_batch")]
    pub anon_batch: usize,
    #[serde(default = "d::ad_batch")]
    pub ad_batch: usize,
    #[serde(default = "d::attack_batch")]
    pub attack_batch: usize,
    /// Drop probability of the anomaly head's input features.
    #[serde(default = "d::ad_dropout")]
    pub ad_dropout: f64,
    /// Epochs without a validation AUC improvement before stopping.
    #[serde(default = "d::ad_patience")]
    pub ad_patience: usize,
    #[serde(default = "d::pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "d::pretrain_lr")]
    pub pretrain_lr: f64,
    #[serde(default = "d::pretrain_batch")]
    pub pretrain_batch: usize,
    #[serde(default = "d::pretrain_frames_per_video")]
    pub pretrain_frames_per_video: usize,
    /// Held-out mean per-pixel L1 the identity pretraining must reach.
    #[serde(default = "d::pretrain_threshold")]
    pub pretrain_threshold: f64,
    #[serde(default = "d::no")]
    pub skip_init: bool,
    #[serde(default = "d::init_utility_epochs")]
    pub init_utility_epochs: usize,
    #[serde(default = "d::init_budget_epochs")]
    pub init_budget_epochs: usize,
    #[serde(default = "d::init_lr")]
    pub init_lr: f64,
    /// Step-1 and Step-2 of a minimax iteration see the same minibatch.
    #[serde(default = "d::yes")]
    pub same_batch: bool,
    #[serde(default)]
    pub checkpoint_selection: CheckpointSelection,
    #[serde(default = "d::attack_epochs")]
    pub attack_epochs: usize,
    #[serde(default = "d::attack_lr")]
    pub attack_lr: f64,
    #[serde(default = "d::attack_min_lr")]
    pub attack_min_lr: f64,
    #[serde(default = "d::probe_epochs")]
    pub probe_epochs: usize,
    #[serde(default = "d::probe_lr")]
    pub probe_lr: f64,
    #[serde(default = "d::probe_batch")]
    pub probe_batch: usize,
    /// Copies of an image stacked into a pseudo-clip for the probe.
    #[serde(default = "d::probe_stack")]
    pub probe_stack: usize,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            anon_epochs: d::anon_epochs(),
            ad_epochs: d::ad_epochs(),
            lr_anonymizer: d::lr_anonymizer(),
            lr_utility: d::lr_utility(),
            lr_budget: d::lr_budget(),
            lr_ad: d::lr_ad(),
            ad_weight_decay: d::ad_weight_decay(),
            anon_batch: d::anon_batch(),
            ad_batch: d::ad_batch(),
            attack_batch: d::attack_batch(),
            ad_dropout: d::ad_dropout(),
            ad_patience: d::ad_patience(),
            pretrain_epochs: d::pretrain_epochs(),
            pretrain_lr: d::pretrain_lr(),
            pretrain_batch: d::pretrain_batch(),
            pretrain_frames_per_video: d::pretrain_frames_per_video(),
            pretrain_threshold: d::pretrain_threshold(),
            skip_init: false,
            init_utility_epochs: d::init_utility_epochs(),
            init_budget_epochs: d::init_budget_epochs(),
            init_lr: d::init_lr(),
            same_batch: true,
            checkpoint_selection: CheckpointSelection::Final,
            attack_epochs: d::attack_epochs(),
            attack_lr: d::attack_lr(),
            attack_min_lr: d::attack_min_lr(),
            probe_epochs: d::probe_epochs(),
            probe_lr: d::probe_lr(),
            probe_batch: d::probe_batch(),
            probe_stack: d::probe_stack(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_anonymizer", self.lr_anonymizer),
            ("lr_utility", self.lr_utility),
            ("lr_budget", self.lr_budget),
            ("lr_ad", self.lr_ad),
            ("pretrain_lr", self.pretrain_lr),
            ("init_lr", self.init_lr),
            ("attack_lr", self.attack_lr),
            ("attack_min_lr", self.attack_min_lr),
            ("probe_lr", self.probe_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("anon_epochs", self.anon_epochs),
            ("ad_epochs", self.ad_epochs),
            ("pretrain_epochs", self.pretrain_epochs),
            ("attack_epochs", self.attack_epochs),
            ("probe_epochs", self.probe_epochs),
            ("pretrain_batch", self.pretrain_batch),
            ("pretrain_frames_per_video", self.pretrain_frames_per_video),
            ("attack_batch", self.attack_batch),
            ("probe_batch", self.probe_batch),
            ("probe_stack", self.probe_stack),
            ("ad_patience", self.ad_patience),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        if self.anon_batch < 2 {
            return Err(Error::Config("train.anon_batch must be >= 2 for the contrastive budget loss".into()));
        }
        if self.ad_batch < 2 || self.ad_batch % 2 != 0 {
            return Err(Error::Config("train.ad_batch must be even and >= 2 (half normal, half anomalous)".into()));
        }
        if !(0.0..1.0).contains(&self.ad_dropout) {
            return Err(Error::Config(format!("train.ad_dropout must be in [0, 1), got {}", self.ad_dropout)));
        }
        if self.attack_min_lr >= self.attack_lr {
            return Err(Error::Config("train.attack_min_lr must be below attack_lr".into()));
        }
        self.augment.validate()?;
        self.loss.validate()
    }

    /// Independent random stream for one stage.
    pub fn rng(&self, stage: &str) -> ChaCha8Rng {
        let mut seed = self.seed;
        for b in stage.bytes() {
            seed = seed.wrapping_mul(0x100000001b3).wrapping_add(b as u64);
        }
        ChaCha8Rng::seed_from_u64(seed)
    }
}

fn finite(stage: &str, step: usize, name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence {
            stage: stage.into(),
            step,
            detail: format!("{name} is {v}"),
        })
    }
}
