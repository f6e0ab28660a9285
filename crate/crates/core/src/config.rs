//! One flat experiment configuration that derives every module's settings.
//!
//! The struct deserializes from a flat key set (unknown keys are hard
//! errors, `seed` is the only required key) and canonicalizes to JSON with a
//! fixed field order, so two configs that agree key-by-key hash identically
//! no matter how their source files were laid out.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{AugKind, CandidatePolicy};
use crate::model::ModelConfig;
use crate::objectives::{DistanceMode, WeightStrategy};
use crate::rng::child_seed;
use crate::training::{
    AdamParams, AugmentationChoice, LrSchedule, OptimizerKind, TrainingConfig, TrainingMethod,
};
use crate::world::{DatasetMix, WorldConfig};

/// Errors from config validation.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), reason: reason.into() }
}

/// Video ids of the held-out evaluation library start here, so training and
/// evaluation clips can never collide.
pub const EVAL_VIDEO_ID_BASE: u64 = 10_000;

// serde default helpers; the flat schema keeps one function per knob.
fn d_videos() -> usize { 12 }
fn d_video_length() -> usize { 64 }
fn d_frames_per_clip() -> usize { 8 }
fn d_grid() -> usize { 8 }
fn d_symbols() -> usize { 28 }
fn d_attributes() -> usize { 4 }
fn d_noise_scale() -> f64 { 0.05 }
fn d_train_examples() -> usize { 500 }
fn d_temporal_fraction() -> f64 { 0.5 }
fn d_embed_dim() -> usize { 32 }
fn d_n_heads() -> usize { 2 }
fn d_n_blocks() -> usize { 2 }
fn d_method() -> TrainingMethod { TrainingMethod::Sft }
fn d_sft_learning_rate() -> f64 { 1.5e-3 }
fn d_sft_epochs() -> usize { 50 }
fn d_preference_learning_rate() -> f64 { 3e-4 }
fn d_preference_epochs() -> usize { 2 }
fn d_batch_size() -> usize { 1 }
fn d_optimizer() -> OptimizerKind { OptimizerKind::Adam }
fn d_adam_beta1() -> f64 { 0.9 }
fn d_adam_beta2() -> f64 { 0.999 }
fn d_adam_epsilon() -> f64 { 1e-8 }
fn d_max_grad_norm() -> f64 { 10.0 }
fn d_beta() -> f64 { 0.1 }
fn d_candidates() -> usize { 2 }
fn d_weight_strategy() -> WeightStrategy { WeightStrategy::Far }
fn d_distance_mode() -> DistanceMode { DistanceMode::Output }
fn d_candidate_policy() -> String { "mixed".into() }
fn d_halluc_pairs() -> usize { 400 }
fn d_general_items() -> usize { 400 }
fn d_prefdata_examples() -> usize { 500 }

/// Flat experiment configuration. Every field except `seed` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of the whole run's seed tree. Required.
    pub seed: u64,

    // world
    #[serde(default = "d_videos")]
    pub videos: usize,
    #[serde(default = "d_video_length")]
    pub video_length: usize,
    #[serde(default = "d_frames_per_clip")]
    pub frames_per_clip: usize,
    #[serde(default = "d_grid")]
    pub grid: usize,
    #[serde(default = "d_symbols")]
    pub symbols: usize,
    #[serde(default = "d_attributes")]
    pub attributes: usize,
    #[serde(default = "d_noise_scale")]
    pub noise_scale: f64,

    // dataset
    #[serde(default = "d_train_examples")]
    pub train_examples: usize,
    #[serde(default = "d_temporal_fraction")]
    pub temporal_fraction: f64,

    // model capacity
    #[serde(default = "d_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "d_n_heads")]
    pub n_heads: usize,
    #[serde(default = "d_n_blocks")]
    pub n_blocks: usize,

    // training
    #[serde(default = "d_method")]
    pub method: TrainingMethod,
    #[serde(default = "d_sft_learning_rate")]
    pub sft_learning_rate: f64,
    #[serde(default = "d_sft_epochs")]
    pub sft_epochs: usize,
    #[serde(default = "d_preference_learning_rate")]
    pub preference_learning_rate: f64,
    #[serde(default = "d_preference_epochs")]
    pub preference_epochs: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_adam_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "d_adam_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "d_adam_epsilon")]
    pub adam_epsilon: f64,
    /// Global gradient-norm cap applied before every optimizer update.
    #[serde(default = "d_max_grad_norm")]
    pub max_grad_norm: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_candidates")]
    pub candidates: usize,
    #[serde(default = "d_weight_strategy")]
    pub weight_strategy: WeightStrategy,
    #[serde(default = "d_distance_mode")]
    pub distance_mode: DistanceMode,
    /// Candidate policy by name: high_similarity, low_similarity,
    /// combination_mix, temporal, visual, or mixed.
    #[serde(default = "d_candidate_policy")]
    pub candidate_policy: String,
    /// Augmentation family for the single-candidate method: a family name
    /// or "random".
    #[serde(default)]
    pub augmentation: Option<String>,

    // evaluation
    #[serde(default = "d_halluc_pairs")]
    pub halluc_pairs: usize,
    #[serde(default = "d_general_items")]
    pub general_items: usize,

    // offline preference construction
    #[serde(default = "d_prefdata_examples")]
    pub prefdata_examples: usize,
}

impl ExperimentConfig {
    /// All defaults on top of a root seed.
    pub fn with_seed(seed: u64) -> ExperimentConfig {
        // `seed` is the only field without a default, so round-tripping a
        // one-key document yields the full default config.
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults fill in")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.world()
            .validate()
            .map_err(|e| invalid("world", e.to_string()))?;
        self.model()
            .validate()
            .map_err(|e| invalid("model", e.to_string()))?;
        if self.train_examples == 0 {
            return Err(invalid("train_examples", "need at least one training row"));
        }
        if !(0.0..=1.0).contains(&self.temporal_fraction) {
            return Err(invalid(
                "temporal_fraction",
                format!("must lie in [0, 1], got {}", self.temporal_fraction),
            ));
        }
        if self.halluc_pairs == 0 || self.general_items == 0 {
            return Err(invalid("halluc_pairs", "suites need at least one item"));
        }
        self.parse_candidate_policy()?;
        self.parse_augmentation()?;
        let train = match self.method {
            TrainingMethod::Sft => self.sft_training(),
            method => self.preference_training(method)?,
        };
        train.validate().map_err(|e| invalid("training", e.to_string()))?;
        Ok(())
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            videos: self.videos,
            video_length: self.video_length,
            frames_per_clip: self.frames_per_clip,
            grid: self.grid,
            symbols: self.symbols,
            attributes: self.attributes,
            noise_scale: self.noise_scale,
            video_id_base: 0,
            ..WorldConfig::default()
        }
    }

    /// Same dimensions, disjoint video ids; rendered from its own seed.
    pub fn world_eval(&self) -> WorldConfig {
        WorldConfig { video_id_base: EVAL_VIDEO_ID_BASE, ..self.world() }
    }

    pub fn model(&self) -> ModelConfig {
        let mut model = ModelConfig::for_world(&self.world());
        model.embed_dim = self.embed_dim;
        model.n_heads = self.n_heads;
        model.n_blocks = self.n_blocks;
        model
    }

    pub fn mix(&self) -> DatasetMix {
        DatasetMix { temporal_fraction: self.temporal_fraction }
    }

    fn parse_candidate_policy(&self) -> Result<CandidatePolicy, ConfigError> {
        match self.candidate_policy.as_str() {
            "high_similarity" => Ok(CandidatePolicy::HighSimilarity),
            "low_similarity" => Ok(CandidatePolicy::LowSimilarity),
            "combination_mix" => Ok(CandidatePolicy::CombinationMix),
            "temporal" => Ok(CandidatePolicy::Temporal),
            "visual" => Ok(CandidatePolicy::Visual),
            "mixed" => Ok(CandidatePolicy::Mixed),
            other => Err(invalid("candidate_policy", format!("unknown policy `{other}`"))),
        }
    }

    fn parse_augmentation(&self) -> Result<Option<AugmentationChoice>, ConfigError> {
        match self.augmentation.as_deref() {
            None => Ok(None),
            Some("random") => Ok(Some(AugmentationChoice::Random)),
            Some(name) => name
                .parse::<AugKind>()
                .map(|kind| Some(AugmentationChoice::Fixed(kind)))
                .map_err(|e| invalid("augmentation", e)),
        }
    }

    fn base_training(&self, method: TrainingMethod, seed: u64) -> TrainingConfig {
        TrainingConfig {
            method,
            seed,
            learning_rate: self.sft_learning_rate,
            epochs: self.sft_epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            adam: AdamParams {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                epsilon: self.adam_epsilon,
            },
            lr_schedule: LrSchedule::LinearDecay,
            max_grad_norm: Some(self.max_grad_norm),
            beta: self.beta,
            candidates: self.candidates,
            weight_strategy: self.weight_strategy,
            distance_mode: self.distance_mode,
            candidate_policy: CandidatePolicy::Mixed,
            augmentation: None,
        }
    }

    pub fn sft_training(&self) -> TrainingConfig {
        self.base_training(TrainingMethod::Sft, self.sft_seed())
    }

    pub fn preference_training(
        &self,
        method: TrainingMethod,
    ) -> Result<TrainingConfig, ConfigError> {
        let mut cfg = self.base_training(method, self.preference_seed());
        cfg.learning_rate = self.preference_learning_rate;
        cfg.epochs = self.preference_epochs;
        cfg.candidate_policy = self.parse_candidate_policy()?;
        cfg.augmentation = self.parse_augmentation()?;
        if method == TrainingMethod::Vdpo {
            // Bag size is not a knob for the single-candidate method; the
            // default family mirrors the candidate policy's first slot.
            cfg.candidates = 1;
            if cfg.augmentation.is_none() {
                cfg.augmentation = Some(AugmentationChoice::Fixed(AugKind::DClip));
            }
        }
        Ok(cfg)
    }

    // Named sub-seeds: every pipeline stage draws from its own branch.
    pub fn world_seed(&self) -> u64 {
        child_seed(self.seed, "world", 0)
    }

    pub fn eval_world_seed(&self) -> u64 {
        child_seed(self.seed, "world", 1)
    }

    pub fn dataset_seed(&self) -> u64 {
        child_seed(self.seed, "data", 0)
    }

    pub fn suite_seed(&self) -> u64 {
        child_seed(self.seed, "suites", 0)
    }

    pub fn sft_seed(&self) -> u64 {
        child_seed(self.seed, "train", 0)
    }

    pub fn preference_seed(&self) -> u64 {
        child_seed(self.seed, "train", 1)
    }

    pub fn prefdata_seed(&self) -> u64 {
        child_seed(self.seed, "prefdata", 0)
    }

    pub fn sweep_seed(&self, index: u64) -> u64 {
        child_seed(self.seed, "sweep", index)
    }

    /// Canonical serialized form: JSON with the struct's fixed field order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
