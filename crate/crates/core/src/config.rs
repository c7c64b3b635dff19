//! Run configuration: every tunable in one serializable struct, with a
//! content hash embedded in all artifacts.

use serde::{Deserialize, Serialize};

use crate::matching::{FocalParams, LossWeights};
use crate::CoreError;

/// How distractors are chosen for supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorMode {
    /// Same-group objects of other categories.
    Semantic,
    /// Uniformly random non-target objects.
    Random,
    /// No distractor supervision.
    None,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    // corpus
    pub n_scenes: usize,
    pub n_points: usize,
    pub holdout_novel: bool,

    // frozen proposal encoder
    pub d_point: usize,
    pub knn_k: usize,
    pub k_proposals: usize,
    pub pretrain_steps: u64,
    pub pretrain_lr: f64,

    // language model
    pub d_lm: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub max_seq: usize,
    pub lora_adapters: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,

    // mask decoder
    pub q_queries: usize,
    pub d_dec: usize,
    pub dec_heads: usize,
    pub dec_blocks: usize,
    pub use_decoder: bool,

    // training
    pub steps: u64,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub weights: LossWeights,
    pub focal: FocalParams,
    pub distractor_mode: DistractorMode,
    pub use_box_loss: bool,
    pub distractor_box_loss: bool,
    pub cost_subsample: usize,
    pub grad_clip: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            n_scenes: 512,
            n_points: 2048,
            holdout_novel: true,
            d_point: 64,
            knn_k: 16,
            k_proposals: 32,
            pretrain_steps: 1500,
            pretrain_lr: 1e-3,
            d_lm: 128,
            lm_layers: 4,
            lm_heads: 4,
            max_seq: 96,
            lora_adapters: false,
            lora_rank: 8,
            lora_alpha: 16.0,
            q_queries: 16,
            d_dec: 256,
            dec_heads: 8,
            dec_blocks: 3,
            use_decoder: true,
            steps: 3000,
            peak_lr: 3e-4,
            batch_size: 12,
            checkpoint_every: 500,
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            distractor_mode: DistractorMode::Semantic,
            use_box_loss: true,
            distractor_box_loss: true,
            cost_subsample: 512,
            grad_clip: 1.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let positive = [
            ("n_scenes", self.n_scenes),
            ("n_points", self.n_points),
            ("d_point", self.d_point),
            ("knn_k", self.knn_k),
            ("k_proposals", self.k_proposals),
            ("d_lm", self.d_lm),
            ("lm_layers", self.lm_layers),
            ("lm_heads", self.lm_heads),
            ("max_seq", self.max_seq),
            ("q_queries", self.q_queries),
            ("d_dec", self.d_dec),
            ("dec_heads", self.dec_heads),
            ("dec_blocks", self.dec_blocks),
            ("batch_size", self.batch_size),
            ("cost_subsample", self.cost_subsample),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CoreError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_lm % self.lm_heads != 0 {
            return Err(CoreError::Config("d_lm must be divisible by lm_heads".into()));
        }
        if self.d_dec % self.dec_heads != 0 {
            return Err(CoreError::Config("d_dec must be divisible by dec_heads".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(CoreError::Config("peak_lr must be a positive finite number".into()));
        }
        let w = &self.weights;
        for (name, v) in [
            ("cls", w.cls),
            ("dice", w.dice),
            ("maskfocal", w.maskfocal),
            ("l1", w.l1),
            ("giou", w.giou),
            ("lm", w.lm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoreError::Config(format!(
                    "loss weight {name} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }

    /// Parse from TOML, rejecting unknown keys, then validate.
    pub fn from_toml(text: &str) -> Result<Self, CoreError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Short content hash of the canonical JSON form, embedded in artifacts.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
