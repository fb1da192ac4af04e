//! Configuration for every stage. Defaults are the desk-scale settings;
//! [`TrainConfig::paper`] carries the published optimizer schedule.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VisionBackbone {
    /// Patch embedding followed by a transformer block.
    #[default]
    Vit,
    /// Patch embedding only; translation-invariant on the patch grid.
    LinearPatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub vision_backbone: VisionBackbone,
    pub vision_dim: usize,
    pub vision_heads: usize,
    pub spe_dim: usize,
    pub spe_heads: usize,
    pub mlp_ratio: usize,
    pub text_hash_dim: usize,
    pub text_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 16,
            vision_backbone: VisionBackbone::Vit,
            vision_dim: 64,
            vision_heads: 4,
            spe_dim: 64,
            spe_heads: 4,
            mlp_ratio: 2,
            text_hash_dim: 256,
            text_hidden: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 4 != 0 {
            return Err(config_err!("patch_size must be a positive multiple of 4, got {}", self.patch_size));
        }
        for (name, dim, heads) in [
            ("vision", self.vision_dim, self.vision_heads),
            ("spe", self.spe_dim, self.spe_heads),
        ] {
            if dim == 0 || heads == 0 || dim % heads != 0 {
                return Err(config_err!("{name}_heads ({heads}) must divide {name}_dim ({dim})"));
            }
        }
        if self.mlp_ratio == 0 || self.text_hash_dim == 0 || self.text_hidden == 0 {
            return Err(config_err!("encoder widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    /// Width of the first convolution of the guidance encoder.
    pub conv_hidden: usize,
    /// Width of the guidance features.
    pub channels: usize,
    /// Query/key projection width.
    pub qk_dim: usize,
    pub heads: usize,
    /// Attention window side, in patches.
    pub window: usize,
    pub rope_base: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig { conv_hidden: 16, channels: 32, qk_dim: 32, heads: 4, window: 3, rope_base: 10000.0 }
    }
}

impl RefinerConfig {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.window == 0 {
            return Err(config_err!("refiner window must be at least 1"));
        }
        if self.heads == 0 || self.qk_dim % self.heads != 0 {
            return Err(config_err!("refiner heads ({}) must divide qk_dim ({})", self.heads, self.qk_dim));
        }
        if (self.qk_dim / self.heads) % 2 != 0 {
            return Err(config_err!("rotary encoding needs an even per-head width"));
        }
        if feature_dim % self.heads != 0 {
            return Err(config_err!("refiner heads ({}) must divide feature width ({feature_dim})", self.heads));
        }
        if self.conv_hidden == 0 || self.channels == 0 || self.rope_base <= 1.0 {
            return Err(config_err!("invalid refiner widths or rope base"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LateConfig {
    /// Number of (spatial, class) refinement pairs.
    pub stages: usize,
    /// Spatial window side; windows shift by half of it.
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for LateConfig {
    fn default() -> Self {
        LateConfig { stages: 2, window: 4, heads: 4, mlp_ratio: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub refiner: RefinerConfig,
    pub corr_channels: usize,
    pub late: LateConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            refiner: RefinerConfig::default(),
            corr_channels: 32,
            late: LateConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.refiner.validate(self.encoder.vision_dim)?;
        if self.corr_channels < 2 || self.corr_channels % 2 != 0 {
            return Err(config_err!("corr_channels must be an even number ≥ 2"));
        }
        let l = &self.late;
        if l.stages == 0 {
            return Err(config_err!("late refinement needs at least one stage"));
        }
        if l.window < 2 {
            return Err(config_err!("late refinement window must be ≥ 2 so the shift is ≥ 1"));
        }
        if l.heads == 0 || self.corr_channels % l.heads != 0 {
            return Err(config_err!("late heads ({}) must divide corr_channels ({})", l.heads, self.corr_channels));
        }
        if (self.corr_channels / 2) % l.heads.min(self.corr_channels / 2) != 0 || l.mlp_ratio == 0 {
            return Err(config_err!("invalid late refinement widths"));
        }
        Ok(())
    }
}

/// Feature toggles of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    /// Use both global and local text similarities (otherwise local twice).
    pub text_ensemble: bool,
    /// Run early refinement of the dense visual features.
    pub early_refine: bool,
    /// Focal + dice objective (otherwise plain binary cross-entropy).
    pub focal_dice: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles { text_ensemble: true, early_refine: true, focal_dice: true }
    }
}

impl Toggles {
    /// Baseline rung: local text only, no early refinement, BCE.
    pub fn baseline() -> Self {
        Toggles { text_ensemble: false, early_refine: false, focal_dice: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.05, gamma: 2.0, dice_eps: 1e-6 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) || !(self.dice_eps > 0.0) {
            return Err(config_err!("loss needs lambda ≥ 0, gamma ≥ 0, dice_eps > 0"));
        }
        Ok(())
    }

    /// Plain binary cross-entropy (γ = 0, λ = 0).
    pub fn bce() -> Self {
        LossConfig { lambda: 0.0, gamma: 0.0, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LgaConfig {
    pub resize: usize,
    pub window: usize,
    pub overlap: usize,
    pub lga_vlm: bool,
    pub lga_spe: bool,
}

impl Default for LgaConfig {
    fn default() -> Self {
        LgaConfig { resize: 640, window: 384, overlap: 128, lga_vlm: true, lga_spe: false }
    }
}

impl LgaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.overlap >= self.window {
            return Err(config_err!("overlap ({}) must be smaller than window ({})", self.overlap, self.window));
        }
        if self.window > self.resize || self.window == 0 {
            return Err(config_err!("window ({}) must be in 1..={}", self.window, self.resize));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_head: f64,
    /// Final learning rate as a fraction of the initial one.
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub iters: usize,
    pub crop: usize,
    pub flip: bool,
    pub checkpoint_every: usize,
    pub scenes: usize,
    pub scene_size: usize,
    pub classes: usize,
    pub loss: LossConfig,
    pub toggles: Toggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale schedule for randomly initialised stub backbones.
    pub fn desk() -> Self {
        TrainConfig {
            lr_backbone: 1e-4,
            lr_head: 2e-4,
            lr_floor: 0.0,
            weight_decay: 1e-4,
            batch: 4,
            iters: 2000,
            crop: 384,
            flip: true,
            checkpoint_every: 500,
            scenes: 8,
            scene_size: 64,
            classes: 4,
            loss: LossConfig::default(),
            toggles: Toggles::default(),
        }
    }

    /// Published schedule: 2e-6 / 2e-4 two-tier AdamW, 80K iterations.
    pub fn paper() -> Self {
        TrainConfig { lr_backbone: 2e-6, iters: 80_000, checkpoint_every: 5000, ..Self::desk() }
    }

    pub fn validate(&self, patch: usize) -> Result<()> {
        if !(self.lr_backbone > 0.0) || !(self.lr_head > 0.0) {
            return Err(config_err!("learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) || !(self.weight_decay >= 0.0) {
            return Err(config_err!("lr_floor must be in [0, 1] and weight_decay ≥ 0"));
        }
        if self.batch == 0 {
            return Err(config_err!("batch must be positive"));
        }
        if self.crop == 0 || self.crop % patch != 0 {
            return Err(config_err!("crop ({}) must be a positive multiple of the patch size ({patch})", self.crop));
        }
        if self.scene_size % patch != 0 || self.scene_size == 0 {
            return Err(config_err!("scene_size must be a positive multiple of the patch size"));
        }
        if self.classes < 2 {
            return Err(config_err!("at least two classes are needed"));
        }
        self.loss.validate()
    }

    /// Loss weights implied by the focal–dice toggle.
    pub fn effective_loss(&self) -> LossConfig {
        if self.toggles.focal_dice {
            self.loss.clone()
        } else {
            LossConfig { dice_eps: self.loss.dice_eps, ..LossConfig::bce() }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub ridge_alpha: f64,
    pub folds: usize,
    pub ignore_label: Option<u32>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { threshold: 0.9, ridge_alpha: 1.0, folds: 5, ignore_label: Some(255) }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(config_err!("folds must be ≥ 2"));
        }
        if !(self.ridge_alpha >= 0.0) {
            return Err(config_err!("ridge_alpha must be ≥ 0"));
        }
        if !(self.threshold > -1.0) {
            return Err(config_err!("threshold must exceed -1"));
        }
        Ok(())
    }
}
