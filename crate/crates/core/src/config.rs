//! Experiment configuration: one TOML file drives every pipeline command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationConfig, RotateMode};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::mil::{AdamConfig, MilTrainConfig};
use crate::ssl::{LarsConfig, MoCoConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    /// 0 selects the machine's logical CPU count.
    pub workers: usize,
    pub corpus: CorpusSection,
    pub tiling: TilingSection,
    pub augment: AugmentSection,
    pub encoder: EncoderSection,
    pub moco: MocoSection,
    pub mil: MilSection,
    pub eval: EvalSection,
    pub interpret: InterpretSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: "runs/exp".into(),
            workers: 0,
            corpus: CorpusSection::default(),
            tiling: TilingSection::default(),
            augment: AugmentSection::default(),
            encoder: EncoderSection::default(),
            moco: MocoSection::default(),
            mil: MilSection::default(),
            eval: EvalSection::default(),
            interpret: InterpretSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub slides: usize,
    pub width: usize,
    pub height: usize,
    pub positive_fraction: f64,
    pub tissue_fraction_min: f64,
    pub tissue_fraction_max: f64,
    pub lesion_fraction_min: f64,
    pub lesion_fraction_max: f64,
    /// "histology" or "abstract" (out-of-domain textures).
    pub kind: String,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            slides: 200,
            width: 3136,
            height: 3136,
            positive_fraction: 0.5,
            tissue_fraction_min: 0.5,
            tissue_fraction_max: 0.8,
            lesion_fraction_min: 0.15,
            lesion_fraction_max: 0.4,
            kind: "histology".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TilingSection {
    pub tile_size: usize,
    pub min_tissue_fraction: f64,
    pub max_tiles_per_slide: usize,
}

impl Default for TilingSection {
    fn default() -> Self {
        TilingSection { tile_size: 224, min_tissue_fraction: 0.5, max_tiles_per_slide: 10_000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSection {
    pub rotate_mode: String,
    pub p_rotate: f32,
    pub p_vflip: f32,
    pub p_hflip: f32,
    pub p_jitter: f32,
    pub p_grayscale: f32,
    pub p_blur: f32,
    pub crop_scale_min: f32,
    pub crop_scale_max: f32,
    pub jitter_brightness: f32,
    pub jitter_contrast: f32,
    pub jitter_saturation: f32,
    pub jitter_hue: f32,
    pub blur_sigma_min: f32,
    pub blur_sigma_max: f32,
    pub output_size: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let a = AugmentationConfig::default();
        AugmentSection {
            rotate_mode: "table".into(),
            p_rotate: a.p_rotate,
            p_vflip: a.p_vflip,
            p_hflip: a.p_hflip,
            p_jitter: a.p_jitter,
            p_grayscale: a.p_grayscale,
            p_blur: a.p_blur,
            crop_scale_min: a.crop_scale_range.0,
            crop_scale_max: a.crop_scale_range.1,
            jitter_brightness: a.jitter_brightness,
            jitter_contrast: a.jitter_contrast,
            jitter_saturation: a.jitter_saturation,
            jitter_hue: a.jitter_hue,
            blur_sigma_min: a.blur_sigma_range.0,
            blur_sigma_max: a.blur_sigma_range.1,
            output_size: a.output_size,
        }
    }
}

impl AugmentSection {
    pub fn build(&self) -> Result<AugmentationConfig> {
        let rotate_mode = match self.rotate_mode.as_str() {
            "table" => RotateMode::Table,
            "right_angles" => RotateMode::RightAngles,
            other => return Err(Error::Config(format!("unknown rotate_mode '{other}'"))),
        };
        let cfg = AugmentationConfig {
            rotate_mode,
            p_rotate: self.p_rotate,
            p_vflip: self.p_vflip,
            p_hflip: self.p_hflip,
            p_jitter: self.p_jitter,
            p_grayscale: self.p_grayscale,
            p_blur: self.p_blur,
            crop_scale_range: (self.crop_scale_min, self.crop_scale_max),
            jitter_brightness: self.jitter_brightness,
            jitter_contrast: self.jitter_contrast,
            jitter_saturation: self.jitter_saturation,
            jitter_hue: self.jitter_hue,
            blur_sigma_range: (self.blur_sigma_min, self.blur_sigma_max),
            output_size: self.output_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSection {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub feature_dim: usize,
    pub projection_dim: usize,
    pub use_residual: bool,
    pub input_size: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        EncoderSection {
            stage_channels: e.stage_channels,
            blocks_per_stage: e.blocks_per_stage,
            feature_dim: e.feature_dim,
            projection_dim: e.projection_dim,
            use_residual: e.use_residual,
            input_size: e.input_size,
        }
    }
}

impl EncoderSection {
    pub fn build(&self) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            stage_channels: self.stage_channels.clone(),
            blocks_per_stage: self.blocks_per_stage,
            feature_dim: self.feature_dim,
            projection_dim: self.projection_dim,
            use_residual: self.use_residual,
            input_size: self.input_size,
            ..EncoderConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MocoSection {
    pub momentum: f64,
    pub temperature: f64,
    pub queue_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lars_momentum: f64,
    pub weight_decay: f64,
    pub eta: f64,
    /// In-memory tile bank cap for pre-training (0 = all tiles).
    pub max_pretrain_tiles: usize,
}

impl Default for MocoSection {
    fn default() -> Self {
        let m = MoCoConfig::default();
        MocoSection {
            momentum: m.momentum,
            temperature: m.temperature,
            queue_size: m.queue_size,
            batch_size: m.batch_size,
            epochs: m.epochs,
            lr: m.lars.lr,
            lars_momentum: m.lars.momentum,
            weight_decay: m.lars.weight_decay,
            eta: m.lars.eta,
            max_pretrain_tiles: 0,
        }
    }
}

impl MocoSection {
    pub fn build(&self) -> Result<MoCoConfig> {
        let cfg = MoCoConfig {
            momentum: self.momentum,
            temperature: self.temperature,
            queue_size: self.queue_size,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lars: LarsConfig {
                lr: self.lr,
                momentum: self.lars_momentum,
                weight_decay: self.weight_decay,
                eta: self.eta,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MilSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub num_classes: usize,
    pub r: usize,
}

impl Default for MilSection {
    fn default() -> Self {
        let m = MilTrainConfig::default();
        MilSection {
            epochs: m.epochs,
            batch_size: m.batch_size,
            lr: m.adam.lr,
            beta1: m.adam.beta1,
            beta2: m.adam.beta2,
            eps: m.adam.eps,
            weight_decay: m.adam.weight_decay,
            num_classes: m.num_classes,
            r: m.r,
        }
    }
}

impl MilSection {
    pub fn build(&self) -> Result<MilTrainConfig> {
        let cfg = MilTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            num_classes: self.num_classes,
            r: self.r,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub folds: usize,
    pub repeats: usize,
    pub stratified: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { folds: 5, repeats: 5, stratified: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpretSection {
    pub k: usize,
    pub top_n: usize,
    pub heatmap_upscale: usize,
    pub heatmap_slides: usize,
}

impl Default for InterpretSection {
    fn default() -> Self {
        InterpretSection { k: 10, top_n: 5, heatmap_upscale: 16, heatmap_slides: 4 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| Error::Config(format!("encode: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.slides == 0 {
            return Err(Error::Config("corpus.slides must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.corpus.positive_fraction) {
            return Err(Error::Config("corpus.positive_fraction outside [0, 1]".into()));
        }
        if self.corpus.kind != "histology" && self.corpus.kind != "abstract" {
            return Err(Error::Config(format!("unknown corpus kind '{}'", self.corpus.kind)));
        }
        if self.tiling.tile_size == 0 || self.tiling.max_tiles_per_slide == 0 {
            return Err(Error::Config("tiling sizes must be positive".into()));
        }
        self.augment.build()?;
        self.encoder.build()?;
        self.moco.build()?;
        self.mil.build()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.encoder.stage_channels, cfg.encoder.stage_channels);
        assert_eq!(back.moco.queue_size, cfg.moco.queue_size);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let text = r#"
seed = 7
[moco]
batch_size = 16
queue_size = 64
"#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.moco.batch_size, 16);
        assert_eq!(cfg.moco.temperature, 0.2);
        assert_eq!(cfg.mil.epochs, 15);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.corpus.kind = "cats".into();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.moco.queue_size = 33; // not a multiple of batch 32
        assert!(cfg.validate().is_err());
    }
}
