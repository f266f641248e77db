use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};

/// Which registration directions are predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BsfaMode {
    /// Forward and reverse registration layers (the full model).
    #[default]
    Bidirectional,
    /// Reverse layers removed, `φ_B ≡ 0`.
    WithoutReverse,
    /// Forward layers removed, `φ_A ≡ 0`.
    WithoutForward,
    /// No registration at all, `φ_AB ≡ 0`.
    Disabled,
}

/// Switches for the ablation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub bsfa: BsfaMode,
    /// Inject each image's head into the other image's tokens. When off,
    /// each image receives its own head.
    pub head_swap: bool,
    /// Train the transfer blocks against the frozen modality probe.
    pub probe_loss: bool,
    /// Let the probe loss reach the encoder as well as the transfer blocks.
    pub probe_into_encoder: bool,
    /// Let the head-classification loss reach the encoder.
    pub classifier_into_encoder: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            bsfa: BsfaMode::Bidirectional,
            head_swap: true,
            probe_loss: true,
            probe_into_encoder: false,
            classifier_into_encoder: true,
        }
    }
}

impl Ablation {
    /// Named presets: `full`, `without-forward`, `without-reverse`,
    /// `without-bsfa`, `setting-a`, `setting-b`.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        Ok(match name {
            "full" => base,
            "without-forward" => Self {
                bsfa: BsfaMode::WithoutForward,
                ..base
            },
            "without-reverse" => Self {
                bsfa: BsfaMode::WithoutReverse,
                ..base
            },
            "without-bsfa" => Self {
                bsfa: BsfaMode::Disabled,
                ..base
            },
            "setting-a" => Self {
                head_swap: false,
                probe_loss: false,
                ..base
            },
            "setting-b" => Self {
                head_swap: false,
                ..base
            },
            other => return Err(NetError::Config(format!("unknown ablation preset {other}"))),
        })
    }

    pub const PRESETS: [&'static str; 6] = [
        "full",
        "without-forward",
        "without-reverse",
        "without-bsfa",
        "setting-a",
        "setting-b",
    ];
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Registration pyramid levels `K`; tokens live at `1/2^(K−1)` resolution.
    pub levels: usize,
    /// Fusion blocks `J`.
    pub fusion_blocks: usize,
    /// Shallow feature channels `C`.
    pub base_channels: usize,
    /// Channels of the intermediate Restormer block on the way down.
    pub mid_channels: usize,
    /// Token width `W′`.
    pub token_width: usize,
    pub restormer_heads: usize,
    pub transformer_heads: usize,
    pub encoder_layers: usize,
    pub transfer_layers: usize,
    pub mlp_hidden: usize,
    pub positional_embedding: bool,
    /// Side of the stored positional-embedding grid; resized to the actual
    /// token grid when they differ.
    pub pos_grid: usize,
    /// Hidden channels of each registration layer.
    pub reg_hidden: usize,
    /// Fusion feature channels `C_f`.
    pub fusion_channels: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            fusion_blocks: 5,
            base_channels: 32,
            mid_channels: 64,
            token_width: 256,
            restormer_heads: 4,
            transformer_heads: 4,
            encoder_layers: 2,
            transfer_layers: 2,
            mlp_hidden: 128,
            positional_embedding: true,
            pos_grid: 16,
            reg_hidden: 64,
            fusion_channels: 64,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    /// A narrow variant for CPU experiments on 64x64 images.
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            mid_channels: 16,
            token_width: 32,
            restormer_heads: 2,
            transformer_heads: 2,
            mlp_hidden: 32,
            pos_grid: 4,
            reg_hidden: 16,
            fusion_channels: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("levels", self.levels),
            ("fusion_blocks", self.fusion_blocks),
            ("base_channels", self.base_channels),
            ("mid_channels", self.mid_channels),
            ("token_width", self.token_width),
            ("restormer_heads", self.restormer_heads),
            ("transformer_heads", self.transformer_heads),
            ("encoder_layers", self.encoder_layers),
            ("mlp_hidden", self.mlp_hidden),
            ("pos_grid", self.pos_grid),
            ("reg_hidden", self.reg_hidden),
            ("fusion_channels", self.fusion_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(NetError::Config(format!("{name} must be positive")));
            }
        }
        if self.levels > 8 || self.fusion_blocks > 8 {
            return Err(NetError::Config("at most 8 pyramid levels are supported".into()));
        }
        Ok(())
    }

    /// Total downsampling from image to token grid.
    pub fn token_stride(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Image sides must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        self.token_stride().max(1 << (self.fusion_blocks - 1))
    }

    /// Checks that an `h × w` image can be processed.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.input_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(NetError::Shape(format!("{h}x{w} input is not divisible by {m}")));
        }
        if h < 11 || w < 11 {
            return Err(NetError::Shape(format!("{h}x{w} input is smaller than the SSIM window")));
        }
        Ok(())
    }
}
