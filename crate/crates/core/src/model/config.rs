use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::rng::fnv1a64;

/// Side of the pooled grid that X2Z attends over.
pub const POOL_SIZE: usize = 7;

/// Number of stages (and exits).
pub const STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Feature channels `C_i`.
    pub channels: usize,
    pub conv_blocks: usize,
    pub sa_blocks: usize,
    /// Self-attention heads; `2^(i-1)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    pub widening: usize,
    /// Stride of the stage's leading 3x3 convolution.
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentConfig {
    /// Initial token count `L0`.
    pub tokens: usize,
    /// `[L1, L2, L3, L4]`; halving `[L0, L0/2, L0/4, L0/4]` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_schedule: Option<[usize; 4]>,
}

fn all_exits() -> [bool; 4] {
    [true; 4]
}

fn yes() -> bool {
    true
}

/// Architectural hyperparameters. Maps 1:1 onto the TOML config file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub num_classes: usize,
    pub image: ImageShape,
    pub stages: Vec<StageConfig>,
    pub latent: LatentConfig,
    #[serde(default = "all_exits")]
    pub exits: [bool; 4],
    /// Forward knowledge transfer links between consecutive exits.
    #[serde(default = "yes")]
    pub fkt: bool,
}

/// Preset names, in listing order.
pub const PRESETS: &[&str] = &[
    "tiny",
    "toy",
    "resnet-model-1-style",
    "resnet-model-2-style",
    "resnet-model-3-style",
    "resnet-model-4-style",
    "resnet-model-5-style",
    "regnet-model-1-style",
    "regnet-model-2-style",
    "regnet-model-3-style",
    "regnet-model-4-style",
    "regnet-model-5-style",
    "regnet-model-6-style",
    "mobilenet-model-1-style",
    "mobilenet-model-2-style",
    "mobilenet-model-3-style",
    "mobilenet-model-4-style",
    "mobilenet-model-5-style",
];

fn stages(channels: [usize; 4], conv: [usize; 4], sa: [usize; 4], widening: usize, strides: [usize; 4]) -> Vec<StageConfig> {
    (0..4)
        .map(|i| StageConfig {
            channels: channels[i],
            conv_blocks: conv[i],
            sa_blocks: sa[i],
            heads: None,
            widening,
            stride: strides[i],
        })
        .collect()
}

/// Reduced-width preset: 64x64 RGB input, 1000 classes.
fn reduced(name: &str, channels: [usize; 4], conv: [usize; 4], tokens: usize, sa: [usize; 4], widening: usize) -> ModelConfig {
    ModelConfig {
        name: name.to_string(),
        num_classes: 1000,
        image: ImageShape { channels: 3, height: 64, width: 64 },
        stages: stages(channels, conv, sa, widening, [1, 2, 2, 2]),
        latent: LatentConfig { tokens, token_schedule: None },
        exits: all_exits(),
        fkt: true,
    }
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        const RESNET: [usize; 4] = [3, 4, 6, 3];
        const MOBILENET: [usize; 4] = [2, 3, 6, 3];
        let resnet = |w: f64| [64, 128, 256, 512].map(|c| (c as f64 * w).round() as usize);
        let cfg = match name {
            "tiny" => ModelConfig {
                name: name.into(),
                num_classes: 4,
                image: ImageShape { channels: 2, height: 8, width: 8 },
                stages: stages([4, 8, 16, 32], [1; 4], [1; 4], 2, [1; 4]),
                latent: LatentConfig { tokens: 8, token_schedule: None },
                exits: all_exits(),
                fkt: true,
            },
            "toy" => ModelConfig {
                name: name.into(),
                num_classes: 8,
                image: ImageShape { channels: 1, height: 32, width: 32 },
                stages: stages([8, 16, 32, 64], [1; 4], [1; 4], 2, [1, 2, 2, 2]),
                latent: LatentConfig { tokens: 16, token_schedule: None },
                exits: all_exits(),
                fkt: true,
            },
            "resnet-model-1-style" => reduced(name, resnet(0.375), RESNET, 128, [3, 3, 9, 3], 4),
            "resnet-model-2-style" => reduced(name, resnet(0.5), RESNET, 128, [3, 3, 9, 9], 4),
            "resnet-model-3-style" => reduced(name, resnet(0.5), RESNET, 256, [3, 3, 9, 3], 4),
            "resnet-model-4-style" => reduced(name, resnet(0.625), RESNET, 192, [3, 3, 9, 3], 4),
            "resnet-model-5-style" => reduced(name, resnet(0.75), RESNET, 128, [3, 3, 9, 3], 2),
            "regnet-model-1-style" => reduced(name, [24, 56, 104, 224], [1, 3, 6, 6], 128, [6, 6, 9, 9], 4),
            "regnet-model-2-style" => reduced(name, [24, 56, 104, 224], [1, 3, 6, 6], 256, [3, 3, 9, 9], 4),
            "regnet-model-3-style" => reduced(name, [32, 72, 160, 384], [1, 3, 8, 2], 128, [3, 3, 9, 6], 4),
            "regnet-model-4-style" => reduced(name, [32, 72, 160, 384], [1, 3, 8, 2], 256, [3, 3, 9, 6], 4),
            "regnet-model-5-style" => reduced(name, [24, 64, 168, 448], [2, 6, 17, 2], 256, [6, 6, 9, 6], 2),
            "regnet-model-6-style" => reduced(name, [40, 104, 288, 760], [2, 5, 13, 1], 256, [6, 6, 9, 9], 4),
            "mobilenet-model-1-style" => reduced(name, [24, 32, 88, 120], MOBILENET, 128, [3, 3, 9, 9], 4),
            "mobilenet-model-2-style" => reduced(name, [24, 40, 112, 160], MOBILENET, 128, [3, 3, 9, 9], 4),
            "mobilenet-model-3-style" => reduced(name, [24, 40, 112, 160], MOBILENET, 128, [6, 6, 9, 9], 4),
            "mobilenet-model-4-style" => reduced(name, [32, 48, 136, 200], MOBILENET, 128, [6, 6, 9, 9], 4),
            "mobilenet-model-5-style" => reduced(name, [40, 64, 168, 240], MOBILENET, 256, [3, 3, 9, 9], 4),
            other => {
                return Err(Error::config("preset", format!("unknown preset `{other}`; known: {}", PRESETS.join(", "))))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::config("config", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Stable hash of the canonical TOML form, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_toml_string().as_bytes())
    }

    /// Self-attention heads of stage `i` (1-based).
    pub fn heads(&self, i: usize) -> usize {
        self.stages[i - 1].heads.unwrap_or(1 << (i - 1))
    }

    pub fn channels(&self, i: usize) -> usize {
        self.stages[i - 1].channels
    }

    /// `[L1, L2, L3, L4]`.
    pub fn token_schedule(&self) -> [usize; 4] {
        let l0 = self.latent.tokens;
        self.latent.token_schedule.unwrap_or([l0, l0 / 2, l0 / 4, l0 / 4])
    }

    /// Tokens of `Z_i`, `i` in `0..=4`.
    pub fn tokens(&self, i: usize) -> usize {
        if i == 0 {
            self.latent.tokens
        } else {
            self.token_schedule()[i - 1]
        }
    }

    /// Channels of `Z_i`, `i` in `0..=4`: `D_0 = C_1`, `D_i = C_i` up to the
    /// last mixer, and `Z_4 = Z_4'` keeps the width of `Z_3`.
    pub fn latent_width(&self, i: usize) -> usize {
        match i {
            0 => self.channels(1),
            4 => self.channels(3),
            _ => self.channels(i),
        }
    }

    /// Channels of `X_i`, `i` in `0..=4`.
    pub fn feature_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.image.channels
        } else {
            self.channels(i)
        }
    }

    /// Spatial size `(H, W)` of `X_i`, `i` in `0..=4`.
    pub fn feature_size(&self, i: usize) -> (usize, usize) {
        let (mut h, mut w) = (self.image.height, self.image.width);
        for s in &self.stages[..i] {
            h = (h - 1) / s.stride.max(1) + 1;
            w = (w - 1) / s.stride.max(1) + 1;
        }
        (h, w)
    }

    /// Exit `k` (1-based) needs its head evaluated: it is enabled, or a later
    /// enabled exit reads its logits through the FKT chain.
    pub fn head_needed(&self, k: usize) -> bool {
        self.exits[k - 1] || (self.fkt && self.exits[k..].iter().any(|&e| e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != STAGES {
            return Err(Error::config("stages", format!("expected {STAGES} stages, got {}", self.stages.len())));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        let im = self.image;
        if im.channels == 0 || im.height == 0 || im.width == 0 {
            return Err(Error::config("image", "dimensions must be positive"));
        }
        for (j, s) in self.stages.iter().enumerate() {
            let field = |f: &str| format!("stages[{j}].{f}");
            if s.channels == 0 {
                return Err(Error::config(field("channels"), "must be positive"));
            }
            if s.widening == 0 {
                return Err(Error::config(field("widening"), "must be positive"));
            }
            if s.stride == 0 {
                return Err(Error::config(field("stride"), "must be positive"));
            }
            if j > 0 && s.channels < self.stages[j - 1].channels {
                return Err(Error::config(field("channels"), "channel schedule must be non-decreasing"));
            }
            let heads = self.heads(j + 1);
            let width = self.latent_width(j);
            if heads == 0 || !width.is_multiple_of(heads) {
                return Err(Error::config(
                    field("heads"),
                    format!("latent width {width} is not divisible by {heads} heads"),
                ));
            }
        }
        if self.latent.tokens == 0 {
            return Err(Error::config("latent.tokens", "must be positive"));
        }
        let l = self.token_schedule();
        let mut prev = self.latent.tokens;
        for (j, &t) in l.iter().enumerate() {
            if t == 0 || t > prev {
                return Err(Error::config(
                    "latent.token_schedule",
                    format!("must be positive and non-increasing from L0, got L0={} then {l:?}", self.latent.tokens),
                ));
            }
            if j == 3 && t != prev {
                return Err(Error::config("latent.token_schedule", "L4 must equal L3 (no mixer after the last stage)"));
            }
            prev = t;
        }
        if !self.exits[3] {
            return Err(Error::config("exits", "the final exit must be enabled"));
        }
        for i in 0..STAGES {
            let (h, w) = self.feature_size(i);
            if h < POOL_SIZE || w < POOL_SIZE {
                return Err(Error::config(
                    "image",
                    format!("feature map X{i} is {h}x{w}, smaller than the {POOL_SIZE}x{POOL_SIZE} pooled grid"),
                ));
            }
        }
        Ok(())
    }
}
