use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of encoder stages.
pub const NUM_STAGES: usize = 4;

/// Architecture of the hierarchical shifted-window encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Side of the square pixel patch mapped to one token.
    pub patch_size: usize,
    /// Side of the square attention window, in tokens.
    pub window_size: usize,
    /// Token width of the first stage; stage `s` has `embed_dim << s` channels.
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub mlp_ratio: f64,
    pub in_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            window_size: 7,
            embed_dim: 128,
            depths: vec![2, 2, 18, 2],
            num_heads: vec![4, 8, 16, 32],
            mlp_ratio: 4.0,
            in_channels: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depths.len() != NUM_STAGES || self.num_heads.len() != NUM_STAGES {
            return Err(Error::Config(format!(
                "depths and num_heads need {NUM_STAGES} entries, got {} and {}",
                self.depths.len(),
                self.num_heads.len()
            )));
        }
        if self.patch_size == 0 || self.window_size == 0 || self.embed_dim == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "patch_size, window_size, embed_dim and in_channels must be positive".into(),
            ));
        }
        for s in 0..NUM_STAGES {
            let heads = self.num_heads[s];
            if heads == 0 || self.stage_dim(s) % heads != 0 {
                return Err(Error::Config(format!(
                    "stage {s}: {} channels not divisible by {heads} heads",
                    self.stage_dim(s)
                )));
            }
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden(0) == 0 {
            return Err(Error::Config(format!("mlp_ratio {} too small", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn mlp_hidden(&self, stage: usize) -> usize {
        (self.stage_dim(stage) as f64 * self.mlp_ratio) as usize
    }

    /// Pixel multiple that input images are padded to: one patch at the
    /// deepest stage.
    pub fn input_multiple(&self) -> usize {
        self.patch_size << (NUM_STAGES - 1)
    }

    pub fn shift_size(&self) -> usize {
        self.window_size / 2
    }

    /// Token-grid size of each stage for an `height x width` input, after the
    /// input has been padded to [`input_multiple`](Self::input_multiple).
    pub fn stage_grids(&self, height: usize, width: usize) -> [(usize, usize); NUM_STAGES] {
        let m = self.input_multiple();
        let (h, w) = (height.div_ceil(m) * m / self.patch_size, width.div_ceil(m) * m / self.patch_size);
        std::array::from_fn(|s| (h >> s, w >> s))
    }
}

/// Width and class count of the all-MLP decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub num_classes: usize,
    pub ignore_index: u32,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            num_classes: 150,
            ignore_index: 255,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("decoder embed_dim must be positive".into()));
        }
        if (self.ignore_index as usize) < self.num_classes {
            return Err(Error::Config(format!(
                "ignore_index {} collides with class ids 0..{}",
                self.ignore_index, self.num_classes
            )));
        }
        Ok(())
    }
}

/// Encoder plus decoder: everything needed to instantiate a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).into()
    }
}

/// Named configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 150 classes, encoder at the C=128 / [2,2,18,2] scale.
    Ade20k,
    /// Same encoder, 19 classes.
    Cityscapes,
    /// Desk-scale model used for training runs and tests.
    Toy,
}

impl Profile {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ade20k" => Ok(Profile::Ade20k),
            "cityscapes" => Ok(Profile::Cityscapes),
            "toy" => Ok(Profile::Toy),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Ade20k => "ade20k",
            Profile::Cityscapes => "cityscapes",
            Profile::Toy => "toy",
        }
    }

    pub fn model_config(self) -> ModelConfig {
        match self {
            Profile::Ade20k => ModelConfig::default(),
            Profile::Cityscapes => ModelConfig {
                encoder: EncoderConfig::default(),
                decoder: DecoderConfig {
                    num_classes: 19,
                    ..DecoderConfig::default()
                },
            },
            Profile::Toy => ModelConfig {
                encoder: EncoderConfig {
                    patch_size: 4,
                    window_size: 4,
                    embed_dim: 32,
                    depths: vec![1, 1, 1, 1],
                    num_heads: vec![1, 2, 4, 8],
                    mlp_ratio: 4.0,
                    in_channels: 3,
                },
                decoder: DecoderConfig {
                    embed_dim: 32,
                    num_classes: 3,
                    ignore_index: 255,
                },
            },
        }
    }

    /// Input resolution used when none is given.
    pub fn default_resolution(self) -> (usize, usize) {
        match self {
            Profile::Ade20k => (512, 512),
            Profile::Cityscapes => (1024, 1024),
            Profile::Toy => (64, 64),
        }
    }
}
