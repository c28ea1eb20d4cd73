use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Profile};

/// Optimizer and loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Held-out evaluation every this many iterations; 0 disables it.
    pub eval_interval: usize,
    pub profile: String,
    /// Decay the learning rate linearly to zero over `max_iters`.
    pub lr_linear_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 6e-5,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            eps: 1e-8,
            batch_size: 8,
            max_iters: 2000,
            seed: 0,
            eval_interval: 100,
            profile: "toy".into(),
            lr_linear_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it freezes the model, which is useful for checks
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be a non-negative number, got {}", self.lr)));
        }
        for b in [self.betas.0, self.betas.1] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("betas must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Profile::parse(&self.profile)?;
        Ok(())
    }

    /// Learning rate used at (zero-based) iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        if self.lr_linear_decay && self.max_iters > 0 {
            self.lr * (1.0 - iter as f64 / self.max_iters as f64)
        } else {
            self.lr
        }
    }
}

/// Synthetic training and held-out splits. The held-out samples come from
/// the same generator at indices past the training range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_samples: 512,
            eval_samples: 64,
            height: 64,
            width: 64,
        }
    }
}

/// Everything a `train` run reads from its JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub encoder: crate::model::EncoderConfig,
    pub decoder: crate::model::DecoderConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn for_profile(train: TrainConfig) -> Result<Self> {
        let model = Profile::parse(&train.profile)?.model_config();
        Ok(Self {
            train,
            encoder: model.encoder,
            decoder: model.decoder,
            synth: SynthConfig::default(),
        })
    }

    /// Parses a run file. `encoder` and `decoder` entries override the chosen
    /// profile's architecture key by key; unknown keys anywhere are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let Value::Object(user) = user else {
            return Err(Error::Config("run file must hold a JSON object".into()));
        };
        let train: TrainConfig = serde_json::from_value(user.get("train").cloned().unwrap_or(Value::Object(Default::default())))
            .map_err(|e| Error::Config(format!("train: {e}")))?;
        let mut base = serde_json::to_value(Self::for_profile(train)?).expect("serializable");
        merge(&mut base, Value::Object(user));
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model().validate()?;
        if self.synth.train_samples == 0 {
            return Err(Error::Config("synth.train_samples must be at least 1".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
