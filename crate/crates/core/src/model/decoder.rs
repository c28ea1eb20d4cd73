//! All-MLP decoder: per-level projection, upsampling to the finest level,
//! channel concatenation, fusion and per-pixel classification.

use super::config::{DecoderConfig, EncoderConfig, NUM_STAGES};
use super::encoder::MultiScaleFeatures;
use super::layers::{Linear, Module, ParamBuilder};
use crate::error::{Error, Result};
use crate::tensor::{Float, Param, Tape, Var};

#[derive(Clone, Debug)]
pub struct MlpDecoder {
    pub config: DecoderConfig,
    /// One projection per pyramid level, `C * 2^s -> C_d`.
    pub proj: Vec<Linear>,
    /// `4 * C_d -> C_d`, followed by gelu.
    pub fuse: Linear,
    pub classifier: Linear,
}

impl MlpDecoder {
    pub fn new(pb: &mut ParamBuilder, name: &str, enc: &EncoderConfig, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let proj = (0..NUM_STAGES)
            .map(|s| Linear::new(pb, &format!("{name}.proj{s}"), enc.stage_dim(s), d, true))
            .collect();
        Ok(Self {
            config: cfg.clone(),
            proj,
            fuse: Linear::new(pb, &format!("{name}.fuse"), NUM_STAGES * d, d, true),
            classifier: Linear::new(pb, &format!("{name}.classifier"), d, cfg.num_classes, true),
        })
    }

    /// Projected and upsampled levels, each `[h0, w0, C_d]`, in level order.
    pub fn aligned_levels<T: Float>(&self, tape: &mut Tape<T>, features: &MultiScaleFeatures) -> Result<Vec<Var>> {
        features.validate(tape)?;
        let s0 = tape.shape(features.features[0]).to_vec();
        for (f, p) in features.features.iter().zip(&self.proj) {
            let c = tape.shape(*f)[2];
            if c != p.d_in() {
                return Err(Error::contract(
                    "decode",
                    format!("level has {c} channels, projection expects {}", p.d_in()),
                ));
            }
        }
        let mut levels = Vec::with_capacity(NUM_STAGES);
        for (s, (&f, p)) in features.features.iter().zip(&self.proj).enumerate() {
            let mut t = p.forward(tape, f)?;
            if s > 0 {
                t = tape.upsample_bilinear(t, s0[0], s0[1])?;
            }
            levels.push(t);
        }
        Ok(levels)
    }

    /// Pyramid to logits at the finest level's resolution: `[h0, w0, N_cls]`.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, features: &MultiScaleFeatures) -> Result<Var> {
        let levels = self.aligned_levels(tape, features)?;
        let fused = tape.concat(&levels, 2)?;
        let fused = self.fuse.forward(tape, fused)?;
        let fused = tape.gelu(fused)?;
        self.classifier.forward(tape, fused)
    }
}

impl Module for MlpDecoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for p in &self.proj {
            p.visit(f);
        }
        self.fuse.visit(f);
        self.classifier.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        for p in &mut self.proj {
            p.visit_mut(f);
        }
        self.fuse.visit_mut(f);
        self.classifier.visit_mut(f);
    }
}
