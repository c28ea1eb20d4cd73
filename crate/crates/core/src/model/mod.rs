//! The segmentation network: encoder, decoder and the end-to-end forward pass.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod layers;

pub use config::{DecoderConfig, EncoderConfig, ModelConfig, Profile, NUM_STAGES};
pub use decoder::MlpDecoder;
pub use encoder::{
    attention_mask, relative_position_index, window_partition, window_reverse, MultiScaleFeatures, PatchEmbed,
    PatchMerging, SwinBlock, SwinEncoder, WindowAttention,
};
pub use layers::{LayerNorm, Linear, Module, ParamBuilder};

use crate::error::{Error, Result};
use crate::tensor::{Float, Param, Tape, Tensor, Var};

/// Encoder and decoder with every parameter they own.
#[derive(Clone, Debug)]
pub struct SsFormer {
    pub config: ModelConfig,
    pub encoder: SwinEncoder,
    pub decoder: MlpDecoder,
    num_params: usize,
}

impl SsFormer {
    /// Builds a model with seeded random initialization.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new(seed);
        let encoder = SwinEncoder::new(&mut pb, "encoder", &config.encoder)?;
        let decoder = MlpDecoder::new(&mut pb, "decoder", &config.encoder, &config.decoder)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            num_params: pb.count(),
        })
    }

    /// Number of parameter tensors.
    pub fn num_param_tensors(&self) -> usize {
        self.num_params
    }

    /// Total number of parameter elements.
    pub fn num_param_elements(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Parameters in canonical order; `params()[i].id == i`.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::with_capacity(self.num_params);
        self.visit(&mut |p| out.push(p));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::with_capacity(self.num_params);
        self.visit_mut(&mut |p| out.push(p));
        out
    }

    /// Image `[H, W, 3]` to logits `[H, W, N_cls]`: encode, decode at the
    /// finest level, bilinearly upsample by the patch size and crop the
    /// input padding away.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        let s = tape.shape(image).to_vec();
        let features = self.encoder.forward(tape, image)?;
        let logits = self.decoder.forward(tape, &features)?;
        let p = self.config.encoder.patch_size;
        let ls = tape.shape(logits).to_vec();
        let mut up = tape.upsample_bilinear(logits, ls[0] * p, ls[1] * p)?;
        if ls[0] * p != s[0] {
            up = tape.narrow(up, 0, 0, s[0])?;
        }
        if ls[1] * p != s[1] {
            up = tape.narrow(up, 1, 0, s[1])?;
        }
        Ok(up)
    }

    /// Logits for one image, without keeping the tape.
    pub fn logits(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(image.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Per-pixel argmax class ids, row-major `[H * W]`.
    pub fn predict(&self, image: &Tensor<f32>) -> Result<Vec<u32>> {
        Ok(argmax_last(&self.logits(image)?))
    }

    /// Replaces parameter values by name; names and shapes must match exactly.
    pub fn load_params(&mut self, named: &[(String, Tensor<f32>)]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != named.len() {
            return Err(Error::Config(format!(
                "model has {} parameters, checkpoint has {}",
                params.len(),
                named.len()
            )));
        }
        for (p, (name, t)) in params.iter_mut().zip(named) {
            if &p.name != name || p.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match checkpoint entry {name} {:?}",
                    p.name,
                    p.shape(),
                    t.shape()
                )));
            }
            let mut t = t.clone();
            t.requires_grad = true;
            p.tensor = t;
        }
        Ok(())
    }
}

impl Module for SsFormer {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.encoder.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

/// Index of the largest entry along the last axis, ties to the lowest index.
pub fn argmax_last<T: Float>(t: &Tensor<T>) -> Vec<u32> {
    let n = *t.shape().last().expect("non-scalar");
    t.data()
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}
