//! Parameter and multiply-accumulate accounting.
//!
//! Costs are reported in multiply-accumulates (1 MAC = 1 unit). Linear layers
//! cost `tokens * c_in * c_out`; attention scores and the weighted sum of
//! values cost `M^4 * c` each per window; softmax, layer norm and gelu cost
//! one unit per element; bilinear upsampling costs four per output element.
//! Additions (residuals, biases, masks) are free. These are the same rules
//! [`Tape::macs`](crate::Tape::macs) applies while running the forward pass.

use num_bigint::BigUint;
use serde::{Serialize, Serializer};

use crate::model::{DecoderConfig, EncoderConfig, ModelConfig, Profile, NUM_STAGES};

/// Symbols of the closed-form cost: patch grid `h x w`, embed dim `c`,
/// window size `m`, class count `n_cls`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComplexityInputs {
    pub h: u64,
    pub w: u64,
    pub c: u64,
    pub m: u64,
    pub n_cls: u64,
}

impl ComplexityInputs {
    /// Inputs for an `height x width` image, on the padded patch grid.
    pub fn for_image(cfg: &ModelConfig, height: usize, width: usize) -> Self {
        let (h, w) = cfg.encoder.stage_grids(height, width)[0];
        Self {
            h: h as u64,
            w: w as u64,
            c: cfg.encoder.embed_dim as u64,
            m: cfg.encoder.window_size as u64,
            n_cls: cfg.decoder.num_classes as u64,
        }
    }
}

/// `hw*C*(5C + 2M^2 + 4N)`, i.e. `4hwC^2 + 2M^2hwC + hwC^2 + 4hwC*N`, exactly.
pub fn omega_ssformer(x: &ComplexityInputs) -> BigUint {
    let hwc = BigUint::from(x.h) * x.w * x.c;
    let inner = BigUint::from(x.c) * 5u32 + BigUint::from(x.m) * x.m * 2u32 + BigUint::from(x.n_cls) * 4u32;
    hwc * inner
}

/// One row of the per-layer breakdown. `name` is the parameter-path prefix of
/// the module it describes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComplexityReport {
    pub profile: String,
    pub height: usize,
    pub width: usize,
    pub params_total: u64,
    #[serde(serialize_with = "big_as_number")]
    pub omega_eq1: BigUint,
    pub flops_detailed: u64,
    pub per_layer: Vec<LayerCost>,
}

fn big_as_number<S: Serializer>(v: &BigUint, s: S) -> std::result::Result<S::Ok, S::Error> {
    match u128::try_from(v) {
        Ok(n) => s.serialize_u128(n),
        Err(_) => s.serialize_str(&v.to_string()),
    }
}

fn round_up(v: u64, m: u64) -> u64 {
    v.div_ceil(m) * m
}

/// Cost of a linear layer applied to `tokens` rows.
pub fn linear_flops(tokens: u64, c_in: u64, c_out: u64) -> u64 {
    tokens * c_in * c_out
}

fn linear_params(c_in: u64, c_out: u64, bias: bool) -> u64 {
    c_in * c_out + if bias { c_out } else { 0 }
}

/// Walks the architecture for an `height x width` input. With `height` or
/// `width` zero, only parameters are meaningful.
fn walk(enc: &EncoderConfig, dec: &DecoderConfig, height: usize, width: usize) -> Vec<LayerCost> {
    let mut rows = Vec::new();
    let grids = enc.stage_grids(height, width).map(|(h, w)| (h as u64, w as u64));
    let (p, m, cin) = (enc.patch_size as u64, enc.window_size as u64, enc.in_channels as u64);
    let c0 = enc.embed_dim as u64;

    let (h0, w0) = grids[0];
    rows.push(LayerCost {
        name: "encoder.patch_embed".into(),
        params: linear_params(p * p * cin, c0, true) + 2 * c0,
        flops: linear_flops(h0 * w0, p * p * cin, c0) + h0 * w0 * c0,
    });

    for s in 0..NUM_STAGES {
        let c = enc.stage_dim(s) as u64;
        let hidden = enc.mlp_hidden(s) as u64;
        let heads = enc.num_heads[s] as u64;
        let (h, w) = grids[s];
        let tokens = h * w;
        let padded = round_up(h, m) * round_up(w, m);
        let windows = padded / (m * m);
        let n = m * m;
        for b in 0..enc.depths[s] {
            let params = 2 * c
                + linear_params(c, 3 * c, true)
                + (2 * m - 1) * (2 * m - 1) * heads
                + linear_params(c, c, true)
                + 2 * c
                + linear_params(c, hidden, true)
                + linear_params(hidden, c, true);
            let attention = linear_flops(padded, c, 3 * c)
                + windows * n * n * c // scores
                + windows * heads * n * n // softmax
                + windows * n * n * c // weighted values
                + linear_flops(padded, c, c);
            let mlp = linear_flops(tokens, c, hidden) + tokens * hidden + linear_flops(tokens, hidden, c);
            rows.push(LayerCost {
                name: format!("encoder.stage{s}.block{b}"),
                params,
                flops: 2 * tokens * c + attention + mlp,
            });
        }
        if s + 1 < NUM_STAGES {
            let merged = (h / 2) * (w / 2);
            rows.push(LayerCost {
                name: format!("encoder.stage{s}.downsample"),
                params: 2 * 4 * c + linear_params(4 * c, 2 * c, false),
                flops: merged * 4 * c + linear_flops(merged, 4 * c, 2 * c),
            });
        }
    }
    for s in 0..NUM_STAGES {
        let c = enc.stage_dim(s) as u64;
        let (h, w) = grids[s];
        rows.push(LayerCost {
            name: format!("encoder.norm{s}"),
            params: 2 * c,
            flops: h * w * c,
        });
    }

    let d = dec.embed_dim as u64;
    let k = dec.num_classes as u64;
    let fine = h0 * w0;
    for s in 0..NUM_STAGES {
        let c = enc.stage_dim(s) as u64;
        let (h, w) = grids[s];
        let upsample = if s > 0 { 4 * fine * d } else { 0 };
        rows.push(LayerCost {
            name: format!("decoder.proj{s}"),
            params: linear_params(c, d, true),
            flops: linear_flops(h * w, c, d) + upsample,
        });
    }
    rows.push(LayerCost {
        name: "decoder.fuse".into(),
        params: linear_params(NUM_STAGES as u64 * d, d, true),
        flops: linear_flops(fine, NUM_STAGES as u64 * d, d) + fine * d,
    });
    rows.push(LayerCost {
        name: "decoder.classifier".into(),
        params: linear_params(d, k, true),
        flops: linear_flops(fine, d, k),
    });
    rows.push(LayerCost {
        name: "head.upsample".into(),
        params: 0,
        flops: 4 * fine * p * p * k,
    });
    rows
}

/// Parameter-element total and its per-module breakdown, from the
/// configuration alone.
pub fn count_params(enc: &EncoderConfig, dec: &DecoderConfig) -> (u64, Vec<LayerCost>) {
    let rows: Vec<LayerCost> = walk(enc, dec, 0, 0)
        .into_iter()
        .filter(|r| r.params > 0)
        .map(|r| LayerCost { flops: 0, ..r })
        .collect();
    (rows.iter().map(|r| r.params).sum(), rows)
}

/// Multiply-accumulates of one forward pass on an `height x width` image,
/// including the padding the model applies internally.
pub fn count_flops_detailed(enc: &EncoderConfig, dec: &DecoderConfig, height: usize, width: usize) -> u64 {
    walk(enc, dec, height, width).iter().map(|r| r.flops).sum()
}

pub fn analyze(profile: Profile, height: usize, width: usize) -> ComplexityReport {
    analyze_config(profile.name(), &profile.model_config(), height, width)
}

pub fn analyze_config(name: &str, cfg: &ModelConfig, height: usize, width: usize) -> ComplexityReport {
    let per_layer = walk(&cfg.encoder, &cfg.decoder, height, width);
    ComplexityReport {
        profile: name.to_string(),
        height,
        width,
        params_total: per_layer.iter().map(|r| r.params).sum(),
        omega_eq1: omega_ssformer(&ComplexityInputs::for_image(cfg, height, width)),
        flops_detailed: per_layer.iter().map(|r| r.flops).sum(),
        per_layer,
    }
}
