//! Hierarchical shifted-window encoder: patch embedding, four stages of
//! window-attention blocks, and patch merging between stages.

use super::config::{EncoderConfig, NUM_STAGES};
use super::layers::{LayerNorm, Linear, Module, ParamBuilder, INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::{Float, Param, Tape, Tensor, Var};

/// Additive attention-mask value for blocked token pairs.
pub const MASK_NEG: f32 = -1e9;

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Splits `[h, w, c]` into `[num_windows, m*m, c]`. Windows are ordered
/// row-major over the window grid and tokens row-major within a window.
pub fn window_partition<T: Float>(tape: &mut Tape<T>, x: Var, m: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || m == 0 || s[0] % m != 0 || s[1] % m != 0 {
        return Err(Error::contract("window_partition", format!("{s:?} is not tiled by {m}x{m} windows")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let t = tape.reshape(x, &[h / m, m, w / m, m, c])?;
    let t = tape.permute(t, &[0, 2, 1, 3, 4])?;
    tape.reshape(t, &[(h / m) * (w / m), m * m, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Float>(tape: &mut Tape<T>, windows: Var, m: usize, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(windows).to_vec();
    if s.len() != 3 || m == 0 || h % m != 0 || w % m != 0 || s[0] != (h / m) * (w / m) || s[1] != m * m {
        return Err(Error::contract(
            "window_reverse",
            format!("{s:?} does not hold {m}x{m} windows of a {h}x{w} map"),
        ));
    }
    let c = s[2];
    let t = tape.reshape(windows, &[h / m, w / m, m, m, c])?;
    let t = tape.permute(t, &[0, 2, 1, 3, 4])?;
    tape.reshape(t, &[h, w, c])
}

/// Index into the `(2m-1)^2`-row bias table for every (query, key) pair of an
/// `m x m` window, row-major over queries then keys.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let n = m * m;
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(n * n);
    for q in 0..n {
        let (qy, qx) = (q / m, q % m);
        for k in 0..n {
            let (ky, kx) = (k / m, k % m);
            idx.push((qy + m - 1 - ky) * span + (qx + m - 1 - kx));
        }
    }
    idx
}

/// Attention mask `[num_windows, m*m, m*m]` for a `padded_h x padded_w` map
/// whose first `valid_h x valid_w` tokens are real, after a cyclic shift of
/// `shift` tokens toward the origin. Token pairs that were not contiguous
/// before the shift, or that mix real and padding tokens, get [`MASK_NEG`].
/// Returns `None` when nothing needs masking.
pub fn attention_mask(
    padded_h: usize,
    padded_w: usize,
    m: usize,
    shift: usize,
    valid_h: usize,
    valid_w: usize,
) -> Option<Tensor<f32>> {
    if shift == 0 && valid_h == padded_h && valid_w == padded_w {
        return None;
    }
    // Region labels on the shifted grid: the last window row/column holds
    // tokens that wrapped around and must stay apart from their neighbours.
    let region = |pos: usize, len: usize| -> usize {
        if shift == 0 || pos < len - m {
            0
        } else if pos < len - shift {
            1
        } else {
            2
        }
    };
    let key = |y: usize, x: usize| -> (usize, bool) {
        let oy = (y + shift) % padded_h;
        let ox = (x + shift) % padded_w;
        (region(y, padded_h) * 3 + region(x, padded_w), oy >= valid_h || ox >= valid_w)
    };
    let (gh, gw) = (padded_h / m, padded_w / m);
    let n = m * m;
    let mut data = Vec::with_capacity(gh * gw * n * n);
    for wy in 0..gh {
        for wx in 0..gw {
            let keys: Vec<(usize, bool)> = (0..n).map(|t| key(wy * m + t / m, wx * m + t % m)).collect();
            for q in &keys {
                data.extend(keys.iter().map(|k| if k == q { 0.0 } else { MASK_NEG }));
            }
        }
    }
    Some(Tensor::new(vec![gh * gw, n, n], data).expect("mask shape"))
}

/// Non-overlapping patch embedding: a shared linear map of each flattened
/// `P x P x in_channels` patch followed by layer norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub patch_size: usize,
}

impl PatchEmbed {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &EncoderConfig) -> Self {
        let d_in = cfg.patch_size * cfg.patch_size * cfg.in_channels;
        Self {
            proj: Linear::new(pb, &format!("{name}.proj"), d_in, cfg.embed_dim, true),
            norm: LayerNorm::new(pb, &format!("{name}.norm"), cfg.embed_dim),
            patch_size: cfg.patch_size,
        }
    }

    /// Linear projection of every patch, before normalization: `[H/P, W/P, C]`.
    pub fn project<T: Float>(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        let s = tape.shape(image).to_vec();
        let p = self.patch_size;
        if s.len() != 3 || s[0] % p != 0 || s[1] % p != 0 {
            return Err(Error::contract(
                "patch_embed",
                format!("image {s:?} is not divisible into {p}x{p} patches"),
            ));
        }
        let (h, w, c) = (s[0] / p, s[1] / p, s[2]);
        if c * p * p != self.proj.d_in() {
            return Err(Error::shape("patch_embed", &s, self.proj.weight.shape()));
        }
        let t = tape.reshape(image, &[h, p, w, p, c])?;
        let t = tape.permute(t, &[0, 2, 1, 3, 4])?;
        let t = tape.reshape(t, &[h * w, p * p * c])?;
        let t = self.proj.forward(tape, t)?;
        tape.reshape(t, &[h, w, self.proj.d_out()])
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        let t = self.project(tape, image)?;
        self.norm.forward(tape, t)
    }
}

impl Module for PatchEmbed {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.proj.visit(f);
        self.norm.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.proj.visit_mut(f);
        self.norm.visit_mut(f);
    }
}

/// Output of [`WindowAttention::forward`].
pub struct AttentionOutput {
    /// `[num_windows, m*m, c]`
    pub out: Var,
    /// Post-softmax weights `[num_windows, heads, m*m, m*m]`.
    pub weights: Var,
}

/// Multi-head self-attention within windows, with a learned relative
/// position bias per head.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    /// `[(2m-1)^2, heads]`
    pub bias_table: Param,
    pub num_heads: usize,
    pub window_size: usize,
    rel_index: Vec<usize>,
}

impl WindowAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, num_heads: usize, window_size: usize) -> Self {
        let span = 2 * window_size - 1;
        Self {
            qkv: Linear::new(pb, &format!("{name}.qkv"), dim, 3 * dim, true),
            bias_table: pb.normal(
                format!("{name}.relative_position_bias_table"),
                &[span * span, num_heads],
                INIT_STD,
            ),
            proj: Linear::new(pb, &format!("{name}.proj"), dim, dim, true),
            num_heads,
            window_size,
            rel_index: relative_position_index(window_size),
        }
    }

    /// `softmax(Q K^T / sqrt(d) + B + mask) V` per window and head, heads
    /// concatenated and projected. `mask` is `[num_windows, m*m, m*m]`.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, windows: Var, mask: Option<&Tensor<f32>>) -> Result<AttentionOutput> {
        let s = tape.shape(windows).to_vec();
        let n = self.window_size * self.window_size;
        if s.len() != 3 || s[1] != n {
            return Err(Error::contract("window_attention", format!("expected [nw, {n}, c], got {s:?}")));
        }
        let (nw, c, heads) = (s[0], s[2], self.num_heads);
        if c % heads != 0 {
            return Err(Error::contract("window_attention", format!("{c} channels not divisible by {heads} heads")));
        }
        if let Some(m) = mask {
            if m.shape() != [nw, n, n] {
                return Err(Error::shape("window_attention mask", &[nw, n, n], m.shape()));
            }
        }
        let d = c / heads;

        let qkv = self.qkv.forward(tape, windows)?;
        let qkv = tape.reshape(qkv, &[nw, n, 3, heads, d])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [qkv; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let t = tape.narrow(qkv, 0, i, 1)?;
            *part = tape.reshape(t, &[nw, heads, n, d])?;
        }
        let [q, k, v] = parts;
        let q = tape.scale(q, 1.0 / (d as f64).sqrt())?;
        let kt = tape.permute(k, &[0, 1, 3, 2])?;
        let mut logits = tape.matmul(q, kt)?;

        let table = tape.param(&self.bias_table);
        let bias = tape.gather_rows(table, &self.rel_index)?;
        let bias = tape.permute(bias, &[1, 0])?;
        let bias = tape.reshape(bias, &[heads, n, n])?;
        logits = tape.add(logits, bias)?;

        if let Some(m) = mask {
            let mut expanded = Vec::with_capacity(nw * heads * n * n);
            for win in m.data().chunks(n * n) {
                for _ in 0..heads {
                    expanded.extend(win.iter().map(|&v| T::lit(v as f64)));
                }
            }
            let mask = tape.constant(Tensor::new(vec![nw, heads, n, n], expanded)?);
            logits = tape.add(logits, mask)?;
        }

        let weights = tape.softmax(logits, 3)?;
        let out = tape.matmul(weights, v)?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let out = tape.reshape(out, &[nw, n, c])?;
        let out = self.proj.forward(tape, out)?;
        Ok(AttentionOutput { out, weights })
    }
}

impl Module for WindowAttention {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.qkv.visit(f);
        f(&self.bias_table);
        self.proj.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.qkv.visit_mut(f);
        f(&mut self.bias_table);
        self.proj.visit_mut(f);
    }
}

/// Pre-norm transformer block over `[h, w, c]` with (shifted-)window attention.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub window_size: usize,
    pub shift: usize,
}

impl SwinBlock {
    /// Odd `block_index` selects the shifted-window variant.
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &EncoderConfig, stage: usize, block_index: usize) -> Self {
        let dim = cfg.stage_dim(stage);
        let hidden = cfg.mlp_hidden(stage);
        Self {
            norm1: LayerNorm::new(pb, &format!("{name}.norm1"), dim),
            attn: WindowAttention::new(pb, &format!("{name}.attn"), dim, cfg.num_heads[stage], cfg.window_size),
            norm2: LayerNorm::new(pb, &format!("{name}.norm2"), dim),
            fc1: Linear::new(pb, &format!("{name}.mlp.fc1"), dim, hidden, true),
            fc2: Linear::new(pb, &format!("{name}.mlp.fc2"), hidden, dim, true),
            window_size: cfg.window_size,
            shift: if block_index % 2 == 1 { cfg.shift_size() } else { 0 },
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, x)?.0)
    }

    /// Like [`forward`](Self::forward), also returning the attention weights.
    pub fn forward_traced<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::contract("swin_block", format!("expected [h, w, c], got {s:?}")));
        }
        let (h, w) = (s[0], s[1]);
        let m = self.window_size;
        let (hp, wp) = (round_up(h, m), round_up(w, m));

        let mut t = self.norm1.forward(tape, x)?;
        t = tape.pad(t, 0, 0, hp - h)?;
        t = tape.pad(t, 1, 0, wp - w)?;
        let sh = self.shift as isize;
        if sh > 0 {
            t = tape.roll(t, &[-sh, -sh, 0])?;
        }
        let windows = window_partition(tape, t, m)?;
        let mask = attention_mask(hp, wp, m, self.shift, h, w);
        let attn = self.attn.forward(tape, windows, mask.as_ref())?;
        t = window_reverse(tape, attn.out, m, hp, wp)?;
        if sh > 0 {
            t = tape.roll(t, &[sh, sh, 0])?;
        }
        if hp != h {
            t = tape.narrow(t, 0, 0, h)?;
        }
        if wp != w {
            t = tape.narrow(t, 1, 0, w)?;
        }
        let x = tape.add(x, t)?;

        let y = self.norm2.forward(tape, x)?;
        let y = self.fc1.forward(tape, y)?;
        let y = tape.gelu(y)?;
        let y = self.fc2.forward(tape, y)?;
        Ok((tape.add(x, y)?, attn.weights))
    }
}

impl Module for SwinBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.norm1.visit(f);
        self.attn.visit(f);
        self.norm2.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.norm1.visit_mut(f);
        self.attn.visit_mut(f);
        self.norm2.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// 2x2 neighbourhood gather (top-left, bottom-left, top-right, bottom-right),
/// layer norm, and a bias-free `4c -> 2c` reduction.
#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        Self {
            norm: LayerNorm::new(pb, &format!("{name}.norm"), 4 * dim),
            reduction: Linear::new(pb, &format!("{name}.reduction"), 4 * dim, 2 * dim, false),
        }
    }

    /// `[h, w, c] -> [h/2, w/2, 4c]` without any learned step.
    pub fn gather<T: Float>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[0] % 2 != 0 || s[1] % 2 != 0 {
            return Err(Error::contract("patch_merging", format!("needs even [h, w, c], got {s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let t = tape.reshape(x, &[h / 2, 2, w / 2, 2, c])?;
        let t = tape.permute(t, &[0, 2, 3, 1, 4])?;
        tape.reshape(t, &[h / 2, w / 2, 4 * c])
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let t = Self::gather(tape, x)?;
        let t = self.norm.forward(tape, t)?;
        self.reduction.forward(tape, t)
    }
}

impl Module for PatchMerging {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.norm.visit(f);
        self.reduction.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.norm.visit_mut(f);
        self.reduction.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<SwinBlock>,
    /// Merging that feeds the next stage; absent on the last stage.
    pub downsample: Option<PatchMerging>,
}

/// The four-level feature pyramid: `[H/4, W/4, C]` down to `[H/32, W/32, 8C]`
/// for the default patch size.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures {
    pub features: Vec<Var>,
}

impl MultiScaleFeatures {
    pub fn shapes<T: Float>(&self, tape: &Tape<T>) -> Vec<Vec<usize>> {
        self.features.iter().map(|&v| tape.shape(v).to_vec()).collect()
    }

    /// Checks that each level halves the spatial size and doubles the width.
    pub fn validate<T: Float>(&self, tape: &Tape<T>) -> Result<()> {
        let shapes = self.shapes(tape);
        let bad = || Error::contract("feature pyramid", format!("invalid level shapes {shapes:?}"));
        if shapes.len() != NUM_STAGES || shapes.iter().any(|s| s.len() != 3) {
            return Err(bad());
        }
        for pair in shapes.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a[0] != 2 * b[0] || a[1] != 2 * b[1] || 2 * a[2] != b[2] {
                return Err(bad());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SwinEncoder {
    pub config: EncoderConfig,
    pub patch_embed: PatchEmbed,
    pub stages: Vec<Stage>,
    /// Per-level output norms.
    pub norms: Vec<LayerNorm>,
}

impl SwinEncoder {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let patch_embed = PatchEmbed::new(pb, &format!("{name}.patch_embed"), cfg);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            let blocks = (0..cfg.depths[s])
                .map(|b| SwinBlock::new(pb, &format!("{name}.stage{s}.block{b}"), cfg, s, b))
                .collect();
            let downsample = (s + 1 < NUM_STAGES)
                .then(|| PatchMerging::new(pb, &format!("{name}.stage{s}.downsample"), cfg.stage_dim(s)));
            stages.push(Stage { blocks, downsample });
        }
        let norms = (0..NUM_STAGES)
            .map(|s| LayerNorm::new(pb, &format!("{name}.norm{s}"), cfg.stage_dim(s)))
            .collect();
        Ok(Self {
            config: cfg.clone(),
            patch_embed,
            stages,
            norms,
        })
    }

    /// Image `[H, W, in_channels]` to the four-level pyramid. The image is
    /// zero-padded on the bottom/right to a multiple of `patch_size * 8`.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, image: Var) -> Result<MultiScaleFeatures> {
        let s = tape.shape(image).to_vec();
        let cfg = &self.config;
        if s.len() != 3 || s[2] != cfg.in_channels {
            return Err(Error::shape("encode_forward", &s, &[0, 0, cfg.in_channels]));
        }
        let (h, w) = (s[0], s[1]);
        if h < cfg.patch_size || w < cfg.patch_size {
            return Err(Error::contract(
                "encode_forward",
                format!("image {h}x{w} smaller than one {0}x{0} patch", cfg.patch_size),
            ));
        }
        let mult = cfg.input_multiple();
        let mut x = tape.pad(image, 0, 0, round_up(h, mult) - h)?;
        x = tape.pad(x, 1, 0, round_up(w, mult) - w)?;
        x = self.patch_embed.forward(tape, x)?;

        let mut features = Vec::with_capacity(NUM_STAGES);
        for (stage, norm) in self.stages.iter().zip(&self.norms) {
            for block in &stage.blocks {
                x = block.forward(tape, x)?;
            }
            features.push(norm.forward(tape, x)?);
            if let Some(merge) = &stage.downsample {
                x = merge.forward(tape, x)?;
            }
        }
        Ok(MultiScaleFeatures { features })
    }
}

impl Module for SwinEncoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.patch_embed.visit(f);
        for stage in &self.stages {
            for b in &stage.blocks {
                b.visit(f);
            }
            if let Some(d) = &stage.downsample {
                d.visit(f);
            }
        }
        for n in &self.norms {
            n.visit(f);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.patch_embed.visit_mut(f);
        for stage in &mut self.stages {
            for b in &mut stage.blocks {
                b.visit_mut(f);
            }
            if let Some(d) = &mut stage.downsample {
                d.visit_mut(f);
            }
        }
        for n in &mut self.norms {
            n.visit_mut(f);
        }
    }
}
