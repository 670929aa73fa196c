//! Transformer building blocks shared by all three networks: sinusoidal
//! positions, scaled dot-product multi-head attention, pre-norm encoder and
//! decoder blocks, the convolutional acoustic front end, and token embedding.

use serde::{Deserialize, Serialize};

use crate::error::{XmError, XmResult};
use crate::numerics::ops;
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;
use crate::numerics::ParamBuilder;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_p: f64,
}

impl LayerConfig {
    pub fn validate(&self) -> XmResult<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return Err(XmError::Config("layer dims must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(XmError::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(XmError::Config("d_model must be even".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(XmError::Config("dropout_p must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Boolean attendability matrix (query_len × key_len), true = attendable.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    pub q_len: usize,
    pub k_len: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn full(q_len: usize, k_len: usize) -> Self {
        AttentionMask { q_len, k_len, bits: vec![true; q_len * k_len] }
    }

    /// Square causal mask: (t, t') attendable iff t' <= t.
    pub fn causal(len: usize) -> Self {
        let mut bits = vec![false; len * len];
        for t in 0..len {
            for tp in 0..=t {
                bits[t * len + tp] = true;
            }
        }
        AttentionMask { q_len: len, k_len: len, bits }
    }

    /// Clear the columns where `valid` is false (padding key positions).
    pub fn with_padding(mut self, valid: &[bool]) -> Self {
        assert_eq!(valid.len(), self.k_len);
        for q in 0..self.q_len {
            for (k, ok) in valid.iter().enumerate() {
                if !ok {
                    self.bits[q * self.k_len + k] = false;
                }
            }
        }
        self
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.k_len + k]
    }

    /// True where attention must be blocked (the fill positions).
    fn blocked(&self) -> Vec<bool> {
        self.bits.iter().map(|b| !b).collect()
    }

    fn check_rows(&self) -> XmResult<()> {
        for q in 0..self.q_len {
            if !self.bits[q * self.k_len..(q + 1) * self.k_len].iter().any(|&b| b) {
                return Err(XmError::EmptyMaskRow { row: q });
            }
        }
        Ok(())
    }
}

/// Sinusoidal position table: PE(pos, 2i) = sin(pos/10000^(2i/d)),
/// PE(pos, 2i+1) = cos(pos/10000^(2i/d)).
pub fn positional_encoding(length: usize, d_model: usize) -> XmResult<Tensor> {
    if !d_model.is_multiple_of(2) {
        return Err(XmError::InvalidArgument(format!(
            "positional encoding needs an even width, got {d_model}"
        )));
    }
    let mut data = vec![0.0; length * d_model];
    for pos in 0..length {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::from_vec(vec![length, d_model], data))
}

/// Dropout stream for training-mode forwards; `None` disables dropout.
pub struct ForwardCtx<'a> {
    pub dropout: Option<(&'a mut Rng, f64)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> ForwardCtx<'static> {
        ForwardCtx { dropout: None }
    }

    pub fn train(rng: &'a mut Rng, p: f64) -> Self {
        ForwardCtx { dropout: if p > 0.0 { Some((rng, p)) } else { None } }
    }
}

fn dropout(x: &Tensor, ctx: &mut ForwardCtx<'_>) -> Tensor {
    match ctx.dropout.as_mut() {
        None => x.clone(),
        Some((rng, p)) => {
            let keep = 1.0 - *p;
            let mask: Vec<f64> = (0..x.numel())
                .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let m = Tensor::from_vec(x.shape().to_vec(), mask);
            ops::mul(x, &m).expect("dropout mask shape")
        }
    }
}

pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> XmResult<Tensor> {
    ops::bias_add(&ops::matmul(x, w)?, b)
}

// ── attention ───────────────────────────────────────────────────────

#[derive(Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl AttentionParams {
    pub fn build(pb: &mut ParamBuilder<'_>, prefix: &str, d_model: usize) -> XmResult<Self> {
        Ok(AttentionParams {
            wq: pb.linear_weight(&format!("{prefix}.wq"), d_model, d_model)?,
            bq: pb.zeros(&format!("{prefix}.bq"), vec![d_model])?,
            wk: pb.linear_weight(&format!("{prefix}.wk"), d_model, d_model)?,
            bk: pb.zeros(&format!("{prefix}.bk"), vec![d_model])?,
            wv: pb.linear_weight(&format!("{prefix}.wv"), d_model, d_model)?,
            bv: pb.zeros(&format!("{prefix}.bv"), vec![d_model])?,
            wo: pb.linear_weight(&format!("{prefix}.wo"), d_model, d_model)?,
            bo: pb.zeros(&format!("{prefix}.bo"), vec![d_model])?,
        })
    }
}

/// Scaled dot-product multi-head attention.
///
/// Returns the projected output (len_q × d_model) and the attention weights
/// (heads × len_q × len_k), normalized per row with exact zeros at masked
/// positions. A query row whose mask admits no keys is rejected.
pub fn multi_head_attention(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: &AttentionMask,
    params: &AttentionParams,
    num_heads: usize,
    ctx: &mut ForwardCtx<'_>,
) -> XmResult<(Tensor, Tensor)> {
    let d_model = *queries.shape().last().unwrap();
    let len_q = queries.shape()[0];
    let len_k = keys.shape()[0];
    if keys.shape() != values.shape() || keys.shape()[1] != d_model {
        return Err(XmError::ShapeMismatch {
            primitive: "attention",
            lhs: keys.shape().to_vec(),
            rhs: values.shape().to_vec(),
        });
    }
    if mask.q_len != len_q || mask.k_len != len_k {
        return Err(XmError::InvalidArgument(format!(
            "mask is {}x{}, attention is {len_q}x{len_k}",
            mask.q_len, mask.k_len
        )));
    }
    mask.check_rows()?;
    let d_head = d_model / num_heads;
    let scaling = (d_head as f64).powf(-0.5);
    let blocked = mask.blocked();

    let q_proj = linear(queries, &params.wq, &params.bq)?;
    let k_proj = linear(keys, &params.wk, &params.bk)?;
    let v_proj = linear(values, &params.wv, &params.bv)?;

    let mut head_outputs = Vec::with_capacity(num_heads);
    let mut head_weights = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = ops::narrow(&q_proj, 1, h * d_head, d_head)?;
        let kh = ops::narrow(&k_proj, 1, h * d_head, d_head)?;
        let vh = ops::narrow(&v_proj, 1, h * d_head, d_head)?;
        let scores = ops::scale(&ops::matmul(&qh, &ops::transpose(&kh)?)?, scaling);
        let masked = ops::masked_fill(&scores, &blocked, f64::NEG_INFINITY)?;
        let attn = ops::softmax(&masked)?;
        head_weights.push(ops::reshape(&attn, &[1, len_q, len_k])?);
        let attn_d = dropout(&attn, ctx);
        head_outputs.push(ops::matmul(&attn_d, &vh)?);
    }
    let merged = concat_refs(&head_outputs, 1)?;
    let output = linear(&merged, &params.wo, &params.bo)?;
    let weights = concat_refs(&head_weights, 0)?;
    Ok((output, weights))
}

fn concat_refs(parts: &[Tensor], axis: usize) -> XmResult<Tensor> {
    let refs: Vec<&Tensor> = parts.iter().collect();
    ops::concat(&refs, axis)
}

// ── encoder / decoder blocks ────────────────────────────────────────

#[derive(Clone)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnParams {
    pub fn build(
        pb: &mut ParamBuilder<'_>,
        prefix: &str,
        d_model: usize,
        ffn_dim: usize,
    ) -> XmResult<Self> {
        Ok(FfnParams {
            w1: pb.linear_weight(&format!("{prefix}.w1"), d_model, ffn_dim)?,
            b1: pb.zeros(&format!("{prefix}.b1"), vec![ffn_dim])?,
            w2: pb.linear_weight(&format!("{prefix}.w2"), ffn_dim, d_model)?,
            b2: pb.zeros(&format!("{prefix}.b2"), vec![d_model])?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx<'_>) -> XmResult<Tensor> {
        let hidden = ops::relu(&linear(x, &self.w1, &self.b1)?);
        linear(&dropout(&hidden, ctx), &self.w2, &self.b2)
    }
}

#[derive(Clone)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl NormParams {
    pub fn build(pb: &mut ParamBuilder<'_>, prefix: &str, d_model: usize) -> XmResult<Self> {
        Ok(NormParams {
            gain: pb.ones(&format!("{prefix}.gain"), vec![d_model])?,
            bias: pb.zeros(&format!("{prefix}.bias"), vec![d_model])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> XmResult<Tensor> {
        ops::layer_norm(x, &self.gain, &self.bias, LAYER_NORM_EPS)
    }
}

#[derive(Clone)]
pub struct EncoderBlockParams {
    pub ln1: NormParams,
    pub attn: AttentionParams,
    pub ln2: NormParams,
    pub ffn: FfnParams,
}

impl EncoderBlockParams {
    pub fn build(pb: &mut ParamBuilder<'_>, prefix: &str, cfg: &LayerConfig) -> XmResult<Self> {
        Ok(EncoderBlockParams {
            ln1: NormParams::build(pb, &format!("{prefix}.ln1"), cfg.d_model)?,
            attn: AttentionParams::build(pb, &format!("{prefix}.attn"), cfg.d_model)?,
            ln2: NormParams::build(pb, &format!("{prefix}.ln2"), cfg.d_model)?,
            ffn: FfnParams::build(pb, &format!("{prefix}.ffn"), cfg.d_model, cfg.ffn_dim)?,
        })
    }
}

/// Pre-norm encoder block: x + SelfAttn(LN(x)), then + FFN(LN(·)).
/// Also returns the self-attention weights (heads × len × len).
pub fn encoder_block(
    input: &Tensor,
    self_mask: &AttentionMask,
    params: &EncoderBlockParams,
    num_heads: usize,
    ctx: &mut ForwardCtx<'_>,
) -> XmResult<(Tensor, Tensor)> {
    let normed = params.ln1.forward(input)?;
    let (attn_out, weights) =
        multi_head_attention(&normed, &normed, &normed, self_mask, &params.attn, num_heads, ctx)?;
    let x1 = ops::add(input, &attn_out)?;
    let ffn_out = params.ffn.forward(&params.ln2.forward(&x1)?, ctx)?;
    Ok((ops::add(&x1, &ffn_out)?, weights))
}

/// Source-target context wiring inside a decoder block: either a single
/// attention over one memory, or two attentions over separate memories whose
/// contexts are concatenated (2·d_model wide) and projected back to d_model.
#[derive(Clone)]
pub enum CrossAttnParams {
    Single(AttentionParams),
    Dual {
        first: AttentionParams,
        second: AttentionParams,
        proj_w: Tensor,
        proj_b: Tensor,
    },
}

impl CrossAttnParams {
    pub fn memories(&self) -> usize {
        match self {
            CrossAttnParams::Single(_) => 1,
            CrossAttnParams::Dual { .. } => 2,
        }
    }
}

#[derive(Clone)]
pub struct DecoderBlockParams {
    pub ln1: NormParams,
    pub self_attn: AttentionParams,
    pub ln2: NormParams,
    pub cross: CrossAttnParams,
    pub ln3: NormParams,
    pub ffn: FfnParams,
}

impl DecoderBlockParams {
    pub fn build(
        pb: &mut ParamBuilder<'_>,
        prefix: &str,
        cfg: &LayerConfig,
        dual_memory: bool,
    ) -> XmResult<Self> {
        let ln1 = NormParams::build(pb, &format!("{prefix}.ln1"), cfg.d_model)?;
        let self_attn = AttentionParams::build(pb, &format!("{prefix}.self_attn"), cfg.d_model)?;
        let ln2 = NormParams::build(pb, &format!("{prefix}.ln2"), cfg.d_model)?;
        let cross = if dual_memory {
            CrossAttnParams::Dual {
                first: AttentionParams::build(pb, &format!("{prefix}.src_speech"), cfg.d_model)?,
                second: AttentionParams::build(pb, &format!("{prefix}.src_text"), cfg.d_model)?,
                proj_w: pb.linear_weight(
                    &format!("{prefix}.ctx_proj.w"),
                    2 * cfg.d_model,
                    cfg.d_model,
                )?,
                proj_b: pb.zeros(&format!("{prefix}.ctx_proj.b"), vec![cfg.d_model])?,
            }
        } else {
            CrossAttnParams::Single(AttentionParams::build(
                pb,
                &format!("{prefix}.src_attn"),
                cfg.d_model,
            )?)
        };
        Ok(DecoderBlockParams {
            ln1,
            self_attn,
            ln2,
            cross,
            ln3: NormParams::build(pb, &format!("{prefix}.ln3"), cfg.d_model)?,
            ffn: FfnParams::build(pb, &format!("{prefix}.ffn"), cfg.d_model, cfg.ffn_dim)?,
        })
    }
}

/// Pre-norm decoder block: masked self-attention, source-target attention
/// over the given memories, position-wise FFN, each on a residual path.
/// Returns the block output and the source-target weights per memory.
pub fn decoder_block(
    target: &Tensor,
    memories: &[(&Tensor, &AttentionMask)],
    causal_mask: &AttentionMask,
    params: &DecoderBlockParams,
    num_heads: usize,
    ctx: &mut ForwardCtx<'_>,
) -> XmResult<(Tensor, Vec<Tensor>)> {
    if memories.len() != params.cross.memories() {
        return Err(XmError::InvalidArgument(format!(
            "decoder block wired for {} memories, got {}",
            params.cross.memories(),
            memories.len()
        )));
    }
    let normed = params.ln1.forward(target)?;
    let (self_out, _) = multi_head_attention(
        &normed,
        &normed,
        &normed,
        causal_mask,
        &params.self_attn,
        num_heads,
        ctx,
    )?;
    let x1 = ops::add(target, &self_out)?;

    let q = params.ln2.forward(&x1)?;
    let mut src_weights = Vec::new();
    let cross_out = match &params.cross {
        CrossAttnParams::Single(attn) => {
            let (mem, mem_mask) = memories[0];
            let (out, w) = multi_head_attention(&q, mem, mem, mem_mask, attn, num_heads, ctx)?;
            src_weights.push(w);
            out
        }
        CrossAttnParams::Dual { first, second, proj_w, proj_b } => {
            let (mem_a, mask_a) = memories[0];
            let (mem_b, mask_b) = memories[1];
            let (ua, wa) = multi_head_attention(&q, mem_a, mem_a, mask_a, first, num_heads, ctx)?;
            let (ub, wb) = multi_head_attention(&q, mem_b, mem_b, mask_b, second, num_heads, ctx)?;
            src_weights.push(wa);
            src_weights.push(wb);
            let cat = ops::concat(&[&ua, &ub], 1)?;
            linear(&cat, proj_w, proj_b)?
        }
    };
    let x2 = ops::add(&x1, &cross_out)?;
    let ffn_out = params.ffn.forward(&params.ln3.forward(&x2)?, ctx)?;
    Ok((ops::add(&x2, &ffn_out)?, src_weights))
}

// ── modality embeddings ─────────────────────────────────────────────

#[derive(Clone)]
pub struct SpeechEmbeddingParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub channels: usize,
    pub feature_dim: usize,
    pub d_model: usize,
}

/// Time length after the two stride-2 stages.
pub fn conv_output_len(input_len: usize) -> usize {
    input_len.div_ceil(2).div_ceil(2)
}

impl SpeechEmbeddingParams {
    pub fn build(
        pb: &mut ParamBuilder<'_>,
        prefix: &str,
        feature_dim: usize,
        d_model: usize,
    ) -> XmResult<Self> {
        let channels = (d_model / 4).max(1);
        let reduced = conv_output_len(feature_dim);
        Ok(SpeechEmbeddingParams {
            conv1_w: pb.conv_weight(&format!("{prefix}.conv1.w"), channels, 1)?,
            conv1_b: pb.zeros(&format!("{prefix}.conv1.b"), vec![channels])?,
            conv2_w: pb.conv_weight(&format!("{prefix}.conv2.w"), channels, channels)?,
            conv2_b: pb.zeros(&format!("{prefix}.conv2.b"), vec![channels])?,
            proj_w: pb.linear_weight(&format!("{prefix}.proj.w"), channels * reduced, d_model)?,
            proj_b: pb.zeros(&format!("{prefix}.proj.b"), vec![d_model])?,
            channels,
            feature_dim,
            d_model,
        })
    }
}

/// Acoustic front end: two 3×3 stride-2 convolutions with ReLU, flattened per
/// time step, projected to d_model, with positional encoding added.
/// Input (I × feature_dim) becomes (⌈⌈I/2⌉/2⌉ × d_model).
pub fn speech_embedding(frames: &Tensor, params: &SpeechEmbeddingParams) -> XmResult<Tensor> {
    let shape = frames.shape();
    if shape.len() != 2 || shape[1] != params.feature_dim {
        return Err(XmError::ShapeMismatch {
            primitive: "speech-embedding",
            lhs: shape.to_vec(),
            rhs: vec![0, params.feature_dim],
        });
    }
    let frames_in = shape[0];
    if frames_in < 4 {
        return Err(XmError::InvalidArgument(format!(
            "speech embedding needs at least 4 frames (two stride-2 stages), got {frames_in}"
        )));
    }
    let as_image = ops::reshape(frames, &[1, frames_in, params.feature_dim])?;
    let c1 = ops::relu(&ops::conv2d(&as_image, &params.conv1_w, &params.conv1_b)?);
    let c2 = ops::relu(&ops::conv2d(&c1, &params.conv2_w, &params.conv2_b)?);
    let out_len = conv_output_len(frames_in);
    let reduced = conv_output_len(params.feature_dim);
    // (C, I', F') -> (I', C, F') -> (I', C·F')
    let by_time = ops::permute(&c2, &[1, 0, 2])?;
    let flat = ops::reshape(&by_time, &[out_len, params.channels * reduced])?;
    let projected = linear(&flat, &params.proj_w, &params.proj_b)?;
    let pe = positional_encoding(out_len, params.d_model)?;
    ops::add(&projected, &pe)
}

/// Token embedding: table lookup scaled by √d_model plus positional encoding
/// with positions starting at 0 for the segment. An empty sequence yields a
/// (0 × d_model) tensor.
pub fn text_embedding(tokens: &[u32], table: &Tensor, d_model: usize) -> XmResult<Tensor> {
    if tokens.is_empty() {
        return Ok(Tensor::from_vec(vec![0, d_model], Vec::new()));
    }
    let looked = ops::embedding_lookup(table, tokens)?;
    let scaled = ops::scale(&looked, (d_model as f64).sqrt());
    let pe = positional_encoding(tokens.len(), d_model)?;
    ops::add(&scaled, &pe)
}
