//! Incremental single-step decoding with cached keys and values.
//!
//! Each step feeds one token and reproduces, within 1e-9, the corresponding
//! row of the teacher-forced forward pass. The raw row kernels below mirror
//! the accumulation order of the tensor primitives so the two paths agree to
//! the last few bits.

use std::rc::Rc;

use crate::error::{XmError, XmResult};
use crate::layers::{AttentionParams, CrossAttnParams, NormParams, LAYER_NORM_EPS};
use crate::models::{positional_row, EncodedMemory, Network, TokenId};
use crate::numerics::tensor::Tensor;

/// Cached decoding position: per-block self-attention keys/values for the
/// consumed prefix plus the per-block projections of the encoder memories.
#[derive(Clone)]
pub struct DecoderState {
    pub(crate) model_id: u64,
    /// Tokens consumed so far (the bos counts as the first).
    pub prefix_len: usize,
    blocks: Vec<BlockCache>,
}

impl std::fmt::Debug for DecoderState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DecoderState")
            .field("model_id", &self.model_id)
            .field("prefix_len", &self.prefix_len)
            .finish()
    }
}

#[derive(Clone)]
struct BlockCache {
    self_k: Vec<f64>,
    self_v: Vec<f64>,
    mems: Vec<MemCache>,
}

#[derive(Clone)]
struct MemCache {
    k: Rc<Vec<f64>>,
    v: Rc<Vec<f64>>,
    valid: Rc<Vec<bool>>,
    len: usize,
}

/// y = x · W + b with the same accumulation order as the matmul primitive
/// (input index outer, output index inner, bias added afterwards).
fn row_linear(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let shape = w.shape();
    let (fan_in, fan_out) = (shape[0], shape[1]);
    debug_assert_eq!(x.len(), fan_in);
    let wd = w.data();
    let mut out = vec![0.0; fan_out];
    for (p, &xp) in x.iter().enumerate() {
        if xp == 0.0 {
            continue;
        }
        let wrow = &wd[p * fan_out..(p + 1) * fan_out];
        for (o, &wpj) in out.iter_mut().zip(wrow) {
            *o += xp * wpj;
        }
    }
    for (o, &bj) in out.iter_mut().zip(b.data().iter()) {
        *o += bj;
    }
    out
}

fn row_layer_norm(x: &[f64], norm: &NormParams) -> Vec<f64> {
    let d = x.len();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let g = norm.gain.data();
    let b = norm.bias.data();
    (0..d).map(|i| g[i] * (x[i] - mean) * inv_std + b[i]).collect()
}

fn softmax_row(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Single-query multi-head attention against cached, already-projected keys
/// and values, with an optional per-key validity mask.
fn attend_cached(
    query_row: &[f64],
    params: &AttentionParams,
    keys: &[f64],
    values: &[f64],
    key_len: usize,
    valid: Option<&[bool]>,
    num_heads: usize,
) -> XmResult<Vec<f64>> {
    let d_model = query_row.len();
    let d_head = d_model / num_heads;
    let scaling = (d_head as f64).powf(-0.5);
    if valid.map(|v| !v.iter().any(|&b| b)).unwrap_or(key_len == 0) {
        return Err(XmError::EmptyMaskRow { row: 0 });
    }
    let q = row_linear(query_row, &params.wq, &params.bq);
    let mut merged = vec![0.0; d_model];
    for h in 0..num_heads {
        let qh = &q[h * d_head..(h + 1) * d_head];
        let mut scores = vec![0.0; key_len];
        for (j, s) in scores.iter_mut().enumerate() {
            if valid.map(|v| !v[j]).unwrap_or(false) {
                *s = f64::NEG_INFINITY;
                continue;
            }
            let krow = &keys[j * d_model + h * d_head..j * d_model + (h + 1) * d_head];
            let mut acc = 0.0;
            for (a, b) in qh.iter().zip(krow) {
                acc += a * b;
            }
            *s = acc * scaling;
        }
        softmax_row(&mut scores);
        let ctx = &mut merged[h * d_head..(h + 1) * d_head];
        for (j, &w) in scores.iter().enumerate() {
            let vrow = &values[j * d_model + h * d_head..j * d_model + (h + 1) * d_head];
            for (c, &v) in ctx.iter_mut().zip(vrow) {
                *c += w * v;
            }
        }
    }
    Ok(row_linear(&merged, &params.wo, &params.bo))
}

impl Network {
    /// Prepare an incremental decoding state for one encoded source: projects
    /// every memory through each block's source-target key/value maps once.
    pub fn begin_decode(&self, memory: &EncodedMemory) -> XmResult<DecoderState> {
        let d = self.config.layer.d_model;
        let mut blocks = Vec::with_capacity(self.decoder.blocks.len());
        for block in &self.decoder.blocks {
            let attns: Vec<&AttentionParams> = match &block.cross {
                CrossAttnParams::Single(a) => vec![a],
                CrossAttnParams::Dual { first, second, .. } => vec![first, second],
            };
            if attns.len() != memory.memories.len() {
                return Err(XmError::InvalidArgument(format!(
                    "decoder wired for {} memories, source has {}",
                    attns.len(),
                    memory.memories.len()
                )));
            }
            let mut mems = Vec::with_capacity(attns.len());
            for (attn, (mem, valid)) in attns.iter().zip(memory.memories.iter().zip(&memory.valid)) {
                let mem_len = mem.shape()[0];
                let mem_data = mem.data();
                let mut k = Vec::with_capacity(mem_len * d);
                let mut v = Vec::with_capacity(mem_len * d);
                for row in 0..mem_len {
                    let x = &mem_data[row * d..(row + 1) * d];
                    k.extend(row_linear(x, &attn.wk, &attn.bk));
                    v.extend(row_linear(x, &attn.wv, &attn.bv));
                }
                mems.push(MemCache {
                    k: Rc::new(k),
                    v: Rc::new(v),
                    valid: Rc::new(valid.clone()),
                    len: mem_len,
                });
            }
            blocks.push(BlockCache { self_k: Vec::new(), self_v: Vec::new(), mems });
        }
        Ok(DecoderState { model_id: self.instance_id, prefix_len: 0, blocks })
    }

    /// Feed one token and return the log-probability row for the next
    /// position together with the advanced state. The first call feeds bos.
    pub fn decode_step(
        &self,
        state: &DecoderState,
        token: TokenId,
    ) -> XmResult<(Vec<f64>, DecoderState)> {
        if state.model_id != self.instance_id {
            return Err(XmError::StateMismatch);
        }
        if !self.config.vocab.contains_id(token) {
            return Err(XmError::VocabOutOfRange { id: token, vocab_size: self.vocab_size() });
        }
        let d = self.config.layer.d_model;
        let heads = self.config.layer.num_heads;
        let pos = state.prefix_len;
        let mut next = state.clone();
        next.prefix_len += 1;

        // token embedding row: scaled table row plus position
        let table = self.decoder.token_emb.data();
        let row = &table[token as usize * d..(token as usize + 1) * d];
        let scale = (d as f64).sqrt();
        let pe = positional_row(pos, d);
        let mut x: Vec<f64> = row.iter().zip(&pe).map(|(e, p)| e * scale + p).collect();
        drop(table);

        for (block, cache) in self.decoder.blocks.iter().zip(next.blocks.iter_mut()) {
            // masked self-attention over the cached prefix plus this position
            let normed = row_layer_norm(&x, &block.ln1);
            cache.self_k.extend(row_linear(&normed, &block.self_attn.wk, &block.self_attn.bk));
            cache.self_v.extend(row_linear(&normed, &block.self_attn.wv, &block.self_attn.bv));
            let self_out = attend_cached(
                &normed,
                &block.self_attn,
                &cache.self_k,
                &cache.self_v,
                pos + 1,
                None,
                heads,
            )?;
            let x1: Vec<f64> = x.iter().zip(&self_out).map(|(a, b)| a + b).collect();

            // source-target attention over the cached memory projections
            let q = row_layer_norm(&x1, &block.ln2);
            let cross_out = match &block.cross {
                CrossAttnParams::Single(attn) => {
                    let m = &cache.mems[0];
                    attend_cached(&q, attn, &m.k, &m.v, m.len, Some(&m.valid), heads)?
                }
                CrossAttnParams::Dual { first, second, proj_w, proj_b } => {
                    let ma = &cache.mems[0];
                    let mb = &cache.mems[1];
                    let ua = attend_cached(&q, first, &ma.k, &ma.v, ma.len, Some(&ma.valid), heads)?;
                    let ub = attend_cached(&q, second, &mb.k, &mb.v, mb.len, Some(&mb.valid), heads)?;
                    let mut cat = ua;
                    cat.extend(ub);
                    row_linear(&cat, proj_w, proj_b)
                }
            };
            let x2: Vec<f64> = x1.iter().zip(&cross_out).map(|(a, b)| a + b).collect();

            let h = row_layer_norm(&x2, &block.ln3);
            let mut hidden = row_linear(&h, &block.ffn.w1, &block.ffn.b1);
            for v in hidden.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let ffn_out = row_linear(&hidden, &block.ffn.w2, &block.ffn.b2);
            x = x2.iter().zip(&ffn_out).map(|(a, b)| a + b).collect();
        }

        let normed = row_layer_norm(&x, &self.decoder.final_ln);
        let mut logits = row_linear(&normed, &self.decoder.out_w, &self.decoder.out_b);
        softmax_row(&mut logits);
        for v in logits.iter_mut() {
            *v = v.ln();
        }
        Ok((logits, next))
    }
}
