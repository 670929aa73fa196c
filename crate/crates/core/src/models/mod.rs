//! The three end-to-end networks: a first-pass recognizer over acoustic
//! frames, a corrector that jointly encodes speech and the first-pass
//! hypothesis in one self-attention stack, and a corrector with separate
//! per-modality encoders combined inside the decoder. All three share one
//! decoder design and expose teacher-forced scoring plus incremental
//! single-step decoding.

mod incremental;

pub use incremental::DecoderState;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{XmError, XmResult};
use crate::layers::{
    decoder_block, encoder_block, linear, speech_embedding, text_embedding,
    AttentionMask, DecoderBlockParams, EncoderBlockParams, ForwardCtx, LayerConfig, NormParams,
    SpeechEmbeddingParams,
};
use crate::numerics::ops;
use crate::numerics::{ParamBuilder, ParamInit, ParamSnapshot, ParameterRegistry, Tensor};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "[sep]"];

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

/// Bijective token-string <-> contiguous-id mapping with fixed reserved ids
/// pad=0, bos=1, eos=2, sep=3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < RESERVED_TOKENS.len() {
            return Err("vocabulary must include the four reserved tokens".into());
        }
        for (i, expect) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *expect {
                return Err(format!(
                    "reserved token {i} must be '{expect}', found '{}'",
                    tokens[i]
                ));
            }
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(format!("duplicate token '{t}'"));
            }
        }
        Ok(Vocabulary { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Vec<String> {
        v.tokens
    }
}

impl Vocabulary {
    /// Reserved tokens plus `content_tokens` generated content symbols
    /// ("a", "b", ..., "z", "aa", "ab", ...).
    pub fn synthetic(content_tokens: usize) -> Vocabulary {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        for i in 0..content_tokens {
            tokens.push(content_symbol(i));
        }
        Vocabulary::try_from(tokens).expect("generated vocabulary is valid")
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn content_size(&self) -> usize {
        self.tokens.len() - RESERVED_TOKENS.len()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Ids of the content tokens (everything after the reserved block).
    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> {
        (RESERVED_TOKENS.len() as TokenId)..(self.tokens.len() as TokenId)
    }

    pub fn contains_id(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len()
    }

    /// Render a token-id sequence as a readable string.
    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join("")
    }
}

fn content_symbol(mut i: usize) -> String {
    let mut s = String::new();
    loop {
        s.insert(0, (b'a' + (i % 26) as u8) as char);
        i /= 26;
        if i == 0 {
            break;
        }
        i -= 1;
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Asr,
    CrossModal,
    Separate,
}

impl Architecture {
    pub fn is_corrector(self) -> bool {
        !matches!(self, Architecture::Asr)
    }

    pub fn label(self) -> &'static str {
        match self {
            Architecture::Asr => "asr",
            Architecture::CrossModal => "cross_modal",
            Architecture::Separate => "separate",
        }
    }
}

/// Full architectural description: layer geometry, stack depths, vocabulary,
/// and input limits. Everything needed to rebuild a network from a flat
/// parameter payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub layer: LayerConfig,
    /// Encoder blocks (M): the joint encoder for the cross-modal corrector,
    /// the text encoder for the separate corrector, the speech encoder for
    /// the recognizer.
    pub encoder_blocks: usize,
    /// Decoder blocks (N).
    pub decoder_blocks: usize,
    /// Speech-encoder blocks (L), used by the separate corrector only.
    pub speech_encoder_blocks: usize,
    pub vocab: Vocabulary,
    pub feature_dim: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
}

impl ModelConfig {
    /// Small preset that trains in minutes on a CPU.
    pub fn toy(arch: Architecture, vocab: Vocabulary, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            arch,
            layer: LayerConfig { d_model: 64, num_heads: 4, ffn_dim: 256, dropout_p: 0.1 },
            encoder_blocks: 2,
            decoder_blocks: 2,
            speech_encoder_blocks: 2,
            vocab,
            feature_dim,
            max_source_len: 512,
            max_target_len: 64,
        }
    }

    /// Full-scale preset (256/2048/4 heads, six blocks per stack); retained
    /// for fidelity, far too slow for the test suite.
    pub fn full_scale(arch: Architecture, vocab: Vocabulary, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            arch,
            layer: LayerConfig { d_model: 256, num_heads: 4, ffn_dim: 2048, dropout_p: 0.1 },
            encoder_blocks: 6,
            decoder_blocks: 6,
            speech_encoder_blocks: 6,
            vocab,
            feature_dim,
            max_source_len: 2048,
            max_target_len: 256,
        }
    }

    pub fn validate(&self) -> XmResult<()> {
        self.layer.validate()?;
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return Err(XmError::Config("block counts must be positive".into()));
        }
        if self.arch == Architecture::Separate && self.speech_encoder_blocks == 0 {
            return Err(XmError::Config(
                "separate architecture needs speech_encoder_blocks >= 1".into(),
            ));
        }
        if self.vocab.size() <= RESERVED_TOKENS.len() {
            return Err(XmError::Config("vocabulary has no content tokens".into()));
        }
        if self.feature_dim < 2 {
            return Err(XmError::Config("feature_dim must be at least 2".into()));
        }
        Ok(())
    }
}

/// Encoded source representation handed to the decoder: one memory for the
/// recognizer and the cross-modal corrector, two (speech, text) for the
/// separate corrector. Tracks per-key validity and, for the cross-modal
/// joint sequence, the segment boundaries.
pub struct EncodedMemory {
    pub memories: Vec<Tensor>,
    pub valid: Vec<Vec<bool>>,
    pub boundaries: Option<SegmentBoundaries>,
    /// Per encoder block: self-attention weights (heads × len × len).
    pub self_weights: Vec<Tensor>,
}

/// Index layout of the joint sequence {speech, sep, text}.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SegmentBoundaries {
    pub speech_len: usize,
    pub sep_index: usize,
    pub text_len: usize,
}

pub(crate) struct EncoderStack {
    blocks: Vec<EncoderBlockParams>,
    final_ln: NormParams,
}

impl EncoderStack {
    fn build(
        pb: &mut ParamBuilder<'_>,
        prefix: &str,
        cfg: &LayerConfig,
        n_blocks: usize,
    ) -> XmResult<Self> {
        let blocks = (0..n_blocks)
            .map(|i| EncoderBlockParams::build(pb, &format!("{prefix}.block{i}"), cfg))
            .collect::<XmResult<Vec<_>>>()?;
        Ok(EncoderStack {
            blocks,
            final_ln: NormParams::build(pb, &format!("{prefix}.final_ln"), cfg.d_model)?,
        })
    }

    fn forward(
        &self,
        input: &Tensor,
        mask: &AttentionMask,
        num_heads: usize,
        ctx: &mut ForwardCtx<'_>,
    ) -> XmResult<(Tensor, Vec<Tensor>)> {
        let mut x = input.clone();
        let mut weights = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, w) = encoder_block(&x, mask, block, num_heads, ctx)?;
            x = next;
            weights.push(w);
        }
        Ok((self.final_ln.forward(&x)?, weights))
    }
}

pub(crate) struct DecoderStack {
    pub(crate) token_emb: Tensor,
    pub(crate) blocks: Vec<DecoderBlockParams>,
    pub(crate) final_ln: NormParams,
    pub(crate) out_w: Tensor,
    pub(crate) out_b: Tensor,
}

impl DecoderStack {
    fn build(
        pb: &mut ParamBuilder<'_>,
        prefix: &str,
        cfg: &LayerConfig,
        n_blocks: usize,
        vocab_size: usize,
        dual_memory: bool,
    ) -> XmResult<Self> {
        let token_emb = pb.embedding(&format!("{prefix}.token_emb"), vocab_size, cfg.d_model)?;
        let blocks = (0..n_blocks)
            .map(|i| DecoderBlockParams::build(pb, &format!("{prefix}.block{i}"), cfg, dual_memory))
            .collect::<XmResult<Vec<_>>>()?;
        let final_ln = NormParams::build(pb, &format!("{prefix}.final_ln"), cfg.d_model)?;
        // half-scale output head: keeps the initial distribution near uniform
        // without throttling early gradient flow into the stacks
        let out_w =
            pb.linear_weight_scaled(&format!("{prefix}.out.w"), cfg.d_model, vocab_size, 0.5)?;
        let out_b = pb.zeros(&format!("{prefix}.out.b"), vec![vocab_size])?;
        Ok(DecoderStack { token_emb, blocks, final_ln, out_w, out_b })
    }
}

/// One network instance: configuration, parameter registry, and the wiring
/// for whichever architecture the config names.
pub struct Network {
    pub config: ModelConfig,
    pub registry: ParameterRegistry,
    pub(crate) speech: SpeechEmbeddingParams,
    pub(crate) hyp_emb: Option<Tensor>,
    pub(crate) encoder: EncoderStack,
    pub(crate) speech_encoder: Option<EncoderStack>,
    pub(crate) decoder: DecoderStack,
    pub(crate) instance_id: u64,
}

impl Network {
    pub fn new(config: ModelConfig, source: ParamInit<'_>) -> XmResult<Network> {
        config.validate()?;
        let mut registry = ParameterRegistry::new();
        let mut pb = ParamBuilder::new(&mut registry, source);
        let lc = &config.layer;
        let speech = SpeechEmbeddingParams::build(&mut pb, "speech_emb", config.feature_dim, lc.d_model)?;
        let hyp_emb = if config.arch.is_corrector() {
            Some(pb.embedding("hyp_emb", config.vocab.size(), lc.d_model)?)
        } else {
            None
        };
        let encoder = EncoderStack::build(&mut pb, "encoder", lc, config.encoder_blocks)?;
        let speech_encoder = if config.arch == Architecture::Separate {
            Some(EncoderStack::build(&mut pb, "speech_encoder", lc, config.speech_encoder_blocks)?)
        } else {
            None
        };
        let decoder = DecoderStack::build(
            &mut pb,
            "decoder",
            lc,
            config.decoder_blocks,
            config.vocab.size(),
            config.arch == Architecture::Separate,
        )?;
        Ok(Network {
            config,
            registry,
            speech,
            hyp_emb,
            encoder,
            speech_encoder,
            decoder,
            instance_id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
        })
    }

    /// Rebuild a network from a flat snapshot (worker copies, checkpoints).
    pub fn from_snapshot(config: ModelConfig, snapshot: &ParamSnapshot) -> XmResult<Network> {
        let map = snapshot.as_map();
        Network::new(config, ParamInit::Stored(&map))
    }

    pub fn param_count(&self) -> usize {
        self.registry.total_params()
    }

    pub fn instance_id(&self) -> u64 {
        self.instance_id
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab.size()
    }

    fn check_hyp(&self, hyp: &[TokenId]) -> XmResult<()> {
        for &id in hyp {
            if !self.config.vocab.contains_id(id) {
                return Err(XmError::VocabOutOfRange { id, vocab_size: self.vocab_size() });
            }
        }
        if hyp.len() > self.config.max_target_len {
            return Err(XmError::InvalidArgument(format!(
                "hypothesis length {} exceeds max_target_len {}",
                hyp.len(),
                self.config.max_target_len
            )));
        }
        Ok(())
    }

    fn check_frames(&self, frames: &Tensor) -> XmResult<()> {
        if frames.shape().len() != 2 || frames.shape()[1] != self.config.feature_dim {
            return Err(XmError::InvalidArgument(format!(
                "frames shape {:?} does not match feature_dim {}",
                frames.shape(),
                self.config.feature_dim
            )));
        }
        if frames.shape()[0] > self.config.max_source_len {
            return Err(XmError::InvalidArgument(format!(
                "source length {} exceeds max_source_len {}",
                frames.shape()[0],
                self.config.max_source_len
            )));
        }
        Ok(())
    }

    /// Scaled [sep] embedding row, without positional encoding: a boundary
    /// marker between the two independently position-encoded segments.
    fn sep_row(&self) -> XmResult<Tensor> {
        let table = self.hyp_emb.as_ref().expect("corrector has a hypothesis table");
        let row = ops::embedding_lookup(table, &[SEP_ID])?;
        Ok(ops::scale(&row, (self.config.layer.d_model as f64).sqrt()))
    }

    /// Encode the source side. The recognizer ignores `hyp`; the correctors
    /// condition on it. Works under both training and inference contexts.
    pub fn encode(
        &self,
        frames: &Tensor,
        hyp: &[TokenId],
        ctx: &mut ForwardCtx<'_>,
    ) -> XmResult<EncodedMemory> {
        self.check_frames(frames)?;
        let heads = self.config.layer.num_heads;
        let s = speech_embedding(frames, &self.speech)?;
        let speech_len = s.shape()[0];
        match self.config.arch {
            Architecture::Asr => {
                let mask = AttentionMask::full(speech_len, speech_len);
                let (mem, weights) = self.encoder.forward(&s, &mask, heads, ctx)?;
                Ok(EncodedMemory {
                    memories: vec![mem],
                    valid: vec![vec![true; speech_len]],
                    boundaries: None,
                    self_weights: weights,
                })
            }
            Architecture::CrossModal => {
                self.check_hyp(hyp)?;
                let table = self.hyp_emb.as_ref().unwrap();
                let text = text_embedding(hyp, table, self.config.layer.d_model)?;
                let sep = self.sep_row()?;
                let joint = ops::concat(&[&s, &sep, &text], 0)?;
                let total = speech_len + 1 + hyp.len();
                let mask = AttentionMask::full(total, total);
                let (mem, weights) = self.encoder.forward(&joint, &mask, heads, ctx)?;
                Ok(EncodedMemory {
                    memories: vec![mem],
                    valid: vec![vec![true; total]],
                    boundaries: Some(SegmentBoundaries {
                        speech_len,
                        sep_index: speech_len,
                        text_len: hyp.len(),
                    }),
                    self_weights: weights,
                })
            }
            Architecture::Separate => {
                self.check_hyp(hyp)?;
                let table = self.hyp_emb.as_ref().unwrap();
                // an empty hypothesis still needs one attendable key: fall
                // back to the [sep] marker as the sole text position
                let effective: Vec<TokenId> =
                    if hyp.is_empty() { vec![SEP_ID] } else { hyp.to_vec() };
                let text = text_embedding(&effective, table, self.config.layer.d_model)?;
                let text_len = effective.len();
                let speech_stack = self.speech_encoder.as_ref().unwrap();
                let (f_mem, f_w) =
                    speech_stack.forward(&s, &AttentionMask::full(speech_len, speech_len), heads, ctx)?;
                let (g_mem, _) =
                    self.encoder.forward(&text, &AttentionMask::full(text_len, text_len), heads, ctx)?;
                Ok(EncodedMemory {
                    memories: vec![f_mem, g_mem],
                    valid: vec![vec![true; speech_len], vec![true; text_len]],
                    boundaries: None,
                    self_weights: f_w,
                })
            }
        }
    }

    /// Teacher-forced decode over `[bos] + targets`, scoring `targets + [eos]`.
    /// Row `t` holds log P(token_t | prefix, source); each row's exponentials
    /// sum to 1.
    pub fn forward_teacher(
        &self,
        memory: &EncodedMemory,
        targets: &[TokenId],
        ctx: &mut ForwardCtx<'_>,
    ) -> XmResult<Tensor> {
        for &id in targets {
            if !self.config.vocab.contains_id(id) {
                return Err(XmError::VocabOutOfRange { id, vocab_size: self.vocab_size() });
            }
        }
        if targets.len() > self.config.max_target_len {
            return Err(XmError::InvalidArgument(format!(
                "target length {} exceeds max_target_len {}",
                targets.len(),
                self.config.max_target_len
            )));
        }
        let mut input = Vec::with_capacity(targets.len() + 1);
        input.push(BOS_ID);
        input.extend_from_slice(targets);
        let len = input.len();

        let emb = text_embedding(&input, &self.decoder.token_emb, self.config.layer.d_model)?;
        let causal = AttentionMask::causal(len);
        let mem_masks: Vec<AttentionMask> = memory
            .memories
            .iter()
            .zip(&memory.valid)
            .map(|(m, valid)| AttentionMask::full(len, m.shape()[0]).with_padding(valid))
            .collect();
        let mems: Vec<(&Tensor, &AttentionMask)> =
            memory.memories.iter().zip(mem_masks.iter()).collect();

        let heads = self.config.layer.num_heads;
        let mut x = emb;
        for block in &self.decoder.blocks {
            let (next, _) = decoder_block(&x, &mems, &causal, block, heads, ctx)?;
            x = next;
        }
        let normed = self.decoder.final_ln.forward(&x)?;
        let logits = linear(&normed, &self.decoder.out_w, &self.decoder.out_b)?;
        Ok(ops::log(&ops::softmax(&logits)?))
    }

    /// Recognizer scoring: log-probabilities of `reference + [eos]` given frames.
    pub fn asr_forward(
        &self,
        frames: &Tensor,
        reference: &[TokenId],
        ctx: &mut ForwardCtx<'_>,
    ) -> XmResult<Tensor> {
        let memory = self.encode(frames, &[], ctx)?;
        self.forward_teacher(&memory, reference, ctx)
    }

    /// Corrector scoring: log-probabilities of `reference + [eos]` given
    /// frames and the first-pass hypothesis.
    pub fn corrector_forward(
        &self,
        frames: &Tensor,
        hyp: &[TokenId],
        reference: &[TokenId],
        ctx: &mut ForwardCtx<'_>,
    ) -> XmResult<Tensor> {
        if !self.config.arch.is_corrector() {
            return Err(XmError::InvalidArgument(
                "corrector_forward on a recognizer network".into(),
            ));
        }
        let memory = self.encode(frames, hyp, ctx)?;
        self.forward_teacher(&memory, reference, ctx)
    }
}

/// Single row of the sinusoidal position table (identical arithmetic to
/// [`positional_encoding`], computed without materializing the table).
pub(crate) fn positional_row(pos: usize, d_model: usize) -> Vec<f64> {
    let mut row = vec![0.0; d_model];
    for i in 0..d_model / 2 {
        let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d_model as f64);
        row[2 * i] = angle.sin();
        row[2 * i + 1] = angle.cos();
    }
    row
}
