//! Greedy and beam search over a single network, and fused beam search that
//! advances the recognizer and a corrector in lockstep, combining their
//! per-token log-probabilities log-linearly.

use serde::{Deserialize, Serialize};

use crate::error::{XmError, XmResult};
use crate::layers::ForwardCtx;
use crate::models::{DecoderState, EncodedMemory, Network, TokenId, BOS_ID, EOS_ID};
use crate::numerics::tensor::{no_grad, Tensor};

/// Decode-time settings: corrector weight, beam width, and the length cap
/// max_len_factor · (source length) + max_len_offset.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub alpha: f64,
    pub beam_size: usize,
    pub max_len_factor: f64,
    pub max_len_offset: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { alpha: 0.5, beam_size: 8, max_len_factor: 2.0, max_len_offset: 4 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> XmResult<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(XmError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.beam_size == 0 {
            return Err(XmError::Config("beam_size must be positive".into()));
        }
        if self.max_len_factor <= 0.0 {
            return Err(XmError::Config("max_len_factor must be positive".into()));
        }
        Ok(())
    }

    pub fn max_len(&self, source_len: usize) -> usize {
        (self.max_len_factor * source_len as f64).floor() as usize + self.max_len_offset
    }

    pub fn with_alpha(&self, alpha: f64) -> FusionConfig {
        FusionConfig { alpha, ..self.clone() }
    }
}

/// Log-linear interpolation of the two passes' step scores:
/// (1−α)·asr + α·corr. The endpoints short-circuit so that a −∞ on the
/// unweighted side cannot poison the sum.
pub fn fused_step_score(asr_logp: f64, corr_logp: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        asr_logp
    } else if alpha == 1.0 {
        corr_logp
    } else {
        (1.0 - alpha) * asr_logp + alpha * corr_logp
    }
}

/// Anything beam search can drive: holds an encoded source and yields a
/// log-probability row per fed token.
pub trait StepScorer {
    type State: Clone;

    fn init_state(&self) -> XmResult<Self::State>;
    /// Feed `token`, return log-probabilities for the next position.
    fn advance(&self, state: &Self::State, token: TokenId) -> XmResult<(Vec<f64>, Self::State)>;
    fn vocab_size(&self) -> usize;
    /// Encoded source length, used for the decode length cap.
    fn source_len(&self) -> usize;
}

/// Scorer over one network and one encoded source.
pub struct ModelScorer<'a> {
    pub model: &'a Network,
    pub memory: EncodedMemory,
}

impl<'a> ModelScorer<'a> {
    pub fn recognizer(model: &'a Network, frames: &Tensor) -> XmResult<Self> {
        let _g = no_grad();
        let memory = model.encode(frames, &[], &mut ForwardCtx::eval())?;
        Ok(ModelScorer { model, memory })
    }

    pub fn corrector(model: &'a Network, frames: &Tensor, hyp: &[TokenId]) -> XmResult<Self> {
        let _g = no_grad();
        let memory = model.encode(frames, hyp, &mut ForwardCtx::eval())?;
        Ok(ModelScorer { model, memory })
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = DecoderState;

    fn init_state(&self) -> XmResult<DecoderState> {
        self.model.begin_decode(&self.memory)
    }

    fn advance(&self, state: &DecoderState, token: TokenId) -> XmResult<(Vec<f64>, DecoderState)> {
        self.model.decode_step(state, token)
    }

    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn source_len(&self) -> usize {
        self.memory.memories[0].shape()[0]
    }
}

/// Lockstep pair of scorers combined by [`fused_step_score`]. At the exact
/// endpoints only the weighted side is evaluated.
pub struct FusedScorer<'a> {
    pub asr: ModelScorer<'a>,
    pub corrector: ModelScorer<'a>,
    pub alpha: f64,
}

#[derive(Clone)]
pub struct FusedState {
    asr: Option<DecoderState>,
    corrector: Option<DecoderState>,
}

impl StepScorer for FusedScorer<'_> {
    type State = FusedState;

    fn init_state(&self) -> XmResult<FusedState> {
        Ok(FusedState {
            asr: if self.alpha < 1.0 { Some(self.asr.init_state()?) } else { None },
            corrector: if self.alpha > 0.0 { Some(self.corrector.init_state()?) } else { None },
        })
    }

    fn advance(&self, state: &FusedState, token: TokenId) -> XmResult<(Vec<f64>, FusedState)> {
        let mut asr_row = None;
        let mut corr_row = None;
        let mut next = state.clone();
        if let Some(s) = &state.asr {
            let (row, ns) = self.asr.advance(s, token)?;
            asr_row = Some(row);
            next.asr = Some(ns);
        }
        if let Some(s) = &state.corrector {
            let (row, ns) = self.corrector.advance(s, token)?;
            corr_row = Some(row);
            next.corrector = Some(ns);
        }
        let v = self.vocab_size();
        let row = match (asr_row, corr_row) {
            (Some(a), None) => a,
            (None, Some(c)) => c,
            (Some(a), Some(c)) => (0..v)
                .map(|i| fused_step_score(a[i], c[i], self.alpha))
                .collect(),
            (None, None) => unreachable!("fused state always tracks at least one side"),
        };
        Ok((row, next))
    }

    fn vocab_size(&self) -> usize {
        self.asr.vocab_size()
    }

    fn source_len(&self) -> usize {
        self.asr.source_len()
    }
}

/// A decoded candidate: emitted tokens (eos not included), accumulated
/// log score (eos step included when finished), and whether eos was reached.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub score: f64,
    pub finished: bool,
}

/// Argmax decoding. Ties pick the lowest token id.
pub fn greedy_decode<S: StepScorer>(scorer: &S, max_len: usize) -> XmResult<Hypothesis> {
    let mut state = scorer.init_state()?;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    let mut last = BOS_ID;
    loop {
        let (row, next) = scorer.advance(&state, last)?;
        state = next;
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        score += row[best];
        if best as TokenId == EOS_ID {
            return Ok(Hypothesis { tokens, score, finished: true });
        }
        tokens.push(best as TokenId);
        if tokens.len() >= max_len {
            return Ok(Hypothesis { tokens, score, finished: false });
        }
        last = best as TokenId;
    }
}

struct BeamEntry<S> {
    tokens: Vec<TokenId>,
    score: f64,
    state: S,
    /// Log-probability row for the next position.
    row: Vec<f64>,
}

/// Standard beam search with deterministic tie-breaking.
///
/// Every live entry is expanded over the full vocabulary; the best
/// `beam_size` candidates by accumulated score survive, with exact ties
/// ordered by lexicographic token sequence. Entries that emit eos are set
/// aside as finished. The search stops once `beam_size` entries have
/// finished or the length cap is reached; if nothing finished by then, the
/// best unfinished entry is returned with `finished == false`. Results are
/// sorted by score, descending.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    beam_size: usize,
    max_len: usize,
) -> XmResult<Vec<Hypothesis>> {
    if beam_size == 0 {
        return Err(XmError::InvalidArgument("beam_size must be positive".into()));
    }
    let v = scorer.vocab_size();
    let init = scorer.init_state()?;
    let (row, state) = scorer.advance(&init, BOS_ID)?;
    let mut live = vec![BeamEntry { tokens: Vec::new(), score: 0.0, state, row }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        if live.is_empty() || finished.len() >= beam_size {
            break;
        }
        // candidate = (entry index, token, accumulated score)
        let mut candidates: Vec<(usize, TokenId, f64)> = Vec::with_capacity(live.len() * v);
        for (idx, entry) in live.iter().enumerate() {
            for tok in 0..v {
                candidates.push((idx, tok as TokenId, entry.score + entry.row[tok]));
            }
        }
        candidates.sort_by(|a, b| {
            b.2.total_cmp(&a.2).then_with(|| {
                let seq_a = (&live[a.0].tokens, a.1);
                let seq_b = (&live[b.0].tokens, b.1);
                compare_extended(seq_a, seq_b)
            })
        });
        candidates.truncate(beam_size);

        let mut next_live = Vec::with_capacity(beam_size);
        for (idx, tok, score) in candidates {
            if tok == EOS_ID {
                finished.push(Hypothesis {
                    tokens: live[idx].tokens.clone(),
                    score,
                    finished: true,
                });
                continue;
            }
            let (row, state) = scorer.advance(&live[idx].state, tok)?;
            let mut tokens = live[idx].tokens.clone();
            tokens.push(tok);
            next_live.push(BeamEntry { tokens, score, state, row });
        }
        live = next_live;
    }

    if finished.is_empty() {
        // forced termination: surface the best unfinished candidate
        let best = live
            .into_iter()
            .max_by(|a, b| a.score.total_cmp(&b.score).then_with(|| b.tokens.cmp(&a.tokens)))
            .expect("beam search always keeps at least one entry");
        return Ok(vec![Hypothesis { tokens: best.tokens, score: best.score, finished: false }]);
    }
    finished.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
    Ok(finished)
}

/// Lexicographic comparison of `prefix + [tail]` sequences without
/// materializing them.
fn compare_extended(a: (&Vec<TokenId>, TokenId), b: (&Vec<TokenId>, TokenId)) -> std::cmp::Ordering {
    let left = a.0.iter().copied().chain(std::iter::once(a.1));
    let right = b.0.iter().copied().chain(std::iter::once(b.1));
    left.cmp(right)
}

/// Outcome of the two-pass pipeline on one utterance.
#[derive(Clone, Debug)]
pub struct TwoPassResult {
    pub first_pass: Hypothesis,
    pub fused: Hypothesis,
}

/// Stage 1: recognizer-only beam search producing the hypothesis C.
/// Stage 2: fused beam search where both decoders advance in lockstep over
/// the searched prefix, the corrector conditioned on (frames, C).
pub fn two_pass_decode(
    asr: &Network,
    corrector: &Network,
    frames: &Tensor,
    cfg: &FusionConfig,
) -> XmResult<TwoPassResult> {
    cfg.validate()?;
    let _g = no_grad();
    let asr_scorer = ModelScorer::recognizer(asr, frames)?;
    let max_len = cfg.max_len(asr_scorer.source_len());
    let first = beam_search(&asr_scorer, cfg.beam_size, max_len)?;
    let first_pass = first.into_iter().next().expect("beam search returns at least one");

    let corr_scorer = ModelScorer::corrector(corrector, frames, &first_pass.tokens)?;
    let fused_scorer = FusedScorer { asr: asr_scorer, corrector: corr_scorer, alpha: cfg.alpha };
    let fused = beam_search(&fused_scorer, cfg.beam_size, max_len)?;
    Ok(TwoPassResult {
        first_pass,
        fused: fused.into_iter().next().expect("beam search returns at least one"),
    })
}
