//! Error-rate scoring and analysis: Levenshtein alignment with a fixed edit
//! decomposition, whole-system evaluation (baseline, corrector-only, fused),
//! the corrector-weight sweep, and self-attention weight export.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoding::{beam_search, two_pass_decode, FusedScorer, FusionConfig, ModelScorer, StepScorer};
use crate::error::{XmError, XmResult};
use crate::models::{Architecture, Network, SegmentBoundaries, TokenId};
use crate::numerics::tensor::no_grad;
use crate::synthdata::{Corpus, CorrectionTriple};
use crate::util::parallel_map;

// ── edit distance ───────────────────────────────────────────────────

/// Substitution / insertion / deletion counts against a reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn cer(&self) -> f64 {
        if self.ref_len == 0 {
            0.0
        } else {
            self.distance() as f64 / self.ref_len as f64
        }
    }

    pub fn add(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_len += other.ref_len;
    }
}

/// Minimal edit distance by dynamic programming, uniform cost 1 per edit.
/// The count decomposition breaks ties by preferring substitution over
/// insertion over deletion, so (S, I, D) are reproducible; the total
/// distance is unaffected by the tie-break.
pub fn cer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let n = reference.len();
    let m = hypothesis.len();
    let mut d = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        d[idx(i, 0)] = i;
    }
    for j in 0..=m {
        d[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[idx(i, j)] = (d[idx(i - 1, j - 1)] + sub_cost)
                .min(d[idx(i, j - 1)] + 1)
                .min(d[idx(i - 1, j)] + 1);
        }
    }

    let mut counts = EditCounts { ref_len: n, ..Default::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[idx(i, j)];
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && here == d[idx(i - 1, j - 1)] {
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && here == d[idx(i - 1, j - 1)] + 1 {
            counts.substitutions += 1;
            i -= 1;
            j -= 1;
        } else if j > 0 && here == d[idx(i, j - 1)] + 1 {
            counts.insertions += 1;
            j -= 1;
        } else {
            counts.deletions += 1;
            i -= 1;
        }
    }
    counts
}

// ── system evaluation ───────────────────────────────────────────────

/// Reference operating point of the full-scale preset on a real ~570-hour
/// speech task (first-pass recognizer vs. cross-modal corrector fused at the
/// best weight). Recorded for orientation only: the toy-scale synthetic task
/// cannot reproduce these numbers and no test asserts them.
pub const FULL_SCALE_REFERENCE_BASELINE_CER: f64 = 0.105;
pub const FULL_SCALE_REFERENCE_FUSED_CER: f64 = 0.100;

/// The five comparable systems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    /// First-pass recognizer beam search.
    Baseline,
    /// Separate-encoder corrector alone (fusion weight 1).
    Separate,
    /// Separate-encoder corrector fused with the recognizer.
    SeparateSf,
    /// Cross-modal corrector alone (fusion weight 1).
    CrossModal,
    /// Cross-modal corrector fused with the recognizer.
    CrossModalSf,
}

impl SystemKind {
    pub fn label(self) -> &'static str {
        match self {
            SystemKind::Baseline => "baseline",
            SystemKind::Separate => "separate",
            SystemKind::SeparateSf => "separate+sf",
            SystemKind::CrossModal => "cross_modal",
            SystemKind::CrossModalSf => "cross_modal+sf",
        }
    }

    pub fn needs_corrector(self) -> Option<Architecture> {
        match self {
            SystemKind::Baseline => None,
            SystemKind::Separate | SystemKind::SeparateSf => Some(Architecture::Separate),
            SystemKind::CrossModal | SystemKind::CrossModalSf => Some(Architecture::CrossModal),
        }
    }

    /// Fusion weight: corrector-only systems pin alpha to 1.
    pub fn effective_alpha(self, configured: f64) -> f64 {
        match self {
            SystemKind::Baseline => 0.0,
            SystemKind::Separate | SystemKind::CrossModal => 1.0,
            SystemKind::SeparateSf | SystemKind::CrossModalSf => configured,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

/// Corpus-level error report: aggregate CER is total edits over total
/// reference length; the per-utterance mean is reported but non-normative.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CerReport {
    pub system: String,
    pub cer: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
    pub mean_utterance_cer: f64,
    pub skipped_empty_references: usize,
    pub utterances: Vec<UtteranceScore>,
}

impl CerReport {
    pub fn from_scores(system: &str, scores: Vec<UtteranceScore>, skipped: usize) -> CerReport {
        let mut totals = EditCounts::default();
        let mut mean = 0.0;
        for s in &scores {
            let c = EditCounts {
                substitutions: s.substitutions,
                insertions: s.insertions,
                deletions: s.deletions,
                ref_len: s.ref_len,
            };
            totals.add(&c);
            mean += c.cer();
        }
        if !scores.is_empty() {
            mean /= scores.len() as f64;
        }
        CerReport {
            system: system.to_string(),
            cer: totals.cer(),
            substitutions: totals.substitutions,
            insertions: totals.insertions,
            deletions: totals.deletions,
            ref_len: totals.ref_len,
            mean_utterance_cer: mean,
            skipped_empty_references: skipped,
            utterances: scores,
        }
    }

    /// The aggregate must equal a recomputation from the per-utterance counts.
    pub fn verify_aggregate(&self) -> bool {
        let mut totals = EditCounts::default();
        for s in &self.utterances {
            totals.add(&EditCounts {
                substitutions: s.substitutions,
                insertions: s.insertions,
                deletions: s.deletions,
                ref_len: s.ref_len,
            });
        }
        totals.substitutions == self.substitutions
            && totals.insertions == self.insertions
            && totals.deletions == self.deletions
            && totals.ref_len == self.ref_len
            && (totals.cer() - self.cer).abs() < 1e-12
    }
}

/// Per-utterance decode transcript for inspection and bit-exactness checks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub reference: Vec<TokenId>,
    pub first_pass: Option<Vec<TokenId>>,
    pub hypothesis: Vec<TokenId>,
    pub score: f64,
    pub finished: bool,
    pub reference_text: String,
    pub hypothesis_text: String,
}

/// Decode a corpus with one system and score it.
pub fn evaluate_system(
    system: SystemKind,
    asr: &Network,
    corrector: Option<&Network>,
    corpus: &Corpus,
    fusion: &FusionConfig,
    workers: usize,
) -> XmResult<(CerReport, Vec<Transcript>)> {
    fusion.validate()?;
    if let Some(required) = system.needs_corrector() {
        let c = corrector.ok_or_else(|| {
            XmError::InvalidArgument(format!("{} needs a corrector model", system.label()))
        })?;
        if c.config.arch != required {
            return Err(XmError::InvalidArgument(format!(
                "{} needs a {} corrector, got {}",
                system.label(),
                required.label(),
                c.config.arch.label()
            )));
        }
    }
    let alpha = system.effective_alpha(fusion.alpha);
    let cfg = fusion.with_alpha(alpha);

    let asr_snapshot = asr.registry.snapshot();
    let asr_config = asr.config.clone();
    let corr_snapshot = corrector.map(|c| (c.config.clone(), c.registry.snapshot()));
    let vocab = asr.config.vocab.clone();

    let outputs = parallel_map(
        &corpus.utterances,
        workers,
        || {
            let asr = Network::from_snapshot(asr_config.clone(), &asr_snapshot)?;
            let corr = corr_snapshot
                .as_ref()
                .map(|(cfg, snap)| Network::from_snapshot(cfg.clone(), snap))
                .transpose()?;
            Ok((asr, corr))
        },
        |(asr, corr), _, utt| {
            let frames = utt.frames_tensor();
            let (first_pass, hyp) = match system {
                SystemKind::Baseline => {
                    let _g = no_grad();
                    let scorer = ModelScorer::recognizer(asr, &frames)?;
                    let max_len = cfg.max_len(scorer.source_len());
                    let best = beam_search(&scorer, cfg.beam_size, max_len)?.remove(0);
                    (None, best)
                }
                _ => {
                    let corr = corr.as_ref().expect("corrector checked above");
                    let result = two_pass_decode(asr, corr, &frames, &cfg)?;
                    (Some(result.first_pass.tokens), result.fused)
                }
            };
            Ok(Transcript {
                id: utt.id.clone(),
                reference: utt.tokens.clone(),
                first_pass,
                hypothesis_text: vocab.render(&hyp.tokens),
                reference_text: vocab.render(&utt.tokens),
                hypothesis: hyp.tokens,
                score: hyp.score,
                finished: hyp.finished,
            })
        },
    )?;

    let mut scores = Vec::with_capacity(outputs.len());
    let mut skipped = 0usize;
    for t in &outputs {
        if t.reference.is_empty() {
            skipped += 1;
            continue;
        }
        let counts = cer(&t.reference, &t.hypothesis);
        scores.push(UtteranceScore {
            id: t.id.clone(),
            substitutions: counts.substitutions,
            insertions: counts.insertions,
            deletions: counts.deletions,
            ref_len: counts.ref_len,
        });
    }
    if skipped > 0 {
        eprintln!("warning: {skipped} empty-reference utterances excluded from the aggregate");
    }
    let report = CerReport::from_scores(system.label(), scores, skipped);
    debug_assert!(report.verify_aggregate());
    Ok((report, outputs))
}

// ── alpha sweep ─────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub cer: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

/// Fused CER at each weight in `alphas`. The first pass and both encoders
/// run once per utterance; only the fused search is repeated per weight.
pub fn sweep_alpha(
    asr: &Network,
    corrector: &Network,
    corpus: &Corpus,
    alphas: &[f64],
    fusion: &FusionConfig,
    workers: usize,
) -> XmResult<Vec<SweepPoint>> {
    for &a in alphas {
        if !(0.0..=1.0).contains(&a) {
            return Err(XmError::Config(format!("sweep alpha {a} outside [0, 1]")));
        }
    }
    let asr_snapshot = asr.registry.snapshot();
    let asr_config = asr.config.clone();
    let corr_snapshot = corrector.registry.snapshot();
    let corr_config = corrector.config.clone();
    let alphas_owned = alphas.to_vec();

    let per_utt = parallel_map(
        &corpus.utterances,
        workers,
        || {
            let asr = Network::from_snapshot(asr_config.clone(), &asr_snapshot)?;
            let corr = Network::from_snapshot(corr_config.clone(), &corr_snapshot)?;
            Ok((asr, corr))
        },
        |(asr, corr), _, utt| {
            let _g = no_grad();
            let frames = utt.frames_tensor();
            let asr_scorer = ModelScorer::recognizer(asr, &frames)?;
            let max_len = fusion.max_len(asr_scorer.source_len());
            let first = beam_search(&asr_scorer, fusion.beam_size, max_len)?.remove(0);
            let corr_scorer = ModelScorer::corrector(corr, &frames, &first.tokens)?;
            let mut counts = Vec::with_capacity(alphas_owned.len());
            for &alpha in &alphas_owned {
                let fused = FusedScorer {
                    asr: ModelScorer { model: asr, memory: clone_memory(&asr_scorer.memory) },
                    corrector: ModelScorer { model: corr, memory: clone_memory(&corr_scorer.memory) },
                    alpha,
                };
                let best = beam_search(&fused, fusion.beam_size, max_len)?.remove(0);
                counts.push(cer(&utt.tokens, &best.tokens));
            }
            Ok(counts)
        },
    )?;

    let mut points = Vec::with_capacity(alphas.len());
    for (k, &alpha) in alphas.iter().enumerate() {
        let mut totals = EditCounts::default();
        for row in &per_utt {
            totals.add(&row[k]);
        }
        points.push(SweepPoint {
            alpha,
            cer: totals.cer(),
            substitutions: totals.substitutions,
            insertions: totals.insertions,
            deletions: totals.deletions,
        });
    }
    Ok(points)
}

fn clone_memory(mem: &crate::models::EncodedMemory) -> crate::models::EncodedMemory {
    crate::models::EncodedMemory {
        memories: mem.memories.clone(),
        valid: mem.valid.clone(),
        boundaries: mem.boundaries,
        self_weights: mem.self_weights.clone(),
    }
}

pub fn write_sweep_csv(path: &Path, points: &[SweepPoint]) -> XmResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "alpha,cer,sub,ins,del")?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{}",
            p.alpha, p.cer, p.substitutions, p.insertions, p.deletions
        )?;
    }
    out.flush()?;
    Ok(())
}

// ── attention export ────────────────────────────────────────────────

/// Attention-mass bookkeeping for one (block, head) matrix over the joint
/// {speech, sep, text} sequence. Fractions are of the total attention mass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadStats {
    pub block: usize,
    pub head: usize,
    pub within_speech: f64,
    pub speech_to_text: f64,
    pub text_to_speech: f64,
    pub within_text: f64,
    /// speech_to_text + text_to_speech
    pub cross_mass: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub boundaries: SegmentBoundaries,
    pub blocks: usize,
    pub heads: usize,
    pub files_written: usize,
    pub head_stats: Vec<HeadStats>,
    pub max_cross_mass: f64,
}

/// Export the cross-modal encoder's self-attention weights for one triple:
/// a CSV matrix and an 8-bit portable graymap per (block, head), with the
/// segment boundaries and per-head modality statistics in a sidecar JSON.
pub fn dump_attention(
    model: &Network,
    triple: &CorrectionTriple,
    out_dir: &Path,
) -> XmResult<AttentionSummary> {
    if model.config.arch != Architecture::CrossModal {
        return Err(XmError::InvalidArgument(format!(
            "attention export needs a cross_modal checkpoint, got {}",
            model.config.arch.label()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let _g = no_grad();
    let frames = triple.frames_tensor();
    let memory = model.encode(&frames, &triple.hyp, &mut crate::layers::ForwardCtx::eval())?;
    let boundaries = memory.boundaries.expect("cross-modal encode sets boundaries");
    let heads = model.config.layer.num_heads;
    let len = boundaries.speech_len + 1 + boundaries.text_len;

    let mut head_stats = Vec::new();
    let mut files_written = 0usize;
    for (b, weights) in memory.self_weights.iter().enumerate() {
        let data = weights.to_vec();
        assert_eq!(weights.shape(), &[heads, len, len]);
        for h in 0..heads {
            let matrix = &data[h * len * len..(h + 1) * len * len];
            for (r, row) in matrix.chunks(len).enumerate() {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(XmError::InvalidArgument(format!(
                        "attention row {r} of block {b} head {h} sums to {sum}"
                    )));
                }
            }
            write_matrix_csv(&out_dir.join(format!("attn_block{b}_head{h}.csv")), matrix, len)?;
            write_pgm(&out_dir.join(format!("attn_block{b}_head{h}.pgm")), matrix, len, len)?;
            files_written += 2;
            head_stats.push(segment_stats(b, h, matrix, len, &boundaries));
        }
    }
    let max_cross_mass = head_stats.iter().map(|s| s.cross_mass).fold(0.0, f64::max);
    let summary = AttentionSummary {
        boundaries,
        blocks: memory.self_weights.len(),
        heads,
        files_written,
        head_stats,
        max_cross_mass,
    };
    crate::util::write_json(&out_dir.join("attention_summary.json"), &summary)?;
    Ok(summary)
}

fn segment_of(index: usize, b: &SegmentBoundaries) -> u8 {
    if index < b.speech_len {
        0 // speech
    } else if index == b.sep_index {
        2 // separator
    } else {
        1 // text
    }
}

fn segment_stats(
    block: usize,
    head: usize,
    matrix: &[f64],
    len: usize,
    b: &SegmentBoundaries,
) -> HeadStats {
    let total: f64 = matrix.iter().sum();
    let mut within_speech = 0.0;
    let mut speech_to_text = 0.0;
    let mut text_to_speech = 0.0;
    let mut within_text = 0.0;
    for q in 0..len {
        for k in 0..len {
            let w = matrix[q * len + k];
            match (segment_of(q, b), segment_of(k, b)) {
                (0, 0) => within_speech += w,
                (0, 1) => speech_to_text += w,
                (1, 0) => text_to_speech += w,
                (1, 1) => within_text += w,
                _ => {}
            }
        }
    }
    HeadStats {
        block,
        head,
        within_speech: within_speech / total,
        speech_to_text: speech_to_text / total,
        text_to_speech: text_to_speech / total,
        within_text: within_text / total,
        cross_mass: (speech_to_text + text_to_speech) / total,
    }
}

fn write_matrix_csv(path: &Path, matrix: &[f64], cols: usize) -> XmResult<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in matrix.chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Binary 8-bit portable graymap; weight 1.0 maps to 255.
fn write_pgm(path: &Path, data: &[f64], width: usize, height: usize) -> XmResult<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerConfig;
    use crate::models::{ModelConfig, Vocabulary};
    use crate::numerics::{ParamInit, Rng};
    use crate::synthdata::TaskSpec;

    #[test]
    fn cer_trivial_cases() {
        let c = cer(b"abc", b"abc");
        assert_eq!((c.substitutions, c.insertions, c.deletions, c.ref_len), (0, 0, 0, 3));
        assert_eq!(c.cer(), 0.0);

        let c = cer(b"abc", b"");
        assert_eq!((c.substitutions, c.insertions, c.deletions, c.ref_len), (0, 0, 3, 3));
        assert_eq!(c.cer(), 1.0);

        let c = cer(b"abcde", b"axcfde");
        assert_eq!(c.distance(), 2);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 1, 0));
    }

    /// Plain recursive alignment enumerator, no memoization: the brute-force
    /// oracle for small strings.
    fn brute_force_distance(a: &[u8], b: &[u8]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = brute_force_distance(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
        let del = brute_force_distance(&a[1..], b) + 1;
        let ins = brute_force_distance(a, &b[1..]) + 1;
        sub.min(del).min(ins)
    }

    fn all_strings(alphabet: &[u8], max_len: usize) -> Vec<Vec<u8>> {
        let mut out: Vec<Vec<u8>> = vec![Vec::new()];
        let mut frontier: Vec<Vec<u8>> = vec![Vec::new()];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                for &c in alphabet {
                    let mut t = s.clone();
                    t.push(c);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn dp_matches_brute_force_exhaustively() {
        let strings = all_strings(b"abc", 4);
        for r in &strings {
            for h in &strings {
                let dp = cer(r, h).distance();
                let bf = brute_force_distance(r, h);
                assert_eq!(dp, bf, "ref {r:?} hyp {h:?}");
                assert_eq!(dp, cer(h, r).distance(), "distance must be symmetric");
            }
        }
    }

    #[test]
    fn distance_satisfies_triangle_inequality_on_micro_set() {
        let strings = all_strings(b"abc", 4);
        let n = strings.len();
        let mut dist = vec![0usize; n * n];
        for i in 0..n {
            for j in 0..n {
                dist[i * n + j] = cer(&strings[i], &strings[j]).distance();
            }
        }
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    assert!(
                        dist[i * n + j] <= dist[i * n + k] + dist[k * n + j],
                        "triangle violated for {i},{j},{k}"
                    );
                }
            }
        }
    }

    #[test]
    fn report_aggregate_matches_recomputation() {
        let scores = vec![
            UtteranceScore { id: "a".into(), substitutions: 1, insertions: 0, deletions: 2, ref_len: 10 },
            UtteranceScore { id: "b".into(), substitutions: 0, insertions: 3, deletions: 0, ref_len: 5 },
        ];
        let report = CerReport::from_scores("test", scores, 0);
        assert!(report.verify_aggregate());
        assert!((report.cer - 6.0 / 15.0).abs() < 1e-12);
        assert!((report.mean_utterance_cer - (0.3 + 0.6) / 2.0).abs() < 1e-12);
    }

    fn tiny_model(arch: Architecture, seed: u64) -> Network {
        let config = ModelConfig {
            arch,
            layer: LayerConfig { d_model: 16, num_heads: 2, ffn_dim: 32, dropout_p: 0.0 },
            encoder_blocks: 1,
            decoder_blocks: 1,
            speech_encoder_blocks: 1,
            vocab: Vocabulary::synthetic(26),
            feature_dim: 16,
            max_source_len: 256,
            max_target_len: 64,
        };
        let mut rng = Rng::seed_from_u64(seed);
        Network::new(config, ParamInit::Fresh(&mut rng)).unwrap()
    }

    fn tiny_corpus(n: usize) -> Corpus {
        let spec = TaskSpec { train_size: n, dev_size: 1, eval_size: 1, ..Default::default() };
        crate::synthdata::gen_corpus(&spec, 17).unwrap().0
    }

    #[test]
    fn fused_alpha_zero_transcripts_are_bit_equal_to_baseline() {
        let asr = tiny_model(Architecture::Asr, 60);
        let corr = tiny_model(Architecture::CrossModal, 61);
        let corpus = tiny_corpus(6);
        let fusion = FusionConfig { alpha: 0.0, beam_size: 4, ..Default::default() };
        let (base_report, base_tx) =
            evaluate_system(SystemKind::Baseline, &asr, None, &corpus, &fusion, 1).unwrap();
        let (sf_report, sf_tx) =
            evaluate_system(SystemKind::CrossModalSf, &asr, Some(&corr), &corpus, &fusion, 1)
                .unwrap();
        assert_eq!(base_report.cer, sf_report.cer);
        for (a, b) in base_tx.iter().zip(&sf_tx) {
            assert_eq!(a.hypothesis, b.hypothesis, "transcripts must be bit-equal at alpha 0");
            assert_eq!(a.score.to_bits(), b.score.to_bits());
        }
    }

    #[test]
    fn evaluate_rejects_mismatched_corrector() {
        let asr = tiny_model(Architecture::Asr, 62);
        let sep = tiny_model(Architecture::Separate, 63);
        let corpus = tiny_corpus(2);
        let fusion = FusionConfig::default();
        let err = evaluate_system(
            SystemKind::CrossModalSf,
            &asr,
            Some(&sep),
            &corpus,
            &fusion,
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("cross_modal"), "{err}");
    }

    #[test]
    fn sweep_alpha_zero_point_equals_baseline_and_is_deterministic() {
        let asr = tiny_model(Architecture::Asr, 64);
        let corr = tiny_model(Architecture::CrossModal, 65);
        let corpus = tiny_corpus(5);
        let fusion = FusionConfig { alpha: 0.5, beam_size: 4, ..Default::default() };
        let alphas = [0.0, 0.5, 1.0];
        let a = sweep_alpha(&asr, &corr, &corpus, &alphas, &fusion, 1).unwrap();
        let b = sweep_alpha(&asr, &corr, &corpus, &alphas, &fusion, 2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.cer, y.cer, "sweep must not depend on worker count");
        }
        let (base, _) =
            evaluate_system(SystemKind::Baseline, &asr, None, &corpus, &fusion, 1).unwrap();
        assert_eq!(a[0].cer, base.cer, "alpha 0 sweep point equals baseline CER");

        let dir = std::env::temp_dir().join("xmodal-sweep-test");
        std::fs::create_dir_all(&dir).unwrap();
        let csv = dir.join("sweep.csv");
        write_sweep_csv(&csv, &a).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("alpha,cer,sub,ins,del\n"));
        std::fs::remove_dir_all(&dir).ok();
    }

    /// Scorer that deterministically emits a fixed reference sequence:
    /// the synthetic oracle corrector.
    struct ReferenceScorer {
        reference: Vec<TokenId>,
        vocab: usize,
    }

    impl crate::decoding::StepScorer for ReferenceScorer {
        type State = usize;

        fn init_state(&self) -> crate::XmResult<usize> {
            Ok(0)
        }

        fn advance(&self, state: &usize, _token: TokenId) -> crate::XmResult<(Vec<f64>, usize)> {
            let want = self
                .reference
                .get(*state)
                .copied()
                .unwrap_or(crate::models::EOS_ID);
            let mut row = vec![-1e9; self.vocab];
            row[want as usize] = 0.0;
            Ok((row, state + 1))
        }

        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn source_len(&self) -> usize {
            self.reference.len().max(1)
        }
    }

    #[test]
    fn oracle_reference_scorer_reaches_zero_cer() {
        let corpus = tiny_corpus(6);
        let mut totals = EditCounts::default();
        for utt in &corpus.utterances {
            let scorer = ReferenceScorer { reference: utt.tokens.clone(), vocab: 30 };
            let best = beam_search(&scorer, 4, 2 * utt.tokens.len() + 4).unwrap().remove(0);
            totals.add(&cer(&utt.tokens, &best.tokens));
        }
        assert_eq!(totals.distance(), 0);
        assert_eq!(totals.cer(), 0.0);
    }

    #[test]
    fn attention_dump_writes_normalized_matrices() {
        let corr = tiny_model(Architecture::CrossModal, 66);
        let corpus = tiny_corpus(1);
        let utt = &corpus.utterances[0];
        let triple = CorrectionTriple {
            id: utt.id.clone(),
            tokens: utt.tokens.clone(),
            frames: utt.frames.clone(),
            hyp: utt.tokens.clone(),
        };
        let dir = std::env::temp_dir().join("xmodal-attn-test");
        std::fs::remove_dir_all(&dir).ok();
        let summary = dump_attention(&corr, &triple, &dir).unwrap();
        assert_eq!(summary.files_written, 4); // 1 block x 2 heads x {csv, pgm}
        assert_eq!(summary.head_stats.len(), 2);
        for s in &summary.head_stats {
            let covered = s.within_speech + s.within_text + s.cross_mass;
            assert!(covered <= 1.0 + 1e-9);
            assert!(s.cross_mass >= 0.0);
        }
        // the PGM header matches the joint sequence length
        let len = summary.boundaries.speech_len + 1 + summary.boundaries.text_len;
        let pgm = std::fs::read(dir.join("attn_block0_head0.pgm")).unwrap();
        let header = format!("P5\n{len} {len}\n255\n");
        assert!(pgm.starts_with(header.as_bytes()));
        assert_eq!(pgm.len(), header.len() + len * len);

        let asr = tiny_model(Architecture::Asr, 67);
        assert!(dump_attention(&asr, &triple, &dir).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
