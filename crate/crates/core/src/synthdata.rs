//! Deterministic synthetic corpus generator.
//!
//! Utterances are token sequences from a sparse second-order Markov chain,
//! rendered into speech-like frame sequences: each token owns a mean vector
//! on a sphere in feature space and contributes a few noisy copies of it.
//! Designated token pairs have their means pulled close together, so the
//! acoustics alone cannot separate them — the language structure can, which
//! is exactly the signal a second-pass corrector needs. Also builds
//! correction-training triples by decoding the training split with a trained
//! recognizer under extra feature noise.

use serde::{Deserialize, Serialize};

use crate::decoding::{beam_search, ModelScorer, StepScorer};
use crate::error::{XmError, XmResult};
use crate::evaluation::{cer, EditCounts};
use crate::models::{Architecture, Network, TokenId, RESERVED_TOKENS};
use crate::numerics::{Rng, Tensor};
use crate::util::parallel_map;

/// Version tag recorded in corpus manifests.
pub const GENERATOR_VERSION: &str = env!("CARGO_PKG_VERSION");

/// A pair of content tokens (0-based content indices) whose acoustic means
/// are moved to the given distance.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConfusablePair {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

/// All knobs of the synthetic task.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    /// Number of content tokens (the vocabulary adds 4 reserved ids).
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub frames_per_token_min: usize,
    pub frames_per_token_max: usize,
    pub noise_sigma: f64,
    pub confusable_pairs: Vec<ConfusablePair>,
    /// Seed of the second-order transition table (fixed across corpus seeds,
    /// so different seeds draw different data from the same language).
    pub markov_table_seed: u64,
    /// Allowed successors per (prev, prev2) context.
    pub markov_successors: usize,
    pub utterance_len_min: usize,
    pub utterance_len_max: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub eval_size: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            vocab_size: 26,
            feature_dim: 16,
            frames_per_token_min: 2,
            frames_per_token_max: 4,
            noise_sigma: 0.5,
            confusable_pairs: vec![
                ConfusablePair { a: 0, b: 1, distance: 0.6 },
                ConfusablePair { a: 2, b: 3, distance: 0.6 },
                ConfusablePair { a: 4, b: 5, distance: 0.6 },
                ConfusablePair { a: 6, b: 7, distance: 0.6 },
            ],
            markov_table_seed: 7777,
            markov_successors: 6,
            utterance_len_min: 5,
            utterance_len_max: 20,
            train_size: 8000,
            dev_size: 500,
            eval_size: 500,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> XmResult<()> {
        if self.vocab_size < 4 {
            return Err(XmError::Config("vocab_size must be at least 4".into()));
        }
        if self.feature_dim < 2 {
            return Err(XmError::Config("feature_dim must be at least 2".into()));
        }
        if self.frames_per_token_min == 0 || self.frames_per_token_min > self.frames_per_token_max {
            return Err(XmError::Config("frames_per_token range is invalid".into()));
        }
        if self.utterance_len_min == 0 || self.utterance_len_min > self.utterance_len_max {
            return Err(XmError::Config("utterance length range is invalid".into()));
        }
        if self.markov_successors == 0 || self.markov_successors > self.vocab_size {
            return Err(XmError::Config("markov_successors out of range".into()));
        }
        if self.train_size == 0 || self.dev_size == 0 || self.eval_size == 0 {
            return Err(XmError::Config("split sizes must all be positive".into()));
        }
        let mut used = vec![false; self.vocab_size];
        for p in &self.confusable_pairs {
            if p.a >= self.vocab_size || p.b >= self.vocab_size || p.a == p.b {
                return Err(XmError::Config(format!(
                    "confusable pair ({}, {}) out of range",
                    p.a, p.b
                )));
            }
            if p.distance < 0.0 {
                return Err(XmError::Config("confusable distance must be non-negative".into()));
            }
            for idx in [p.a, p.b] {
                if std::mem::replace(&mut used[idx], true) {
                    return Err(XmError::Config("confusable pairs must be disjoint".into()));
                }
            }
        }
        Ok(())
    }

    /// Content-token index of a vocabulary id.
    pub fn content_index(id: TokenId) -> usize {
        id as usize - RESERVED_TOKENS.len()
    }

    pub fn content_id(index: usize) -> TokenId {
        (index + RESERVED_TOKENS.len()) as TokenId
    }
}

/// One sample: id, reference tokens (vocabulary ids), acoustic frames.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub frames: Vec<Vec<f64>>,
}

impl Utterance {
    pub fn frames_tensor(&self) -> Tensor {
        let rows = self.frames.len();
        let cols = if rows == 0 { 0 } else { self.frames[0].len() };
        let mut data = Vec::with_capacity(rows * cols);
        for row in &self.frames {
            data.extend_from_slice(row);
        }
        Tensor::from_vec(vec![rows, cols], data)
    }
}

/// Training unit for the correctors: reference, frames, first-pass hypothesis.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorrectionTriple {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub frames: Vec<Vec<f64>>,
    pub hyp: Vec<TokenId>,
}

impl CorrectionTriple {
    pub fn frames_tensor(&self) -> Tensor {
        let rows = self.frames.len();
        let cols = if rows == 0 { 0 } else { self.frames[0].len() };
        let mut data = Vec::with_capacity(rows * cols);
        for row in &self.frames {
            data.extend_from_slice(row);
        }
        Tensor::from_vec(vec![rows, cols], data)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Corpus {
    pub split: String,
    pub utterances: Vec<Utterance>,
}

/// Sidecar manifest written next to each corpus file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: TaskSpec,
    pub seed: u64,
    pub split: String,
    pub count: usize,
    pub generator_version: String,
}

/// Token mean vectors: drawn once per seed on a sphere of radius 3, then
/// confusable pairs pulled to their configured distance.
pub fn token_means(spec: &TaskSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::stream(seed, "token-means", 0);
    let mut means: Vec<Vec<f64>> = (0..spec.vocab_size)
        .map(|_| {
            let v: Vec<f64> = (0..spec.feature_dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| 3.0 * x / norm).collect()
        })
        .collect();
    for pair in &spec.confusable_pairs {
        let (a, b) = (pair.a, pair.b);
        let mid: Vec<f64> = (0..spec.feature_dim)
            .map(|i| 0.5 * (means[a][i] + means[b][i]))
            .collect();
        let mut dir: Vec<f64> = (0..spec.feature_dim)
            .map(|i| means[b][i] - means[a][i])
            .collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            dir = vec![0.0; spec.feature_dim];
            dir[0] = 1.0;
        } else {
            for d in dir.iter_mut() {
                *d /= norm;
            }
        }
        let half = pair.distance / 2.0;
        for i in 0..spec.feature_dim {
            means[a][i] = mid[i] - half * dir[i];
            means[b][i] = mid[i] + half * dir[i];
        }
    }
    means
}

/// Sparse second-order transition table: per (prev2, prev) context, an
/// ordered list of (successor, cumulative probability).
pub struct MarkovTable {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl MarkovTable {
    pub fn build(spec: &TaskSpec) -> MarkovTable {
        let n = spec.vocab_size;
        let k = spec.markov_successors.min(n);
        for salt in 0.. {
            let mut rng = Rng::stream(spec.markov_table_seed, "markov-table", salt);
            let mut rows = Vec::with_capacity(n * n);
            let mut covered = vec![false; n];
            for _ in 0..n * n {
                let mut ids: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut ids);
                let chosen = &ids[..k];
                let weights: Vec<f64> = (0..k).map(|_| rng.uniform_in(0.25, 1.0)).collect();
                let total: f64 = weights.iter().sum();
                let mut cum = 0.0;
                let mut row = Vec::with_capacity(k);
                for (&succ, w) in chosen.iter().zip(&weights) {
                    covered[succ] = true;
                    cum += w / total;
                    row.push((succ, cum));
                }
                row.last_mut().unwrap().1 = 1.0;
                rows.push(row);
            }
            // every token must be reachable as some context's successor
            if covered.iter().all(|&c| c) {
                return MarkovTable { n, rows };
            }
        }
        unreachable!("table reseeding loop always terminates");
    }

    fn sample(&self, prev2: usize, prev: usize, rng: &mut Rng) -> usize {
        let row = &self.rows[prev2 * self.n + prev];
        let u = rng.uniform();
        for &(succ, cum) in row {
            if u < cum {
                return succ;
            }
        }
        row.last().unwrap().0
    }

    /// Successor set of a context, for reachability checks.
    pub fn successors(&self, prev2: usize, prev: usize) -> Vec<usize> {
        self.rows[prev2 * self.n + prev].iter().map(|&(s, _)| s).collect()
    }
}

fn sample_tokens(spec: &TaskSpec, table: &MarkovTable, rng: &mut Rng) -> Vec<TokenId> {
    let len = rng.range_inclusive(spec.utterance_len_min, spec.utterance_len_max);
    let mut content = Vec::with_capacity(len);
    content.push(rng.below(spec.vocab_size));
    if len > 1 {
        content.push(rng.below(spec.vocab_size));
    }
    while content.len() < len {
        let prev2 = content[content.len() - 2];
        let prev = content[content.len() - 1];
        content.push(table.sample(prev2, prev, rng));
    }
    content.into_iter().map(TaskSpec::content_id).collect()
}

/// Render a token sequence into frames: each token contributes
/// `frames_per_token_min..=max` copies of its mean plus isotropic noise.
pub fn render_features(
    tokens: &[TokenId],
    spec: &TaskSpec,
    means: &[Vec<f64>],
    rng: &mut Rng,
) -> XmResult<Vec<Vec<f64>>> {
    if tokens.is_empty() {
        return Err(XmError::InvalidArgument("render_features needs at least one token".into()));
    }
    let mut frames = Vec::new();
    for &tok in tokens {
        let idx = TaskSpec::content_index(tok);
        if idx >= means.len() {
            return Err(XmError::VocabOutOfRange {
                id: tok,
                vocab_size: means.len() + RESERVED_TOKENS.len(),
            });
        }
        let copies = rng.range_inclusive(spec.frames_per_token_min, spec.frames_per_token_max);
        for _ in 0..copies {
            frames.push(
                means[idx]
                    .iter()
                    .map(|&m| m + spec.noise_sigma * rng.normal())
                    .collect(),
            );
        }
    }
    Ok(frames)
}

fn generate_split(
    spec: &TaskSpec,
    table: &MarkovTable,
    means: &[Vec<f64>],
    seed: u64,
    split: &str,
    count: usize,
) -> XmResult<Corpus> {
    let mut utterances = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = Rng::stream(seed, split, i as u64);
        let tokens = sample_tokens(spec, table, &mut rng);
        let frames = render_features(&tokens, spec, means, &mut rng)?;
        utterances.push(Utterance { id: format!("{split}-{i:06}"), tokens, frames });
    }
    Ok(Corpus { split: split.to_string(), utterances })
}

/// Generate the three splits. Fully reproducible from `(spec, seed)`:
/// per-utterance streams are derived from the seed, split name, and index.
pub fn gen_corpus(spec: &TaskSpec, seed: u64) -> XmResult<(Corpus, Corpus, Corpus)> {
    spec.validate()?;
    let table = MarkovTable::build(spec);
    let means = token_means(spec, seed);
    Ok((
        generate_split(spec, &table, &means, seed, "train", spec.train_size)?,
        generate_split(spec, &table, &means, seed, "dev", spec.dev_size)?,
        generate_split(spec, &table, &means, seed, "eval", spec.eval_size)?,
    ))
}

/// Aggregate hypothesis quality of a triple set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TripleStats {
    pub count: usize,
    pub hypothesis_cer: f64,
}

/// Decode every utterance with the recognizer under re-sampled additive
/// feature noise (beam 4), pairing the clean frames with the noisy-decode
/// hypothesis. The noise diversifies first-pass errors while the corrector
/// still trains on the features it will see at evaluation time.
pub fn make_triples(
    asr: &Network,
    corpus: &Corpus,
    noise_seed: u64,
    aug_sigma: f64,
    workers: usize,
) -> XmResult<(Vec<CorrectionTriple>, TripleStats)> {
    if asr.config.arch != Architecture::Asr {
        return Err(XmError::InvalidArgument(
            "make_triples needs a recognizer checkpoint".into(),
        ));
    }
    for utt in &corpus.utterances {
        for &tok in &utt.tokens {
            if !asr.config.vocab.contains_id(tok) {
                return Err(XmError::VocabOutOfRange {
                    id: tok,
                    vocab_size: asr.config.vocab.size(),
                });
            }
        }
    }
    let snapshot = asr.registry.snapshot();
    let config = asr.config.clone();
    let triples = parallel_map(
        &corpus.utterances,
        workers,
        || Network::from_snapshot(config.clone(), &snapshot),
        |model, idx, utt| {
            let mut rng = Rng::stream(noise_seed, "triple-aug", idx as u64);
            let noisy: Vec<Vec<f64>> = utt
                .frames
                .iter()
                .map(|row| row.iter().map(|&x| x + aug_sigma * rng.normal()).collect())
                .collect();
            let noisy_utt = Utterance { id: utt.id.clone(), tokens: utt.tokens.clone(), frames: noisy };
            let frames = noisy_utt.frames_tensor();
            let scorer = ModelScorer::recognizer(model, &frames)?;
            let max_len = 2 * scorer.source_len() + 4;
            let hyp = beam_search(&scorer, 4, max_len)?.remove(0);
            Ok(CorrectionTriple {
                id: utt.id.clone(),
                tokens: utt.tokens.clone(),
                frames: utt.frames.clone(),
                hyp: hyp.tokens,
            })
        },
    )?;
    let mut totals = EditCounts::default();
    for t in &triples {
        totals.add(&cer(&t.tokens, &t.hyp));
    }
    let stats = TripleStats { count: triples.len(), hypothesis_cer: totals.cer() };
    Ok((triples, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_byte_identical_for_same_inputs() {
        let spec = TaskSpec { train_size: 20, dev_size: 5, eval_size: 5, ..Default::default() };
        let (a_train, a_dev, a_eval) = gen_corpus(&spec, 99).unwrap();
        let (b_train, b_dev, b_eval) = gen_corpus(&spec, 99).unwrap();
        let ser = |c: &Corpus| serde_json::to_vec(&c.utterances).unwrap();
        assert_eq!(ser(&a_train), ser(&b_train));
        assert_eq!(ser(&a_dev), ser(&b_dev));
        assert_eq!(ser(&a_eval), ser(&b_eval));

        let (c_train, _, _) = gen_corpus(&spec, 100).unwrap();
        assert_ne!(ser(&a_train), ser(&c_train));
    }

    #[test]
    fn zero_noise_without_confusables_repeats_the_mean() {
        let spec = TaskSpec {
            noise_sigma: 0.0,
            confusable_pairs: Vec::new(),
            train_size: 4,
            dev_size: 1,
            eval_size: 1,
            ..Default::default()
        };
        let means = token_means(&spec, 5);
        let (train, _, _) = gen_corpus(&spec, 5).unwrap();
        for utt in &train.utterances {
            let mut cursor = 0;
            for &tok in &utt.tokens {
                let mean = &means[TaskSpec::content_index(tok)];
                while cursor < utt.frames.len() && utt.frames[cursor] == *mean {
                    cursor += 1;
                }
            }
            assert_eq!(cursor, utt.frames.len(), "every frame must be an exact mean copy");
        }
    }

    #[test]
    fn render_frame_counts_stay_in_range() {
        let spec = TaskSpec::default();
        let means = token_means(&spec, 11);
        for trial in 0..20 {
            let mut rng = Rng::stream(11, "render-test", trial);
            let tokens: Vec<TokenId> = (0..5).map(TaskSpec::content_id).collect();
            let frames = render_features(&tokens, &spec, &means, &mut rng).unwrap();
            assert!((10..=20).contains(&frames.len()), "got {} frames", frames.len());
        }

        let silent = TaskSpec { noise_sigma: 0.0, ..Default::default() };
        let mut rng = Rng::stream(12, "render-test", 0);
        let frames = render_features(&[TaskSpec::content_id(3); 4], &silent, &means, &mut rng).unwrap();
        for pair in frames.windows(2) {
            assert_eq!(pair[0], pair[1], "zero noise makes all copies identical");
        }
    }

    #[test]
    fn empirical_mean_approaches_token_mean() {
        let spec = TaskSpec::default();
        let means = token_means(&spec, 21);
        let tok = TaskSpec::content_id(9);
        let mut sums = vec![0.0; spec.feature_dim];
        let mut count = 0usize;
        for i in 0..10_000u64 {
            let mut rng = Rng::stream(21, "mean-check", i);
            let frames = render_features(&[tok], &spec, &means, &mut rng).unwrap();
            for f in &frames {
                for (s, &x) in sums.iter_mut().zip(f) {
                    *s += x;
                }
                count += 1;
            }
        }
        let bound = 3.0 * spec.noise_sigma / (count as f64).sqrt();
        for (i, &s) in sums.iter().enumerate() {
            let mean = s / count as f64;
            assert!(
                (mean - means[9][i]).abs() < bound,
                "dim {i}: {} vs {} (bound {bound})",
                mean,
                means[9][i]
            );
        }
    }

    #[test]
    fn confusable_pairs_sit_at_configured_distance() {
        let spec = TaskSpec::default();
        let means = token_means(&spec, 42);
        for pair in &spec.confusable_pairs {
            let d: f64 = means[pair.a]
                .iter()
                .zip(&means[pair.b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!((d - pair.distance).abs() < 1e-9, "pair distance {d}");
        }
    }

    #[test]
    fn nearest_mean_classifier_confuses_pair_members() {
        // Monte-Carlo over 1e5 frames of confusable-pair members
        let spec = TaskSpec::default();
        let means = token_means(&spec, 7);
        let members: Vec<usize> = spec
            .confusable_pairs
            .iter()
            .flat_map(|p| [p.a, p.b])
            .collect();
        let mut rng = Rng::stream(7, "classifier-mc", 0);
        let mut wrong = 0usize;
        let total = 100_000usize;
        for i in 0..total {
            let true_idx = members[i % members.len()];
            let frame: Vec<f64> = means[true_idx]
                .iter()
                .map(|&m| m + spec.noise_sigma * rng.normal())
                .collect();
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (k, mean) in means.iter().enumerate() {
                let d: f64 = mean.iter().zip(&frame).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if best != true_idx {
                wrong += 1;
            }
        }
        let rate = wrong as f64 / total as f64;
        assert!(rate > 0.10, "confusable misclassification rate {rate}");
    }

    #[test]
    fn markov_table_reaches_every_token() {
        let spec = TaskSpec::default();
        let table = MarkovTable::build(&spec);
        let mut covered = vec![false; spec.vocab_size];
        for a in 0..spec.vocab_size {
            for b in 0..spec.vocab_size {
                for s in table.successors(a, b) {
                    covered[s] = true;
                }
                assert_eq!(table.successors(a, b).len(), spec.markov_successors);
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn splits_are_disjoint_by_id_and_sized() {
        let spec = TaskSpec { train_size: 30, dev_size: 10, eval_size: 10, ..Default::default() };
        let (train, dev, eval) = gen_corpus(&spec, 1).unwrap();
        assert_eq!(train.utterances.len(), 30);
        assert_eq!(dev.utterances.len(), 10);
        assert_eq!(eval.utterances.len(), 10);
        let mut ids = std::collections::HashSet::new();
        for utt in train.utterances.iter().chain(&dev.utterances).chain(&eval.utterances) {
            assert!(ids.insert(utt.id.clone()), "duplicate id {}", utt.id);
            assert!((spec.utterance_len_min..=spec.utterance_len_max).contains(&utt.tokens.len()));
        }
    }

    #[test]
    fn spec_validation_rejects_degenerate_settings() {
        let mut spec = TaskSpec { vocab_size: 3, ..Default::default() };
        spec.confusable_pairs.clear();
        assert!(spec.validate().is_err());
        let spec = TaskSpec { feature_dim: 1, ..Default::default() };
        assert!(spec.validate().is_err());
        let spec = TaskSpec {
            confusable_pairs: vec![
                ConfusablePair { a: 0, b: 1, distance: 0.5 },
                ConfusablePair { a: 1, b: 2, distance: 0.5 },
            ],
            ..Default::default()
        };
        assert!(spec.validate().is_err(), "overlapping pairs must be rejected");
    }

    #[test]
    fn untrained_recognizer_triples_have_terrible_hypotheses() {
        use crate::models::{ModelConfig, Vocabulary};
        use crate::numerics::ParamInit;
        let spec = TaskSpec { train_size: 12, dev_size: 2, eval_size: 2, ..Default::default() };
        let (train, _, _) = gen_corpus(&spec, 3).unwrap();
        let vocab = Vocabulary::synthetic(spec.vocab_size);
        let mut config = ModelConfig::toy(Architecture::Asr, vocab, spec.feature_dim);
        config.layer.d_model = 16;
        config.layer.ffn_dim = 32;
        config.layer.num_heads = 2;
        config.encoder_blocks = 1;
        config.decoder_blocks = 1;
        let mut rng = Rng::seed_from_u64(50);
        let model = Network::new(config, ParamInit::Fresh(&mut rng)).unwrap();
        let (triples, stats) = make_triples(&model, &train, 8, spec.noise_sigma, 1).unwrap();
        assert_eq!(triples.len(), train.utterances.len());
        assert!(stats.hypothesis_cer > 0.7, "untrained CER {}", stats.hypothesis_cer);
        // clean frames are preserved in the triple
        assert_eq!(triples[0].frames, train.utterances[0].frames);
    }

    #[test]
    fn make_triples_rejects_foreign_vocabulary() {
        use crate::models::{ModelConfig, Vocabulary};
        use crate::numerics::ParamInit;
        let spec = TaskSpec { train_size: 3, dev_size: 1, eval_size: 1, ..Default::default() };
        let (train, _, _) = gen_corpus(&spec, 4).unwrap();
        // model vocabulary too small for the corpus tokens
        let vocab = Vocabulary::synthetic(5);
        let mut config = ModelConfig::toy(Architecture::Asr, vocab, spec.feature_dim);
        config.layer.d_model = 8;
        config.layer.ffn_dim = 16;
        config.layer.num_heads = 2;
        config.encoder_blocks = 1;
        config.decoder_blocks = 1;
        let mut rng = Rng::seed_from_u64(51);
        let model = Network::new(config, ParamInit::Fresh(&mut rng)).unwrap();
        let err = make_triples(&model, &train, 8, 0.5, 1).unwrap_err();
        assert!(matches!(err, XmError::VocabOutOfRange { .. }));
    }
}
