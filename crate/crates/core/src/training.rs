//! Cross-entropy loss, the mini-batch training loop shared by the recognizer
//! and both correctors, and binary checkpoint persistence.
//!
//! Training is bit-reproducible: data order, dropout, and initialization all
//! derive from named streams of the training seed, and per-utterance
//! gradients are merged in utterance order so the worker count never changes
//! the result.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoding::{greedy_decode, ModelScorer, StepScorer};
use crate::error::{XmError, XmResult};
use crate::evaluation::{cer, EditCounts};
use crate::layers::ForwardCtx;
use crate::models::{Architecture, ModelConfig, Network, TokenId, PAD_ID};
use crate::numerics::tensor::{no_grad, Tensor};
use crate::numerics::{adam_step, clip_gradients, noam_lr, ops, OptimizerState, ParamSnapshot};
use crate::synthdata::{Corpus, CorrectionTriple};
use crate::util::parallel_map;
use crate::numerics::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"NCMK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub dropout: bool,
    pub grad_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            total_steps: 3000,
            warmup: 400,
            eval_every: 250,
            seed: 1,
            dropout: false,
            grad_clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> XmResult<()> {
        if self.batch_size == 0 || self.total_steps == 0 || self.eval_every == 0 || self.warmup == 0
        {
            return Err(XmError::Config(
                "batch_size, total_steps, warmup, eval_every must be positive".into(),
            ));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(XmError::Config("grad_clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of `targets` under per-step log-probability
/// rows, ignoring pad positions. No label smoothing.
pub fn cross_entropy_loss(logp: &Tensor, targets: &[TokenId], pad_id: TokenId) -> XmResult<Tensor> {
    let (sum, count) = cross_entropy_sum(logp, targets, pad_id)?;
    Ok(ops::scale(&sum, 1.0 / count as f64))
}

/// Summed NLL over non-pad positions, with the position count.
fn cross_entropy_sum(
    logp: &Tensor,
    targets: &[TokenId],
    pad_id: TokenId,
) -> XmResult<(Tensor, usize)> {
    let shape = logp.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(XmError::ShapeMismatch {
            primitive: "cross-entropy",
            lhs: shape.to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let vocab = shape[1];
    let mut pick = vec![0.0; targets.len() * vocab];
    let mut count = 0usize;
    for (t, &tok) in targets.iter().enumerate() {
        if tok == pad_id {
            continue;
        }
        if tok as usize >= vocab {
            return Err(XmError::VocabOutOfRange { id: tok, vocab_size: vocab });
        }
        pick[t * vocab + tok as usize] = -1.0;
        count += 1;
    }
    if count == 0 {
        return Err(XmError::InvalidArgument("all-pad target in cross entropy".into()));
    }
    let mask = Tensor::from_vec(vec![targets.len(), vocab], pick);
    Ok((ops::reduce_sum(&ops::mul(logp, &mask)?, None), count))
}

/// One training sample in plain data form (safe to share across workers).
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub frames: Vec<Vec<f64>>,
    pub tokens: Vec<TokenId>,
    pub hyp: Option<Vec<TokenId>>,
}

impl TrainExample {
    pub fn from_utterance(u: &crate::synthdata::Utterance) -> TrainExample {
        TrainExample { frames: u.frames.clone(), tokens: u.tokens.clone(), hyp: None }
    }

    pub fn from_triple(t: &CorrectionTriple) -> TrainExample {
        TrainExample { frames: t.frames.clone(), tokens: t.tokens.clone(), hyp: Some(t.hyp.clone()) }
    }

    fn frames_tensor(&self) -> Tensor {
        let rows = self.frames.len();
        let cols = if rows == 0 { 0 } else { self.frames[0].len() };
        let mut data = Vec::with_capacity(rows * cols);
        for row in &self.frames {
            data.extend_from_slice(row);
        }
        Tensor::from_vec(vec![rows, cols], data)
    }

    /// Scored positions: every target token plus the closing eos.
    fn target_len(&self) -> usize {
        self.tokens.len() + 1
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_cer: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct CheckpointMetrics {
    pub train_loss: Option<f64>,
    pub dev_loss: Option<f64>,
    pub dev_cer: Option<f64>,
}

pub struct TrainArtifacts {
    pub final_snapshot: ParamSnapshot,
    pub final_step: usize,
    pub best_snapshot: ParamSnapshot,
    pub best_step: usize,
    pub best_dev_loss: f64,
    pub metrics: Vec<MetricsRow>,
    /// Set when the loop aborted on a non-finite loss; the snapshots then
    /// hold the last good parameters.
    pub diverged_at: Option<usize>,
}

fn item_loss(model: &Network, item: &TrainExample, ctx: &mut ForwardCtx<'_>) -> XmResult<(Tensor, usize)> {
    let frames = item.frames_tensor();
    let logp = match &item.hyp {
        None => model.asr_forward(&frames, &item.tokens, ctx)?,
        Some(hyp) => model.corrector_forward(&frames, hyp, &item.tokens, ctx)?,
    };
    let mut targets = item.tokens.clone();
    targets.push(crate::models::EOS_ID);
    let (sum, count) = cross_entropy_sum(&logp, &targets, PAD_ID)?;
    Ok((sum, count))
}

/// Teacher-forced token accuracy over a set of examples: the fraction of
/// scored positions (targets plus eos) whose argmax matches the target.
pub fn teacher_forced_accuracy(
    config: &ModelConfig,
    snapshot: &ParamSnapshot,
    items: &[TrainExample],
    workers: usize,
) -> XmResult<f64> {
    let counts = parallel_map(
        items,
        workers,
        || Network::from_snapshot(config.clone(), snapshot),
        |model, _, item| {
            let _g = no_grad();
            let frames = item.frames_tensor();
            let logp = match &item.hyp {
                None => model.asr_forward(&frames, &item.tokens, &mut ForwardCtx::eval())?,
                Some(h) => {
                    model.corrector_forward(&frames, h, &item.tokens, &mut ForwardCtx::eval())?
                }
            };
            let v = model.vocab_size();
            let data = logp.to_vec();
            let mut targets = item.tokens.clone();
            targets.push(crate::models::EOS_ID);
            let mut hit = 0usize;
            for (t, &tok) in targets.iter().enumerate() {
                let row = &data[t * v..(t + 1) * v];
                let mut best = 0usize;
                for (i, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = i;
                    }
                }
                if best as TokenId == tok {
                    hit += 1;
                }
            }
            Ok((hit, targets.len()))
        },
    )?;
    let (hits, total) = counts.iter().fold((0usize, 0usize), |acc, &(h, t)| (acc.0 + h, acc.1 + t));
    Ok(hits as f64 / total as f64)
}

/// Dev-set metrics on a read-only snapshot: mean per-token NLL plus greedy
/// decode CER (the corrector decodes conditioned on its stored hypothesis).
fn dev_metrics(
    config: &ModelConfig,
    snapshot: &ParamSnapshot,
    dev: &[TrainExample],
    workers: usize,
) -> XmResult<(f64, f64)> {
    let rows = parallel_map(
        dev,
        workers,
        || Network::from_snapshot(config.clone(), snapshot),
        |model, _, item| {
            let _g = no_grad();
            let (loss_sum, count) = item_loss(model, item, &mut ForwardCtx::eval())?;
            let frames = item.frames_tensor();
            let scorer = match &item.hyp {
                None => ModelScorer::recognizer(model, &frames)?,
                Some(h) => ModelScorer::corrector(model, &frames, h)?,
            };
            let max_len = 2 * scorer.source_len() + 4;
            let hyp = greedy_decode(&scorer, max_len)?;
            let counts = cer(&item.tokens, &hyp.tokens);
            Ok((loss_sum.value(), count, counts))
        },
    )?;
    let mut nll = 0.0;
    let mut tokens = 0usize;
    let mut edits = EditCounts::default();
    for (sum, count, counts) in rows {
        nll += sum;
        tokens += count;
        edits.add(&counts);
    }
    Ok((nll / tokens as f64, edits.cer()))
}

/// Deterministic epoch batching: shuffle from the seed, then sort within
/// coarse windows by source length so batches hold similar-length sources.
fn epoch_batches(
    n_items: usize,
    lens: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n_items).collect();
    let mut rng = Rng::stream(seed, "shuffle", epoch);
    rng.shuffle(&mut idx);
    let window = (batch_size * 8).max(1);
    for chunk in idx.chunks_mut(window) {
        chunk.sort_by_key(|&i| (lens[i], i));
    }
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(|c| c.to_vec()).collect();
    let order_rng = &mut Rng::stream(seed, "batch-order", epoch);
    order_rng.shuffle(&mut batches);
    batches
}

/// Shared mini-batch loop: Adam with the warmup schedule, global-norm
/// clipping, periodic dev evaluation, best-dev snapshot retention.
pub fn train(
    config: &ModelConfig,
    tcfg: &TrainConfig,
    train_items: &[TrainExample],
    dev_items: &[TrainExample],
    workers: usize,
) -> XmResult<TrainArtifacts> {
    config.validate()?;
    tcfg.validate()?;
    if tcfg.warmup > tcfg.total_steps {
        eprintln!(
            "warning: warmup ({}) exceeds total_steps ({}); the schedule never peaks",
            tcfg.warmup, tcfg.total_steps
        );
    }
    if train_items.is_empty() {
        return Err(XmError::InvalidArgument("empty training set".into()));
    }
    if dev_items.is_empty() {
        return Err(XmError::InvalidArgument(
            "empty dev set: periodic evaluation and best-checkpoint tracking need one".into(),
        ));
    }
    for item in train_items.iter().chain(dev_items) {
        if item.hyp.is_some() != config.arch.is_corrector() {
            return Err(XmError::InvalidArgument(
                "training items do not match the architecture (hypothesis presence)".into(),
            ));
        }
        for &tok in item.tokens.iter().chain(item.hyp.iter().flatten()) {
            if !config.vocab.contains_id(tok) {
                return Err(XmError::VocabOutOfRange { id: tok, vocab_size: config.vocab.size() });
            }
        }
    }

    let mut init_rng = Rng::stream(tcfg.seed, "init", 0);
    let model = Network::new(config.clone(), crate::numerics::ParamInit::Fresh(&mut init_rng))?;
    let mut opt = OptimizerState::adam_default(&model.registry);
    let lens: Vec<usize> = train_items.iter().map(|e| e.frames.len()).collect();

    let mut metrics = Vec::new();
    let mut best_dev_loss = f64::INFINITY;
    let mut best_snapshot = model.registry.snapshot();
    let mut best_step = 0usize;
    let mut last_good = model.registry.snapshot();
    let mut running_loss = 0.0;
    let mut running_count = 0usize;

    let mut epoch = 0u64;
    let mut batches = epoch_batches(train_items.len(), &lens, tcfg.batch_size, tcfg.seed, epoch);
    let mut batch_cursor = 0usize;

    for step in 1..=tcfg.total_steps {
        if batch_cursor >= batches.len() {
            epoch += 1;
            batches = epoch_batches(train_items.len(), &lens, tcfg.batch_size, tcfg.seed, epoch);
            batch_cursor = 0;
        }
        let batch = &batches[batch_cursor];
        batch_cursor += 1;

        let total_tokens: usize = batch.iter().map(|&i| train_items[i].target_len()).sum();
        let scale = 1.0 / total_tokens as f64;
        let snapshot = model.registry.snapshot();
        let dropout_p = if tcfg.dropout { config.layer.dropout_p } else { 0.0 };
        let seed = tcfg.seed;

        // per-item gradients, merged in batch order so the worker count
        // cannot perturb the result
        let batch_refs: Vec<usize> = batch.clone();
        let results = parallel_map(
            &batch_refs,
            workers,
            || Network::from_snapshot(config.clone(), &snapshot),
            |worker_model, slot, &item_idx| {
                let item = &train_items[item_idx];
                let mut rng =
                    Rng::stream(seed, "dropout", (step as u64) << 20 | slot as u64);
                let mut ctx = ForwardCtx::train(&mut rng, dropout_p);
                let (loss_sum, _) = item_loss(worker_model, item, &mut ctx)?;
                let scaled = ops::scale(&loss_sum, scale);
                scaled.backward()?;
                let grads = worker_model.registry.grads()?;
                worker_model.registry.zero_grads();
                Ok((scaled.value(), grads))
            },
        )?;

        let mut batch_loss = 0.0;
        for (loss, grads) in &results {
            batch_loss += loss;
            model.registry.accumulate_grads(grads);
        }
        if !batch_loss.is_finite() {
            eprintln!("training diverged at step {step}: batch loss {batch_loss}");
            return Ok(TrainArtifacts {
                final_snapshot: last_good.clone(),
                final_step: step - 1,
                best_snapshot,
                best_step,
                best_dev_loss,
                metrics,
                diverged_at: Some(step),
            });
        }
        clip_gradients(&model.registry, tcfg.grad_clip_norm)?;
        let lr = noam_lr(step, config.layer.d_model, tcfg.warmup);
        adam_step(&model.registry, &mut opt, lr)?;
        last_good = model.registry.snapshot();
        running_loss += batch_loss;
        running_count += 1;

        if step % tcfg.eval_every == 0 || step == tcfg.total_steps {
            let snapshot = model.registry.snapshot();
            let (dev_loss, dev_cer) = dev_metrics(config, &snapshot, dev_items, workers)?;
            let train_loss = running_loss / running_count.max(1) as f64;
            running_loss = 0.0;
            running_count = 0;
            metrics.push(MetricsRow { step, lr, train_loss, dev_loss, dev_cer });
            if dev_loss.is_finite() && dev_loss < best_dev_loss {
                best_dev_loss = dev_loss;
                best_snapshot = snapshot;
                best_step = step;
            }
        }
    }

    if !best_dev_loss.is_finite() {
        best_snapshot = model.registry.snapshot();
        best_step = tcfg.total_steps;
    }
    Ok(TrainArtifacts {
        final_snapshot: model.registry.snapshot(),
        final_step: tcfg.total_steps,
        best_snapshot,
        best_step,
        best_dev_loss,
        metrics,
        diverged_at: None,
    })
}

/// Train the first-pass recognizer on a corpus.
pub fn train_asr(
    corpus: &Corpus,
    dev: &Corpus,
    config: &ModelConfig,
    tcfg: &TrainConfig,
    workers: usize,
) -> XmResult<TrainArtifacts> {
    if config.arch != Architecture::Asr {
        return Err(XmError::InvalidArgument("train_asr needs the asr architecture".into()));
    }
    let items: Vec<TrainExample> =
        corpus.utterances.iter().map(TrainExample::from_utterance).collect();
    let dev_items: Vec<TrainExample> =
        dev.utterances.iter().map(TrainExample::from_utterance).collect();
    train(config, tcfg, &items, &dev_items, workers)
}

/// Train a corrector (either architecture) on correction triples.
pub fn train_corrector(
    triples: &[CorrectionTriple],
    dev_triples: &[CorrectionTriple],
    config: &ModelConfig,
    tcfg: &TrainConfig,
    workers: usize,
) -> XmResult<TrainArtifacts> {
    if !config.arch.is_corrector() {
        return Err(XmError::InvalidArgument(
            "train_corrector needs cross_modal or separate architecture".into(),
        ));
    }
    let items: Vec<TrainExample> = triples.iter().map(TrainExample::from_triple).collect();
    let dev_items: Vec<TrainExample> = dev_triples.iter().map(TrainExample::from_triple).collect();
    train(config, tcfg, &items, &dev_items, workers)
}

// ── checkpoints ─────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: ModelConfig,
    params: Vec<(String, Vec<usize>)>,
    step: u64,
    metrics: CheckpointMetrics,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub metrics: CheckpointMetrics,
    pub snapshot: ParamSnapshot,
}

impl Checkpoint {
    pub fn from_snapshot(
        config: &ModelConfig,
        snapshot: &ParamSnapshot,
        step: usize,
        metrics: CheckpointMetrics,
    ) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            step: step as u64,
            metrics,
            snapshot: snapshot.clone(),
        }
    }

    /// Rebuild the network; the registry must consume exactly the stored
    /// parameters in the stored order.
    pub fn build_network(&self) -> XmResult<Network> {
        let net = Network::from_snapshot(self.config.clone(), &self.snapshot)?;
        let stored: Vec<&str> = self.snapshot.entries.iter().map(|(n, _, _)| n.as_str()).collect();
        let rebuilt: Vec<&str> = net.registry.iter().map(|(n, _)| n).collect();
        if stored != rebuilt {
            return Err(XmError::Checkpoint(format!(
                "parameter list mismatch: stored {} names, architecture wants {}",
                stored.len(),
                rebuilt.len()
            )));
        }
        Ok(net)
    }

    pub fn ensure_arch(&self, arch: Architecture) -> XmResult<()> {
        if self.config.arch != arch {
            return Err(XmError::Checkpoint(format!(
                "expected a {} checkpoint, found {}",
                arch.label(),
                self.config.arch.label()
            )));
        }
        Ok(())
    }
}

/// Layout: magic "NCMK1", u64 LE header length, JSON header, then the
/// little-endian f64 payload in registry order.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> XmResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: ckpt.config.clone(),
        params: ckpt
            .snapshot
            .entries
            .iter()
            .map(|(n, s, _)| (n.clone(), s.clone()))
            .collect(),
        step: ckpt.step,
        metrics: ckpt.metrics.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for (_, _, data) in &ckpt.snapshot.entries {
        for v in data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> XmResult<Checkpoint> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 5];
    file.read_exact(&mut magic)
        .map_err(|_| XmError::Checkpoint("file too short for magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(XmError::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| XmError::Checkpoint("file too short for header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| XmError::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| XmError::Checkpoint(format!("header parse: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(XmError::Checkpoint(format!(
            "format version {} unsupported (expected {})",
            header.format_version, CHECKPOINT_VERSION
        )));
    }
    let mut entries = Vec::with_capacity(header.params.len());
    for (name, shape) in &header.params {
        let count: usize = shape.iter().product();
        let mut buf = vec![0u8; count * 8];
        file.read_exact(&mut buf).map_err(|_| {
            XmError::Checkpoint(format!("truncated payload at parameter '{name}'"))
        })?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name.clone(), shape.clone(), data));
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(XmError::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(Checkpoint {
        config: header.config,
        step: header.step,
        metrics: header.metrics,
        snapshot: ParamSnapshot { entries },
    })
}

#[cfg(test)]
mod tests;
