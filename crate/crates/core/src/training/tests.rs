use super::*;
use crate::layers::LayerConfig;
use crate::models::Vocabulary;
use crate::synthdata::{gen_corpus, TaskSpec};

fn tiny_spec(train: usize, dev: usize) -> TaskSpec {
    TaskSpec {
        vocab_size: 8,
        feature_dim: 8,
        utterance_len_min: 3,
        utterance_len_max: 6,
        confusable_pairs: vec![crate::synthdata::ConfusablePair { a: 0, b: 1, distance: 0.6 }],
        train_size: train,
        dev_size: dev,
        eval_size: 1,
        ..Default::default()
    }
}

fn tiny_model_config(arch: Architecture, spec: &TaskSpec) -> ModelConfig {
    ModelConfig {
        arch,
        layer: LayerConfig { d_model: 16, num_heads: 2, ffn_dim: 32, dropout_p: 0.1 },
        encoder_blocks: 1,
        decoder_blocks: 1,
        speech_encoder_blocks: 1,
        vocab: Vocabulary::synthetic(spec.vocab_size),
        feature_dim: spec.feature_dim,
        max_source_len: 128,
        max_target_len: 32,
    }
}

#[test]
fn cross_entropy_closed_forms() {
    // perfect one-hot prediction -> loss 0
    let v = 4;
    let mut perfect = vec![-1e9; 2 * v];
    perfect[1] = 0.0;
    perfect[v + 2] = 0.0;
    let logp = Tensor::from_vec(vec![2, v], perfect);
    let loss = cross_entropy_loss(&logp, &[1, 2], PAD_ID).unwrap();
    assert_eq!(loss.value(), 0.0);

    // uniform prediction -> ln V
    let uniform = vec![(1.0 / v as f64).ln(); 3 * v];
    let logp = Tensor::from_vec(vec![3, v], uniform);
    let loss = cross_entropy_loss(&logp, &[0, 3, 2], PAD_ID).unwrap();
    assert!((loss.value() - (v as f64).ln()).abs() < 1e-12);

    // two steps with probabilities 0.5 and 0.25 -> (ln 2 + ln 4) / 2
    let mut rows = vec![-9.0; 2 * v];
    rows[1] = 0.5f64.ln();
    rows[v + 3] = 0.25f64.ln();
    let logp = Tensor::from_vec(vec![2, v], rows);
    let loss = cross_entropy_loss(&logp, &[1, 3], PAD_ID).unwrap();
    let expect = (2f64.ln() + 4f64.ln()) / 2.0;
    assert!((loss.value() - expect).abs() < 1e-12, "{} vs {expect}", loss.value());
}

#[test]
fn cross_entropy_ignores_pad_and_rejects_all_pad() {
    let v = 5;
    let mut rows = vec![0.3f64.ln(); 4 * v];
    rows[2] = 0.5f64.ln();
    rows[v + 3] = 0.25f64.ln();
    let logp4 = Tensor::from_vec(vec![4, v], rows.clone());
    let with_pads = cross_entropy_loss(&logp4, &[2, 3, PAD_ID, PAD_ID], PAD_ID).unwrap();
    let logp2 = Tensor::from_vec(vec![2, v], rows[..2 * v].to_vec());
    let without = cross_entropy_loss(&logp2, &[2, 3], PAD_ID).unwrap();
    assert!((with_pads.value() - without.value()).abs() < 1e-9, "padding changed the loss");

    let err = cross_entropy_loss(&logp4, &[PAD_ID; 4], PAD_ID).unwrap_err();
    assert!(err.to_string().contains("all-pad"), "{err}");
}

#[test]
fn metrics_line_count_is_ceil_of_steps_over_eval_every() {
    let spec = tiny_spec(12, 3);
    let (train_c, dev_c, _) = gen_corpus(&spec, 5).unwrap();
    let config = tiny_model_config(Architecture::Asr, &spec);
    let tcfg = TrainConfig {
        batch_size: 4,
        total_steps: 10,
        warmup: 40,
        eval_every: 4,
        seed: 2,
        dropout: false,
        grad_clip_norm: 5.0,
    };
    let arts = train_asr(&train_c, &dev_c, &config, &tcfg, 1).unwrap();
    assert_eq!(arts.metrics.len(), 3); // ceil(10 / 4)
    assert_eq!(arts.metrics.last().unwrap().step, 10);
    assert!(arts.diverged_at.is_none());
}

#[test]
fn short_training_reduces_dev_loss() {
    let spec = tiny_spec(60, 12);
    let (train_c, dev_c, _) = gen_corpus(&spec, 7).unwrap();
    let config = tiny_model_config(Architecture::Asr, &spec);
    let tcfg = TrainConfig {
        batch_size: 8,
        total_steps: 200,
        warmup: 400,
        eval_every: 20,
        seed: 3,
        dropout: false,
        grad_clip_norm: 5.0,
    };
    let arts = train_asr(&train_c, &dev_c, &config, &tcfg, 1).unwrap();
    let first = arts.metrics.first().unwrap().dev_loss;
    let last = arts.metrics.last().unwrap().dev_loss;
    assert!(last < first, "dev loss must descend: {first} -> {last}");
    let ln_v = (config.vocab.size() as f64).ln();
    assert!(last < 0.98 * ln_v, "final dev loss {last} vs uniform {ln_v}");
}

#[test]
fn training_is_reproducible_and_worker_count_invariant() {
    let spec = tiny_spec(24, 4);
    let (train_c, dev_c, _) = gen_corpus(&spec, 9).unwrap();
    let config = tiny_model_config(Architecture::Asr, &spec);
    let tcfg = TrainConfig {
        batch_size: 6,
        total_steps: 12,
        warmup: 50,
        eval_every: 6,
        seed: 4,
        dropout: true,
        grad_clip_norm: 5.0,
    };
    let run = |workers: usize| {
        let arts = train_asr(&train_c, &dev_c, &config, &tcfg, workers).unwrap();
        let ckpt = Checkpoint::from_snapshot(
            &config,
            &arts.final_snapshot,
            arts.final_step,
            CheckpointMetrics::default(),
        );
        let dir = std::env::temp_dir().join(format!("xmodal-train-repro-{workers}"));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ck.bin");
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::remove_dir_all(&dir).ok();
        (bytes, serde_json::to_vec(&arts.metrics).unwrap())
    };
    let (bytes_a, metrics_a) = run(1);
    let (bytes_b, metrics_b) = run(1);
    assert_eq!(bytes_a, bytes_b, "same seed must give byte-identical checkpoints");
    assert_eq!(metrics_a, metrics_b);
    let (bytes_c, metrics_c) = run(3);
    assert_eq!(bytes_a, bytes_c, "worker count must not change the result");
    assert_eq!(metrics_a, metrics_c);
}

#[test]
fn overfitting_a_tiny_corpus_memorizes_it() {
    let spec = tiny_spec(20, 4);
    let (train_c, dev_c, _) = gen_corpus(&spec, 11).unwrap();
    let config = tiny_model_config(Architecture::Asr, &spec);
    let tcfg = TrainConfig {
        batch_size: 10,
        total_steps: 800,
        warmup: 100,
        eval_every: 200,
        seed: 5,
        dropout: false,
        grad_clip_norm: 5.0,
    };
    let arts = train_asr(&train_c, &dev_c, &config, &tcfg, 1).unwrap();
    let items: Vec<TrainExample> =
        train_c.utterances.iter().map(TrainExample::from_utterance).collect();
    let acc = teacher_forced_accuracy(&config, &arts.final_snapshot, &items, 1).unwrap();
    assert!(acc > 0.99, "memorization accuracy {acc}");

    // a (near-)perfect recognizer decoding its own corpus without extra
    // noise yields hypotheses equal to the references
    let net = Checkpoint::from_snapshot(
        &config,
        &arts.final_snapshot,
        arts.final_step,
        CheckpointMetrics::default(),
    )
    .build_network()
    .unwrap();
    let (triples, stats) = crate::synthdata::make_triples(&net, &train_c, 1, 0.0, 1).unwrap();
    assert!(
        stats.hypothesis_cer < 0.05,
        "memorized recognizer should reproduce its corpus, CER {}",
        stats.hypothesis_cer
    );
    assert_eq!(triples.len(), train_c.utterances.len());
    // the exact C == W / zero-CER form of this check lives in the
    // reference-scorer oracle test, where step probabilities are pinned to 1
}

#[test]
fn divergence_aborts_with_last_good_snapshot() {
    let spec = tiny_spec(8, 2);
    let (mut train_c, dev_c, _) = gen_corpus(&spec, 13).unwrap();
    // poison one utterance so the loss is NaN from step one
    train_c.utterances[0].frames[0][0] = f64::NAN;
    let config = tiny_model_config(Architecture::Asr, &spec);
    let tcfg = TrainConfig {
        batch_size: 8,
        total_steps: 6,
        warmup: 10,
        eval_every: 2,
        seed: 6,
        dropout: false,
        grad_clip_norm: 5.0,
    };
    let arts = train_asr(&train_c, &dev_c, &config, &tcfg, 1).unwrap();
    assert_eq!(arts.diverged_at, Some(1));
    assert!(arts.final_snapshot.entries.iter().all(|(_, _, d)| d.iter().all(|x| x.is_finite())));
}

#[test]
fn corrector_training_accepts_both_architectures() {
    let spec = tiny_spec(16, 4);
    let (train_c, dev_c, _) = gen_corpus(&spec, 15).unwrap();
    // oracle triples: hypothesis equals the reference
    let triples: Vec<CorrectionTriple> = train_c
        .utterances
        .iter()
        .map(|u| CorrectionTriple {
            id: u.id.clone(),
            tokens: u.tokens.clone(),
            frames: u.frames.clone(),
            hyp: u.tokens.clone(),
        })
        .collect();
    let dev_triples: Vec<CorrectionTriple> = dev_c
        .utterances
        .iter()
        .map(|u| CorrectionTriple {
            id: u.id.clone(),
            tokens: u.tokens.clone(),
            frames: u.frames.clone(),
            hyp: u.tokens.clone(),
        })
        .collect();
    let tcfg = TrainConfig {
        batch_size: 8,
        total_steps: 4,
        warmup: 20,
        eval_every: 2,
        seed: 7,
        dropout: false,
        grad_clip_norm: 5.0,
    };
    let mut counts = Vec::new();
    for arch in [Architecture::CrossModal, Architecture::Separate] {
        let config = tiny_model_config(arch, &spec);
        let arts = train_corrector(&triples, &dev_triples, &config, &tcfg, 1).unwrap();
        assert_eq!(arts.metrics.len(), 2);
        let net = Checkpoint::from_snapshot(
            &config,
            &arts.final_snapshot,
            arts.final_step,
            CheckpointMetrics::default(),
        )
        .build_network()
        .unwrap();
        counts.push(net.param_count());
    }
    assert_ne!(counts[0], counts[1], "architectures have different parameter counts");
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let spec = tiny_spec(4, 1);
    let config = tiny_model_config(Architecture::CrossModal, &spec);
    let mut rng = crate::numerics::Rng::seed_from_u64(31);
    let net = Network::new(config.clone(), crate::numerics::ParamInit::Fresh(&mut rng)).unwrap();
    let ckpt = Checkpoint::from_snapshot(
        &config,
        &net.registry.snapshot(),
        17,
        CheckpointMetrics { train_loss: Some(1.25), dev_loss: Some(2.5), dev_cer: Some(0.125) },
    );
    let dir = std::env::temp_dir().join("xmodal-ckpt-test");
    std::fs::create_dir_all(&dir).unwrap();
    let p1 = dir.join("a.bin");
    let p2 = dir.join("b.bin");
    save_checkpoint(&p1, &ckpt).unwrap();
    let loaded = load_checkpoint(&p1).unwrap();
    assert_eq!(loaded.step, 17);
    assert_eq!(loaded.config, config);
    save_checkpoint(&p2, &loaded).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    // parameters survive bit-exactly
    for ((_, _, a), (_, _, b)) in ckpt.snapshot.entries.iter().zip(&loaded.snapshot.entries) {
        let a_bits: Vec<u64> = a.iter().map(|x| x.to_bits()).collect();
        let b_bits: Vec<u64> = b.iter().map(|x| x.to_bits()).collect();
        assert_eq!(a_bits, b_bits);
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn checkpoint_rejects_corruption() {
    let spec = tiny_spec(4, 1);
    let config = tiny_model_config(Architecture::Asr, &spec);
    let mut rng = crate::numerics::Rng::seed_from_u64(32);
    let net = Network::new(config.clone(), crate::numerics::ParamInit::Fresh(&mut rng)).unwrap();
    let ckpt = Checkpoint::from_snapshot(
        &config,
        &net.registry.snapshot(),
        1,
        CheckpointMetrics::default(),
    );
    let dir = std::env::temp_dir().join("xmodal-ckpt-corrupt");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("ck.bin");
    save_checkpoint(&path, &ckpt).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    // truncated payload
    std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");

    // bad magic
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(err.to_string().contains("magic"), "{err}");

    // trailing junk
    let mut long = bytes.clone();
    long.push(0);
    std::fs::write(&path, &long).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(err.to_string().contains("trailing"), "{err}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn foreign_architecture_checkpoint_is_rejected() {
    let spec = tiny_spec(4, 1);
    let config = tiny_model_config(Architecture::Asr, &spec);
    let mut rng = crate::numerics::Rng::seed_from_u64(33);
    let net = Network::new(config.clone(), crate::numerics::ParamInit::Fresh(&mut rng)).unwrap();
    let mut ckpt = Checkpoint::from_snapshot(
        &config,
        &net.registry.snapshot(),
        1,
        CheckpointMetrics::default(),
    );
    assert!(ckpt.ensure_arch(Architecture::CrossModal).is_err());
    // swapping in a foreign config makes the parameter list inconsistent
    ckpt.config = tiny_model_config(Architecture::Separate, &spec);
    assert!(ckpt.build_network().is_err());
}
