//! Drives the C ABI the way a foreign binding would: through raw pointers
//! and status codes, cross-checked against the core library.

use std::ffi::{CStr, CString};

use xmodal::decoding::{beam_search, FusionConfig, ModelScorer, StepScorer};
use xmodal::layers::LayerConfig;
use xmodal::models::{Architecture, ModelConfig, Network, Vocabulary};
use xmodal::numerics::{ParamInit, Rng, Tensor};
use xmodal::training::{save_checkpoint, Checkpoint, CheckpointMetrics};

use xmodal_ffi::{
    xm_decode, xm_edit_counts, xm_generate_corpus, xm_last_error_message, xm_model_arch,
    xm_model_free, xm_model_load, xm_model_param_count, xm_model_render, xm_model_vocab_size,
    xm_two_pass_decode, xm_version, XmEditCounts, XmStatus,
};

fn temp_dir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("xmodal-ffi-{tag}"));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_checkpoint(arch: Architecture, seed: u64, path: &std::path::Path) -> Network {
    let config = ModelConfig {
        arch,
        layer: LayerConfig { d_model: 16, num_heads: 2, ffn_dim: 32, dropout_p: 0.0 },
        encoder_blocks: 1,
        decoder_blocks: 1,
        speech_encoder_blocks: 1,
        vocab: Vocabulary::synthetic(10),
        feature_dim: 8,
        max_source_len: 128,
        max_target_len: 32,
    };
    let mut rng = Rng::seed_from_u64(seed);
    let net = Network::new(config.clone(), ParamInit::Fresh(&mut rng)).unwrap();
    let ckpt = Checkpoint::from_snapshot(
        &config,
        &net.registry.snapshot(),
        0,
        CheckpointMetrics::default(),
    );
    save_checkpoint(path, &ckpt).unwrap();
    net
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(xm_last_error_message()).to_string_lossy().into_owned() }
}

#[test]
fn version_is_a_static_string() {
    let v = unsafe { CStr::from_ptr(xm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn load_decode_matches_direct_library_calls() {
    let dir = temp_dir("decode");
    let ckpt_path = dir.join("asr.ckpt");
    let net = tiny_checkpoint(Architecture::Asr, 42, &ckpt_path);

    let mut handle: *mut xmodal_ffi::XmModel = std::ptr::null_mut();
    let c_path = CString::new(ckpt_path.to_str().unwrap()).unwrap();
    let status = unsafe { xm_model_load(c_path.as_ptr(), &mut handle) };
    assert_eq!(status, XmStatus::Ok, "{}", last_error());
    assert!(!handle.is_null());
    unsafe {
        assert_eq!(xm_model_param_count(handle), net.param_count());
        assert_eq!(xm_model_vocab_size(handle), net.vocab_size());
        let arch = CStr::from_ptr(xm_model_arch(handle)).to_str().unwrap();
        assert_eq!(arch, "asr");
    }

    let mut rng = Rng::seed_from_u64(9);
    let n_frames = 10usize;
    let frames: Vec<f64> = (0..n_frames * 8).map(|_| rng.uniform_in(-1.0, 1.0)).collect();

    let mut tokens = vec![0u32; 64];
    let mut len = 0usize;
    let mut score = 0.0f64;
    let status = unsafe {
        xm_decode(
            handle,
            frames.as_ptr(),
            n_frames,
            8,
            4,
            tokens.as_mut_ptr(),
            tokens.len(),
            &mut len,
            &mut score,
        )
    };
    assert_eq!(status, XmStatus::Ok, "{}", last_error());

    // the same decode through the library directly
    let tensor = Tensor::from_vec(vec![n_frames, 8], frames.clone());
    let scorer = ModelScorer::recognizer(&net, &tensor).unwrap();
    let cfg = FusionConfig { beam_size: 4, ..Default::default() };
    let expect = beam_search(&scorer, 4, cfg.max_len(scorer.source_len())).unwrap().remove(0);
    assert_eq!(&tokens[..len], expect.tokens.as_slice());
    assert_eq!(score.to_bits(), expect.score.to_bits());

    // render the tokens as text
    let mut buf = vec![0i8; 256];
    let mut text_len = 0usize;
    let status = unsafe {
        xm_model_render(handle, tokens.as_ptr(), len, buf.as_mut_ptr(), buf.len(), &mut text_len)
    };
    assert_eq!(status, XmStatus::Ok);
    let text = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    assert_eq!(text.len() + 1, text_len);

    unsafe { xm_model_free(handle) };
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn two_pass_runs_and_respects_alpha_zero() {
    let dir = temp_dir("two-pass");
    let asr_path = dir.join("asr.ckpt");
    let corr_path = dir.join("corr.ckpt");
    tiny_checkpoint(Architecture::Asr, 50, &asr_path);
    tiny_checkpoint(Architecture::CrossModal, 51, &corr_path);

    let mut asr: *mut xmodal_ffi::XmModel = std::ptr::null_mut();
    let mut corr: *mut xmodal_ffi::XmModel = std::ptr::null_mut();
    let c_asr = CString::new(asr_path.to_str().unwrap()).unwrap();
    let c_corr = CString::new(corr_path.to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(xm_model_load(c_asr.as_ptr(), &mut asr), XmStatus::Ok);
        assert_eq!(xm_model_load(c_corr.as_ptr(), &mut corr), XmStatus::Ok);
    }

    let mut rng = Rng::seed_from_u64(3);
    let frames: Vec<f64> = (0..12 * 8).map(|_| rng.uniform_in(-1.0, 1.0)).collect();

    let decode_fused = |alpha: f64| {
        let mut tokens = vec![0u32; 64];
        let mut len = 0usize;
        let status = unsafe {
            xm_two_pass_decode(
                asr,
                corr,
                frames.as_ptr(),
                12,
                8,
                alpha,
                4,
                tokens.as_mut_ptr(),
                tokens.len(),
                &mut len,
                std::ptr::null_mut(),
            )
        };
        assert_eq!(status, XmStatus::Ok, "{}", last_error());
        tokens[..len].to_vec()
    };
    let decode_baseline = || {
        let mut tokens = vec![0u32; 64];
        let mut len = 0usize;
        let status = unsafe {
            xm_decode(
                asr,
                frames.as_ptr(),
                12,
                8,
                4,
                tokens.as_mut_ptr(),
                tokens.len(),
                &mut len,
                std::ptr::null_mut(),
            )
        };
        assert_eq!(status, XmStatus::Ok);
        tokens[..len].to_vec()
    };

    assert_eq!(decode_fused(0.0), decode_baseline(), "alpha 0 must reduce to the recognizer");
    let _ = decode_fused(0.7);

    unsafe {
        xm_model_free(asr);
        xm_model_free(corr);
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn edit_counts_match_core_and_reject_nulls() {
    let reference = [4u32, 5, 6, 7, 8];
    let hypothesis = [4u32, 9, 6, 10, 7, 8];
    let mut out = XmEditCounts::default();
    let status = unsafe {
        xm_edit_counts(reference.as_ptr(), 5, hypothesis.as_ptr(), 6, &mut out)
    };
    assert_eq!(status, XmStatus::Ok);
    let expect = xmodal::evaluation::cer(&reference, &hypothesis);
    assert_eq!(out.substitutions, expect.substitutions);
    assert_eq!(out.insertions, expect.insertions);
    assert_eq!(out.deletions, expect.deletions);
    assert_eq!(out.ref_len, 5);

    let status = unsafe {
        xm_edit_counts(std::ptr::null(), 3, hypothesis.as_ptr(), 6, &mut out)
    };
    assert_eq!(status, XmStatus::NullArgument);
}

#[test]
fn errors_surface_codes_and_messages() {
    let mut handle: *mut xmodal_ffi::XmModel = std::ptr::null_mut();
    let bad = CString::new("/nonexistent/x.ckpt").unwrap();
    let status = unsafe { xm_model_load(bad.as_ptr(), &mut handle) };
    assert_eq!(status, XmStatus::Runtime);
    assert!(!last_error().is_empty());

    let status = unsafe { xm_model_load(std::ptr::null(), &mut handle) };
    assert_eq!(status, XmStatus::NullArgument);

    // buffer-too-small reports the required capacity
    let dir = temp_dir("small-buffer");
    let ckpt_path = dir.join("asr.ckpt");
    tiny_checkpoint(Architecture::Asr, 60, &ckpt_path);
    let c_path = CString::new(ckpt_path.to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(xm_model_load(c_path.as_ptr(), &mut handle), XmStatus::Ok);
    }
    let mut rng = Rng::seed_from_u64(4);
    let frames: Vec<f64> = (0..8 * 8).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let mut one = [0u32; 1];
    let mut needed = 0usize;
    let status = unsafe {
        xm_decode(
            handle,
            frames.as_ptr(),
            8,
            8,
            2,
            one.as_mut_ptr(),
            1,
            &mut needed,
            std::ptr::null_mut(),
        )
    };
    if status == XmStatus::BufferTooSmall {
        assert!(needed > 1);
    } else {
        assert_eq!(status, XmStatus::Ok, "{}", last_error());
        assert!(needed <= 1);
    }
    unsafe { xm_model_free(handle) };
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn corpus_generation_writes_the_three_splits() {
    let dir = temp_dir("gen");
    let spec = CString::new(
        r#"{"train_size": 6, "dev_size": 2, "eval_size": 2, "vocab_size": 8, "feature_dim": 4,
            "confusable_pairs": [{"a": 0, "b": 1, "distance": 0.5}]}"#,
    )
    .unwrap();
    let out = CString::new(dir.to_str().unwrap()).unwrap();
    let status = unsafe { xm_generate_corpus(spec.as_ptr(), 11, out.as_ptr()) };
    assert_eq!(status, XmStatus::Ok, "{}", last_error());
    for split in ["train", "dev", "eval"] {
        assert!(dir.join(format!("{split}.jsonl")).exists());
    }

    let bad_spec = CString::new(r#"{"vocab_size": 1}"#).unwrap();
    let status = unsafe { xm_generate_corpus(bad_spec.as_ptr(), 11, out.as_ptr()) };
    assert_eq!(status, XmStatus::Validation);
    std::fs::remove_dir_all(&dir).ok();
}
