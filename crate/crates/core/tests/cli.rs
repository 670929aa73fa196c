//! Drives the installed binary the way a user would: argument parsing,
//! exit codes, output layout, and run-to-run determinism.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_xmodal"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("xmodal-cli-{tag}"));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const MICRO_CONFIG: &str = r#"{
  "task": {"train_size": 48, "dev_size": 12, "eval_size": 12, "vocab_size": 8,
           "feature_dim": 8, "utterance_len_min": 3, "utterance_len_max": 7,
           "confusable_pairs": [{"a": 0, "b": 1, "distance": 0.6}]},
  "model": {"d_model": 16, "num_heads": 2, "ffn_dim": 32,
            "encoder_blocks": 1, "decoder_blocks": 1, "speech_encoder_blocks": 1},
  "train": {"asr": {"batch_size": 8, "total_steps": 40, "warmup": 100, "eval_every": 20},
            "corrector": {"batch_size": 8, "total_steps": 30, "warmup": 100, "eval_every": 15}},
  "decode": {"alpha": 0.5, "beam_size": 2, "max_len_factor": 2.0, "max_len_offset": 4}
}"#;

fn write_micro_config(dir: &Path) -> PathBuf {
    let path = dir.join("micro.json");
    std::fs::write(&path, MICRO_CONFIG).unwrap();
    path
}

#[test]
fn help_covers_every_subcommand_and_flags() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "gen-data",
        "train-asr",
        "decode",
        "make-triples",
        "train-corrector",
        "fused-decode",
        "eval",
        "sweep-alpha",
        "dump-attention",
        "grad-check",
        "pipeline",
    ] {
        assert!(text.contains(sub), "--help must list {sub}");
        let sub_out = bin().args([sub, "--help"]).output().unwrap();
        assert!(sub_out.status.success(), "{sub} --help failed");
    }
    // flags of a representative subcommand are documented
    let sweep = String::from_utf8_lossy(
        &bin().args(["sweep-alpha", "--help"]).output().unwrap().stdout,
    )
    .to_string();
    for flag in ["--asr", "--corrector", "--data", "--alphas", "--out", "--workers", "--config"] {
        assert!(sweep.contains(flag), "sweep-alpha --help must document {flag}");
    }
}

#[test]
fn invalid_config_exits_one_and_names_the_field() {
    let dir = temp_dir("badcfg");
    let cfg = dir.join("bad.json");
    std::fs::write(&cfg, r#"{"task": {"vocab_size": 26, "wibble": 1}}"#).unwrap();
    let out = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .args(["--seed", "1", "--out"])
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("wibble"), "stderr must name the offending field: {err}");
    assert!(err.contains("bad.json"), "stderr must name the file: {err}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn missing_checkpoint_exits_two() {
    let dir = temp_dir("missing-ckpt");
    let out = bin()
        .args(["decode", "--asr"])
        .arg(dir.join("nope.ckpt"))
        .args(["--data"])
        .arg(dir.join("nope.jsonl"))
        .args(["--out"])
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gen_data_twice_is_byte_identical() {
    let dir = temp_dir("gen-deterministic");
    let cfg = write_micro_config(&dir);
    for sub in ["a", "b"] {
        let out = bin()
            .args(["gen-data", "--config"])
            .arg(&cfg)
            .args(["--seed", "9", "--out"])
            .arg(dir.join(sub))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in [
        "train.jsonl",
        "dev.jsonl",
        "eval.jsonl",
        "train.manifest.json",
        "effective_config.json",
    ] {
        let a = std::fs::read(dir.join("a").join(name)).unwrap();
        let b = std::fs::read(dir.join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn grad_check_reports_per_layer_and_exits_zero() {
    let out = bin().args(["grad-check", "--trials", "2", "--seed", "5"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "primitive/matmul",
        "primitive/softmax",
        "layer/encoder_block",
        "layer/speech_embedding",
        "model/asr_loss",
        "model/cross_modal_loss",
        "model/separate_loss",
    ] {
        assert!(text.contains(needle), "grad-check output must cover {needle}");
    }
    assert!(!text.contains("FAIL"));
}

/// The full pipeline, run twice at micro scale, produces byte-identical run
/// directories except for the one metadata file that holds timestamps.
#[test]
fn pipeline_reruns_are_byte_identical_outside_run_meta() {
    let dir = temp_dir("pipeline-deterministic");
    let cfg = write_micro_config(&dir);
    for sub in ["a", "b"] {
        let out = bin()
            .args(["pipeline", "--config"])
            .arg(&cfg)
            .args(["--seed", "7", "--out"])
            .arg(dir.join(sub))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut compared = 0usize;
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        for entry in std::fs::read_dir(dir.join("a").join(&rel)).unwrap() {
            let entry = entry.unwrap();
            let rel_path = rel.join(entry.file_name());
            if entry.file_type().unwrap().is_dir() {
                stack.push(rel_path);
                continue;
            }
            if rel_path.file_name().unwrap() == "run_meta.json" {
                continue; // timestamps live here, and only here
            }
            let a = std::fs::read(dir.join("a").join(&rel_path)).unwrap();
            let b_path = dir.join("b").join(&rel_path);
            let b = std::fs::read(&b_path)
                .unwrap_or_else(|_| panic!("{} missing in second run", b_path.display()));
            assert_eq!(a, b, "{} differs between identical runs", rel_path.display());
            compared += 1;
        }
    }
    assert!(compared > 20, "expected a full run tree, compared only {compared} files");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn sweep_alpha_grid_produces_eleven_rows() {
    let dir = temp_dir("sweep-grid");
    let cfg = write_micro_config(&dir);
    // build the pieces: data, recognizer, triples, corrector
    let run = |args: &[&str], extra: &[(&str, &Path)]| {
        let mut cmd = bin();
        cmd.args(args);
        for (flag, path) in extra {
            cmd.arg(flag).arg(path);
        }
        let out = cmd.output().unwrap();
        assert!(
            out.status.success(),
            "command {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let data = dir.join("data");
    run(
        &["gen-data", "--seed", "3"],
        &[("--config", cfg.as_path()), ("--out", data.as_path())],
    );
    let asr_dir = dir.join("asr");
    run(
        &["train-asr", "--seed", "3"],
        &[("--config", cfg.as_path()), ("--data", data.as_path()), ("--out", asr_dir.as_path())],
    );
    let asr_ckpt = asr_dir.join("asr.best.ckpt");
    let triples = dir.join("triples.jsonl");
    run(
        &["make-triples", "--noise-seed", "4"],
        &[
            ("--config", cfg.as_path()),
            ("--asr", asr_ckpt.as_path()),
            ("--data", data.join("train.jsonl").as_path()),
            ("--out", triples.as_path()),
        ],
    );
    let dev_triples = dir.join("dev_triples.jsonl");
    run(
        &["make-triples", "--noise-seed", "5"],
        &[
            ("--config", cfg.as_path()),
            ("--asr", asr_ckpt.as_path()),
            ("--data", data.join("dev.jsonl").as_path()),
            ("--out", dev_triples.as_path()),
        ],
    );
    let corr_dir = dir.join("corr");
    run(
        &["train-corrector", "--arch", "cross-modal", "--seed", "6"],
        &[
            ("--config", cfg.as_path()),
            ("--triples", triples.as_path()),
            ("--dev-triples", dev_triples.as_path()),
            ("--out", corr_dir.as_path()),
        ],
    );
    let csv = dir.join("sweep.csv");
    run(
        &[
            "sweep-alpha",
            "--alphas",
            "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0",
        ],
        &[
            ("--config", cfg.as_path()),
            ("--asr", asr_ckpt.as_path()),
            ("--corrector", corr_dir.join("cross_modal.best.ckpt").as_path()),
            ("--data", data.join("dev.jsonl").as_path()),
            ("--out", csv.as_path()),
        ],
    );
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 12, "header plus 11 grid rows");
    assert!(text.starts_with("alpha,cer,sub,ins,del\n"));

    // attention export from the corrector we just trained
    let attn = dir.join("attn");
    run(
        &["dump-attention", "--index", "0"],
        &[
            ("--corrector", corr_dir.join("cross_modal.best.ckpt").as_path()),
            ("--triples", triples.as_path()),
            ("--out", attn.as_path()),
        ],
    );
    assert!(attn.join("attention_summary.json").exists());
    assert!(attn.join("attn_block0_head0.pgm").exists());
    std::fs::remove_dir_all(&dir).ok();
}
