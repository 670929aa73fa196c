//! Command-line surface: every stage of the pipeline as a subcommand, plus
//! `pipeline` which runs the whole sequence from one config and seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{XmError, XmResult};
use crate::evaluation::{
    dump_attention, evaluate_system, sweep_alpha, write_sweep_csv, AttentionSummary, CerReport,
    SweepPoint, SystemKind,
};
use crate::models::{Architecture, Network};
use crate::numerics::Rng;
use crate::synthdata::{
    gen_corpus, make_triples, Corpus, CorpusManifest, CorrectionTriple, TaskSpec, TripleStats,
    Utterance, GENERATOR_VERSION,
};
use crate::training::{
    load_checkpoint, save_checkpoint, train_asr, train_corrector, Checkpoint, CheckpointMetrics,
    TrainArtifacts,
};
use crate::util::{read_jsonl, write_json, write_jsonl};

#[derive(Parser, Debug)]
#[command(
    name = "xmodal",
    version,
    about = "Two-pass sequence recognition and correction lab on synthetic speech-like data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Run configuration JSON (defaults apply when omitted)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads for utterance-parallel stages
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

impl CommonArgs {
    fn load(&self) -> XmResult<RunConfig> {
        match &self.config {
            Some(path) => RunConfig::load(path),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic train/dev/eval corpora
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Corpus seed
        #[arg(long)]
        seed: u64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the first-pass recognizer
    TrainAsr {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding train.jsonl and dev.jsonl
        #[arg(long)]
        data: PathBuf,
        /// Training seed
        #[arg(long)]
        seed: u64,
        /// Output directory for checkpoints and metrics
        #[arg(long)]
        out: PathBuf,
    },
    /// Recognizer-only beam decoding of a corpus, with an error report
    Decode {
        #[command(flatten)]
        common: CommonArgs,
        /// Recognizer checkpoint
        #[arg(long)]
        asr: PathBuf,
        /// Corpus JSON-lines file
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Beam width override
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Build correction triples by decoding a corpus under feature noise
    MakeTriples {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        asr: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output triples JSON-lines file
        #[arg(long)]
        out: PathBuf,
        /// Seed of the re-sampled feature noise
        #[arg(long)]
        noise_seed: u64,
    },
    /// Train a hypothesis corrector
    TrainCorrector {
        #[command(flatten)]
        common: CommonArgs,
        /// Corrector architecture: cross-modal or separate
        #[arg(long)]
        arch: ArchArg,
        /// Training triples JSON-lines file
        #[arg(long)]
        triples: PathBuf,
        /// Dev triples JSON-lines file
        #[arg(long)]
        dev_triples: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-pass decoding with recognizer/corrector fusion
    FusedDecode {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        asr: PathBuf,
        #[arg(long)]
        corrector: PathBuf,
        /// Corrector weight in [0, 1]
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one system on a corpus
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// System: baseline, separate, separate+sf, cross-modal, cross-modal+sf
        #[arg(long)]
        system: SystemArg,
        #[arg(long)]
        asr: PathBuf,
        #[arg(long)]
        corrector: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fusion weight override for the +sf systems
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Fused CER across a grid of corrector weights
    SweepAlpha {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        asr: PathBuf,
        #[arg(long)]
        corrector: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated weights, e.g. 0,0.1,0.2
        #[arg(long)]
        alphas: String,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Export cross-modal encoder self-attention for one triple
    DumpAttention {
        #[command(flatten)]
        common: CommonArgs,
        /// Cross-modal corrector checkpoint
        #[arg(long)]
        corrector: PathBuf,
        /// Triples JSON-lines file
        #[arg(long)]
        triples: PathBuf,
        /// Which triple to visualize
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference verification of every primitive, layer, and loss
    GradCheck {
        /// Random shapes per primitive
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 12345)]
        seed: u64,
    },
    /// Run the full sequence: data, recognizer, triples, both correctors,
    /// weight sweeps, evaluation, attention export
    Pipeline {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        seed: u64,
        /// Run directory (falls back to the config's paths.run_dir)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum ArchArg {
    #[value(name = "cross-modal")]
    CrossModal,
    #[value(name = "separate")]
    Separate,
}

impl From<ArchArg> for Architecture {
    fn from(a: ArchArg) -> Architecture {
        match a {
            ArchArg::CrossModal => Architecture::CrossModal,
            ArchArg::Separate => Architecture::Separate,
        }
    }
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum SystemArg {
    Baseline,
    Separate,
    #[value(name = "separate+sf")]
    SeparateSf,
    #[value(name = "cross-modal")]
    CrossModal,
    #[value(name = "cross-modal+sf")]
    CrossModalSf,
}

impl From<SystemArg> for SystemKind {
    fn from(s: SystemArg) -> SystemKind {
        match s {
            SystemArg::Baseline => SystemKind::Baseline,
            SystemArg::Separate => SystemKind::Separate,
            SystemArg::SeparateSf => SystemKind::SeparateSf,
            SystemArg::CrossModal => SystemKind::CrossModal,
            SystemArg::CrossModalSf => SystemKind::CrossModalSf,
        }
    }
}

/// Independent stage seeds from one run seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    Rng::stream(seed, tag, 0).next_u64()
}

// ── file helpers ────────────────────────────────────────────────────

fn corpus_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

fn write_corpus(dir: &Path, corpus: &Corpus, spec: &TaskSpec, seed: u64) -> XmResult<()> {
    write_jsonl(&corpus_path(dir, &corpus.split), &corpus.utterances)?;
    let manifest = CorpusManifest {
        spec: spec.clone(),
        seed,
        split: corpus.split.clone(),
        count: corpus.utterances.len(),
        generator_version: GENERATOR_VERSION.to_string(),
    };
    write_json(&dir.join(format!("{}.manifest.json", corpus.split)), &manifest)
}

pub fn load_corpus(path: &Path) -> XmResult<Corpus> {
    let utterances: Vec<Utterance> = read_jsonl(path)?;
    let split = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "corpus".into());
    Ok(Corpus { split, utterances })
}

fn load_network(path: &Path) -> XmResult<(Checkpoint, Network)> {
    let ckpt = load_checkpoint(path)?;
    let net = ckpt.build_network()?;
    Ok((ckpt, net))
}

fn save_train_artifacts(
    out: &Path,
    stem: &str,
    config: &crate::models::ModelConfig,
    arts: &TrainArtifacts,
) -> XmResult<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out)?;
    let metric_at = |step: usize| arts.metrics.iter().find(|m| m.step == step);
    let best_metrics = metric_at(arts.best_step)
        .map(|m| CheckpointMetrics {
            train_loss: Some(m.train_loss),
            dev_loss: Some(m.dev_loss),
            dev_cer: Some(m.dev_cer),
        })
        .unwrap_or_default();
    let final_metrics = arts
        .metrics
        .last()
        .map(|m| CheckpointMetrics {
            train_loss: Some(m.train_loss),
            dev_loss: Some(m.dev_loss),
            dev_cer: Some(m.dev_cer),
        })
        .unwrap_or_default();
    let best_path = out.join(format!("{stem}.best.ckpt"));
    let final_path = out.join(format!("{stem}.final.ckpt"));
    save_checkpoint(
        &best_path,
        &Checkpoint::from_snapshot(config, &arts.best_snapshot, arts.best_step, best_metrics),
    )?;
    save_checkpoint(
        &final_path,
        &Checkpoint::from_snapshot(config, &arts.final_snapshot, arts.final_step, final_metrics),
    )?;
    write_jsonl(&out.join(format!("{stem}.metrics.jsonl")), &arts.metrics)?;
    if let Some(step) = arts.diverged_at {
        return Err(XmError::Diverged { step });
    }
    Ok((best_path, final_path))
}

fn parse_alphas(text: &str) -> XmResult<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| XmError::Config(format!("bad alpha '{s}': {e}")))
        })
        .collect()
}

/// Versions and wall-clock info; the only file in a run directory that is
/// allowed to differ between identical runs.
#[derive(Serialize)]
struct RunMeta<'a> {
    tool_version: &'a str,
    generator_version: &'a str,
    started_unix_ms: u128,
    stage_seconds: Vec<(String, f64)>,
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Every command that owns an output directory echoes the resolved config
/// and records versions; wall-clock data stays in run_meta.json only.
fn record_run_context(out: &Path, cfg: &RunConfig) -> XmResult<()> {
    std::fs::create_dir_all(out)?;
    write_json(&out.join("effective_config.json"), cfg)?;
    write_json(
        &out.join("run_meta.json"),
        &RunMeta {
            tool_version: env!("CARGO_PKG_VERSION"),
            generator_version: GENERATOR_VERSION,
            started_unix_ms: now_ms(),
            stage_seconds: Vec::new(),
        },
    )
}

// ── pipeline ────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SystemResult {
    pub system: String,
    pub alpha: f64,
    pub cer: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl SystemResult {
    fn from_report(report: &CerReport, alpha: f64) -> SystemResult {
        SystemResult {
            system: report.system.clone(),
            alpha,
            cer: report.cer,
            substitutions: report.substitutions,
            insertions: report.insertions,
            deletions: report.deletions,
            ref_len: report.ref_len,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub asr_param_count: usize,
    pub cross_modal_param_count: usize,
    pub separate_param_count: usize,
    pub asr_best_dev_loss: f64,
    pub asr_best_dev_cer: f64,
    pub triple_stats_train: TripleStats,
    pub triple_stats_dev: TripleStats,
    pub sweep_cross_modal: Vec<SweepPoint>,
    pub sweep_separate: Vec<SweepPoint>,
    pub best_alpha_cross_modal: f64,
    pub best_alpha_separate: f64,
    pub systems: Vec<SystemResult>,
    pub attention: AttentionSummary,
}

impl PipelineSummary {
    pub fn system(&self, label: &str) -> Option<&SystemResult> {
        self.systems.iter().find(|s| s.system == label)
    }
}

/// Smallest alpha achieving the minimum CER.
fn best_alpha(points: &[SweepPoint]) -> f64 {
    let mut best = &points[0];
    for p in &points[1..] {
        if p.cer < best.cer {
            best = p;
        }
    }
    best.alpha
}

/// The full sequence from one config and seed. Every output lands under
/// `out`; timestamps and timings stay confined to run_meta.json.
pub fn run_pipeline(
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    workers: usize,
) -> XmResult<PipelineSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    write_json(&out.join("effective_config.json"), cfg)?;
    let started = now_ms();
    let mut stage_seconds: Vec<(String, f64)> = Vec::new();
    let mut stopwatch = Instant::now();
    let lap = |stages: &mut Vec<(String, f64)>, name: &str, sw: &mut Instant| {
        stages.push((name.to_string(), sw.elapsed().as_secs_f64()));
        *sw = Instant::now();
    };

    // data
    let data_dir = out.join("data");
    let (train_c, dev_c, eval_c) = gen_corpus(&cfg.task, seed)?;
    write_corpus(&data_dir, &train_c, &cfg.task, seed)?;
    write_corpus(&data_dir, &dev_c, &cfg.task, seed)?;
    write_corpus(&data_dir, &eval_c, &cfg.task, seed)?;
    lap(&mut stage_seconds, "gen-data", &mut stopwatch);

    // recognizer
    let asr_config = cfg.model_config(Architecture::Asr);
    let mut asr_tcfg = cfg.train.asr.clone();
    asr_tcfg.seed = derive_seed(seed, "train-asr");
    let asr_arts = train_asr(&train_c, &dev_c, &asr_config, &asr_tcfg, workers)?;
    let (asr_best_path, _) = save_train_artifacts(&out.join("asr"), "asr", &asr_config, &asr_arts)?;
    let (_, asr_net) = load_network(&asr_best_path)?;
    lap(&mut stage_seconds, "train-asr", &mut stopwatch);

    // correction triples (train + dev)
    let aug = cfg.train.triple_noise_sigma;
    let (train_triples, triple_stats_train) =
        make_triples(&asr_net, &train_c, derive_seed(seed, "triples-train"), aug, workers)?;
    let (dev_triples, triple_stats_dev) =
        make_triples(&asr_net, &dev_c, derive_seed(seed, "triples-dev"), aug, workers)?;
    let triples_dir = out.join("triples");
    write_jsonl(&triples_dir.join("train.jsonl"), &train_triples)?;
    write_jsonl(&triples_dir.join("dev.jsonl"), &dev_triples)?;
    write_json(&triples_dir.join("train.stats.json"), &triple_stats_train)?;
    write_json(&triples_dir.join("dev.stats.json"), &triple_stats_dev)?;
    lap(&mut stage_seconds, "make-triples", &mut stopwatch);

    // correctors
    let mut corrector_nets = Vec::new();
    for arch in [Architecture::CrossModal, Architecture::Separate] {
        let config = cfg.model_config(arch);
        let mut tcfg = cfg.train.corrector.clone();
        tcfg.seed = derive_seed(seed, &format!("train-{}", arch.label()));
        let arts = train_corrector(&train_triples, &dev_triples, &config, &tcfg, workers)?;
        let dir = out.join(format!("corrector_{}", arch.label()));
        let (best_path, _) = save_train_artifacts(&dir, arch.label(), &config, &arts)?;
        let (_, net) = load_network(&best_path)?;
        corrector_nets.push(net);
        lap(&mut stage_seconds, &format!("train-{}", arch.label()), &mut stopwatch);
    }
    let cross_net = &corrector_nets[0];
    let sep_net = &corrector_nets[1];

    // weight sweeps on dev
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let sweep_cm = sweep_alpha(&asr_net, cross_net, &dev_c, &grid, &cfg.decode, workers)?;
    let sweep_sep = sweep_alpha(&asr_net, sep_net, &dev_c, &grid, &cfg.decode, workers)?;
    write_sweep_csv(&out.join("sweep_cross_modal.csv"), &sweep_cm)?;
    write_sweep_csv(&out.join("sweep_separate.csv"), &sweep_sep)?;
    let alpha_cm = best_alpha(&sweep_cm);
    let alpha_sep = best_alpha(&sweep_sep);
    lap(&mut stage_seconds, "sweep-alpha", &mut stopwatch);

    // evaluation on the eval split
    let eval_dir = out.join("eval");
    let mut systems = Vec::new();
    let runs: Vec<(SystemKind, Option<&Network>, f64)> = vec![
        (SystemKind::Baseline, None, 0.0),
        (SystemKind::CrossModal, Some(cross_net), 1.0),
        (SystemKind::CrossModalSf, Some(cross_net), alpha_cm),
        (SystemKind::Separate, Some(sep_net), 1.0),
        (SystemKind::SeparateSf, Some(sep_net), alpha_sep),
    ];
    for (kind, corr, alpha) in runs {
        let fusion = cfg.decode.with_alpha(alpha);
        let (report, transcripts) =
            evaluate_system(kind, &asr_net, corr, &eval_c, &fusion, workers)?;
        write_json(&eval_dir.join(format!("{}.report.json", kind.label())), &report)?;
        write_jsonl(&eval_dir.join(format!("{}.transcripts.jsonl", kind.label())), &transcripts)?;
        systems.push(SystemResult::from_report(&report, alpha));
    }
    lap(&mut stage_seconds, "eval", &mut stopwatch);

    // attention export on the first eval utterance
    let probe = &eval_c.utterances[0];
    let (probe_triples, _) = make_triples(
        &asr_net,
        &Corpus { split: "probe".into(), utterances: vec![probe.clone()] },
        derive_seed(seed, "attention-probe"),
        0.0,
        1,
    )?;
    let attention = dump_attention(cross_net, &probe_triples[0], &out.join("attention"))?;
    lap(&mut stage_seconds, "dump-attention", &mut stopwatch);

    let summary = PipelineSummary {
        seed,
        asr_param_count: asr_net.param_count(),
        cross_modal_param_count: cross_net.param_count(),
        separate_param_count: sep_net.param_count(),
        asr_best_dev_loss: asr_arts.best_dev_loss,
        asr_best_dev_cer: asr_arts
            .metrics
            .iter()
            .find(|m| m.step == asr_arts.best_step)
            .map(|m| m.dev_cer)
            .unwrap_or(f64::NAN),
        triple_stats_train,
        triple_stats_dev,
        sweep_cross_modal: sweep_cm,
        sweep_separate: sweep_sep,
        best_alpha_cross_modal: alpha_cm,
        best_alpha_separate: alpha_sep,
        systems,
        attention,
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_json(
        &out.join("run_meta.json"),
        &RunMeta {
            tool_version: env!("CARGO_PKG_VERSION"),
            generator_version: GENERATOR_VERSION,
            started_unix_ms: started,
            stage_seconds,
        },
    )?;
    Ok(summary)
}

// ── command dispatch ────────────────────────────────────────────────

pub fn run(cli: Cli) -> XmResult<()> {
    match cli.command {
        Command::GenData { common, seed, out } => {
            let cfg = common.load()?;
            record_run_context(&out, &cfg)?;
            let (train_c, dev_c, eval_c) = gen_corpus(&cfg.task, seed)?;
            for corpus in [&train_c, &dev_c, &eval_c] {
                write_corpus(&out, corpus, &cfg.task, seed)?;
            }
            println!(
                "generated {} train / {} dev / {} eval utterances under {}",
                train_c.utterances.len(),
                dev_c.utterances.len(),
                eval_c.utterances.len(),
                out.display()
            );
            Ok(())
        }
        Command::TrainAsr { common, data, seed, out } => {
            let cfg = common.load()?;
            record_run_context(&out, &cfg)?;
            let train_c = load_corpus(&corpus_path(&data, "train"))?;
            let dev_c = load_corpus(&corpus_path(&data, "dev"))?;
            let config = cfg.model_config(Architecture::Asr);
            let mut tcfg = cfg.train.asr.clone();
            tcfg.seed = seed;
            println!(
                "training recognizer: {} parameters, {} steps",
                preview_param_count(&config)?,
                tcfg.total_steps
            );
            let arts = train_asr(&train_c, &dev_c, &config, &tcfg, common.workers)?;
            let (best, _) = save_train_artifacts(&out, "asr", &config, &arts)?;
            println!(
                "best dev loss {:.4} at step {}; checkpoint {}",
                arts.best_dev_loss,
                arts.best_step,
                best.display()
            );
            Ok(())
        }
        Command::Decode { common, asr, data, out, beam } => {
            let cfg = common.load()?;
            let (_, net) = load_network(&asr)?;
            let corpus = load_corpus(&data)?;
            let mut fusion = cfg.decode.clone();
            if let Some(b) = beam {
                fusion.beam_size = b;
            }
            record_run_context(&out, &cfg)?;
            let (report, transcripts) =
                evaluate_system(SystemKind::Baseline, &net, None, &corpus, &fusion, common.workers)?;
            write_json(&out.join("baseline.report.json"), &report)?;
            write_jsonl(&out.join("baseline.transcripts.jsonl"), &transcripts)?;
            println!("baseline CER {:.4} over {} utterances", report.cer, report.utterances.len());
            Ok(())
        }
        Command::MakeTriples { common, asr, data, out, noise_seed } => {
            let cfg = common.load()?;
            let (ckpt, net) = load_network(&asr)?;
            ckpt.ensure_arch(Architecture::Asr)?;
            let corpus = load_corpus(&data)?;
            let (triples, stats) = make_triples(
                &net,
                &corpus,
                noise_seed,
                cfg.train.triple_noise_sigma,
                common.workers,
            )?;
            write_jsonl(&out, &triples)?;
            let stats_path = out.with_extension("stats.json");
            write_json(&stats_path, &stats)?;
            println!(
                "{} triples, hypothesis CER {:.4} ({})",
                stats.count,
                stats.hypothesis_cer,
                out.display()
            );
            Ok(())
        }
        Command::TrainCorrector { common, arch, triples, dev_triples, seed, out } => {
            let cfg = common.load()?;
            let arch: Architecture = arch.into();
            record_run_context(&out, &cfg)?;
            let train_t: Vec<CorrectionTriple> = read_jsonl(&triples)?;
            let dev_t: Vec<CorrectionTriple> = read_jsonl(&dev_triples)?;
            let config = cfg.model_config(arch);
            let mut tcfg = cfg.train.corrector.clone();
            tcfg.seed = seed;
            println!(
                "training {} corrector: {} parameters, {} steps",
                arch.label(),
                preview_param_count(&config)?,
                tcfg.total_steps
            );
            let arts = train_corrector(&train_t, &dev_t, &config, &tcfg, common.workers)?;
            let (best, _) = save_train_artifacts(&out, arch.label(), &config, &arts)?;
            println!(
                "best dev loss {:.4} at step {}; checkpoint {}",
                arts.best_dev_loss,
                arts.best_step,
                best.display()
            );
            Ok(())
        }
        Command::FusedDecode { common, asr, corrector, alpha, data, out } => {
            let cfg = common.load()?;
            let (_, asr_net) = load_network(&asr)?;
            let (corr_ckpt, corr_net) = load_network(&corrector)?;
            let corpus = load_corpus(&data)?;
            let kind = match corr_ckpt.config.arch {
                Architecture::CrossModal => SystemKind::CrossModalSf,
                Architecture::Separate => SystemKind::SeparateSf,
                Architecture::Asr => {
                    return Err(XmError::InvalidArgument(
                        "fused-decode needs a corrector checkpoint".into(),
                    ))
                }
            };
            let fusion = cfg.decode.with_alpha(alpha);
            record_run_context(&out, &cfg)?;
            let (report, transcripts) =
                evaluate_system(kind, &asr_net, Some(&corr_net), &corpus, &fusion, common.workers)?;
            write_json(&out.join(format!("{}.report.json", kind.label())), &report)?;
            write_jsonl(&out.join(format!("{}.transcripts.jsonl", kind.label())), &transcripts)?;
            println!("{} CER {:.4} at alpha {alpha}", kind.label(), report.cer);
            Ok(())
        }
        Command::Eval { common, system, asr, corrector, data, out, alpha } => {
            let cfg = common.load()?;
            let kind: SystemKind = system.into();
            let (_, asr_net) = load_network(&asr)?;
            let corr_net = corrector.map(|p| load_network(&p).map(|(_, n)| n)).transpose()?;
            let corpus = load_corpus(&data)?;
            let mut fusion = cfg.decode.clone();
            if let Some(a) = alpha {
                fusion.alpha = a;
            }
            record_run_context(&out, &cfg)?;
            let (report, transcripts) =
                evaluate_system(kind, &asr_net, corr_net.as_ref(), &corpus, &fusion, common.workers)?;
            write_json(&out.join(format!("{}.report.json", kind.label())), &report)?;
            write_jsonl(&out.join(format!("{}.transcripts.jsonl", kind.label())), &transcripts)?;
            println!("{} CER {:.4}", kind.label(), report.cer);
            Ok(())
        }
        Command::SweepAlpha { common, asr, corrector, data, alphas, out } => {
            let cfg = common.load()?;
            let (_, asr_net) = load_network(&asr)?;
            let (_, corr_net) = load_network(&corrector)?;
            let corpus = load_corpus(&data)?;
            let grid = parse_alphas(&alphas)?;
            let points =
                sweep_alpha(&asr_net, &corr_net, &corpus, &grid, &cfg.decode, common.workers)?;
            write_sweep_csv(&out, &points)?;
            for p in &points {
                println!("alpha {:.2} -> CER {:.4}", p.alpha, p.cer);
            }
            Ok(())
        }
        Command::DumpAttention { common, corrector, triples, index, out } => {
            let cfg = common.load()?;
            record_run_context(&out, &cfg)?;
            let (_, net) = load_network(&corrector)?;
            let all: Vec<CorrectionTriple> = read_jsonl(&triples)?;
            let triple = all.get(index).ok_or_else(|| {
                XmError::InvalidArgument(format!(
                    "triple index {index} out of range ({} available)",
                    all.len()
                ))
            })?;
            let summary = dump_attention(&net, triple, &out)?;
            println!(
                "wrote {} files for {} blocks x {} heads; max cross-segment mass {:.3}",
                summary.files_written, summary.blocks, summary.heads, summary.max_cross_mass
            );
            Ok(())
        }
        Command::GradCheck { trials, seed } => {
            let outcomes = crate::diagnostics::run_all_grad_checks(trials, seed)?;
            let mut ok = true;
            for o in &outcomes {
                println!(
                    "{:<40} max_rel_err {:+.3e}  {}",
                    o.name,
                    o.max_error,
                    if o.passed() { "PASS" } else { "FAIL" }
                );
                ok &= o.passed();
            }
            if !ok {
                return Err(XmError::InvalidArgument(
                    "gradient checks failed (see lines above)".into(),
                ));
            }
            println!("{} checks passed", outcomes.len());
            Ok(())
        }
        Command::Pipeline { common, seed, out } => {
            let cfg = common.load()?;
            let out = out
                .or_else(|| cfg.paths.run_dir.as_ref().map(PathBuf::from))
                .ok_or_else(|| {
                    XmError::Config("no run directory: pass --out or set paths.run_dir".into())
                })?;
            let summary = run_pipeline(&cfg, seed, &out, common.workers)?;
            println!("pipeline complete (seed {seed}):");
            for s in &summary.systems {
                println!("  {:<16} alpha {:.2}  CER {:.4}", s.system, s.alpha, s.cer);
            }
            println!(
                "  best alpha: cross_modal {:.2}, separate {:.2}; attention cross mass {:.3}",
                summary.best_alpha_cross_modal,
                summary.best_alpha_separate,
                summary.attention.max_cross_mass
            );
            Ok(())
        }
    }
}

fn preview_param_count(config: &crate::models::ModelConfig) -> XmResult<usize> {
    let mut rng = Rng::seed_from_u64(0);
    Ok(Network::new(config.clone(), crate::numerics::ParamInit::Fresh(&mut rng))?.param_count())
}
