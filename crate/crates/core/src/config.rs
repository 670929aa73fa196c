//! Run configuration: one JSON document with task, model, train, and decode
//! sections. Unknown keys are rejected; defaults are resolved up front and
//! the effective config is echoed into the run directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoding::FusionConfig;
use crate::error::{XmError, XmResult};
use crate::models::{Architecture, ModelConfig, Vocabulary};
use crate::synthdata::TaskSpec;
use crate::training::TrainConfig;

/// Architecture geometry without the contextual parts (vocabulary and
/// feature width come from the task, the architecture tag from the command).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_p: f64,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub speech_encoder_blocks: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 64,
            num_heads: 4,
            ffn_dim: 256,
            dropout_p: 0.1,
            encoder_blocks: 2,
            decoder_blocks: 2,
            speech_encoder_blocks: 2,
            max_source_len: 512,
            max_target_len: 64,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(
        &self,
        arch: Architecture,
        vocab: Vocabulary,
        feature_dim: usize,
    ) -> ModelConfig {
        ModelConfig {
            arch,
            layer: crate::layers::LayerConfig {
                d_model: self.d_model,
                num_heads: self.num_heads,
                ffn_dim: self.ffn_dim,
                dropout_p: self.dropout_p,
            },
            encoder_blocks: self.encoder_blocks,
            decoder_blocks: self.decoder_blocks,
            speech_encoder_blocks: self.speech_encoder_blocks,
            vocab,
            feature_dim,
            max_source_len: self.max_source_len,
            max_target_len: self.max_target_len,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Default run directory when the command line gives none.
    pub run_dir: Option<String>,
}

/// Per-stage training settings.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub asr: TrainConfig,
    pub corrector: TrainConfig,
    /// Extra feature noise while decoding hypotheses for correction triples.
    pub triple_noise_sigma: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            asr: TrainConfig::default(),
            corrector: TrainConfig::default(),
            triple_noise_sigma: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ModelSection,
    pub train: TrainSection,
    pub decode: FusionConfig,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> XmResult<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| XmError::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| XmError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> XmResult<()> {
        self.task.validate()?;
        self.decode.validate()?;
        self.train.asr.validate()?;
        self.train.corrector.validate()?;
        if self.train.triple_noise_sigma < 0.0 {
            return Err(XmError::Config("triple_noise_sigma must be non-negative".into()));
        }
        // exercise the full model validation once per architecture
        let vocab = Vocabulary::synthetic(self.task.vocab_size);
        for arch in [Architecture::Asr, Architecture::CrossModal, Architecture::Separate] {
            self.model.to_model_config(arch, vocab.clone(), self.task.feature_dim).validate()?;
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::synthetic(self.task.vocab_size)
    }

    pub fn model_config(&self, arch: Architecture) -> ModelConfig {
        self.model.to_model_config(arch, self.vocabulary(), self.task.feature_dim)
    }
}
