//! A desk-scale laboratory for two-pass sequence recognition: an
//! attention-based recognizer over synthetic speech-like frames, two
//! second-pass hypothesis-correction architectures (joint cross-modal
//! encoding vs. separate per-modality encoding), and log-linear shallow
//! fusion of the two passes at beam-search time.
//!
//! Everything runs on a small self-contained f64 tensor engine with
//! reverse-mode autodiff, so results are bit-reproducible from a seed.

pub mod cli;
pub mod config;
pub mod decoding;
pub mod diagnostics;
pub mod error;
pub mod layers;
pub mod evaluation;
pub mod models;
pub mod numerics;
pub mod synthdata;
pub mod training;
pub mod util;

pub use error::{XmError, XmResult};
