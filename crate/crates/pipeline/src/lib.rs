//! Stage orchestration for adapting labelled face photos into caricature
//! training data and measuring what each adaptation buys a face parser.
//!
//! Stages share one workspace directory. Every stage writes a `stage.json`
//! recording the checksums of what it read and wrote; downstream stages
//! refuse to run on missing, stale or modified inputs.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod stages;
pub mod synthesis;
pub mod toydata;
pub mod workspace;

pub use config::{DataPaths, PipelineConfig, ToyDataConfig};
pub use error::{PipelineError, Result};
pub use evaluation::{evaluate, run_ablation, train_parser_for, AblationOutcome, EvaluationReport};
pub use stages::{prepare, train_shape, train_texture};
pub use synthesis::{synthesize, Arm, SynthesisManifest, SynthesisRecord};
pub use toydata::make_toy_data;
pub use workspace::Workspace;
