//! Event-relational graph learning for acoustic scene classification.
//!
//! Audio is turned into log-mel features, a convolutional backbone produces
//! one token matrix per audio event, cross-attention turns every ordered pair
//! of events into a learned edge vector, and a gated graph convolutional
//! network classifies the scene from the resulting graph.

pub mod audio;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod edges;
pub mod error;
pub mod export;
pub mod gcn;
pub mod model;
pub mod nn;
pub mod ranking;
pub mod sweep;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

pub use audio::{AudioClip, LogMelFeature};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use dataset::{DatasetManifest, Example, Split};
pub use edges::MelFlags;
pub use export::{ExportFormat, GraphExport};
pub use gcn::{EventRelationalGraph, ScenePrediction};
pub use model::{ClipInference, ErglModel, ModelConfig};
pub use ranking::{EventVocabulary, PseudoLabelVector};
pub use training::{EpochReport, TrainConfig};
