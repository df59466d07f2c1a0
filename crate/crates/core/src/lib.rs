//! Residual-vector-quantized audio codec with idempotence fine-tuning and
//! multi-round re-encoding evaluation.

pub mod audio;
pub mod autodiff;
pub mod cli;
pub mod codec;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod training;

pub use audio::{AudioBuffer, CorpusSpec};
pub use autodiff::{Tape, Tensor};
pub use codec::{Codec, CodecConfig, CodecModel};
pub use error::{Error, Result};
pub use metrics::{MetricRow, TokenGrid};
pub use training::{IdemKind, LossWeights, TrainOptions};
