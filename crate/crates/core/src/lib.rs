//! Two-stream attentional recurrent relational network with a stacked
//! LSTM head for skeleton-based action recognition.
//!
//! Each stream embeds per-joint features (raw coordinates or pairwise
//! "line" differences), refines them with message passing over the fully
//! connected joint graph, gates the node outputs with a learnable per-joint
//! mask, and models time with a stacked LSTM. The two streams' class
//! probabilities are fused by a weighted average.

pub mod config;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod seed;
pub mod skeleton;
pub mod spatial;
pub mod tape;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, OptimizerKind};
pub use error::{Error, Result};
pub use model::{Model, StreamKind, StreamParams};
pub use skeleton::{DatasetSpec, SkeletonFrame, SkeletonSequence};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
pub use train::{train, TrainReport, Trainer};
