//! The learned sub-expression solver: a one-layer transformer encoder-decoder
//! written directly on `ndarray`, with label positional encodings,
//! autoregressive training and sampled multi-output generation.

use thiserror::Error;

mod checkpoint;
mod config;
mod decode;
mod gradcheck;
mod layers;
mod model;
mod params;
mod posenc;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{ModelConfig, PeMode};
pub use decode::{generate, generate_batch_greedy, generate_multi, DecodeMode, NeuralSolver};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport, GradientCorruption};
pub use model::{cross_entropy, LossOutput, Model, SeqBatch};
pub use params::{Attention, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, Params, Scalar, TensorView, TensorViewMut};
pub use posenc::{decoder_positions, encoder_positions, label_positions, sinusoidal_table};
pub use train::{batch_loss, training_step, AdamConfig, AdamState, Regime, StepReport};

use crate::vocab::VocabError;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("cannot draw {k} distinct positions from {m}")]
    KTooLarge { k: usize, m: usize },
    #[error("sequence of length {len} exceeds the {max} available positions")]
    SequenceTooLong { len: usize, max: usize },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss on batch example {index} ({input:?})")]
    NonFiniteLoss { index: usize, input: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
