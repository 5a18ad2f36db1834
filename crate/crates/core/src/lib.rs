//! Mixture-of-depths routing for vision tokens in a streaming video-language
//! decoder.
//!
//! Each frame contributes a fixed group of vision tokens to a causal token
//! stream interleaved with text. In routed layers a per-layer linear scorer
//! picks the top-k vision tokens of every frame; only those tokens (plus all
//! text tokens) go through attention and the FFN, the rest ride the residual
//! stream unchanged and never enter that layer's key/value cache.
//!
//! Modules:
//! - [`numerics`]: tensors, tape autodiff, gradient checking, checkpoints
//! - [`sequence`]: stream samples and the interleaved token stream with labels
//! - [`router`]: per-frame scoring, top-k selection, gated residual combine
//! - [`model`]: layer schedules, the decoder, streaming KV cache, decoding
//! - [`objective`]: LM + streaming EOS loss and temporal augmentation
//! - [`costmodel`]: analytic FLOPs and KV-cache footprint
//! - [`harness`]: synthetic task, training, evaluation, baseline suite
//! - [`config`]: flat run configuration shared by the CLI and harness

pub mod config;
pub mod costmodel;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod router;
pub mod sequence;

pub use error::{Error, Result};
pub use model::{
    GateActivation, Insertion, KeepStrategy, KvCache, LayerKind, LayerSchedule, Model, ModelConfig, ScaleMode,
    StreamState,
};
pub use numerics::{DType, Element, ParamStore, Parameter, Tape, Tensor, Var};
pub use router::RouterDecision;
pub use sequence::{InterleavedSequence, SpanKind, StreamEvent, StreamSample, TokenRole};

/// Reserved vocabulary id the model predicts to stay silent after a frame.
pub const EOS_ID: usize = 0;
/// Reserved vocabulary id terminating every response span.
pub const END_OF_RESPONSE_ID: usize = 1;
/// Number of reserved ids at the bottom of the vocabulary.
pub const NUM_SPECIAL_TOKENS: usize = 2;
