//! The MPAD architecture: configuration, message passing layers, the
//! per-graph encoder and the full document classifier.

mod config;
mod encoder;
mod layers;
mod mpad;

pub use config::{MpadConfig, NormPlacement, Variant};
pub use encoder::{AttentionRecord, Encoder, EncoderShape, Trace};
pub use layers::{
    aggregate, build_mlp, gru_combine, readout, Attention, GraphBatch, Gru, PreparedGraph, Readout,
    ReadoutLayout, ReadoutOutput,
};
pub use mpad::{argmax, softmax, ForwardPass, Mpad, PreparedDocument, EMBEDDINGS_PARAM};
