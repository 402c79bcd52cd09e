//! Dense matrices, a reverse-mode differentiation tape, and the training
//! primitives built on it (Adam, dropout, batch normalization, checkpoints).

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod matrix;
pub mod params;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use layers::{dropout, BatchNorm, Dense, Mode, RunningUpdate};
pub use matrix::Matrix;
pub use params::{Binder, Param, ParamGrads, ParamId, ParamStore};
pub use tape::{sigmoid, BatchStats, Block, Gradients, Segment, Tape, Var};
