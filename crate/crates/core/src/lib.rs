//! Document classification with message passing attention networks over
//! word co-occurrence graphs.
//!
//! The pipeline: [`corpus`] turns labeled text into token-index sequences,
//! [`graph`] turns each sequence into a directed weighted co-occurrence
//! network, [`model`] runs message passing with MLP aggregation, GRU
//! updates and attention readout, and [`train`] fits the model with Adam.
//! Everything differentiable is built on [`numcore`].

pub mod cli;
pub mod corpus;
pub mod error;
pub mod graph;
pub mod model;
pub mod numcore;
pub mod train;

pub use error::{Error, Result};
