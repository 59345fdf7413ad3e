//! Poincaré embeddings with hierarchical cosine margins.
//!
//! Trains an embedding network from coarse labels alone. A hyperbolic MLR head
//! supplies the coarse supervision; a KL penalty pulls pairwise cosine
//! distances toward an instance / fine pseudo-class / coarse / cross-coarse
//! ladder whose middle rungs adapt to batch statistics. Evaluation is
//! nearest-neighbour few-shot recognition of the hidden fine classes.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod hcm;
pub mod io;
pub mod mlr;
pub mod network;
pub mod plot;
pub mod pseudo;
pub mod train;

pub use error::{Error, Result};
