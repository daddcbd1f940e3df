//! Symmetric dual-encoding dense retrieval and multi-modal fusion-in-decoder
//! answer generation for knowledge-intensive visual question answering.

pub mod autograd;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod index;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod reader;
pub mod sparse;
pub mod text;
pub mod training;

pub use error::{Error, Result};
