//! In-context autoencoder: compress a token context into k memory slots via
//! a low-rank-adapted encoder, and condition the frozen target LM on those
//! slots to restore, continue, or respond.

pub mod checkpoint;
pub mod client;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod lm;
pub mod optim;
pub mod pipeline;
pub mod plc;
pub mod slots;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
