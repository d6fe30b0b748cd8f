//! Unified offline/streaming transducer training and decoding.

pub mod alloc_probe;
pub mod cli;
pub mod context;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod lattice;
pub mod mcr;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
