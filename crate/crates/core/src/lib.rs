//! Exploratory category recommendation: long-term group semantic IDs,
//! short-term category mapping, a novelty generator and relevance scorer
//! co-optimized in periodic cycles, an offline key-value store, and
//! category-level evaluation.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod grouping;
pub mod ingest;
pub mod nn;
pub mod params;
pub mod pco;
pub mod pipeline;
pub mod quantizer;
pub mod store;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
