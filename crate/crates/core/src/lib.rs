//! Harmonization of laboratory test triads (test name, sample type, unit)
//! against a reference terminology.

pub mod ablation;
pub mod error;
pub mod fuzzy;
pub mod lexical;
pub mod metrics;
pub mod model;
pub mod pairs;
pub mod pipeline;
pub mod rerank;
pub mod review;
pub mod retriever;
pub mod semantic;
pub mod synonyms;
pub mod synth;
pub mod text;
pub mod tuner;

pub use error::{Error, Result};
pub use model::{Field, QueryRecord, ReferenceRecord, TagStatus, Triad, WeightVector};
