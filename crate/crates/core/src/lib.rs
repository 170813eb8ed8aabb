//! Multi-document summarization of randomized controlled trials with
//! aspect-level provenance and template in-filling.

pub mod api;
pub mod aspect;
pub mod bundle;
pub mod decoding;
pub mod direction;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod provenance;
pub mod store;
pub mod synth;
pub mod templates;
pub mod tokenizer;
