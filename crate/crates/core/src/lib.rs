//! Region-aware image-based human action retrieval.
//!
//! A person box, a set of scored region proposals and the whole image are
//! pooled from one backbone feature map into tokens, fused by a small
//! transformer into one embedding, trained through an action classifier and
//! then used for query-excluded retrieval with optional k-reciprocal
//! reranking.

pub mod backbone;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod model;
pub mod montage;
pub mod params;
pub mod pipeline;
pub mod reranking;
pub mod retrieval;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
