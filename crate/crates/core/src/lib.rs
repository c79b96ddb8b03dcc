//! Flaky CI job failure labeling and Recency/Frequency/Monetary
//! prioritization of failure categories.
//!
//! Stages exchange CSV tables. [`labeler`] marks flaky failures and
//! categorizes them with a [`rulebook`]; [`analyzer`] aggregates per-category
//! RFM measures; [`ranker`] orders the categories. [`pipeline`] chains them
//! through files.

pub mod analyzer;
pub mod ansi;
pub mod clustering;
pub mod generator;
pub mod ingest;
pub mod labeler;
pub mod pipeline;
pub mod ranker;
pub mod rulebook;
