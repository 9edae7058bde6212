//! Behavioral-specification authoring and held-out prediction scoring.
//!
//! The crate covers the whole measurement chain: corpus import and
//! train/held-out splitting, fact extraction under a closed predicate
//! vocabulary, specification authoring, battery generation and freezing,
//! condition runs, judge panels, and the statistics used to analyze them.
//! Every model call goes through [`providers::Client`], so a stub or replay
//! provider makes the full pipeline deterministic.

pub mod battery;
pub mod corpus;
pub mod digest;
pub mod error;
pub mod factstore;
pub mod fixtures;
pub mod judging;
pub mod pipeline;
pub mod prompts;
pub mod providers;
pub mod report;
pub mod runner;
pub mod specdoc;
pub mod stats;
pub mod text;

pub use error::{Error, Result};
