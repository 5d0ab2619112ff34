//! Simultaneous machine translation harness.
//!
//! The crate models an interpreter-style action space on top of READ/WRITE,
//! schedules target speech causally against source word timestamps, measures
//! latency with a time-based Average Lagging, scores quality with BLEU, chrF
//! and TER, and drives chat-completion endpoints word by word or in batches.
//!
//! Indices are 1-based everywhere inside the math layer. File formats are
//! 0-based where they carry indices; conversion happens in the parsers.

pub mod actions;
pub mod causal_align;
pub mod error;
pub mod experiment;
pub mod jsonl;
pub mod latency;
pub mod llm_driver;
pub mod metrics;
pub mod profile;
pub mod retrieval;
pub mod testing;
pub mod timeline;

pub use error::{Error, Result};
pub use profile::LangProfile;
