//! Lexical relation classification with relation prototypes, SRR cells and
//! meta-learning over single-relation auxiliary tasks.
//!
//! The pipeline: load concept embeddings and labeled triples ([`data`]),
//! average relation offsets into prototypes ([`prototypes`]), meta-train the
//! network on binary relation-vs-random tasks sampled from a smoothed
//! distribution ([`tasks`], [`training`]), fine-tune the multi-way head and
//! score it with support-weighted metrics ([`evaluation`]).

pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod objectives;
pub mod prototypes;
pub mod synth;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
