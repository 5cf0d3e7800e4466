//! Conditional flow-matching synthesis on toy speech features, with
//! decoupled guidance, language-ID injection, transcript-free infilling and
//! corpus curation tools.

pub mod cfm;
pub mod cli;
pub mod conditioning;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod field_net;
pub mod guidance;
pub mod infill;
pub mod pairs;
pub mod phonemes;
pub mod seed;
pub mod toy;

pub use error::{Error, Result};
