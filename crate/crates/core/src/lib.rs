//! Core library for legal-drafting reliability experiments: task suites,
//! corpus indexing, retrieval, generation, verification and statistics.

pub mod annotation;
pub mod backend;
pub mod citation;
pub mod corpus;
pub mod dataset;
pub mod generation;
pub mod metrics;
pub mod persona;
pub mod prompt;
pub mod retrieval;
pub mod stats;
pub mod text;
pub mod verification;
pub mod wire;
