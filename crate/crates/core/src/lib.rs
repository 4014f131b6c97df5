//! Compile 3D indoor scenes into text and multi-view prompts for
//! vision-language models, and score the answers.

// Validation uses negated comparisons so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod client;
pub mod describe;
pub mod eval;
pub mod geometry;
pub mod hiervis;
pub mod ingest;
pub mod pipeline;
pub mod prompt;
pub mod pruning;
pub mod render;
pub mod synthetic;
