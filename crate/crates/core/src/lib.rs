//! Trace-driven cache simulation and learning laboratory: a set-associative
//! simulator, Belady MIN labeling, feature extraction, a small neural
//! toolkit, and the baseline / joint-encoder / contrastive models trained on
//! cache-friendliness labels.

pub mod cachesim;
pub mod features;
pub mod models;
pub mod nnkit;
pub mod oracle;
pub mod pipeline;
pub mod trace;
