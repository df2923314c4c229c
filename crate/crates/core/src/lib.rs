//! Core-distribution discovery and score-guided alignment for dataset
//! distillation in embedding space.

pub mod benchmark;
pub mod config;
pub mod diffusion;
pub mod embedding;
pub mod evaluation;
pub mod hdbscan;
pub mod ipc;
pub mod kmeans;
pub mod matrix;
pub mod pipeline;
pub mod preprocess;
pub mod seed;
