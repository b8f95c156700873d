//! Hypernym class prediction: WordNet class maps, curriculum-scheduled
//! transformer language-model training with switchable softmax supports,
//! ablation baselines, and stratified perplexity evaluation.

pub mod baselines;
pub mod classmap;
pub mod config;
pub mod corpus;
pub mod curriculum;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod train;
pub mod vocab;
pub mod wordnet;

pub use error::{Error, Result};
