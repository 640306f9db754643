//! Keyword-aware headline generation: corpus handling, subword tokenizer,
//! n-gram scorer, penalty-shaped beam search, keyword ranking and evaluation.

pub mod corpus;
pub mod decoder;
pub mod evaluation;
pub mod exec;
pub mod keywords;
pub mod penalties;
pub mod pipeline;
pub mod scorer;
pub mod tokenizer;

pub use exec::Execution;
