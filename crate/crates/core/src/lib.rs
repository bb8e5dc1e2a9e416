//! Batched MQM evaluation of machine translation with LLM judges:
//! prompt construction that amortizes shared sections across a batch,
//! span-preserving prompt compression, tolerant structured-output parsing,
//! and the correlation/report harness that compares runs.

pub mod cli;
pub mod compression;
pub mod dataset;
pub mod gateway;
pub mod metaeval;
pub mod mqm;
pub mod parser;
pub mod pipeline;
pub mod prompt;
pub mod report;
pub mod tokenizer;
