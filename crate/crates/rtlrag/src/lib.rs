//! Retrieval-augmented next-line completion for repository-level Verilog.
//!
//! The pipeline takes a completion sample (repository context files plus the
//! in-progress current file) and produces a prompt for a language model under
//! a hard token budget. Small repositories are inlined whole ("direct" path);
//! anything that would blow the budget goes through chunking, embedding and
//! similarity retrieval instead ("rag" path). The crate also ships the
//! evaluation harness (exact match / edit similarity, length-bucketed
//! reports, ablation grids) and a fine-tuning dataset preparer that mirrors
//! the direct-path prompt format.

pub mod backend;
pub mod cli;
pub mod corpus;
pub mod embed;
pub mod ftprep;
pub mod metrics;
pub mod pipeline;
pub mod retrieve;
pub mod runner;
pub mod split;
pub mod store;
pub mod tokenize;

mod semaphore;

pub use corpus::{Dataset, RepoFile, RepoSample};
pub use pipeline::{PathTaken, PipelineConfig, PromptAssembly};
pub use tokenize::TokenCounter;
