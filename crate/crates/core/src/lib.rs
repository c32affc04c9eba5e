//! Text-to-SQL orchestration and evaluation.
//!
//! The pipeline links the question to a subset of tables (several shuffled
//! calls, union of answers), asks a model to describe the linked columns in
//! natural language, generates SQL, executes it against SQLite and, if it
//! fails, makes exactly one repair call. Every model call is routed to the
//! endpoint configured for its component. [`evaluation`] computes exact and
//! subset table recall and execution accuracy.

pub mod admin;
pub mod config;
pub mod dataset;
pub mod evaluation;
pub mod exec;
pub mod linking;
pub mod llm;
pub mod pipeline;
pub mod prompts;
pub mod runner;
pub mod schema;
pub mod sql_scan;

pub use dataset::{Benchmark, SchemaCache, SpiderQuestion};
pub use llm::{ChatBackend, Component, ModelEndpoint, RoutingConfig};
pub use pipeline::{PipelineOptions, PipelineTrace};
pub use schema::DatabaseSchema;
