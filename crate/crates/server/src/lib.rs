//! HTTP service and command-line front end for `forage-core`.
//!
//! The service exposes datasets, labeling sessions, suggestions and session
//! analytics over REST, with optional persistence to a data directory. The
//! `forage` binary wraps it together with offline labeling, simulation,
//! cross-validation, metrics and export commands.

pub mod cli;
pub mod embedder;
pub mod service;
pub mod store;

pub use service::{router, serve, AppState, BatchOutcome, ServiceConfig, Suggestion};
