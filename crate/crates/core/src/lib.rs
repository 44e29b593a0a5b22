//! Active search for interactive data foraging.
//!
//! A human (or a simulated oracle) labels points of a dataset by
//! bookmarking or dismissing them. Those labels train a pair of smoothed
//! k-NN relevance models, one over text embeddings and one over map
//! locations, and a query policy keeps surfacing the unlabeled points most
//! worth inspecting next.
//!
//! - [`dataset`]: loading, embedding, keyword labeling, sampling.
//! - [`relevance`]: the k-NN posterior and its fusion weight.
//! - [`policy`]: random, greedy, two-step and ENS query policies.
//! - [`simulator`]: offline policy benchmarks and sparse-label validation.
//! - [`session`]: the interactive event loop and its export format.
//! - [`analytics`]: foraging throughput metrics and group comparisons.

pub mod analytics;
pub mod dataset;
pub mod error;
pub mod policy;
pub mod relevance;
pub mod session;
pub mod simulator;
pub mod synthetic;

pub use dataset::{DataPoint, Dataset, Format, KeywordLexicon, PointId};
pub use error::{Error, Result};
pub use policy::{PolicyKind, PolicySpec};
pub use relevance::{AttributeModel, Observation, ObservationSet, Posterior, RelevanceModel};
pub use session::{InteractionEvent, Session, SessionExport};
