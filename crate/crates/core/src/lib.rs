//! Sequential expert-chain routing for continual fine-tuning.
//!
//! Each continual stage trains one expert that answers its own task behind a
//! positive indicator and declines everything else with a negative indicator.
//! Experts are chained newest-first behind a gateway; a query falls through
//! declining experts and lands on the base model when the chain is exhausted
//! or an expert produces no indicator.
//!
//! Modules:
//! - [`corpus`]: line-delimited task datasets.
//! - [`reconstruct`]: indicator-tagged training sets with rehearsal negatives.
//! - [`registry`]: the ordered expert chain plus base model.
//! - [`gateway`]: head classification, the completion client, sequential routing and the HTTP service.
//! - [`synth`]: deterministic simulated experts speaking the completion protocol.
//! - [`metrics`]: ROUGE-L, score matrix, AR/BWT, routing F1 and base-routing accuracy.
//! - [`overhead`]: analytic and Monte-Carlo latency overhead of sequential routing.
//! - [`scenario`]: end-to-end continual scenario runner.

pub mod corpus;
pub mod error;
pub mod gateway;
pub mod metrics;
pub mod overhead;
pub mod reconstruct;
pub mod registry;
pub mod scenario;
mod seeding;
pub mod synth;

pub use error::{Error, Result, TransportError, TransportErrorKind};
