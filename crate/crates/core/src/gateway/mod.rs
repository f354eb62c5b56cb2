//! Sequential-routing gateway.
//!
//! A query enters at the newest expert. Each expert either claims it with the
//! positive indicator (and answers), declines with the negative indicator
//! (the query moves to the next older expert), or produces no indicator at
//! all (the query goes to the base model). An exhausted chain also ends at
//! the base model.

mod client;
mod config;
mod decision;
mod router;
mod server;

pub use client::{
    expert_complete, Choice, Completion, CompletionBackend, CompletionRequest, CompletionResponse, HttpBackend,
};
pub use config::{ErrorPolicy, GatewayConfig};
pub use decision::{classify_head, Decision};
pub use router::{route, GenerationParams, Handler, Hop, HopOutcome, RoutingTrace};
pub use server::{router as http_router, serve, serve_listener, GatewayState, RouteRequest, RouteResponse};
