use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::client::{expert_complete, Completion, CompletionBackend};
use super::config::ErrorPolicy;
use super::decision::{classify_head, Decision};
use crate::error::{Error, Result};
use crate::registry::{ExpertSpec, Registry};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_tokens: u32,
    /// Send the negative indicator as a stop sequence. Servers that drop the
    /// matched stop string then return an empty completion with
    /// `finish_reason = "stop"`, which is read as a negative.
    pub stop_on_negative: bool,
    pub error_policy: ErrorPolicy,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_tokens: 512,
            stop_on_negative: true,
            error_policy: ErrorPolicy::Fallback,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum HopOutcome {
    Positive { answer: String },
    Negative,
    NoIndicator { raw: String },
    /// The expert could not be reached; only recorded under the fallback policy.
    TransportError { message: String },
}

impl From<Decision> for HopOutcome {
    fn from(d: Decision) -> Self {
        match d {
            Decision::Positive(answer) => HopOutcome::Positive { answer },
            Decision::Negative => HopOutcome::Negative,
            Decision::NoIndicator(raw) => HopOutcome::NoIndicator { raw },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hop {
    pub expert_id: String,
    #[serde(flatten)]
    pub outcome: HopOutcome,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Handler {
    Expert { expert_id: String, task_id: String },
    Base,
}

impl Handler {
    pub fn label(&self) -> &str {
        match self {
            Handler::Expert { expert_id, .. } => expert_id,
            Handler::Base => "base",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub query: String,
    pub hops: Vec<Hop>,
    pub handler: Handler,
    pub answer: String,
    /// Time spent on the base model, when it answered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_elapsed_us: Option<u64>,
}

impl RoutingTrace {
    /// The trace with wall-clock fields zeroed, for comparing routing content.
    pub fn without_timing(&self) -> RoutingTrace {
        let mut t = self.clone();
        for h in &mut t.hops {
            h.elapsed_us = 0;
        }
        t.base_elapsed_us = t.base_elapsed_us.map(|_| 0);
        t
    }

    pub fn fell_through(&self) -> usize {
        self.hops.iter().filter(|h| h.outcome == HopOutcome::Negative).count()
    }
}

fn elapsed_us(start: Instant) -> u64 {
    u64::try_from(start.elapsed().as_micros()).unwrap_or(u64::MAX)
}

fn interpret(completion: &Completion, expert: &ExpertSpec, params: &GenerationParams) -> Decision {
    if params.stop_on_negative && completion.text.is_empty() && completion.finish_reason.as_deref() == Some("stop") {
        return Decision::Negative;
    }
    classify_head(&completion.text, &expert.indicators)
}

/// Walks the chain newest-first and stops at the first positive. A negative
/// moves on; no indicator, a transport failure (fallback policy) or an
/// exhausted chain sends the plain query to the base model.
pub async fn route<B: CompletionBackend>(
    backend: &B,
    registry: &Registry,
    query: &str,
    params: &GenerationParams,
) -> Result<RoutingTrace> {
    let mut hops = Vec::with_capacity(registry.len());
    for expert in registry.routing_order() {
        let stop = if params.stop_on_negative {
            vec![expert.indicators.negative.clone()]
        } else {
            Vec::new()
        };
        let start = Instant::now();
        let result = expert_complete(backend, &expert.endpoint, &expert.model_name, query, params.max_tokens, &stop).await;
        let elapsed = elapsed_us(start);
        let decision = match result {
            Ok(completion) => interpret(&completion, expert, params),
            Err(source) => match params.error_policy {
                ErrorPolicy::Strict => {
                    return Err(Error::Expert {
                        expert_id: expert.expert_id.clone(),
                        source,
                    })
                }
                ErrorPolicy::Fallback => {
                    tracing::warn!(expert = %expert.expert_id, error = %source, "expert unavailable, falling back to base");
                    hops.push(Hop {
                        expert_id: expert.expert_id.clone(),
                        outcome: HopOutcome::TransportError {
                            message: source.to_string(),
                        },
                        elapsed_us: elapsed,
                    });
                    break;
                }
            },
        };
        let stop_walk = !matches!(decision, Decision::Negative);
        if let Decision::Positive(answer) = &decision {
            let answer = answer.clone();
            hops.push(Hop {
                expert_id: expert.expert_id.clone(),
                outcome: decision.into(),
                elapsed_us: elapsed,
            });
            return Ok(RoutingTrace {
                query: query.to_string(),
                hops,
                handler: Handler::Expert {
                    expert_id: expert.expert_id.clone(),
                    task_id: expert.task_id.clone(),
                },
                answer,
                base_elapsed_us: None,
            });
        }
        hops.push(Hop {
            expert_id: expert.expert_id.clone(),
            outcome: decision.into(),
            elapsed_us: elapsed,
        });
        if stop_walk {
            break;
        }
    }

    let base = registry.base();
    let start = Instant::now();
    let completion = expert_complete(backend, &base.endpoint, &base.model_name, query, params.max_tokens, &[])
        .await
        .map_err(Error::Base)?;
    Ok(RoutingTrace {
        query: query.to_string(),
        hops,
        handler: Handler::Base,
        answer: completion.text.trim().to_string(),
        base_elapsed_us: Some(elapsed_us(start)),
    })
}
