//! Deterministic simulated experts that speak the completion protocol.
//!
//! The harness prefixes each prompt with a one-line header carrying the
//! query's true task, a per-query key and (optionally) the reference answer:
//!
//! ```text
//! #synth {"task":"qa","key":"qa/eval/17","reference":"..."}
//! <query text>
//! ```
//!
//! A profile's behaviour on a query is a pure function of `(profile.seed,
//! key)`, so responses are identical across runs and across concurrent
//! requests. Prompts without a header carry no task and are always declined.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TransportError, TransportErrorKind};
use crate::gateway::{Completion, CompletionBackend, CompletionRequest, CompletionResponse, Decision};
use crate::reconstruct::IndicatorConfig;
use crate::seeding;

const HEADER_PREFIX: &str = "#synth ";
/// Padding token used to dilute synthetic answers; never appears in references.
const FILLER: &str = "\u{2205}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthHeader {
    pub task: String,
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl SynthHeader {
    pub fn wrap(&self, query: &str) -> String {
        let header = serde_json::to_string(self).expect("header serializes");
        format!("{HEADER_PREFIX}{header}\n{query}")
    }

    /// Splits a prompt into its header and the query body.
    pub fn parse(prompt: &str) -> Option<(SynthHeader, &str)> {
        let rest = prompt.strip_prefix(HEADER_PREFIX)?;
        let (line, body) = rest.split_once('\n').unwrap_or((rest, ""));
        let header = serde_json::from_str(line).ok()?;
        Some((header, body))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertProfile {
    pub expert_id: String,
    pub own_task: String,
    pub indicators: IndicatorConfig,
    /// Probability of claiming a query whose true task is the key. Missing
    /// tasks are never claimed.
    #[serde(default)]
    pub recognition: BTreeMap<String, f64>,
    /// Fraction of reference tokens reproduced when answering a task.
    #[serde(default)]
    pub answer_quality: BTreeMap<String, f64>,
    #[serde(default)]
    pub no_indicator_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn check_probability(what: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("{what} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

impl ExpertProfile {
    /// A profile that claims exactly its own task and answers it perfectly.
    pub fn perfect(expert_id: impl Into<String>, own_task: impl Into<String>, indicators: IndicatorConfig, seed: u64) -> Self {
        let own_task = own_task.into();
        Self {
            expert_id: expert_id.into(),
            recognition: BTreeMap::from([(own_task.clone(), 1.0)]),
            answer_quality: BTreeMap::from([(own_task.clone(), 1.0)]),
            own_task,
            indicators,
            no_indicator_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_probability("no_indicator_rate", self.no_indicator_rate)?;
        for (task, p) in &self.recognition {
            check_probability(&format!("recognition[{task}]"), *p)?;
        }
        for (task, q) in &self.answer_quality {
            check_probability(&format!("answer_quality[{task}]"), *q)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryRecord<'a> {
    pub query: &'a str,
    pub true_task: &'a str,
    pub key: &'a str,
    pub reference: Option<&'a str>,
}

/// Keeps the first `round(quality * L)` reference tokens and pads the rest
/// with filler, so ROUGE-L against the reference is exactly `kept / L`.
/// Without a reference the answer is a fixed string derived from the key.
pub fn synth_answer(reference: Option<&str>, quality: f64, key: &str) -> String {
    let Some(reference) = reference else {
        return format!("synthetic answer {key}");
    };
    let tokens: Vec<&str> = reference.split_whitespace().collect();
    let keep = ((quality.clamp(0.0, 1.0) * tokens.len() as f64).round() as usize).min(tokens.len());
    tokens[..keep]
        .iter()
        .copied()
        .chain(std::iter::repeat_n(FILLER, tokens.len() - keep))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn simulate_decision(profile: &ExpertProfile, record: &QueryRecord<'_>) -> Decision {
    let mut rng = seeding::keyed_rng(profile.seed, record.key);
    // both draws always happen so recognition stays coupled across rates
    let u_no: f64 = rng.random();
    let u_rec: f64 = rng.random();
    if u_no < profile.no_indicator_rate {
        return Decision::NoIndicator(no_indicator_text(&profile.indicators));
    }
    let p = profile.recognition.get(record.true_task).copied().unwrap_or(0.0);
    if u_rec < p {
        let q = profile.answer_quality.get(record.true_task).copied().unwrap_or(0.0);
        Decision::Positive(synth_answer(record.reference, q, record.key))
    } else {
        Decision::Negative
    }
}

fn no_indicator_text(indicators: &IndicatorConfig) -> String {
    ["Unsure about this one.", "?", "..."]
        .into_iter()
        .find(|t| !t.starts_with(&indicators.positive) && !t.starts_with(&indicators.negative))
        .unwrap_or("")
        .to_string()
}

/// The completion text an expert emits for a decision, before stop/length limits.
pub fn render_decision(decision: &Decision, indicators: &IndicatorConfig) -> String {
    match decision {
        Decision::Positive(answer) if answer.is_empty() => indicators.positive.clone(),
        Decision::Positive(answer) => format!("{} {answer}", indicators.positive),
        Decision::Negative => indicators.negative.clone(),
        Decision::NoIndicator(raw) => raw.clone(),
    }
}

/// Applies stop sequences (matched text excluded) then the whitespace-token
/// budget. Returns the text and its finish reason.
fn apply_limits(text: &str, stop: &[String], max_tokens: u32) -> (String, &'static str) {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min();
    let text = cut.map_or(text, |i| &text[..i]);
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() > max_tokens as usize {
        (tokens[..max_tokens as usize].join(" "), "length")
    } else {
        (text.to_string(), "stop")
    }
}

/// Synthetic base model: answers every prompt with a per-task quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticBase {
    pub model_name: String,
    #[serde(default)]
    pub quality: BTreeMap<String, f64>,
    #[serde(default)]
    pub default_quality: f64,
}

impl SyntheticBase {
    pub fn new(model_name: impl Into<String>, default_quality: f64) -> Self {
        Self {
            model_name: model_name.into(),
            quality: BTreeMap::new(),
            default_quality,
        }
    }

    pub fn answer(&self, prompt: &str) -> String {
        match SynthHeader::parse(prompt) {
            Some((h, _)) => {
                let q = self.quality.get(&h.task).copied().unwrap_or(self.default_quality);
                synth_answer(h.reference.as_deref(), q, &h.key)
            }
            None => String::new(),
        }
    }
}

/// A set of synthetic experts (and optionally a base) multiplexed by model name.
#[derive(Debug, Clone, Default)]
pub struct SyntheticFleet {
    experts: BTreeMap<String, ExpertProfile>,
    base: Option<SyntheticBase>,
}

impl SyntheticFleet {
    pub fn new(profiles: impl IntoIterator<Item = ExpertProfile>, base: Option<SyntheticBase>) -> Result<Self> {
        let mut experts = BTreeMap::new();
        for p in profiles {
            p.validate()?;
            if base.as_ref().is_some_and(|b| b.model_name == p.expert_id) {
                return Err(Error::invalid(format!("model name `{}` used by expert and base", p.expert_id)));
            }
            if experts.insert(p.expert_id.clone(), p).is_some() {
                return Err(Error::invalid("duplicate synthetic expert id"));
            }
        }
        Ok(Self { experts, base })
    }

    pub fn add(&mut self, profile: ExpertProfile) -> Result<()> {
        profile.validate()?;
        self.experts.insert(profile.expert_id.clone(), profile);
        Ok(())
    }

    pub fn profile(&self, model: &str) -> Option<&ExpertProfile> {
        self.experts.get(model)
    }

    /// Answers one request, or `None` for an unknown model.
    pub fn respond(&self, req: &CompletionRequest) -> Option<CompletionResponse> {
        let raw = if let Some(profile) = self.experts.get(&req.model) {
            let decision = match SynthHeader::parse(&req.prompt) {
                Some((h, body)) => simulate_decision(
                    profile,
                    &QueryRecord {
                        query: body,
                        true_task: &h.task,
                        key: &h.key,
                        reference: h.reference.as_deref(),
                    },
                ),
                None => simulate_decision(
                    profile,
                    &QueryRecord {
                        query: &req.prompt,
                        true_task: "",
                        key: &req.prompt,
                        reference: None,
                    },
                ),
            };
            render_decision(&decision, &profile.indicators)
        } else {
            self.base.as_ref().filter(|b| b.model_name == req.model)?.answer(&req.prompt)
        };
        let (text, finish) = apply_limits(&raw, &req.stop, req.max_tokens);
        Some(CompletionResponse::single(req.model.clone(), text, finish))
    }
}

impl CompletionBackend for SyntheticFleet {
    async fn complete(&self, _endpoint: &str, request: &CompletionRequest) -> std::result::Result<Completion, TransportError> {
        let resp = self.respond(request).ok_or_else(|| {
            TransportError::new(
                request.model.clone(),
                TransportErrorKind::Status {
                    status: 404,
                    body: format!("unknown model `{}`", request.model),
                },
            )
        })?;
        Completion::try_from(resp).map_err(|k| TransportError::new(request.model.clone(), k))
    }
}

/// Reads a JSON list of profiles.
pub fn load_profiles(path: impl AsRef<Path>) -> Result<Vec<ExpertProfile>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let profiles: Vec<ExpertProfile> = serde_json::from_str(&text)?;
    for p in &profiles {
        p.validate()?;
    }
    Ok(profiles)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": { "message": message.into() } }))).into_response()
}

async fn handle_completion(
    State(fleet): State<Arc<SyntheticFleet>>,
    body: std::result::Result<Json<CompletionRequest>, JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(rejection) => return error(StatusCode::BAD_REQUEST, rejection.body_text()),
    };
    match fleet.respond(&req) {
        Some(resp) => Json(resp).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown model `{}`", req.model)),
    }
}

pub fn synthetic_router(fleet: Arc<SyntheticFleet>) -> Router {
    Router::new()
        .route("/v1/completions", post(handle_completion))
        .with_state(fleet)
}

pub async fn serve_synthetic_listener(fleet: Arc<SyntheticFleet>, listener: tokio::net::TcpListener) -> Result<()> {
    axum::serve(listener, synthetic_router(fleet))
        .await
        .map_err(|e| Error::Config(format!("server error: {e}")))
}

pub async fn serve_synthetic(fleet: Arc<SyntheticFleet>, listen: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(listen)
        .await
        .map_err(|e| Error::Config(format!("cannot bind {listen}: {e}")))?;
    tracing::info!(%listen, "synthetic experts listening");
    serve_synthetic_listener(fleet, listener).await
}
