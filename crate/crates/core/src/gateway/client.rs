use std::future::Future;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{TransportError, TransportErrorKind};

/// Body of `POST {endpoint}/v1/completions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stop: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub index: u32,
    pub text: String,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub object: String,
    #[serde(default)]
    pub model: String,
    pub choices: Vec<Choice>,
}

impl CompletionResponse {
    pub fn single(model: impl Into<String>, text: impl Into<String>, finish_reason: &str) -> Self {
        let model = model.into();
        Self {
            id: format!("cmpl-{model}"),
            object: "text_completion".into(),
            model,
            choices: vec![Choice {
                index: 0,
                text: text.into(),
                finish_reason: Some(finish_reason.into()),
            }],
        }
    }
}

/// The part of a completion the router looks at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub finish_reason: Option<String>,
}

impl TryFrom<CompletionResponse> for Completion {
    type Error = TransportErrorKind;

    fn try_from(resp: CompletionResponse) -> Result<Self, Self::Error> {
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| TransportErrorKind::Protocol("response has no choices".into()))?;
        Ok(Completion {
            text: choice.text,
            finish_reason: choice.finish_reason,
        })
    }
}

/// Anything that can answer a completion request addressed to an endpoint.
pub trait CompletionBackend: Send + Sync {
    fn complete(
        &self,
        endpoint: &str,
        request: &CompletionRequest,
    ) -> impl Future<Output = Result<Completion, TransportError>> + Send;
}

impl<B: CompletionBackend> CompletionBackend for std::sync::Arc<B> {
    fn complete(
        &self,
        endpoint: &str,
        request: &CompletionRequest,
    ) -> impl Future<Output = Result<Completion, TransportError>> + Send {
        (**self).complete(endpoint, request)
    }
}

/// Completion client over HTTP.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    timeout: Duration,
}

impl HttpBackend {
    pub fn new(timeout: Duration) -> Self {
        Self {
            client: reqwest::Client::new(),
            timeout,
        }
    }
}

impl Default for HttpBackend {
    fn default() -> Self {
        Self::new(Duration::from_secs(60))
    }
}

pub(crate) fn completions_url(endpoint: &str) -> String {
    format!("{}/v1/completions", endpoint.trim_end_matches('/'))
}

impl CompletionBackend for HttpBackend {
    async fn complete(&self, endpoint: &str, request: &CompletionRequest) -> Result<Completion, TransportError> {
        let target = request.model.clone();
        let err = |kind| TransportError::new(target.clone(), kind);
        let map_reqwest = |e: reqwest::Error| {
            if e.is_timeout() {
                err(TransportErrorKind::Timeout(self.timeout))
            } else if e.is_decode() {
                err(TransportErrorKind::Protocol(e.to_string()))
            } else {
                err(TransportErrorKind::Unreachable(e.to_string()))
            }
        };
        let resp = self
            .client
            .post(completions_url(endpoint))
            .timeout(self.timeout)
            .json(request)
            .send()
            .await
            .map_err(map_reqwest)?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(err(TransportErrorKind::Status {
                status: status.as_u16(),
                body,
            }));
        }
        let bytes = resp.bytes().await.map_err(map_reqwest)?;
        let parsed: CompletionResponse =
            serde_json::from_slice(&bytes).map_err(|e| err(TransportErrorKind::Protocol(e.to_string())))?;
        Completion::try_from(parsed).map_err(err)
    }
}

/// One completion call at temperature 0.
pub async fn expert_complete<B: CompletionBackend>(
    backend: &B,
    endpoint: &str,
    model_name: &str,
    prompt: &str,
    max_tokens: u32,
    stop: &[String],
) -> Result<Completion, TransportError> {
    let request = CompletionRequest {
        model: model_name.to_string(),
        prompt: prompt.to_string(),
        max_tokens,
        temperature: 0.0,
        stop: stop.to_vec(),
    };
    backend.complete(endpoint, &request).await
}
