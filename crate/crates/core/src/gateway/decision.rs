use serde::{Deserialize, Serialize};

use crate::reconstruct::IndicatorConfig;

/// What an expert's completion head says about a query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "text", rename_all = "snake_case")]
pub enum Decision {
    /// Claimed; carries the answer with the indicator stripped.
    Positive(String),
    Negative,
    /// Neither indicator leads the output; carries the raw text.
    NoIndicator(String),
}

/// Exact string-prefix match after a left trim.
pub fn classify_head(raw_output: &str, indicators: &IndicatorConfig) -> Decision {
    let head = raw_output.trim_start();
    if let Some(rest) = head.strip_prefix(indicators.positive.as_str()) {
        Decision::Positive(rest.trim_start().to_string())
    } else if head.starts_with(indicators.negative.as_str()) {
        Decision::Negative
    } else {
        Decision::NoIndicator(raw_output.to_string())
    }
}
