//! Builds an expert's training set: current-task instances tagged with the
//! positive indicator, plus a `tau` fraction of every previous task's queries
//! tagged with the negative indicator and no response.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::corpus::TaskDataset;
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorKind {
    /// Dedicated tokens added to the vocabulary.
    AdditionalToken,
    /// In-vocabulary strings with no meaning, e.g. `<<pos>>`.
    NonSemantic,
    /// In-vocabulary words such as `Yes` / `No`.
    Semantic,
}

impl IndicatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IndicatorKind::AdditionalToken => "additional_token",
            IndicatorKind::NonSemantic => "non_semantic",
            IndicatorKind::Semantic => "semantic",
        }
    }
}

impl std::str::FromStr for IndicatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "additional_token" | "additional" => Ok(IndicatorKind::AdditionalToken),
            "non_semantic" => Ok(IndicatorKind::NonSemantic),
            "semantic" => Ok(IndicatorKind::Semantic),
            other => Err(Error::invalid(format!("unknown indicator kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawIndicators")]
pub struct IndicatorConfig {
    pub positive: String,
    pub negative: String,
    pub kind: IndicatorKind,
}

#[derive(Deserialize)]
struct RawIndicators {
    positive: String,
    negative: String,
    kind: IndicatorKind,
}

impl TryFrom<RawIndicators> for IndicatorConfig {
    type Error = Error;

    fn try_from(raw: RawIndicators) -> Result<Self> {
        IndicatorConfig::new(raw.positive, raw.negative, raw.kind)
    }
}

impl IndicatorConfig {
    pub fn new(positive: impl Into<String>, negative: impl Into<String>, kind: IndicatorKind) -> Result<Self> {
        let positive = positive.into();
        let negative = negative.into();
        if positive.trim().is_empty() || negative.trim().is_empty() {
            return Err(Error::invalid("indicator strings must not be empty"));
        }
        if positive != positive.trim_start() || negative != negative.trim_start() {
            // heads are matched after a left trim
            return Err(Error::invalid("indicator strings must not start with whitespace"));
        }
        if positive.starts_with(&negative) || negative.starts_with(&positive) {
            return Err(Error::invalid(format!(
                "indicators `{positive}` and `{negative}` must differ and neither may prefix the other"
            )));
        }
        Ok(Self {
            positive,
            negative,
            kind,
        })
    }

    pub fn additional_token() -> Self {
        Self {
            positive: "<|pos|>".into(),
            negative: "<|neg|>".into(),
            kind: IndicatorKind::AdditionalToken,
        }
    }

    pub fn non_semantic() -> Self {
        Self {
            positive: "<<pos>>".into(),
            negative: "<<neg>>".into(),
            kind: IndicatorKind::NonSemantic,
        }
    }

    pub fn semantic() -> Self {
        Self {
            positive: "Yes".into(),
            negative: "No".into(),
            kind: IndicatorKind::Semantic,
        }
    }

    /// Default strings for a kind.
    pub fn preset(kind: IndicatorKind) -> Self {
        match kind {
            IndicatorKind::AdditionalToken => Self::additional_token(),
            IndicatorKind::NonSemantic => Self::non_semantic(),
            IndicatorKind::Semantic => Self::semantic(),
        }
    }

    pub fn literal(&self, indicator: Indicator) -> &str {
        match indicator {
            Indicator::Positive => &self.positive,
            Indicator::Negative => &self.negative,
        }
    }

    fn parse_literal(&self, s: &str) -> Option<Indicator> {
        if s == self.positive {
            Some(Indicator::Positive)
        } else if s == self.negative {
            Some(Indicator::Negative)
        } else {
            None
        }
    }
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        Self::additional_token()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Indicator {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReconstructedSample {
    pub query: String,
    pub indicator: Indicator,
    pub response: Option<String>,
    pub origin_task: String,
}

impl ReconstructedSample {
    pub fn positive(query: impl Into<String>, response: impl Into<String>, origin_task: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            indicator: Indicator::Positive,
            response: Some(response.into()),
            origin_task: origin_task.into(),
        }
    }

    pub fn negative(query: impl Into<String>, origin_task: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            indicator: Indicator::Negative,
            response: None,
            origin_task: origin_task.into(),
        }
    }
}

/// Where the negatives of a reconstructed dataset came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NegativeSource {
    Rehearsal,
    PseudoNegative { external_task: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedDataset {
    pub task_id: String,
    pub samples: Vec<ReconstructedSample>,
    pub n_positive: usize,
    pub n_negative: usize,
    /// `None` for pseudo-negative datasets, whose negative count is explicit.
    pub tau: Option<f64>,
    pub seed: u64,
    pub indicators: IndicatorConfig,
    pub negative_source: NegativeSource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RehearsalQuery {
    pub query: String,
    pub origin_task: String,
}

pub fn validate_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must lie in [0, 1], got {tau}")));
    }
    Ok(())
}

/// `floor(tau * len)`, absorbing float error such as `0.29 * 100 = 28.999…`.
pub fn rehearsal_count(tau: f64, len: usize) -> usize {
    let exact = tau * len as f64;
    let nearest = exact.round();
    let count = if (exact - nearest).abs() <= 1e-9 * exact.max(1.0) {
        nearest
    } else {
        exact.floor()
    };
    (count.max(0.0) as usize).min(len)
}

/// Draws `floor(tau * |D_j|)` distinct instances from each previous task, with
/// a generator seeded by `(seed, task index)`. Responses are dropped. Within a
/// task the picks are returned in file order.
pub fn sample_rehearsal(history: &[TaskDataset], tau: f64, seed: u64) -> Result<Vec<RehearsalQuery>> {
    validate_tau(tau)?;
    let mut out = Vec::new();
    for (task_index, task) in history.iter().enumerate() {
        let k = rehearsal_count(tau, task.len());
        let mut rng = seeding::rng_for(seed, task_index as u64);
        let mut picks = index::sample(&mut rng, task.len(), k).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|i| RehearsalQuery {
            query: task.instances[i].query.clone(),
            origin_task: task.task_id.clone(),
        }));
    }
    Ok(out)
}

// Stream id for the final shuffle; task indices use the low range.
const SHUFFLE_STREAM: u64 = u64::MAX;

fn positives(current: &TaskDataset) -> Result<Vec<ReconstructedSample>> {
    current
        .instances
        .iter()
        .enumerate()
        .map(|(index, inst)| match &inst.response {
            Some(r) => Ok(ReconstructedSample::positive(&inst.query, r, &current.task_id)),
            None => Err(Error::MissingResponse {
                task_id: current.task_id.clone(),
                index,
            }),
        })
        .collect()
}

fn shuffled(mut samples: Vec<ReconstructedSample>, seed: u64) -> Vec<ReconstructedSample> {
    let mut rng = seeding::rng_for(seed, SHUFFLE_STREAM);
    samples.shuffle(&mut rng);
    samples
}

pub fn reconstruct_task(
    current: &TaskDataset,
    history: &[TaskDataset],
    tau: f64,
    indicators: &IndicatorConfig,
    seed: u64,
) -> Result<ReconstructedDataset> {
    validate_tau(tau)?;
    let mut samples = positives(current)?;
    let n_positive = samples.len();
    let negatives = sample_rehearsal(history, tau, seed)?;
    let n_negative = negatives.len();
    samples.extend(
        negatives
            .into_iter()
            .map(|r| ReconstructedSample::negative(r.query, r.origin_task)),
    );
    Ok(ReconstructedDataset {
        task_id: current.task_id.clone(),
        samples: shuffled(samples, seed),
        n_positive,
        n_negative,
        tau: Some(tau),
        seed,
        indicators: indicators.clone(),
        negative_source: NegativeSource::Rehearsal,
    })
}

/// Same construction as [`reconstruct_task`] but the negatives come from an
/// unrelated corpus instead of previous tasks.
pub fn make_pseudo_negative(
    current: &TaskDataset,
    external: &TaskDataset,
    count: usize,
    indicators: &IndicatorConfig,
    seed: u64,
) -> Result<ReconstructedDataset> {
    if count > external.len() {
        return Err(Error::invalid(format!(
            "requested {count} pseudo-negatives but `{}` has only {} instances",
            external.task_id,
            external.len()
        )));
    }
    let mut samples = positives(current)?;
    let n_positive = samples.len();
    let mut rng = seeding::rng_for(seed, 0);
    let mut picks = index::sample(&mut rng, external.len(), count).into_vec();
    picks.sort_unstable();
    samples.extend(
        picks
            .into_iter()
            .map(|i| ReconstructedSample::negative(&external.instances[i].query, &external.task_id)),
    );
    Ok(ReconstructedDataset {
        task_id: current.task_id.clone(),
        samples: shuffled(samples, seed),
        n_positive,
        n_negative: count,
        tau: None,
        seed,
        indicators: indicators.clone(),
        negative_source: NegativeSource::PseudoNegative {
            external_task: external.task_id.clone(),
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    query: String,
    indicator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response: Option<String>,
    origin_task: String,
}

/// Sidecar document written next to a reconstructed dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task_id: String,
    pub tau: Option<f64>,
    pub seed: u64,
    pub n_positive: usize,
    pub n_negative: usize,
    pub indicator: IndicatorConfig,
    pub negative_source: NegativeSource,
}

/// `d1.jsonl` -> `d1.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

pub fn write_reconstructed(dataset: &ReconstructedDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in &dataset.samples {
        let rec = SampleRecord {
            query: s.query.clone(),
            indicator: dataset.indicators.literal(s.indicator).to_string(),
            response: s.response.clone(),
            origin_task: s.origin_task.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;

    let manifest = Manifest {
        task_id: dataset.task_id.clone(),
        tau: dataset.tau,
        seed: dataset.seed,
        n_positive: dataset.n_positive,
        n_negative: dataset.n_negative,
        indicator: dataset.indicators.clone(),
        negative_source: dataset.negative_source.clone(),
    };
    let mpath = manifest_path(path);
    let mut doc = serde_json::to_string_pretty(&manifest)?;
    doc.push('\n');
    fs::write(&mpath, doc).map_err(|e| Error::io(&mpath, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let mpath = manifest_path(path.as_ref());
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads a dataset written by [`write_reconstructed`], checking records
/// against the manifest counts.
pub fn read_reconstructed(path: impl AsRef<Path>) -> Result<ReconstructedDataset> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let rec: SampleRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let indicator = manifest
            .indicator
            .parse_literal(&rec.indicator)
            .ok_or_else(|| malformed(format!("unknown indicator `{}`", rec.indicator)))?;
        let sample = match (indicator, rec.response) {
            (Indicator::Positive, Some(r)) => ReconstructedSample::positive(rec.query, r, rec.origin_task),
            (Indicator::Negative, None) => ReconstructedSample::negative(rec.query, rec.origin_task),
            (Indicator::Positive, None) => return Err(malformed("positive sample without response".into())),
            (Indicator::Negative, Some(_)) => return Err(malformed("negative sample with response".into())),
        };
        samples.push(sample);
    }
    let n_positive = samples.iter().filter(|s| s.indicator == Indicator::Positive).count();
    let n_negative = samples.len() - n_positive;
    if n_positive != manifest.n_positive || n_negative != manifest.n_negative {
        return Err(Error::invalid(format!(
            "{}: manifest counts ({}, {}) disagree with records ({n_positive}, {n_negative})",
            path.display(),
            manifest.n_positive,
            manifest.n_negative
        )));
    }
    Ok(ReconstructedDataset {
        task_id: manifest.task_id,
        samples,
        n_positive,
        n_negative,
        tau: manifest.tau,
        seed: manifest.seed,
        indicators: manifest.indicator,
        negative_source: manifest.negative_source,
    })
}
