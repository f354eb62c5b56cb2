//! End-to-end continual scenario: for each stage reconstruct the training
//! set, obtain an expert (synthesised or trained by an external command),
//! append it to the chain and evaluate every task learned so far through the
//! whole chain.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! stage-<i>/reconstructed.jsonl
//! stage-<i>/reconstructed.manifest.json
//! stage-<i>/profile.json          (synthetic backend)
//! stage-<i>/expert.json           (external backend, written by the command)
//! stage-<i>/registry.json
//! stage-<i>/traces.jsonl
//! ood_traces.jsonl                (when an OOD stream is configured)
//! score_matrix.json
//! report.json
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::corpus::{check_unique_task_ids, load_task_dataset, Split, TaskDataset};
use crate::error::{Error, Result};
use crate::gateway::{route, CompletionBackend, ErrorPolicy, GenerationParams, HttpBackend, RoutingTrace};
use crate::metrics::{average_rouge, handler_counts, rb_acc, rouge_l, routing_f1, EvalReport, RouteLabel, ScoreMatrix};
use crate::reconstruct::{reconstruct_task, validate_tau, write_reconstructed, IndicatorConfig};
use crate::registry::{save_registry, BaseModel, ExpertSpec, Registry};
use crate::seeding;
use crate::synth::{ExpertProfile, SynthHeader, SyntheticBase, SyntheticFleet};

/// Task label carried by out-of-distribution queries in synthetic headers.
pub const OOD_TASK: &str = "ood";
const SYNTHETIC_ENDPOINT: &str = "http://synthetic.invalid";
const SYNTHETIC_BASE: &str = "base";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub id: String,
    pub train: PathBuf,
    pub eval: PathBuf,
    /// Synthetic answer quality for this task; overrides the template.
    #[serde(default)]
    pub quality: Option<f64>,
}

/// How synthetic experts behave, as a function of the rehearsal ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileTemplate {
    /// Probability an expert claims its own task.
    pub own_recognition: f64,
    /// Probability an expert wrongly claims an earlier task at `tau = 0`.
    pub prior_false_positive: f64,
    /// The false-positive rate on earlier tasks is
    /// `prior_false_positive · exp(−rehearsal_decay · tau)`.
    pub rehearsal_decay: f64,
    /// Probability of claiming an out-of-distribution query.
    pub ood_false_positive: f64,
    pub no_indicator_rate: f64,
    pub answer_quality: f64,
}

impl Default for ProfileTemplate {
    fn default() -> Self {
        Self {
            own_recognition: 1.0,
            prior_false_positive: 0.0,
            rehearsal_decay: 0.0,
            ood_false_positive: 0.0,
            no_indicator_rate: 0.0,
            answer_quality: 1.0,
        }
    }
}

impl ProfileTemplate {
    pub fn prior_false_positive_at(&self, tau: f64) -> f64 {
        self.prior_false_positive * (-self.rehearsal_decay * tau).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Experts are simulated in-process from a template.
    Synthetic {
        #[serde(default)]
        template: ProfileTemplate,
        #[serde(default)]
        base_quality: f64,
    },
    /// Each stage runs `command`, which must leave `expert.json` (an expert
    /// spec) in the stage directory. Evaluation goes over HTTP.
    External {
        command: Vec<String>,
        base_endpoint: String,
        base_model: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        /// Add synthetic headers to prompts (for synthetic expert servers).
        #[serde(default)]
        headers: bool,
    },
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_concurrency() -> usize {
    8
}

fn default_max_tokens() -> u32 {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub indicators: IndicatorConfig,
    pub tasks: Vec<TaskEntry>,
    /// Queries from outside every task, used for base-routing accuracy.
    #[serde(default)]
    pub ood: Option<PathBuf>,
    pub backend: BackendConfig,
}

impl ScenarioConfig {
    /// Reads TOML (or JSON for a `.json` extension). Relative paths are
    /// resolved against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ScenarioConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        if let Some(dir) = path.parent() {
            cfg.resolve_relative(dir);
        }
        Ok(cfg)
    }

    fn resolve_relative(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for t in &mut self.tasks {
            fix(&mut t.train);
            fix(&mut t.eval);
        }
        if let Some(o) = &mut self.ood {
            fix(o);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("task sequence is empty".into()));
        }
        validate_tau(self.tau)?;
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        let mut files: Vec<&Path> = self.tasks.iter().flat_map(|t| [t.train.as_path(), t.eval.as_path()]).collect();
        files.extend(self.ood.as_deref());
        if let Some(missing) = files.into_iter().find(|p| !p.exists()) {
            return Err(Error::Config(format!("missing file {}", missing.display())));
        }
        if let Some(t) = self.tasks.iter().find(|t| t.id == OOD_TASK) {
            return Err(Error::Config(format!("task id `{}` is reserved", t.id)));
        }
        if let BackendConfig::External { command, .. } = &self.backend {
            if command.is_empty() {
                return Err(Error::Config("external backend needs a command".into()));
            }
        }
        Ok(())
    }
}

/// One evaluated query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: String,
    pub index: usize,
    pub reference: String,
    pub score: f64,
    pub trace: RoutingTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageEvaluation {
    /// Per-task score (0–100), in the order of the eval sets.
    pub row: Vec<f64>,
    pub records: Vec<EvalRecord>,
}

/// How prompts are presented to the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    Plain,
    /// Prefix a synthetic header with task, key and reference.
    Synthetic,
}

pub(crate) fn eval_key(task: &str, index: usize) -> String {
    format!("{task}/eval/{index}")
}

fn prompt_for(mode: PromptMode, task: &str, index: usize, query: &str, reference: Option<&str>) -> String {
    match mode {
        PromptMode::Plain => query.to_string(),
        PromptMode::Synthetic => SynthHeader {
            task: task.to_string(),
            key: eval_key(task, index),
            reference: reference.map(str::to_string),
        }
        .wrap(query),
    }
}

/// Routes every eval instance through the current chain and scores the
/// answers with ROUGE-L. Requests run concurrently up to `concurrency`;
/// results keep input order.
pub async fn evaluate_stage<B: CompletionBackend>(
    backend: &B,
    registry: &Registry,
    eval_sets: &[TaskDataset],
    mode: PromptMode,
    params: &GenerationParams,
    concurrency: usize,
) -> Result<StageEvaluation> {
    let mut jobs = Vec::new();
    for ds in eval_sets {
        for (index, inst) in ds.instances.iter().enumerate() {
            let reference = inst.response.clone().ok_or_else(|| Error::MissingResponse {
                task_id: ds.task_id.clone(),
                index,
            })?;
            jobs.push((ds.task_id.as_str(), index, inst.query.as_str(), reference));
        }
    }
    let records: Vec<EvalRecord> = stream::iter(jobs)
        .map(|(task, index, query, reference)| async move {
            let prompt = prompt_for(mode, task, index, query, Some(&reference));
            let trace = route(backend, registry, &prompt, params).await?;
            Ok::<_, Error>(EvalRecord {
                task: task.to_string(),
                index,
                score: rouge_l(&trace.answer, &reference),
                reference,
                trace,
            })
        })
        .buffered(concurrency.max(1))
        .collect::<Vec<_>>()
        .await
        .into_iter()
        .collect::<Result<_>>()?;
    let row = eval_sets
        .iter()
        .map(|ds| {
            let scores: Vec<f64> = records.iter().filter(|r| r.task == ds.task_id).map(|r| r.score).collect();
            average_rouge(&scores)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StageEvaluation { row, records })
}

/// Routes out-of-distribution queries (no references needed).
pub async fn route_ood<B: CompletionBackend>(
    backend: &B,
    registry: &Registry,
    ood: &TaskDataset,
    mode: PromptMode,
    params: &GenerationParams,
    concurrency: usize,
) -> Result<Vec<RoutingTrace>> {
    stream::iter(ood.instances.iter().enumerate())
        .map(|(index, inst)| async move {
            let prompt = prompt_for(mode, OOD_TASK, index, &inst.query, inst.response.as_deref());
            route(backend, registry, &prompt, params).await
        })
        .buffered(concurrency.max(1))
        .collect::<Vec<_>>()
        .await
        .into_iter()
        .collect()
}

/// Synthetic profile for the expert learned at `stage` (1-based).
pub fn synthetic_profile(
    config: &ScenarioConfig,
    template: &ProfileTemplate,
    stage: usize,
) -> ExpertProfile {
    let task = &config.tasks[stage - 1];
    let fp = template.prior_false_positive_at(config.tau);
    let mut profile = ExpertProfile {
        expert_id: format!("expert-{stage}-{}", task.id),
        own_task: task.id.clone(),
        indicators: config.indicators.clone(),
        recognition: Default::default(),
        answer_quality: Default::default(),
        no_indicator_rate: template.no_indicator_rate,
        seed: seeding::derive_seed(config.seed, stage as u64),
    };
    for earlier in &config.tasks[..stage - 1] {
        profile.recognition.insert(earlier.id.clone(), fp);
    }
    profile.recognition.insert(OOD_TASK.into(), template.ood_false_positive);
    profile.recognition.insert(task.id.clone(), template.own_recognition);
    profile
        .answer_quality
        .insert(task.id.clone(), task.quality.unwrap_or(template.answer_quality));
    profile
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrixFile {
    pub task_ids: Vec<String>,
    pub matrix: ScoreMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub task_ids: Vec<String>,
    pub tau: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutcome {
    pub matrix: ScoreMatrix,
    pub report: ScenarioReport,
    pub registry: Registry,
    pub output_dir: PathBuf,
}

enum Backend {
    Synthetic(SyntheticFleet),
    Http(HttpBackend),
}

impl CompletionBackend for Backend {
    async fn complete(
        &self,
        endpoint: &str,
        request: &crate::gateway::CompletionRequest,
    ) -> std::result::Result<crate::gateway::Completion, crate::error::TransportError> {
        match self {
            Backend::Synthetic(f) => f.complete(endpoint, request).await,
            Backend::Http(h) => h.complete(endpoint, request).await,
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut doc = serde_json::to_string_pretty(value)?;
    doc.push('\n');
    fs::write(path, doc).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn run_trainer(command: &[String], stage_dir: &Path, stage: usize, task: &str, dataset: &Path) -> Result<ExpertSpec> {
    let (program, args) = command.split_first().expect("validated non-empty");
    let status = Command::new(program)
        .args(args)
        .env("EXPERT_CHAIN_STAGE", stage.to_string())
        .env("EXPERT_CHAIN_TASK", task)
        .env("EXPERT_CHAIN_DATASET", dataset)
        .env("EXPERT_CHAIN_MANIFEST", crate::reconstruct::manifest_path(dataset))
        .env("EXPERT_CHAIN_OUT_DIR", stage_dir)
        .status()
        .map_err(|e| Error::Config(format!("cannot run `{program}`: {e}")))?;
    if !status.success() {
        return Err(Error::Config(format!("trainer command exited with {status}")));
    }
    let spec_path = stage_dir.join("expert.json");
    let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Runs every stage in order. A failing stage aborts with its 1-based index;
/// artifacts of earlier stages stay on disk.
pub async fn run_sequence(config: &ScenarioConfig) -> Result<ScenarioOutcome> {
    config.validate()?;
    let out_dir = &config.output_dir;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut train = Vec::with_capacity(config.tasks.len());
    let mut eval = Vec::with_capacity(config.tasks.len());
    for t in &config.tasks {
        train.push(load_task_dataset(&t.train, &t.id, Split::Train)?);
        eval.push(load_task_dataset(&t.eval, &t.id, Split::Eval)?);
    }
    check_unique_task_ids(&train)?;
    let ood = match &config.ood {
        Some(p) => Some(load_task_dataset(p, OOD_TASK, Split::Eval)?),
        None => None,
    };

    let (mut backend, base, mode) = match &config.backend {
        BackendConfig::Synthetic { base_quality, .. } => (
            Backend::Synthetic(SyntheticFleet::new([], Some(SyntheticBase::new(SYNTHETIC_BASE, *base_quality)))?),
            BaseModel {
                endpoint: SYNTHETIC_ENDPOINT.into(),
                model_name: SYNTHETIC_BASE.into(),
            },
            PromptMode::Synthetic,
        ),
        BackendConfig::External {
            base_endpoint,
            base_model,
            timeout_ms,
            headers,
            ..
        } => (
            Backend::Http(HttpBackend::new(Duration::from_millis(*timeout_ms))),
            BaseModel {
                endpoint: base_endpoint.clone(),
                model_name: base_model.clone(),
            },
            if *headers { PromptMode::Synthetic } else { PromptMode::Plain },
        ),
    };
    let params = GenerationParams {
        max_tokens: config.max_tokens,
        stop_on_negative: true,
        error_policy: ErrorPolicy::Fallback,
    };

    let mut registry = Registry::new(base)?;
    let mut matrix = ScoreMatrix::new(config.tasks.len());
    let mut final_records = Vec::new();

    for stage in 1..=config.tasks.len() {
        let stage_err = |e: Error| Error::Stage {
            stage,
            source: Box::new(e),
        };
        let stage_dir = out_dir.join(format!("stage-{stage}"));
        fs::create_dir_all(&stage_dir).map_err(|e| stage_err(Error::io(&stage_dir, e)))?;
        let idx = stage - 1;
        let task_id = &config.tasks[idx].id;

        let dataset = reconstruct_task(
            &train[idx],
            &train[..idx],
            config.tau,
            &config.indicators,
            seeding::derive_seed(config.seed, stage as u64),
        )
        .map_err(stage_err)?;
        let dataset_path = stage_dir.join("reconstructed.jsonl");
        write_reconstructed(&dataset, &dataset_path).map_err(stage_err)?;

        let spec = match (&config.backend, &mut backend) {
            (BackendConfig::Synthetic { template, .. }, Backend::Synthetic(fleet)) => {
                let profile = synthetic_profile(config, template, stage);
                write_json(&stage_dir.join("profile.json"), &profile).map_err(stage_err)?;
                let spec = ExpertSpec {
                    expert_id: profile.expert_id.clone(),
                    task_id: task_id.clone(),
                    stage: stage as u32,
                    endpoint: SYNTHETIC_ENDPOINT.into(),
                    model_name: profile.expert_id.clone(),
                    indicators: config.indicators.clone(),
                };
                fleet.add(profile).map_err(stage_err)?;
                spec
            }
            (BackendConfig::External { command, .. }, _) => {
                run_trainer(command, &stage_dir, stage, task_id, &dataset_path).map_err(stage_err)?
            }
            _ => unreachable!("backend matches config"),
        };
        registry = registry.register_expert(spec).map_err(stage_err)?;
        save_registry(&registry, stage_dir.join("registry.json")).map_err(stage_err)?;

        let evaluation = evaluate_stage(&backend, &registry, &eval[..=idx], mode, &params, config.concurrency)
            .await
            .map_err(stage_err)?;
        write_jsonl(&stage_dir.join("traces.jsonl"), &evaluation.records).map_err(stage_err)?;
        matrix.push_row(evaluation.row).map_err(stage_err)?;
        tracing::info!(stage, task = %task_id, "stage complete");
        final_records = evaluation.records;
    }

    let traces: Vec<RoutingTrace> = final_records.iter().map(|r| r.trace.clone()).collect();
    let truth: Vec<RouteLabel> = final_records.iter().map(|r| RouteLabel::Task(r.task.clone())).collect();
    let r_f1 = routing_f1(&traces, &truth)?;
    let mut summary = handler_counts(&traces);
    let rb = match &ood {
        Some(ood) => {
            let ood_traces = route_ood(&backend, &registry, ood, mode, &params, config.concurrency).await?;
            write_jsonl(&out_dir.join("ood_traces.jsonl"), &ood_traces)?;
            for (k, v) in handler_counts(&ood_traces) {
                summary.insert(format!("ood:{k}"), v);
            }
            Some(rb_acc(&ood_traces)?)
        }
        None => None,
    };

    let report = ScenarioReport {
        name: config.name.clone(),
        task_ids: config.tasks.iter().map(|t| t.id.clone()).collect(),
        tau: config.tau,
        seed: config.seed,
        eval: EvalReport {
            ar: matrix.ar()?,
            bwt: if matrix.tasks() >= 2 { Some(matrix.bwt()?) } else { None },
            r_f1,
            rb_acc: rb,
            traces_summary: summary,
        },
    };
    write_json(
        &out_dir.join("score_matrix.json"),
        &ScoreMatrixFile {
            task_ids: report.task_ids.clone(),
            matrix: matrix.clone(),
        },
    )?;
    write_json(&out_dir.join("report.json"), &report)?;

    Ok(ScenarioOutcome {
        matrix,
        report,
        registry,
        output_dir: out_dir.clone(),
    })
}
