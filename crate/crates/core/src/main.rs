use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use expert_chain::corpus::{load_task_dataset, Split, TaskDataset};
use expert_chain::gateway::{self, ErrorPolicy, GatewayConfig, GatewayState, GenerationParams, HttpBackend};
use expert_chain::metrics::{handler_counts, rb_acc, routing_f1, RouteLabel};
use expert_chain::overhead::{self, LatencyParams};
use expert_chain::reconstruct::{
    make_pseudo_negative, reconstruct_task, rehearsal_count, write_reconstructed, IndicatorConfig, IndicatorKind,
};
use expert_chain::registry::{load_registry, save_registry, BaseModel, ExpertSpec, Registry, RegistryHandle};
use expert_chain::scenario::{self, PromptMode, ScenarioConfig, ScoreMatrixFile};
use expert_chain::synth::{load_profiles, serve_synthetic, SyntheticBase, SyntheticFleet};

#[derive(Parser)]
#[command(name = "expert-chain", version, about = "Sequential expert-chain routing for continual fine-tuning")]
struct Cli {
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build an indicator-tagged training set with rehearsal negatives.
    Reconstruct(ReconstructArgs),
    /// Manage the expert registry.
    #[command(subcommand)]
    Registry(RegistryCmd),
    /// Run the sequential-routing gateway.
    Serve(ServeArgs),
    /// Synthetic expert backends.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Score a matrix, or route eval sets through a running chain.
    Eval(EvalArgs),
    /// Latency overhead of sequential routing.
    Overhead(OverheadArgs),
    /// Run a full continual scenario.
    RunSequence(RunSequenceArgs),
}

#[derive(Args)]
struct IndicatorArgs {
    /// additional_token, non_semantic or semantic
    #[arg(long, default_value = "additional_token")]
    indicator_kind: IndicatorKind,
    /// Override the positive indicator string.
    #[arg(long)]
    pos: Option<String>,
    /// Override the negative indicator string.
    #[arg(long)]
    neg: Option<String>,
}

impl IndicatorArgs {
    fn build(&self) -> anyhow::Result<IndicatorConfig> {
        let preset = IndicatorConfig::preset(self.indicator_kind);
        Ok(IndicatorConfig::new(
            self.pos.clone().unwrap_or(preset.positive),
            self.neg.clone().unwrap_or(preset.negative),
            self.indicator_kind,
        )?)
    }
}

#[derive(Args)]
struct ReconstructArgs {
    /// Current task's training file.
    #[arg(long)]
    current: PathBuf,
    /// Task id of the current task (default: file stem).
    #[arg(long)]
    current_task: Option<String>,
    /// Previous task files, oldest first; `ID=PATH` or `PATH` (id = file stem).
    #[arg(long)]
    history: Vec<String>,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Draw negatives from this external corpus instead of the history.
    #[arg(long)]
    pseudo_negative: Option<String>,
    /// Pseudo-negative count (default: what rehearsal would draw at --tau).
    #[arg(long)]
    count: Option<usize>,
    #[command(flatten)]
    indicators: IndicatorArgs,
}

#[derive(Subcommand)]
enum RegistryCmd {
    /// Create an empty registry with a base model.
    Init {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        base_endpoint: String,
        #[arg(long)]
        base_model: String,
    },
    /// Append an expert as the next stage.
    Add(RegistryAddArgs),
    /// Print the chain in routing order.
    Show {
        #[arg(long)]
        registry: PathBuf,
    },
}

#[derive(Args)]
struct RegistryAddArgs {
    #[arg(long)]
    registry: PathBuf,
    /// Expert spec JSON (as written by a trainer); replaces the flags below.
    #[arg(long, conflicts_with_all = ["expert_id", "task", "endpoint", "model"])]
    spec: Option<PathBuf>,
    #[arg(long)]
    expert_id: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Defaults to the next stage.
    #[arg(long)]
    stage: Option<u32>,
    #[command(flatten)]
    indicators: IndicatorArgs,
}

#[derive(Args)]
struct ServeArgs {
    /// Gateway config (TOML); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long)]
    listen: Option<SocketAddr>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    /// Fail requests when an expert is unreachable instead of falling back.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Serve synthetic experts, multiplexed by model name.
    Serve {
        /// JSON list of expert profiles.
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        listen: SocketAddr,
        /// Model name answered by the synthetic base.
        #[arg(long, default_value = "base")]
        base_model: String,
        #[arg(long, default_value_t = 0.0)]
        base_quality: f64,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Score matrix file; prints AR and BWT.
    #[arg(long, conflicts_with_all = ["registry", "task", "ood"])]
    matrix: Option<PathBuf>,
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Eval set as `ID=PATH`; repeatable.
    #[arg(long)]
    task: Vec<String>,
    /// Out-of-distribution queries for RB-Acc.
    #[arg(long)]
    ood: Option<PathBuf>,
    /// Prefix prompts with synthetic headers (synthetic experts only).
    #[arg(long)]
    synthetic_headers: bool,
    #[arg(long, default_value_t = 60_000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 8)]
    concurrency: usize,
    #[arg(long, default_value_t = 512)]
    max_tokens: u32,
}

#[derive(Args)]
struct OverheadArgs {
    #[arg(long)]
    ttft: f64,
    #[arg(long)]
    tpot: f64,
    /// Output tokens.
    #[arg(long)]
    n: u64,
    /// Number of experts.
    #[arg(long)]
    m: u64,
    #[arg(long)]
    simulate: bool,
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunSequenceArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn split_task_arg(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((id, path)) if !id.is_empty() => (id.to_string(), PathBuf::from(path)),
        _ => (file_stem(Path::new(arg)), PathBuf::from(arg)),
    }
}

fn file_stem(path: &Path) -> String {
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("task");
    name.split('.').next().unwrap_or(name).to_string()
}

fn emit(json_mode: bool, value: serde_json::Value, text: impl FnOnce() -> String) -> anyhow::Result<()> {
    if json_mode {
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        println!("{}", text());
    }
    Ok(())
}

fn cmd_reconstruct(a: ReconstructArgs, json_mode: bool) -> anyhow::Result<()> {
    let indicators = a.indicators.build()?;
    let current_id = a.current_task.clone().unwrap_or_else(|| file_stem(&a.current));
    let current = load_task_dataset(&a.current, &current_id, Split::Train)?;
    let history = a
        .history
        .iter()
        .map(|h| {
            let (id, path) = split_task_arg(h);
            load_task_dataset(&path, &id, Split::Train)
        })
        .collect::<Result<Vec<TaskDataset>, _>>()?;
    expert_chain::corpus::check_unique_task_ids(std::iter::once(&current).chain(&history))?;
    let dataset = match &a.pseudo_negative {
        Some(ext) => {
            let (id, path) = split_task_arg(ext);
            let external = load_task_dataset(&path, &id, Split::Train)?;
            let count = a
                .count
                .unwrap_or_else(|| history.iter().map(|h| rehearsal_count(a.tau, h.len())).sum());
            make_pseudo_negative(&current, &external, count, &indicators, a.seed)?
        }
        None => reconstruct_task(&current, &history, a.tau, &indicators, a.seed)?,
    };
    write_reconstructed(&dataset, &a.out)?;
    let manifest = expert_chain::reconstruct::manifest_path(&a.out);
    emit(
        json_mode,
        json!({
            "task_id": dataset.task_id,
            "n_positive": dataset.n_positive,
            "n_negative": dataset.n_negative,
            "samples": dataset.samples.len(),
            "out": a.out,
            "manifest": manifest,
        }),
        || {
            format!(
                "{}: {} positive, {} negative -> {} (manifest {})",
                dataset.task_id,
                dataset.n_positive,
                dataset.n_negative,
                a.out.display(),
                manifest.display()
            )
        },
    )
}

fn print_registry(reg: &Registry, json_mode: bool) -> anyhow::Result<()> {
    let order: Vec<_> = reg
        .routing_order()
        .map(|e| json!({"stage": e.stage, "expert_id": e.expert_id, "task_id": e.task_id, "endpoint": e.endpoint}))
        .collect();
    emit(
        json_mode,
        json!({"routing_order": order, "base": reg.base()}),
        || {
            let mut s = String::new();
            for e in reg.routing_order() {
                s.push_str(&format!("{:>3}  {:<24} {:<16} {}\n", e.stage, e.expert_id, e.task_id, e.endpoint));
            }
            s.push_str(&format!("base {} @ {}", reg.base().model_name, reg.base().endpoint));
            s
        },
    )
}

fn cmd_registry(cmd: RegistryCmd, json_mode: bool) -> anyhow::Result<()> {
    match cmd {
        RegistryCmd::Init {
            registry,
            base_endpoint,
            base_model,
        } => {
            if registry.exists() {
                bail!("{} already exists", registry.display());
            }
            let reg = Registry::new(BaseModel {
                endpoint: base_endpoint,
                model_name: base_model,
            })?;
            save_registry(&reg, &registry)?;
            print_registry(&reg, json_mode)
        }
        RegistryCmd::Add(a) => {
            let reg = load_registry(&a.registry)?;
            let spec = match &a.spec {
                Some(path) => {
                    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
                    serde_json::from_str::<ExpertSpec>(&text)?
                }
                None => {
                    let need = |v: &Option<String>, flag: &str| v.clone().ok_or_else(|| anyhow!("missing --{flag}"));
                    let expert_id = need(&a.expert_id, "expert-id")?;
                    ExpertSpec {
                        task_id: need(&a.task, "task")?,
                        stage: a.stage.unwrap_or(reg.max_stage() + 1),
                        endpoint: need(&a.endpoint, "endpoint")?,
                        model_name: a.model.clone().unwrap_or_else(|| expert_id.clone()),
                        indicators: a.indicators.build()?,
                        expert_id,
                    }
                }
            };
            let reg = reg.register_expert(spec)?;
            save_registry(&reg, &a.registry)?;
            print_registry(&reg, json_mode)
        }
        RegistryCmd::Show { registry } => print_registry(&load_registry(&registry)?, json_mode),
    }
}

async fn cmd_serve(a: ServeArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => GatewayConfig::load(p)?,
        None => GatewayConfig {
            listen: a.listen.ok_or_else(|| anyhow!("--listen or --config is required"))?,
            registry: a.registry.clone().ok_or_else(|| anyhow!("--registry or --config is required"))?,
            timeout_ms: 30_000,
            error_policy: ErrorPolicy::Fallback,
            max_tokens: 512,
            stop_on_negative: true,
        },
    };
    if let Some(l) = a.listen {
        cfg.listen = l;
    }
    if let Some(r) = a.registry {
        cfg.registry = r;
    }
    if let Some(t) = a.timeout_ms {
        cfg.timeout_ms = t;
    }
    if a.strict {
        cfg.error_policy = ErrorPolicy::Strict;
    }
    let registry = load_registry(&cfg.registry)?;
    let state = Arc::new(GatewayState {
        registry: RegistryHandle::new(registry),
        backend: HttpBackend::new(cfg.timeout()),
        params: cfg.generation(),
    });
    gateway::serve(state, cfg.listen).await?;
    Ok(())
}

async fn cmd_synth(cmd: SynthCmd) -> anyhow::Result<()> {
    match cmd {
        SynthCmd::Serve {
            profiles,
            listen,
            base_model,
            base_quality,
        } => {
            let fleet = SyntheticFleet::new(load_profiles(&profiles)?, Some(SyntheticBase::new(base_model, base_quality)))?;
            serve_synthetic(Arc::new(fleet), listen).await?;
            Ok(())
        }
    }
}

async fn cmd_eval(a: EvalArgs, json_mode: bool) -> anyhow::Result<()> {
    if let Some(path) = &a.matrix {
        let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
        let file: ScoreMatrixFile = serde_json::from_str(&text)?;
        let ar = file.matrix.ar()?;
        let bwt = if file.matrix.tasks() >= 2 { Some(file.matrix.bwt()?) } else { None };
        return emit(json_mode, json!({"ar": ar, "bwt": bwt}), || match bwt {
            Some(b) => format!("AR  {ar:.4}\nBWT {b:.4}"),
            None => format!("AR  {ar:.4}\nBWT n/a (single task)"),
        });
    }
    let registry = load_registry(a.registry.as_ref().ok_or_else(|| anyhow!("--matrix or --registry is required"))?)?;
    if a.task.is_empty() && a.ood.is_none() {
        bail!("give at least one --task ID=PATH or --ood PATH");
    }
    let eval_sets = a
        .task
        .iter()
        .map(|t| {
            let (id, path) = split_task_arg(t);
            load_task_dataset(&path, &id, Split::Eval)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let backend = HttpBackend::new(Duration::from_millis(a.timeout_ms));
    let params = GenerationParams {
        max_tokens: a.max_tokens,
        ..Default::default()
    };
    let mode = if a.synthetic_headers { PromptMode::Synthetic } else { PromptMode::Plain };
    let mut out = serde_json::Map::new();
    let mut lines = Vec::new();
    if !eval_sets.is_empty() {
        let ev = scenario::evaluate_stage(&backend, &registry, &eval_sets, mode, &params, a.concurrency).await?;
        let traces: Vec<_> = ev.records.iter().map(|r| r.trace.clone()).collect();
        let truth: Vec<_> = ev.records.iter().map(|r| RouteLabel::Task(r.task.clone())).collect();
        let f1 = routing_f1(&traces, &truth)?;
        let scores: serde_json::Map<_, _> = eval_sets
            .iter()
            .zip(&ev.row)
            .map(|(d, s)| (d.task_id.clone(), json!(s)))
            .collect();
        for (d, s) in eval_sets.iter().zip(&ev.row) {
            lines.push(format!("{:<16} ROUGE-L {s:.2}", d.task_id));
        }
        lines.push(format!("R-F1 (macro) {:.4}", f1.macro_f1));
        out.insert("scores".into(), json!(scores));
        out.insert("r_f1".into(), serde_json::to_value(&f1)?);
        out.insert("handlers".into(), json!(handler_counts(&traces)));
    }
    if let Some(path) = &a.ood {
        let ood = load_task_dataset(path, scenario::OOD_TASK, Split::Eval)?;
        let traces = scenario::route_ood(&backend, &registry, &ood, mode, &params, a.concurrency).await?;
        let acc = rb_acc(&traces)?;
        lines.push(format!("RB-Acc {acc:.4}"));
        out.insert("rb_acc".into(), json!(acc));
    }
    emit(json_mode, serde_json::Value::Object(out), || lines.join("\n"))
}

fn cmd_overhead(a: OverheadArgs, json_mode: bool) -> anyhow::Result<()> {
    let params = LatencyParams::new(a.ttft, a.tpot, a.n, a.m)?;
    let extra = overhead::extra_overhead(&params)?;
    let direct = overhead::relative_latency_increase(&params)?;
    let hops = overhead::expected_hops(a.m)?;
    let sim = if a.simulate {
        Some(overhead::simulate_latency(&params, a.trials, a.seed)?)
    } else {
        None
    };
    let value = json!({
        "params": params,
        "expected_hops": hops,
        "latency0": params.baseline_latency(),
        "latency1": params.chained_latency(),
        "extra_overhead": extra,
        "relative_latency_increase": direct,
        "simulation": sim,
    });
    emit(json_mode, value, || {
        let mut s = format!(
            "expected hops             {hops}\nlatency0                  {}\nlatency1                  {}\nextra overhead            {extra:.4}\nrelative latency increase {direct:.4}",
            params.baseline_latency(),
            params.chained_latency()
        );
        if let Some(sim) = &sim {
            s.push_str(&format!(
                "\nsimulated ({} trials)    {:.4} (mean hops {:.4})",
                sim.trials, sim.mean_overhead, sim.mean_hops
            ));
        }
        s
    })
}

async fn cmd_run_sequence(a: RunSequenceArgs, json_mode: bool) -> anyhow::Result<()> {
    let mut cfg = ScenarioConfig::load(&a.config)?;
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    let outcome = scenario::run_sequence(&cfg).await?;
    let r = &outcome.report;
    emit(json_mode, serde_json::to_value(r)?, || {
        let mut s = format!("AR   {:.4}\n", r.eval.ar);
        match r.eval.bwt {
            Some(b) => s.push_str(&format!("BWT  {b:.4}\n")),
            None => s.push_str("BWT  n/a (single task)\n"),
        }
        s.push_str(&format!("R-F1 {:.4}\n", r.eval.r_f1.macro_f1));
        if let Some(rb) = r.eval.rb_acc {
            s.push_str(&format!("RB-Acc {rb:.4}\n"));
        }
        s.push_str(&format!("report: {}", outcome.output_dir.join("report.json").display()));
        s
    })
}

async fn run(cli: Cli) -> anyhow::Result<()> {
    let json_mode = cli.json;
    match cli.command {
        Cmd::Reconstruct(a) => cmd_reconstruct(a, json_mode),
        Cmd::Registry(c) => cmd_registry(c, json_mode),
        Cmd::Serve(a) => cmd_serve(a).await,
        Cmd::Synth(c) => cmd_synth(c).await,
        Cmd::Eval(a) => cmd_eval(a, json_mode).await,
        Cmd::Overhead(a) => cmd_overhead(a, json_mode),
        Cmd::RunSequence(a) => cmd_run_sequence(a, json_mode).await,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
