//! The `proagym` command line. Exit status: 0 on success, 1 on a domain
//! error, 2 on a usage error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::gateway::{Gateway, LiveBackend, RecordingBackend, ScriptedBackend};
use crate::gym::{Category, Gym, Scenario};
use crate::ingest::{merge_segments, parse_raw_trace, render_events, MergeConfig, Redactor, RenderConfig};
use crate::judge::{explain_row, AnnotationItem};
use crate::prompts::PromptSet;
use crate::runner::{
    check_simulation, render_settings, resume_evaluation, run_simulation, settings_matrix, EvalItem, MemoryMode,
    RunConfig, RunManifest,
};
use crate::service::{dataset_split, serve, AnnotationStore, AppConfig, DEFAULT_TEST_FRACTION};
use crate::trace::{read_jsonl, write_jsonl};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "proagym", version, about = "Simulation gym and evaluation harness for proactive agents")]
pub struct Cli {
    /// TOML or JSON config file (defaults to $PROAGYM_CONFIG).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge a raw activity log into segments and render them as events.
    Ingest(IngestArgs),
    /// Scenario generation.
    #[command(subcommand)]
    Scenario(ScenarioCommand),
    /// Simulate one scenario end to end.
    Simulate(SimulateArgs),
    /// Evaluate an agent over a labelled test set.
    Evaluate(EvaluateArgs),
    /// Print the metrics table of a run manifest.
    Report(ReportArgs),
    /// Annotation store and service.
    #[command(subcommand)]
    Annotate(AnnotateCommand),
    /// Dataset splitting and export.
    #[command(subcommand)]
    Dataset(DatasetCommand),
}

#[derive(Debug, Args)]
pub struct BackendArg {
    /// `live`, `scripted:<fixture.jsonl>` or `record:<fixture.jsonl>`.
    #[arg(long, default_value = "live")]
    pub backend: String,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Raw activity log (JSON array or JSONL).
    #[arg(long)]
    pub input: PathBuf,
    /// Rendered events (JSONL).
    #[arg(long, required_unless_present = "segments_only")]
    pub out: Option<PathBuf>,
    /// Also write the merged segments (JSON).
    #[arg(long)]
    pub segments_out: Option<PathBuf>,
    /// Stop after merging; no model calls.
    #[arg(long)]
    pub segments_only: bool,
    /// Largest gap in seconds between merged records.
    #[arg(long)]
    pub gap: Option<f64>,
    /// Longest span in seconds of one segment.
    #[arg(long)]
    pub span: Option<f64>,
    #[command(flatten)]
    pub backend: BackendArg,
}

#[derive(Debug, Subcommand)]
pub enum ScenarioCommand {
    /// Generate a scenario from a seed job.
    Gen(ScenarioGenArgs),
}

#[derive(Debug, Args)]
pub struct ScenarioGenArgs {
    #[arg(long)]
    pub seed_job: String,
    #[arg(long, value_parser = parse_category)]
    pub category: Category,
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub backend: BackendArg,
}

fn parse_category(s: &str) -> std::result::Result<Category, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct AgentArgs {
    /// Candidates per prediction (pred@k).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub pred_k: u8,
    /// Let the reward model comment on a draft before the final prediction.
    #[arg(long)]
    pub with_reward_feedback: bool,
    #[arg(long)]
    pub judge_model: Option<String>,
    #[arg(long)]
    pub agent_model: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory for trace, predictions and manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub event_budget: Option<usize>,
    #[command(flatten)]
    pub agent: AgentArgs,
    #[command(flatten)]
    pub backend: BackendArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MemoryArg {
    Carried,
    Independent,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Labelled items (JSONL of {item_id, trace, need}).
    #[arg(long, default_value = "data/test_set.jsonl")]
    pub test_set: PathBuf,
    #[arg(long, default_value = "manifest.json")]
    pub out: PathBuf,
    /// Run all four pred@k / feedback settings and print a comparison.
    #[arg(long)]
    pub matrix: bool,
    /// Reuse the ledger of an earlier (partial) manifest.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "carried")]
    pub memory: MemoryArg,
    #[arg(long, default_value_t = 1)]
    pub concurrency: usize,
    #[command(flatten)]
    pub agent: AgentArgs,
    #[command(flatten)]
    pub backend: BackendArg,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub manifest: PathBuf,
    /// Print the summary as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum AnnotateCommand {
    /// Create a store from annotation items (JSONL).
    Init {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        items: PathBuf,
    },
    /// Serve the annotation API (and UI, if configured).
    Serve {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Seeded train/test split of a JSONL file of items with an `item_id`.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TEST_FRACTION)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving train.jsonl, test.jsonl and split.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export resolved annotations as reward-model training rows.
    Export {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Generate a first-person explanation for each row.
        #[arg(long)]
        explain: bool,
        #[command(flatten)]
        backend: BackendArg,
    },
}

/// Parse and run; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn open_gateway(backend: &str) -> Result<Gateway> {
    if backend == "live" {
        return Ok(Gateway::new(LiveBackend::from_env()?));
    }
    if let Some(path) = backend.strip_prefix("scripted:") {
        return Ok(Gateway::new(ScriptedBackend::from_file(Path::new(path))?));
    }
    if let Some(path) = backend.strip_prefix("record:") {
        let recorder = RecordingBackend::new(LiveBackend::from_env()?, Path::new(path))
            .map_err(|e| Error::io(path.to_string(), e))?;
        return Ok(Gateway::new(recorder));
    }
    Err(Error::Invalid(format!(
        "unknown backend `{backend}` (expected live, scripted:<path> or record:<path>)"
    )))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(read_jsonl(BufReader::new(file))?)
}

fn write_lines<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    write_jsonl(&mut w, items)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn prompts(config: &AppConfig) -> Result<Arc<PromptSet>> {
    PromptSet::load(config.prompts_dir.as_deref())
        .map(Arc::new)
        .map_err(|e| Error::io("prompts", e))
}

fn run_config(config: &AppConfig, agent: &AgentArgs) -> RunConfig {
    RunConfig {
        agent_model: agent.agent_model.clone().unwrap_or_else(|| config.models.agent.clone()),
        judge_model: agent.judge_model.clone().unwrap_or_else(|| config.models.judge.clone()),
        gym_model: config.models.gym.clone(),
        user_model: config.models.user.clone(),
        k: agent.pred_k as usize,
        with_feedback: agent.with_reward_feedback,
        seed: agent.seed,
        event_budget: config.event_budget,
        max_steps: config.max_steps,
        memory_bound: config.history_window,
        ..RunConfig::default()
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let config = AppConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest(a) => ingest(&config, a),
        Command::Scenario(ScenarioCommand::Gen(a)) => {
            let gw = open_gateway(&a.backend.backend)?;
            let mut gym = Gym::new(config.models.gym.clone(), prompts(&config)?);
            gym.example_count = config.example_count;
            let scenario = gym.generate_scenario(&a.id, &a.seed_job, a.category, &gw)?;
            write_text(&a.out, &(serde_json::to_string_pretty(&scenario).expect("serializes") + "\n"))?;
            println!("wrote scenario {} ({} entities) to {}", scenario.id, scenario.entities.len(), a.out.display());
            Ok(())
        }
        Command::Simulate(a) => simulate(&config, a),
        Command::Evaluate(a) => evaluate(&config, a),
        Command::Report(a) => {
            let manifest: RunManifest = serde_json::from_slice(&read_file(&a.manifest)?)
                .map_err(|e| Error::Invalid(format!("{}: {e}", a.manifest.display())))?;
            let summary = manifest
                .summary
                .ok_or_else(|| Error::Invalid("manifest has no summary (simulation run?)".into()))?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&summary).expect("serializes"));
            } else {
                let label = format!("pred@{}{}", manifest.config.k, if manifest.config.with_feedback { ", w/ RM" } else { "" });
                print!("{}", crate::metrics::render_table(&[(label, &summary)]));
                if !manifest.excluded.is_empty() {
                    println!("excluded items: {}", manifest.excluded.len());
                }
            }
            Ok(())
        }
        Command::Annotate(AnnotateCommand::Init { store, items }) => {
            let items: Vec<AnnotationItem> = read_lines(&items)?;
            AnnotationStore::create(&store, &items)?;
            println!("initialized {} with {} items", store.display(), items.len());
            Ok(())
        }
        Command::Annotate(AnnotateCommand::Serve { store, port, host, ui_dir }) => {
            let dir = store.unwrap_or_else(|| config.store_dir.clone());
            let store = Arc::new(AnnotationStore::open(&dir, config.mixed_need)?);
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| Error::Invalid(format!("bad address {host}:{port}: {e}")))?;
            let ui = ui_dir.or_else(|| config.ui_dir.clone());
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            rt.block_on(serve(store, addr, ui)).map_err(|e| Error::io("serve", e))
        }
        Command::Dataset(DatasetCommand::Split { input, test_fraction, seed, out }) => {
            let items: Vec<KeyedLine> = read_lines(&input)?;
            let bundle = dataset_split(items, test_fraction, seed)?;
            let values = |v: Vec<KeyedLine>| v.into_iter().map(|k| k.0).collect::<Vec<_>>();
            write_text(
                &out.join("split.json"),
                &(serde_json::to_string_pretty(&bundle.manifest).expect("serializes") + "\n"),
            )?;
            write_lines(&out.join("train.jsonl"), &values(bundle.train))?;
            write_lines(&out.join("test.jsonl"), &values(bundle.test))?;
            println!("train {} / test {}", bundle.manifest.train_count, bundle.manifest.test_count);
            Ok(())
        }
        Command::Dataset(DatasetCommand::Export { store, out, explain, backend }) => {
            let dir = store.unwrap_or_else(|| config.store_dir.clone());
            let store = AnnotationStore::open(&dir, config.mixed_need)?;
            let mut rows = store.export();
            if explain {
                let gw = open_gateway(&backend.backend)?;
                let p = prompts(&config)?;
                for row in &mut rows {
                    row.thought = Some(explain_row(row, &gw, &config.models.gym, &p)?);
                }
            }
            write_lines(&out, &rows)?;
            println!("exported {} rows to {}", rows.len(), out.display());
            Ok(())
        }
    }
}

/// A JSON line carrying an `item_id`, kept verbatim.
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
struct KeyedLine(serde_json::Value);

impl crate::service::Keyed for KeyedLine {
    fn key(&self) -> &str {
        self.0.get("item_id").and_then(|v| v.as_str()).unwrap_or("")
    }
}

fn ingest(config: &AppConfig, a: IngestArgs) -> Result<()> {
    let records = parse_raw_trace(&read_file(&a.input)?)?;
    let merge = MergeConfig {
        gap_threshold_secs: a.gap.unwrap_or(config.merge.gap_threshold_secs),
        max_span_secs: a.span.unwrap_or(config.merge.max_span_secs),
    };
    let mut segments = merge_segments(&records, merge);
    Redactor::new(&config.redact)?.apply(&mut segments);
    if let Some(path) = &a.segments_out {
        write_text(path, &(serde_json::to_string_pretty(&segments).expect("serializes") + "\n"))?;
    }
    let Some(out) = a.out.as_deref().filter(|_| !a.segments_only) else {
        println!("{} records -> {} segments", records.len(), segments.len());
        return Ok(());
    };
    let gw = open_gateway(&a.backend.backend)?;
    let render = RenderConfig {
        model_id: config.models.render.clone(),
        ..RenderConfig::default()
    };
    let events = render_events(&segments, &gw, &*prompts(config)?, &render)?;
    write_lines(out, &events)?;
    println!("{} records -> {} segments -> {} events", records.len(), segments.len(), events.len());
    Ok(())
}

fn simulate(config: &AppConfig, a: SimulateArgs) -> Result<()> {
    let scenario: Scenario = serde_json::from_slice(&read_file(&a.scenario)?)
        .map_err(|e| Error::Invalid(format!("{}: {e}", a.scenario.display())))?;
    let gw = open_gateway(&a.backend.backend)?;
    let mut rc = run_config(config, &a.agent);
    if let Some(b) = a.event_budget {
        rc.event_budget = b;
    }
    let sim = run_simulation(&scenario, &rc, prompts(config)?, &gw)?;
    write_lines(&a.out.join("trace.jsonl"), &sim.trace.events)?;
    write_lines(&a.out.join("predictions.jsonl"), &sim.records)?;
    write_text(&a.out.join("manifest.json"), &sim.manifest.to_json())?;
    if let Err(e) = check_simulation(&scenario, &sim) {
        return Err(Error::Invalid(format!("simulation produced an invalid trace: {e}")));
    }
    println!(
        "{} events, {} predictions, manifest {}",
        sim.trace.len(),
        sim.records.len(),
        if sim.manifest.complete { "complete" } else { "incomplete" }
    );
    match &sim.manifest.error {
        Some(e) => Err(Error::Invalid(format!("simulation stopped early: {e}"))),
        None => Ok(()),
    }
}

fn evaluate(config: &AppConfig, a: EvaluateArgs) -> Result<()> {
    let items: Vec<EvalItem> = read_lines(&a.test_set)?;
    let mut rc = run_config(config, &a.agent);
    rc.memory = match a.memory {
        MemoryArg::Carried => MemoryMode::Carried,
        MemoryArg::Independent => MemoryMode::Independent,
    };
    rc.concurrency = a.concurrency;
    let p = prompts(config)?;
    let gw = open_gateway(&a.backend.backend)?;
    if a.matrix {
        let results = settings_matrix(&items, &rc, p, |_, _| Ok(gw.clone()))?;
        write_text(&a.out, &(serde_json::to_string_pretty(&results).expect("serializes") + "\n"))?;
        print!("{}", render_settings(&results));
        return Ok(());
    }
    let previous: Option<RunManifest> = match &a.resume {
        Some(path) => Some(
            serde_json::from_slice(&read_file(path)?)
                .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?,
        ),
        None => None,
    };
    let manifest = resume_evaluation(&items, &rc, p, &gw, previous.as_ref())?;
    write_text(&a.out, &manifest.to_json())?;
    let summary = manifest.summary.as_ref().expect("evaluation has a summary");
    let label = crate::runner::setting_label(rc.k, rc.with_feedback);
    print!("{}", crate::metrics::render_table(&[(label, summary)]));
    println!(
        "{} items evaluated, {} excluded; manifest written to {}",
        manifest.ledger.len(),
        manifest.excluded.len(),
        a.out.display()
    );
    Ok(())
}
