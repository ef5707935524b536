//! Operator entry point binding all modules: generate datasets, export
//! training files, run inference, verify corpora, and sweep resolution
//! budgets.
//!
//! Configuration is a single TOML file; `${VAR}` anywhere in the file is
//! replaced with the environment variable's value before parsing (for
//! secrets such as auth tokens), and command-line flags override file
//! values. Every command writes a `run_manifest.json` whose counters
//! (accepted + rejected + errored) sum to the number of processed input
//! records; data outputs are deterministic given identical inputs and
//! seeds, so reruns overwrite identically. Exit codes: 0 success
//! (rejections are data, not failures), 2 configuration error, 3 backend
//! unavailability, 4 schema violation in inputs.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::CoordinateConvention;
use crate::driver::{
    load_eval, run as drive, DriverConfig, DriverError, EvalRecord, Matcher, RoundLimitPolicy,
    RunStatus, score_eval,
};
use crate::exporter::{
    export_sample, read_corpus, sample_corpus, validate_record_files, write_corpus, CorpusItem,
    CurationPlan, ExportRecord, ExporterError, SourceQuota,
};
use crate::gateway::{build_backend, BackendConfig, GatewayError};
use crate::image_store::{ImageError, ImageStore};
use crate::pipeline::{
    generate_chain, load_seeds, GenConfig, GenOutcome, PipelineBackends, PipelineError, Rejection,
    SampleRecord, SeedTriplet, VerifiedSample,
};
use crate::templates::BUILTIN;
use crate::toolbox::{load_prepared, PixelBudget, ToolMode};
use crate::trace::{serialize_chain, RenderMode};

/// Cooperative shutdown flag; the binary wires SIGINT to it. Workers stop
/// picking up new items once set and the manifest is flushed with
/// `partial: true`.
pub static STOP: AtomicBool = AtomicBool::new(false);

pub fn install_interrupt_handler() {
    let _ = ctrlc::set_handler(|| STOP.store(true, Ordering::SeqCst));
}

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backend unavailable: {0}")]
    Backend(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("{0}")]
    Other(String),
}

pub fn exit_code(err: &CliError) -> u8 {
    match err {
        CliError::Config(_) => 2,
        CliError::Backend(_) => 3,
        CliError::Schema(_) => 4,
        CliError::Other(_) => 1,
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Config(msg) => CliError::Config(msg),
            other => CliError::Backend(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Gateway(g) => g.into(),
            PipelineError::Seed(msg) => CliError::Config(msg),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<DriverError> for CliError {
    fn from(e: DriverError) -> Self {
        match e {
            DriverError::Gateway(g) => g.into(),
            DriverError::Eval(msg) => CliError::Config(msg),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<ExporterError> for CliError {
    fn from(e: ExporterError) -> Self {
        match e {
            ExporterError::Quota(msg) => CliError::Config(msg),
            ExporterError::Io(io) => CliError::Other(io.to_string()),
            other => CliError::Schema(other.to_string()),
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Replaces every `${NAME}` occurrence with the environment variable's
/// value. An unset variable or unterminated reference is a config error.
pub fn interpolate_env(raw: &str) -> Result<String, CliError> {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(pos) = rest.find("${") {
        out.push_str(&rest[..pos]);
        let after = &rest[pos + 2..];
        let Some(close) = after.find('}') else {
            return Err(CliError::Config("unterminated ${ in config".into()));
        };
        let name = &after[..close];
        let value = std::env::var(name).map_err(|_| {
            CliError::Config(format!("environment variable {name} is not set"))
        })?;
        out.push_str(&value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub max_steps: Option<usize>,
    pub max_attempts: Option<u32>,
    pub iou_match_threshold: Option<f64>,
    pub convention: Option<CoordinateConvention>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferSection {
    pub max_rounds: Option<usize>,
    pub on_round_limit: Option<RoundLimitPolicy>,
    pub matcher: Option<Matcher>,
    pub convention: Option<CoordinateConvention>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportSection {
    pub convention: Option<CoordinateConvention>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BackendsSection {
    pub generator: Option<BackendConfig>,
    pub tool_verifier: Option<BackendConfig>,
    pub answer_verifier: Option<BackendConfig>,
    pub inference: Option<BackendConfig>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Config {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    /// Budget spec: `low`, `med`, `high`, `training`, or `custom:N`.
    pub budget: Option<String>,
    /// Tool-semantics override: `train` or `infer`.
    pub mode: Option<String>,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub infer: InferSection,
    #[serde(default)]
    pub export: ExportSection,
    #[serde(default)]
    pub backends: BackendsSection,
}

pub fn load_config(path: &Path) -> Result<Config, CliError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let interpolated = interpolate_env(&raw)?;
    toml::from_str(&interpolated)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn parse_budget(text: &str) -> Result<PixelBudget, CliError> {
    if let Some(budget) = PixelBudget::preset(text) {
        return Ok(budget);
    }
    if text == "training" {
        return Ok(PixelBudget::training());
    }
    if let Some(rest) = text.strip_prefix("custom:") {
        let units: u64 = rest
            .parse()
            .map_err(|_| CliError::Config(format!("bad custom budget {text:?}")))?;
        return PixelBudget::custom_units(units)
            .map_err(|e| CliError::Config(format!("bad custom budget {text:?}: {e}")));
    }
    Err(CliError::Config(format!(
        "unknown budget {text:?} (expected low|med|high|training|custom:N)"
    )))
}

pub fn parse_mode(text: &str) -> Result<ToolMode, CliError> {
    match text {
        "train" => Ok(ToolMode::Train),
        "infer" => Ok(ToolMode::Infer),
        other => Err(CliError::Config(format!(
            "unknown mode {other:?} (expected train|infer)"
        ))),
    }
}

pub fn parse_convention(text: &str) -> Result<CoordinateConvention, CliError> {
    match text {
        "normalized" => Ok(CoordinateConvention::Normalized),
        "absolute_pixels" => Ok(CoordinateConvention::AbsolutePixels),
        other => Err(CliError::Config(format!(
            "unknown convention {other:?} (expected normalized|absolute_pixels)"
        ))),
    }
}

/// Flag-over-file resolution shared by commands.
struct Effective {
    config: Config,
    seed: u64,
    workers: usize,
    budget: Option<PixelBudget>,
    mode: Option<ToolMode>,
}

fn resolve(
    config_path: Option<&Path>,
    seed: Option<u64>,
    workers: Option<usize>,
    budget: Option<&str>,
    mode: Option<&str>,
) -> Result<Effective, CliError> {
    let config = match config_path {
        Some(path) => load_config(path)?,
        None => Config::default(),
    };
    let budget_spec = budget.map(str::to_string).or_else(|| config.budget.clone());
    let mode_spec = mode.map(str::to_string).or_else(|| config.mode.clone());
    Ok(Effective {
        seed: seed.or(config.seed).unwrap_or(0),
        workers: workers.or(config.workers).unwrap_or(1).max(1),
        budget: budget_spec.as_deref().map(parse_budget).transpose()?,
        mode: mode_spec.as_deref().map(parse_mode).transpose()?,
        config,
    })
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub accepted: u64,
    pub rejected: u64,
    pub errored: u64,
}

impl Counters {
    pub fn total(&self) -> u64 {
        self.accepted + self.rejected + self.errored
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub counters: Counters,
    /// Set when the run was interrupted before processing every input.
    pub partial: bool,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn config_snapshot(config: &Config) -> serde_json::Value {
    serde_json::to_value(config).unwrap_or(serde_json::Value::Null)
}

fn write_manifest(manifest: &RunManifest, dir: &Path) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::Other(e.to_string()))?;
    std::fs::write(dir.join("run_manifest.json"), body)
        .map_err(|e| CliError::Other(format!("cannot write manifest: {e}")))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

/// Runs `f` over all items with a fixed-size worker pool. Slots left
/// `None` were not processed (cooperative shutdown via [`STOP`]).
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<Option<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let pool = workers.clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..pool {
            scope.spawn(|| loop {
                if STOP.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                *slots[i].lock().expect("slot poisoned") = Some(f(i, &items[i]));
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("slot poisoned"))
        .collect()
}

// ---------------------------------------------------------------------------
// Command-line surface
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "vistrace",
    about = "Runtime and data forge for tool-augmented visual reasoning traces"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate verified reasoning chains from a seed manifest.
    Generate(GenerateArgs),
    /// Consolidate accepted samples into a training file.
    Export(ExportArgs),
    /// Run the multi-turn inference loop over an evaluation manifest.
    Infer(InferArgs),
    /// Validate an exported training corpus.
    Verify(VerifyArgs),
    /// Repeat inference across resolution presets and compare.
    BenchResolution(BenchArgs),
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    /// Seed manifest (line-delimited JSON).
    pub seeds: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// low|med|high|training|custom:N
    #[arg(long)]
    pub budget: Option<String>,
    /// train|infer
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, clap::Args)]
pub struct ExportArgs {
    /// Samples directory produced by `generate`.
    pub samples: PathBuf,
    /// Output training file (line-delimited JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// normalized|absolute_pixels
    #[arg(long)]
    pub convention: Option<String>,
    /// Curation quotas file (JSON).
    #[arg(long)]
    pub quotas: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
pub struct InferArgs {
    /// Evaluation manifest (line-delimited JSON).
    pub eval: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// low|med|high|training|custom:N
    #[arg(long)]
    pub budget: Option<String>,
    /// train|infer
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, clap::Args)]
pub struct VerifyArgs {
    /// Training corpus file to validate.
    pub corpus: PathBuf,
    /// Image directory (default: `<corpus dir>/images`).
    #[arg(long)]
    pub images: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct BenchArgs {
    /// Evaluation manifest (line-delimited JSON).
    pub eval: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated preset list (default: low,med,high).
    #[arg(long)]
    pub presets: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(args) => {
            let manifest = cmd_generate(args)?;
            println!(
                "generate: accepted {} rejected {} errored {}",
                manifest.counters.accepted, manifest.counters.rejected, manifest.counters.errored
            );
            Ok(())
        }
        Command::Export(args) => {
            let manifest = cmd_export(args)?;
            println!(
                "export: wrote {} records ({} not selected)",
                manifest.counters.accepted, manifest.counters.rejected
            );
            Ok(())
        }
        Command::Infer(args) => {
            let (manifest, summary) = cmd_infer(args)?;
            println!(
                "infer: {}/{} correct (accuracy {:.3}), mean rounds {:.2}",
                summary.correct, summary.total, summary.accuracy, summary.mean_rounds
            );
            let _ = manifest;
            Ok(())
        }
        Command::Verify(args) => {
            let verified = cmd_verify(args)?;
            println!("verify: {verified} records ok");
            Ok(())
        }
        Command::BenchResolution(args) => {
            let rows = cmd_bench_resolution(args)?;
            println!("{}", render_bench_table(&rows));
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

fn build_pipeline_backends(backends: &BackendsSection) -> Result<PipelineBackends, CliError> {
    let need = |cfg: &Option<BackendConfig>, name: &str| {
        cfg.clone()
            .ok_or_else(|| CliError::Config(format!("backends.{name} is not configured")))
    };
    Ok(PipelineBackends {
        generator: build_backend(&need(&backends.generator, "generator")?)?,
        tool_verifier: build_backend(&need(&backends.tool_verifier, "tool_verifier")?)?,
        answer_verifier: build_backend(&need(&backends.answer_verifier, "answer_verifier")?)?,
    })
}

fn persist_chain_images(
    store: &ImageStore,
    sample: &VerifiedSample,
    dir: &Path,
) -> Result<(), ImageError> {
    store.persist(&sample.chain.root_image, dir)?;
    for observation in sample.chain.observations() {
        store.persist(observation, dir)?;
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<(), CliError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| CliError::Other(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
struct ErroredRecord {
    seed_id: String,
    error: String,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<RunManifest, CliError> {
    let started = now_ms();
    let eff = resolve(
        Some(&args.config),
        args.seed,
        args.workers,
        args.budget.as_deref(),
        args.mode.as_deref(),
    )?;
    let mut gen_cfg = GenConfig::default();
    let section = &eff.config.generate;
    if let Some(v) = section.max_steps {
        gen_cfg.max_steps = v;
    }
    if let Some(v) = section.max_attempts {
        gen_cfg.max_attempts = v.max(1);
    }
    if let Some(v) = section.iou_match_threshold {
        gen_cfg.iou_match_threshold = v;
    }
    if let Some(v) = section.convention {
        gen_cfg.convention = v;
    }
    if let Some(budget) = eff.budget {
        gen_cfg.budget = budget;
    }
    if let Some(mode) = eff.mode {
        gen_cfg.tool_mode = mode;
    }
    let backends = build_pipeline_backends(&eff.config.backends)?;
    let seeds = load_seeds(&args.seeds)?;
    let base_dir = args.seeds.parent().unwrap_or(Path::new(".")).to_path_buf();
    let default_source = args
        .seeds
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "seeds".into());

    let image_dir = args.out.join("images");
    std::fs::create_dir_all(&image_dir)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", image_dir.display())))?;

    let store = ImageStore::new();
    let results = parallel_map(&seeds, eff.workers, |_i, seed: &SeedTriplet| {
        let root = crate::pipeline::prepare_seed(&store, seed, &base_dir, &gen_cfg)?;
        generate_chain(&store, seed, &root, &gen_cfg, &backends, &BUILTIN)
    });

    let mut accepted: Vec<SampleRecord> = Vec::new();
    let mut rejected: Vec<Rejection> = Vec::new();
    let mut errored: Vec<ErroredRecord> = Vec::new();
    let mut backend_down: Option<String> = None;
    let mut partial = false;
    for (seed, result) in seeds.iter().zip(results) {
        match result {
            None => partial = true,
            Some(Ok(GenOutcome::Accepted(sample))) => {
                persist_chain_images(&store, &sample, &image_dir)
                    .map_err(|e| CliError::Other(e.to_string()))?;
                let source = seed.source.clone().unwrap_or_else(|| default_source.clone());
                accepted.push(SampleRecord::of(&sample, &source));
            }
            Some(Ok(GenOutcome::Rejected(rejection))) => rejected.push(rejection),
            Some(Err(PipelineError::Gateway(g))) => {
                errored.push(ErroredRecord {
                    seed_id: seed.id.clone(),
                    error: g.to_string(),
                });
                backend_down.get_or_insert(g.to_string());
            }
            Some(Err(other)) => errored.push(ErroredRecord {
                seed_id: seed.id.clone(),
                error: other.to_string(),
            }),
        }
    }

    write_jsonl(&accepted, &args.out.join("accepted.jsonl"))?;
    write_jsonl(&rejected, &args.out.join("rejected.jsonl"))?;
    write_jsonl(&errored, &args.out.join("errored.jsonl"))?;

    let manifest = RunManifest {
        command: "generate".into(),
        config: config_snapshot(&eff.config),
        inputs: vec![args.seeds.display().to_string(), args.config.display().to_string()],
        outputs: vec![
            args.out.join("accepted.jsonl").display().to_string(),
            args.out.join("rejected.jsonl").display().to_string(),
            args.out.join("errored.jsonl").display().to_string(),
            image_dir.display().to_string(),
        ],
        seed: eff.seed,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        counters: Counters {
            accepted: accepted.len() as u64,
            rejected: rejected.len() as u64,
            errored: errored.len() as u64,
        },
        partial,
    };
    write_manifest(&manifest, &args.out)?;
    if let Some(reason) = backend_down {
        return Err(CliError::Backend(reason));
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuotasFile {
    pub total: usize,
    pub quotas: Vec<SourceQuota>,
    #[serde(default)]
    pub exclusions: Vec<String>,
}

#[derive(Debug, Serialize)]
struct CurationManifest<'a> {
    plan: &'a CurationPlan,
    seed: u64,
    excluded: &'a [String],
    selected: Vec<&'a str>,
}

pub fn cmd_export(args: &ExportArgs) -> Result<RunManifest, CliError> {
    let started = now_ms();
    let eff = resolve(args.config.as_deref(), args.seed, None, None, None)?;
    let convention = match args.convention.as_deref() {
        Some(text) => parse_convention(text)?,
        None => eff
            .config
            .export
            .convention
            .unwrap_or(CoordinateConvention::Normalized),
    };

    let samples_file = args.samples.join("accepted.jsonl");
    let input_image_dir = args.samples.join("images");
    let raw = std::fs::read_to_string(&samples_file)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", samples_file.display())))?;

    let out_dir = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let out_image_dir = out_dir.join("images");
    std::fs::create_dir_all(&out_image_dir)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", out_image_dir.display())))?;

    let store = ImageStore::new();
    let mut records: Vec<ExportRecord> = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample_record: SampleRecord = serde_json::from_str(line).map_err(|e| {
            CliError::Schema(format!("{} line {}: {e}", samples_file.display(), lineno + 1))
        })?;
        let sample = sample_record
            .hydrate(&store, &input_image_dir)
            .map_err(|e| {
                CliError::Schema(format!(
                    "sample {:?} (line {}): {e}",
                    sample_record.seed_id,
                    lineno + 1
                ))
            })?;
        let record = export_sample(
            &sample,
            &sample_record.source,
            &store,
            &out_image_dir,
            convention,
        )
        .map_err(|e| CliError::Schema(format!("sample {:?}: {e}", sample_record.seed_id)))?;
        records.push(record);
    }

    let mut outputs = vec![
        args.out.display().to_string(),
        out_image_dir.display().to_string(),
    ];
    let total_read = records.len();
    let written: Vec<ExportRecord> = match &args.quotas {
        Some(quotas_path) => {
            let quotas_raw = std::fs::read_to_string(quotas_path).map_err(|e| {
                CliError::Config(format!("cannot read {}: {e}", quotas_path.display()))
            })?;
            let quotas: QuotasFile = serde_json::from_str(&quotas_raw)
                .map_err(|e| CliError::Config(format!("{}: {e}", quotas_path.display())))?;
            let plan = CurationPlan {
                total: quotas.total,
                quotas: quotas.quotas.clone(),
            };
            let items: Vec<CorpusItem> = records
                .iter()
                .map(|r| CorpusItem {
                    key: r.seed_id.clone(),
                    source: r.source.clone(),
                })
                .collect();
            let exclusions: HashSet<String> = quotas.exclusions.iter().cloned().collect();
            let chosen = sample_corpus(&items, &plan, &exclusions, eff.seed)?;
            let keys: HashSet<&str> = chosen.iter().map(|c| c.key.as_str()).collect();
            let curation = CurationManifest {
                plan: &plan,
                seed: eff.seed,
                excluded: &quotas.exclusions,
                selected: chosen.iter().map(|c| c.key.as_str()).collect(),
            };
            let curation_path = out_dir.join("curation_manifest.json");
            std::fs::write(
                &curation_path,
                serde_json::to_string_pretty(&curation)
                    .map_err(|e| CliError::Other(e.to_string()))?,
            )
            .map_err(|e| CliError::Other(format!("{}: {e}", curation_path.display())))?;
            outputs.push(curation_path.display().to_string());
            records
                .into_iter()
                .filter(|r| keys.contains(r.seed_id.as_str()))
                .collect()
        }
        None => records,
    };
    write_corpus(&written, &args.out)?;

    let manifest = RunManifest {
        command: "export".into(),
        config: config_snapshot(&eff.config),
        inputs: vec![samples_file.display().to_string()],
        outputs,
        seed: eff.seed,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        counters: Counters {
            accepted: written.len() as u64,
            rejected: (total_read - written.len()) as u64,
            errored: 0,
        },
        partial: false,
    };
    write_manifest(&manifest, &out_dir)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// infer and bench-resolution
// ---------------------------------------------------------------------------

/// One graded inference run, written as a line of `traces.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceOutcome {
    pub id: String,
    pub question: String,
    pub expected: String,
    pub answer: Option<String>,
    pub status: RunStatus,
    pub rounds_used: usize,
    pub calls: usize,
    pub correct: bool,
    /// Training-form render of the chain as far as it got.
    pub body: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub total: u64,
    pub correct: u64,
    pub accuracy: f64,
    pub mean_rounds: f64,
    /// Mean pixel area over every image fed to the model (roots and
    /// observations).
    pub mean_visual_area: f64,
    pub answered: u64,
    pub round_limit: u64,
    pub malformed: u64,
    pub errored: u64,
}

struct InferRun {
    outcomes: Vec<TraceOutcome>,
    reports: Vec<(String, String)>,
    summary: Summary,
    backend_down: Option<String>,
    partial: bool,
}

fn driver_config_from(
    section: &InferSection,
    budget: Option<PixelBudget>,
    mode: Option<ToolMode>,
) -> DriverConfig {
    let mut cfg = DriverConfig::default();
    if let Some(v) = section.max_rounds {
        cfg.max_rounds = v;
    }
    if let Some(v) = section.on_round_limit {
        cfg.on_round_limit = v;
    }
    if let Some(v) = section.convention {
        cfg.convention = v;
    }
    if let Some(b) = budget {
        cfg.budget = b;
    }
    if let Some(m) = mode {
        cfg.tool_mode = m;
    }
    cfg
}

fn run_inference(
    records: &[EvalRecord],
    base_dir: &Path,
    backend_cfg: &BackendConfig,
    driver_cfg: &DriverConfig,
    matcher: Matcher,
    workers: usize,
) -> Result<InferRun, CliError> {
    let backend = build_backend(backend_cfg)?;
    let store = ImageStore::new();
    let results = parallel_map(records, workers, |_i, record: &EvalRecord| {
        let path = if record.image.is_absolute() {
            record.image.clone()
        } else {
            base_dir.join(&record.image)
        };
        let root = load_prepared(&store, &path, &driver_cfg.budget, &driver_cfg.options)
            .map_err(DriverError::from)?;
        drive(
            &store,
            &record.question,
            &root,
            driver_cfg,
            backend.as_ref(),
            &BUILTIN,
        )
    });

    let mut outcomes = Vec::new();
    let mut reports = Vec::new();
    let mut backend_down = None;
    let mut partial = false;
    let (mut correct, mut answered, mut round_limit, mut malformed, mut errored) =
        (0u64, 0u64, 0u64, 0u64, 0u64);
    let mut rounds_sum = 0u64;
    let mut area_sum = 0u128;
    let mut image_count = 0u64;
    for (record, result) in records.iter().zip(results) {
        match result {
            None => partial = true,
            Some(Ok(response)) => {
                match &response.status {
                    RunStatus::Answered { .. } => answered += 1,
                    RunStatus::RoundLimit => round_limit += 1,
                    RunStatus::Malformed { .. } => malformed += 1,
                }
                let is_correct = score_eval(
                    &record.expected,
                    response.chain.answer.as_deref(),
                    matcher,
                );
                if is_correct {
                    correct += 1;
                }
                rounds_sum += response.rounds_used as u64;
                area_sum += u128::from(response.chain.root_image.area());
                image_count += 1;
                for observation in response.chain.observations() {
                    area_sum += u128::from(observation.area());
                    image_count += 1;
                }
                let body = serialize_chain(&response.chain, RenderMode::TrainingRender)
                    .map(|r| r.into_training_body())
                    .unwrap_or_default();
                reports.push((record.id.clone(), render_trace_report(record, &response)));
                outcomes.push(TraceOutcome {
                    id: record.id.clone(),
                    question: record.question.clone(),
                    expected: record.expected.clone(),
                    answer: response.chain.answer.clone(),
                    status: response.status,
                    rounds_used: response.rounds_used,
                    calls: response.calls,
                    correct: is_correct,
                    body,
                });
            }
            Some(Err(DriverError::Gateway(g))) => {
                errored += 1;
                backend_down.get_or_insert(g.to_string());
            }
            Some(Err(other)) => {
                errored += 1;
                outcomes.push(TraceOutcome {
                    id: record.id.clone(),
                    question: record.question.clone(),
                    expected: record.expected.clone(),
                    answer: None,
                    status: RunStatus::Malformed {
                        reason: other.to_string(),
                    },
                    rounds_used: 0,
                    calls: 0,
                    correct: false,
                    body: String::new(),
                });
            }
        }
    }
    let graded = answered + round_limit + malformed;
    let total = graded + errored;
    let summary = Summary {
        total,
        correct,
        accuracy: if graded > 0 {
            correct as f64 / graded as f64
        } else {
            0.0
        },
        mean_rounds: if graded > 0 {
            rounds_sum as f64 / graded as f64
        } else {
            0.0
        },
        mean_visual_area: if image_count > 0 {
            area_sum as f64 / image_count as f64
        } else {
            0.0
        },
        answered,
        round_limit,
        malformed,
        errored,
    };
    Ok(InferRun {
        outcomes,
        reports,
        summary,
        backend_down,
        partial,
    })
}

pub fn cmd_infer(args: &InferArgs) -> Result<(RunManifest, Summary), CliError> {
    let started = now_ms();
    let eff = resolve(
        Some(&args.config),
        args.seed,
        args.workers,
        args.budget.as_deref(),
        args.mode.as_deref(),
    )?;
    let driver_cfg = driver_config_from(&eff.config.infer, eff.budget, eff.mode);
    let matcher = eff
        .config
        .infer
        .matcher
        .unwrap_or(Matcher::ContainsNormalized);
    let backend_cfg = eff
        .config
        .backends
        .inference
        .clone()
        .ok_or_else(|| CliError::Config("backends.inference is not configured".into()))?;
    let records = load_eval(&args.eval)?;
    let base_dir = args.eval.parent().unwrap_or(Path::new(".")).to_path_buf();

    let reports_dir = args.out.join("reports");
    std::fs::create_dir_all(&reports_dir)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", reports_dir.display())))?;

    let run = run_inference(
        &records,
        &base_dir,
        &backend_cfg,
        &driver_cfg,
        matcher,
        eff.workers,
    )?;

    write_jsonl(&run.outcomes, &args.out.join("traces.jsonl"))?;
    std::fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&run.summary).map_err(|e| CliError::Other(e.to_string()))?,
    )
    .map_err(|e| CliError::Other(e.to_string()))?;
    for (id, html) in &run.reports {
        std::fs::write(reports_dir.join(format!("{id}.html")), html)
            .map_err(|e| CliError::Other(e.to_string()))?;
    }

    let correct = run.summary.correct;
    let manifest = RunManifest {
        command: "infer".into(),
        config: config_snapshot(&eff.config),
        inputs: vec![args.eval.display().to_string(), args.config.display().to_string()],
        outputs: vec![
            args.out.join("traces.jsonl").display().to_string(),
            args.out.join("summary.json").display().to_string(),
            reports_dir.display().to_string(),
        ],
        seed: eff.seed,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        counters: Counters {
            accepted: correct,
            rejected: run.summary.total - correct - run.summary.errored,
            errored: run.summary.errored,
        },
        partial: run.partial,
    };
    write_manifest(&manifest, &args.out)?;
    if let Some(reason) = run.backend_down {
        return Err(CliError::Backend(reason));
    }
    Ok((manifest, run.summary))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub preset: String,
    pub max_pixels: u64,
    pub accuracy: f64,
    pub mean_rounds: f64,
    pub mean_visual_area: f64,
}

pub fn render_bench_table(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "| preset | accuracy | mean rounds | mean visual area |\n|---|---|---|---|\n",
    );
    for row in rows {
        out.push_str(&format!(
            "| {} | {:.3} | {:.2} | {:.0} |\n",
            row.preset, row.accuracy, row.mean_rounds, row.mean_visual_area
        ));
    }
    out
}

pub fn cmd_bench_resolution(args: &BenchArgs) -> Result<Vec<BenchRow>, CliError> {
    let started = now_ms();
    let eff = resolve(Some(&args.config), args.seed, args.workers, None, None)?;
    let presets_text = args.presets.clone().unwrap_or_else(|| "low,med,high".into());
    let mut presets: Vec<(String, PixelBudget)> = Vec::new();
    for name in presets_text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        presets.push((name.to_string(), parse_budget(name)?));
    }
    if presets.is_empty() {
        return Err(CliError::Config("empty preset list".into()));
    }
    let matcher = eff
        .config
        .infer
        .matcher
        .unwrap_or(Matcher::ContainsNormalized);
    let backend_cfg = eff
        .config
        .backends
        .inference
        .clone()
        .ok_or_else(|| CliError::Config("backends.inference is not configured".into()))?;
    let records = load_eval(&args.eval)?;
    let base_dir = args.eval.parent().unwrap_or(Path::new(".")).to_path_buf();

    let mut rows = Vec::new();
    let mut counters = Counters::default();
    let mut partial = false;
    for (name, budget) in &presets {
        let driver_cfg = driver_config_from(&eff.config.infer, Some(*budget), eff.mode);
        // A fresh backend per preset: scripted cursors start over, remote
        // clients reconnect.
        let run = run_inference(
            &records,
            &base_dir,
            &backend_cfg,
            &driver_cfg,
            matcher,
            eff.workers,
        )?;
        if let Some(reason) = run.backend_down {
            return Err(CliError::Backend(reason));
        }
        partial |= run.partial;
        counters.accepted += run.summary.correct;
        counters.rejected += run.summary.total - run.summary.correct - run.summary.errored;
        counters.errored += run.summary.errored;
        rows.push(BenchRow {
            preset: name.clone(),
            max_pixels: budget.max_pixels(),
            accuracy: run.summary.accuracy,
            mean_rounds: run.summary.mean_rounds,
            mean_visual_area: run.summary.mean_visual_area,
        });
    }
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)
            .map_err(|e| CliError::Other(format!("cannot create {}: {e}", out.display())))?;
        std::fs::write(
            out.join("bench.json"),
            serde_json::to_string_pretty(&rows).map_err(|e| CliError::Other(e.to_string()))?,
        )
        .map_err(|e| CliError::Other(e.to_string()))?;
        let manifest = RunManifest {
            command: "bench-resolution".into(),
            config: config_snapshot(&eff.config),
            inputs: vec![args.eval.display().to_string()],
            outputs: vec![out.join("bench.json").display().to_string()],
            seed: eff.seed,
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
            counters,
            partial,
        };
        write_manifest(&manifest, out)?;
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

pub fn cmd_verify(args: &VerifyArgs) -> Result<usize, CliError> {
    let records = read_corpus(&args.corpus).map_err(|e| match e {
        ExporterError::Io(_) => {
            CliError::Config(format!("cannot read {}: {e}", args.corpus.display()))
        }
        other => CliError::from(other),
    })?;
    let image_dir = args.images.clone().unwrap_or_else(|| {
        args.corpus
            .parent()
            .unwrap_or(Path::new("."))
            .join("images")
    });
    let store = ImageStore::new();
    for record in &records {
        validate_record_files(record, &store, &image_dir)
            .map_err(|e| CliError::Schema(format!("record {:?}: {e}", record.seed_id)))?;
    }
    Ok(records.len())
}

// ---------------------------------------------------------------------------
// Trace reports
// ---------------------------------------------------------------------------

fn html_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn embed_image(image: &crate::image_store::ImageState) -> String {
    match image.png_bytes() {
        Ok(bytes) => format!(
            "<img alt=\"{}x{}\" src=\"data:image/png;base64,{}\"/>",
            image.width(),
            image.height(),
            BASE64.encode(bytes)
        ),
        Err(_) => "<p><em>image unavailable</em></p>".to_string(),
    }
}

/// Renders one run as a static self-contained HTML document: question,
/// input image, each step's reasoning/command/observation, and the
/// outcome.
pub fn render_trace_report(record: &EvalRecord, response: &crate::driver::FinalResponse) -> String {
    let chain = &response.chain;
    let mut body = String::new();
    body.push_str(&format!(
        "<h1>{}</h1>\n<p><strong>Question:</strong> {}</p>\n<p><strong>Expected:</strong> {}</p>\n",
        html_escape(&record.id),
        html_escape(&chain.question),
        html_escape(&record.expected),
    ));
    body.push_str("<h2>Input</h2>\n");
    body.push_str(&embed_image(&chain.root_image));
    for (i, step) in chain.steps.iter().enumerate() {
        body.push_str(&format!("<h2>Step {}</h2>\n", i + 1));
        body.push_str(&format!("<pre>{}</pre>\n", html_escape(&step.content.body())));
        if let Some(cmd) = &step.command {
            body.push_str(&format!(
                "<p><code>{}</code></p>\n",
                html_escape(&cmd.to_canonical_text())
            ));
        }
        if let Some(observation) = &step.observation {
            body.push_str(&embed_image(observation));
        }
    }
    body.push_str("<h2>Outcome</h2>\n");
    body.push_str(&format!(
        "<p><strong>Status:</strong> {:?} after {} rounds ({} calls)</p>\n",
        response.status, response.rounds_used, response.calls
    ));
    if let Some(answer) = &chain.answer {
        body.push_str(&format!("<p><strong>Answer:</strong> {}</p>\n", html_escape(answer)));
    }
    format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{}</title></head><body>\n{}</body></html>\n",
        html_escape(&record.id),
        body
    )
}
