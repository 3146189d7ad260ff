//! Command-line surface tying the modules together.
//!
//! Exit codes are a stable contract for wrapping scripts: 0 success, 2 bad
//! input tree, 3 unknown pipeline, 4 I/O failure; `verify` exits 1 when
//! violations are found and `run-local` propagates the runner's exit.
//! Submission itself is deliberately left to the operator — `plan` prints
//! the exact submit command instead of executing it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{self, ComparisonRow, CostScenario, EchoServer};
use crate::bids::{self, BidsError, EntitySet, Extension};
use crate::config::ToolConfig;
use crate::ingest::{self, LinkFarmPlan, RawScanMeta, StorageTier, TierKind};
use crate::integrity::{self, FileDigest, ProvenanceRecord, TransferReceipt};
use crate::query::{self};
use crate::registry::{self};
use crate::report::{self, QueueReport};
use crate::scriptgen::{self, GeneratedBundle, ScriptContext, SubmitSpec};
use crate::simsched::{self, ConsistencyOptions, Fault, SimCluster, SimReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_BAD_TREE: i32 = 2;
pub const EXIT_UNKNOWN_PIPELINE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "bidsbatch",
    version,
    about = "Batch-processing orchestrator for BIDS imaging archives"
)]
struct Cli {
    /// Optional TOML config supplying path defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parent directory holding dataset directories.
    #[arg(long, global = true)]
    archive_root: Option<PathBuf>,
    /// Directory of pipeline spec files.
    #[arg(long, global = true)]
    registry: Option<PathBuf>,
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Suppress informational output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Index a dataset and print a summary.
    Index { dataset_root: PathBuf },
    /// Plan or apply archive ingest of converted scans.
    #[command(subcommand)]
    Ingest(IngestCommand),
    /// Query a dataset for runnable sessions and generate job scripts.
    Plan(PlanArgs),
    /// Execute a generated bundle's local burst-mode runner.
    RunLocal {
        /// Bundle directory produced by `plan`.
        #[arg(long)]
        bundle: PathBuf,
        /// Override the runner's parallelism bound.
        #[arg(long)]
        max_parallel: Option<u32>,
    },
    /// Run a generated bundle on the in-process scheduler simulator.
    Simulate(SimulateArgs),
    /// Check archive consistency (provenance, partial outputs, scratch).
    Verify {
        #[arg(long)]
        dataset_root: PathBuf,
        #[arg(long)]
        scratch_root: Option<PathBuf>,
        /// Dataset-relative run dirs known to be partial.
        #[arg(long = "allow-partial")]
        allow_partial: Vec<String>,
    },
    /// Per-dataset storage usage across the archive.
    StorageReport {
        /// Emit CSV instead of the aligned table.
        #[arg(long)]
        csv: bool,
    },
    /// Normalized scheduler queue state from the simulator or queue text.
    QueueReport {
        /// SimReport JSON produced by `simulate --report`.
        #[arg(long)]
        sim_report: Option<PathBuf>,
        /// Queue listing text (`-` for stdin), columns: job_id name state.
        #[arg(long)]
        queue_file: Option<PathBuf>,
    },
    /// Network and cost benchmarking.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Verified copy used inside generated job scripts.
    Stage(StageArgs),
    /// Write a provenance record for a finished run (used inside scripts).
    Provenance(ProvenanceArgs),
}

#[derive(Debug, Subcommand)]
enum IngestCommand {
    /// Classify scans and produce a dry-run link-farm plan.
    Plan {
        /// Classification rules TOML (`[[rule]]` blocks).
        #[arg(long)]
        rules: PathBuf,
        /// JSON list of scan entries to ingest.
        #[arg(long)]
        scans: PathBuf,
        /// Which tier receives the real files.
        #[arg(long, value_parser = parse_tier_kind, default_value = "general")]
        tier: TierKind,
        /// Tier root directory.
        #[arg(long)]
        tier_root: PathBuf,
        /// Dataset directory that receives the BIDS links.
        #[arg(long)]
        dataset_root: PathBuf,
        /// Where to write the plan JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a previously planned ingest.
    Apply {
        /// Plan JSON produced by `ingest plan`.
        #[arg(long)]
        plan: PathBuf,
        /// Where to write the `link_path,real_path,action` report CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// Dataset directory name under the archive root.
    #[arg(long)]
    dataset: String,
    /// Pipeline name from the registry.
    #[arg(long)]
    pipeline: String,
    /// Directory of container images.
    #[arg(long)]
    image_store: Option<PathBuf>,
    /// Output directory for the bundle (default bundle-<dataset>-<pipeline>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scratch root on the compute node.
    #[arg(long)]
    scratch_root: Option<PathBuf>,
    #[arg(long)]
    partition: Option<String>,
    #[arg(long)]
    account: Option<String>,
    /// Cap on concurrent array tasks (`%N`).
    #[arg(long)]
    throttle: Option<u32>,
    /// Notification address for failed jobs.
    #[arg(long)]
    email: Option<String>,
    /// Parallelism bound baked into the local runner.
    #[arg(long, default_value_t = 2)]
    max_parallel: u32,
    /// Skip verifying the container image digest.
    #[arg(long)]
    skip_image_check: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Bundle directory produced by `plan`.
    #[arg(long)]
    bundle: PathBuf,
    /// Concurrent task capacity of the fake cluster.
    #[arg(long, default_value_t = 2)]
    slots: u32,
    /// Deterministic seed for the virtual timeline.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Inject a fault: `<index>=<corrupt_stage_in|kill_container|corrupt_stage_out>`.
    #[arg(long = "fault")]
    faults: Vec<String>,
    /// Write the full SimReport JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum BenchCommand {
    /// Measure copy throughput and echo round-trip latency.
    Net(BenchNetArgs),
    /// Compute the environment cost comparison.
    Cost(BenchCostArgs),
    /// Run a standalone echo responder.
    Echo {
        /// Port to listen on (0 picks an ephemeral port).
        #[arg(long, default_value_t = 0)]
        port: u16,
        /// Fixed delay injected before each reply.
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
    },
}

#[derive(Debug, Args)]
struct BenchNetArgs {
    /// Bytes per throughput trial.
    #[arg(long, default_value_t = bench::DESK_BYTES_PER_TRIAL)]
    bytes: u64,
    /// Number of throughput trials.
    #[arg(long, default_value_t = bench::DESK_TRIALS)]
    trials: usize,
    /// Use the full-scale method: 1 GB x 100 trials.
    #[arg(long)]
    full: bool,
    /// Directory files are copied from (defaults to a temp dir).
    #[arg(long)]
    src_dir: Option<PathBuf>,
    /// Directory files are copied to (defaults to a temp dir).
    #[arg(long)]
    dst_dir: Option<PathBuf>,
    /// Echo endpoint `host:port`; a loopback responder is spawned if unset.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = bench::DEFAULT_PAYLOAD_BYTES)]
    payload_bytes: usize,
    #[arg(long, default_value_t = bench::DEFAULT_LATENCY_TRIALS)]
    latency_trials: usize,
}

#[derive(Debug, Args)]
struct BenchCostArgs {
    /// Scenario `label:n_jobs:avg_minutes:rate_per_hour`; repeatable.
    #[arg(long = "scenario")]
    scenarios: Vec<String>,
    /// Amortized scenario `label:n_jobs:avg_minutes:price:lifetime_years`.
    #[arg(long = "amortized")]
    amortized: Vec<String>,
    /// Emit the long-format CSV instead of the table.
    #[arg(long)]
    csv: bool,
}

#[derive(Debug, Args)]
struct StageArgs {
    /// Which lifecycle phase this staging belongs to.
    #[arg(long, value_parser = ["in", "out"])]
    phase: String,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    dst: PathBuf,
    /// Append one receipt JSON line per transferred file.
    #[arg(long)]
    receipt: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProvenanceArgs {
    #[arg(long)]
    pipeline: String,
    #[arg(long)]
    pipeline_version: String,
    #[arg(long)]
    container_digest: String,
    /// Run directory holding the outputs to seal.
    #[arg(long)]
    output_dir: PathBuf,
    /// Stage-in receipt file listing the inputs used.
    #[arg(long)]
    inputs_receipt: PathBuf,
    /// Root that input receipt paths are recorded relative to.
    #[arg(long)]
    archive_root: PathBuf,
    /// Job start timestamp (ISO-8601 UTC).
    #[arg(long)]
    started_at: String,
}

fn parse_tier_kind(s: &str) -> Result<TierKind, String> {
    match s {
        "general" => Ok(TierKind::General),
        "restricted" => Ok(TierKind::Restricted),
        _ => Err(format!("unknown tier {s:?}")),
    }
}

/// A command failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn io(message: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

macro_rules! impl_failure_from {
    ($($ty:ty),* $(,)?) => {$(
        impl From<$ty> for Failure {
            fn from(e: $ty) -> Failure {
                Failure::io(e.to_string())
            }
        }
    )*};
}

impl_failure_from!(
    crate::ingest::IngestError,
    crate::registry::RegistryError,
    crate::query::QueryError,
    crate::scriptgen::ScriptgenError,
    crate::integrity::IntegrityError,
    crate::bench::BenchError,
    crate::simsched::SimError,
    crate::report::ReportError,
    crate::config::ConfigError,
    std::io::Error,
    serde_json::Error,
);

impl From<BidsError> for Failure {
    fn from(e: BidsError) -> Failure {
        let code = match e {
            BidsError::RootNotFound(_) | BidsError::NotADataset(_) => EXIT_BAD_TREE,
            _ => EXIT_IO,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

/// Parses argv and runs the selected command, returning the process exit
/// code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let out = Output {
        json: cli.json,
        quiet: cli.quiet,
    };
    let ctx = match GlobalContext::resolve(&cli) {
        Ok(ctx) => ctx,
        Err(f) => {
            eprintln!("error: {}", f.message);
            return f.code;
        }
    };
    let result = match cli.command {
        Command::Index { ref dataset_root } => cmd_index(dataset_root, &out),
        Command::Ingest(ref sub) => cmd_ingest(sub, &out),
        Command::Plan(ref args) => cmd_plan(args, &ctx, &out),
        Command::RunLocal {
            ref bundle,
            max_parallel,
        } => cmd_run_local(bundle, max_parallel, &out),
        Command::Simulate(ref args) => cmd_simulate(args, &out),
        Command::Verify {
            ref dataset_root,
            ref scratch_root,
            ref allow_partial,
        } => cmd_verify(dataset_root, scratch_root.as_deref(), allow_partial, &out),
        Command::StorageReport { csv } => cmd_storage_report(&ctx, csv, &out),
        Command::QueueReport {
            ref sim_report,
            ref queue_file,
        } => cmd_queue_report(sim_report.as_deref(), queue_file.as_deref(), &out),
        Command::Bench(ref sub) => cmd_bench(sub, &out),
        Command::Stage(ref args) => cmd_stage(args),
        Command::Provenance(ref args) => cmd_provenance(args),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Paths resolved from flags and the optional config file; flags win.
struct GlobalContext {
    archive_root: Option<PathBuf>,
    registry: Option<PathBuf>,
    config: ToolConfig,
}

impl GlobalContext {
    fn resolve(cli: &Cli) -> Result<GlobalContext, Failure> {
        let config = match &cli.config {
            Some(path) => ToolConfig::load(path)?,
            None => ToolConfig::default(),
        };
        Ok(GlobalContext {
            archive_root: cli.archive_root.clone().or_else(|| config.archive_root.clone()),
            registry: cli.registry.clone().or_else(|| config.registry.clone()),
            config,
        })
    }

    fn require_archive_root(&self) -> Result<&Path, Failure> {
        self.archive_root
            .as_deref()
            .ok_or_else(|| Failure::io("--archive-root (or config archive_root) is required"))
    }

    fn require_registry(&self) -> Result<&Path, Failure> {
        self.registry
            .as_deref()
            .ok_or_else(|| Failure::io("--registry (or config registry) is required"))
    }
}

struct Output {
    json: bool,
    quiet: bool,
}

impl Output {
    fn info(&self, message: &str) {
        if !self.quiet && !self.json {
            println!("{message}");
        }
    }

    fn emit_json<T: Serialize>(&self, value: &T) {
        println!(
            "{}",
            serde_json::to_string_pretty(value).expect("report serializes")
        );
    }

    fn warn_lines<'a>(&self, warnings: impl Iterator<Item = &'a bids::IndexWarning>) {
        for w in warnings {
            eprintln!("{}", w.to_line());
        }
    }
}

fn cmd_index(dataset_root: &Path, out: &Output) -> Result<i32, Failure> {
    let index = bids::index_dataset(dataset_root)?;
    out.warn_lines(index.warnings.iter());
    if out.json {
        out.emit_json(&index);
    } else {
        out.info(&format!(
            "{}: {} sessions, {} files, {} derivative runs, {} warnings",
            index.dataset_name,
            index.session_count(),
            index.file_count(),
            index.derivative_runs.len(),
            index.warnings.len()
        ));
    }
    Ok(EXIT_OK)
}

/// One entry of the `ingest plan --scans` JSON file.
#[derive(Debug, Serialize, Deserialize)]
struct ScanEntry {
    source_path: PathBuf,
    subject: String,
    #[serde(default)]
    session: Option<String>,
    #[serde(default)]
    acquisition: Option<String>,
    #[serde(default)]
    direction: Option<String>,
    #[serde(default)]
    run: Option<u32>,
    protocol_name: String,
    voxel_resolution_mm: [f64; 3],
    matrix_dims: [u32; 3],
    #[serde(default)]
    sidecar_present: bool,
}

#[derive(Serialize)]
struct IngestPlanSummary<'a> {
    plan_path: &'a Path,
    entries: usize,
    skipped_other: usize,
}

fn cmd_ingest(sub: &IngestCommand, out: &Output) -> Result<i32, Failure> {
    match sub {
        IngestCommand::Plan {
            rules,
            scans,
            tier,
            tier_root,
            dataset_root,
            out: plan_out,
        } => {
            let rules = ingest::load_rules(rules)?;
            let text = fs::read_to_string(scans)?;
            let entries: Vec<ScanEntry> = serde_json::from_str(&text)?;
            let tier = StorageTier {
                name: *tier,
                root: tier_root.clone(),
                authorized: true,
            };
            let mut classified = Vec::new();
            let mut skipped_other = 0usize;
            for entry in entries {
                let meta = RawScanMeta {
                    source_path: entry.source_path.clone(),
                    protocol_name: entry.protocol_name.clone(),
                    voxel_resolution_mm: entry.voxel_resolution_mm,
                    matrix_dims: entry.matrix_dims,
                    sidecar_present: entry.sidecar_present,
                };
                let label = ingest::classify_scan(&meta, &rules);
                let Some(suffix) = label.suffix() else {
                    eprintln!(
                        "WARN {} classified Other, not ingested",
                        entry.source_path.display()
                    );
                    skipped_other += 1;
                    continue;
                };
                let target = EntitySet {
                    subject: entry.subject,
                    session: entry.session,
                    acquisition: entry.acquisition,
                    direction: entry.direction,
                    run: entry.run,
                    suffix,
                    extension: Extension::NiiGz,
                };
                classified.push((meta, label, target));
            }
            let plan = ingest::plan_ingest(&classified, &tier, dataset_root)?;
            fs::write(plan_out, serde_json::to_string_pretty(&plan)?)?;
            if out.json {
                out.emit_json(&IngestPlanSummary {
                    plan_path: plan_out,
                    entries: plan.entries.len(),
                    skipped_other,
                });
            } else {
                out.info(&format!(
                    "planned {} entries ({} scans skipped as Other) -> {}",
                    plan.entries.len(),
                    skipped_other,
                    plan_out.display()
                ));
            }
            Ok(EXIT_OK)
        }
        IngestCommand::Apply { plan, report } => {
            let text = fs::read_to_string(plan)?;
            let plan: LinkFarmPlan = serde_json::from_str(&text)?;
            let result = ingest::apply_ingest(&plan)?;
            if let Some(report_path) = report {
                fs::write(report_path, result.to_csv())?;
            }
            if out.json {
                out.emit_json(&result);
            } else {
                out.info(&format!(
                    "applied: {} files created, {} links created, {} skipped",
                    result.files_created, result.links_created, result.skipped
                ));
            }
            Ok(EXIT_OK)
        }
    }
}

#[derive(Serialize)]
struct PlanSummary {
    dataset: String,
    pipeline: String,
    items: usize,
    ineligible: usize,
    ineligibility_csv: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    bundle: Option<GeneratedBundle>,
}

fn cmd_plan(args: &PlanArgs, ctx: &GlobalContext, out: &Output) -> Result<i32, Failure> {
    let archive_root = ctx.require_archive_root()?;
    let registry_dir = ctx.require_registry()?;
    let dataset_root = archive_root.join(&args.dataset);
    let index = bids::index_dataset(&dataset_root)?;
    out.warn_lines(index.warnings.iter());

    let specs = registry::load_registry(registry_dir)?;
    let Some(spec) = registry::find_pipeline(&specs, &args.pipeline) else {
        return Err(Failure {
            code: EXIT_UNKNOWN_PIPELINE,
            message: format!("pipeline {:?} not in registry", args.pipeline),
        });
    };

    let image_store = args
        .image_store
        .clone()
        .or_else(|| ctx.config.image_store.clone())
        .ok_or_else(|| Failure::io("--image-store (or config image_store) is required"))?;
    if !args.skip_image_check {
        registry::validate_spec(spec, &image_store)?;
    }

    let scratch_root = args
        .scratch_root
        .clone()
        .or_else(|| ctx.config.scratch_root.clone())
        .unwrap_or_else(|| std::env::temp_dir().join("bidsbatch-scratch"));
    let submit = SubmitSpec {
        partition: args.partition.clone(),
        account: args.account.clone(),
        array_throttle: args.throttle,
        scratch_root,
        notify_email: args.email.clone(),
    };

    let manifest = query::build_manifest(&index, spec);
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("bundle-{}-{}", args.dataset, args.pipeline)));
    fs::create_dir_all(&out_dir)?;
    let csv_path = out_dir.join("ineligible.csv");
    query::write_ineligibility_csv(&manifest, &csv_path)?;

    let mut summary = PlanSummary {
        dataset: args.dataset.clone(),
        pipeline: args.pipeline.clone(),
        items: manifest.items.len(),
        ineligible: manifest.ineligible.len(),
        ineligibility_csv: csv_path,
        bundle: None,
    };
    if manifest.items.is_empty() {
        if out.json {
            out.emit_json(&summary);
        } else {
            out.info(&format!(
                "nothing to run: 0 items, {} ineligible (see {})",
                summary.ineligible,
                summary.ineligibility_csv.display()
            ));
        }
        return Ok(EXIT_OK);
    }

    let script_ctx = ScriptContext {
        dataset_root: absolutize(&dataset_root)?,
        image_store: absolutize(&image_store)?,
    };
    let bundle = scriptgen::write_bundle(
        &manifest,
        spec,
        &submit,
        &script_ctx,
        &out_dir,
        args.max_parallel,
    )?;
    if out.json {
        summary.bundle = Some(bundle);
        out.emit_json(&summary);
    } else {
        out.info(&format!(
            "{} items, {} ineligible; scripts in {}",
            summary.items,
            summary.ineligible,
            bundle.scripts_dir.display()
        ));
        out.info(&format!(
            "submit with: cd {} && sbatch submit_array.sh",
            bundle.scripts_dir.display()
        ));
        out.info(&format!(
            "or run locally: sh {}",
            bundle.local_runner.display()
        ));
    }
    Ok(EXIT_OK)
}

fn absolutize(path: &Path) -> Result<PathBuf, Failure> {
    if path.is_absolute() {
        Ok(path.to_path_buf())
    } else {
        Ok(std::env::current_dir()?.join(path))
    }
}

fn cmd_run_local(
    bundle_dir: &Path,
    max_parallel: Option<u32>,
    out: &Output,
) -> Result<i32, Failure> {
    let bundle = GeneratedBundle::load(bundle_dir)?;
    let mut cmd = std::process::Command::new("sh");
    cmd.arg(&bundle.local_runner);
    cmd.env(
        scriptgen::TOOL_BIN_ENV,
        std::env::var_os(scriptgen::TOOL_BIN_ENV)
            .unwrap_or_else(|| std::env::current_exe().unwrap_or_default().into_os_string()),
    );
    if let Some(n) = max_parallel {
        cmd.env(scriptgen::MAX_PARALLEL_ENV, n.to_string());
    }
    let status = cmd.status()?;
    let code = status.code().unwrap_or(EXIT_IO);
    let results = bundle.scripts_dir.join("results.csv");
    if results.is_file() {
        out.info(fs::read_to_string(&results)?.trim_end());
    }
    Ok(code)
}

fn cmd_simulate(args: &SimulateArgs, out: &Output) -> Result<i32, Failure> {
    let bundle = GeneratedBundle::load(&args.bundle)?;
    let mut failure_plan = BTreeMap::new();
    for spec in &args.faults {
        let (index, kind) = spec
            .split_once('=')
            .ok_or_else(|| Failure::io(format!("bad --fault {spec:?}, expected idx=kind")))?;
        let index: usize = index
            .parse()
            .map_err(|_| Failure::io(format!("bad fault index in {spec:?}")))?;
        let fault = Fault::parse(kind)
            .ok_or_else(|| Failure::io(format!("unknown fault kind in {spec:?}")))?;
        failure_plan.insert(index, fault);
    }
    let cluster = SimCluster {
        n_slots: args.slots,
        failure_plan,
        seed: args.seed,
    };
    let report = simsched::run_bundle(&bundle, &cluster)?;
    if let Some(path) = &args.report {
        fs::write(path, report.to_json())?;
    }
    if out.json {
        out.emit_json(&report);
    } else {
        out.info(&format!(
            "simulated {} instances: {} done, {} failed (slots={}, seed={})",
            report.instances.len(),
            report.done_count(),
            report.failed_count(),
            report.n_slots,
            args.seed
        ));
        for inst in &report.instances {
            out.info(&format!(
                "  instance {}: exit {} ({:?})",
                inst.index, inst.exit_code, inst.phase_reached
            ));
        }
    }
    Ok(EXIT_OK)
}

fn cmd_verify(
    dataset_root: &Path,
    scratch_root: Option<&Path>,
    allow_partial: &[String],
    out: &Output,
) -> Result<i32, Failure> {
    let options = ConsistencyOptions {
        scratch_root: scratch_root.map(Path::to_path_buf),
        declared_partials: allow_partial.to_vec(),
    };
    let violations = simsched::assert_archive_consistency(dataset_root, &options);
    if out.json {
        out.emit_json(&violations);
    } else if violations.is_empty() {
        out.info("ok");
    } else {
        for v in &violations {
            eprintln!("violation: {v:?}");
        }
    }
    Ok(if violations.is_empty() { EXIT_OK } else { 1 })
}

fn cmd_storage_report(ctx: &GlobalContext, csv: bool, out: &Output) -> Result<i32, Failure> {
    let archive_root = ctx.require_archive_root()?;
    let report = report::storage_report(archive_root)?;
    if out.json {
        out.emit_json(&report);
    } else if csv {
        print!("{}", report.to_csv());
    } else {
        print!("{}", report.to_table());
    }
    Ok(EXIT_OK)
}

fn cmd_queue_report(
    sim_report: Option<&Path>,
    queue_file: Option<&Path>,
    out: &Output,
) -> Result<i32, Failure> {
    let report: QueueReport = match (sim_report, queue_file) {
        (Some(path), None) => {
            let report = SimReport::from_json(&fs::read_to_string(path)?)?;
            report::queue_from_sim(&report)
        }
        (None, Some(path)) => {
            let text = if path.as_os_str() == "-" {
                let mut buf = String::new();
                std::io::stdin().read_to_string(&mut buf)?;
                buf
            } else {
                fs::read_to_string(path)?
            };
            report::queue_from_text(&text)
        }
        _ => {
            return Err(Failure::io(
                "exactly one of --sim-report or --queue-file is required",
            ))
        }
    };
    for warning in &report.warnings {
        eprintln!("WARN {warning}");
    }
    if out.json {
        out.emit_json(&report);
    } else {
        print!("{}", report.to_table());
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct BenchNetReport {
    throughput: bench::ThroughputResult,
    latency: bench::LatencyResult,
}

fn cmd_bench(sub: &BenchCommand, out: &Output) -> Result<i32, Failure> {
    match sub {
        BenchCommand::Net(args) => {
            let (bytes, trials) = if args.full {
                (bench::FULL_BYTES_PER_TRIAL, bench::FULL_TRIALS)
            } else {
                (args.bytes, args.trials)
            };
            let scratch =
                std::env::temp_dir().join(format!("bidsbatch-bench-{}", std::process::id()));
            let src_dir = args.src_dir.clone().unwrap_or_else(|| scratch.join("src"));
            let dst_dir = args.dst_dir.clone().unwrap_or_else(|| scratch.join("dst"));
            let throughput = bench::measure_throughput(&src_dir, &dst_dir, bytes, trials)?;
            let _ = fs::remove_dir_all(&scratch);

            let server;
            let endpoint = match &args.endpoint {
                Some(e) => e.clone(),
                None => {
                    server = EchoServer::spawn("127.0.0.1:0", Duration::ZERO)?;
                    server.addr().to_string()
                }
            };
            let latency =
                bench::measure_latency(&endpoint, args.payload_bytes, args.latency_trials)?;
            if out.json {
                out.emit_json(&BenchNetReport {
                    throughput,
                    latency,
                });
            } else {
                out.info(&format!(
                    "throughput: {:.3} ± {:.3} Gb/s over {} x {} bytes",
                    throughput.mean_gbps,
                    throughput.stdev_gbps,
                    throughput.n,
                    throughput.bytes_per_trial
                ));
                out.info(&format!(
                    "latency (round-trip): {:.3} ± {:.3} ms over {} x {} bytes",
                    latency.mean_ms, latency.stdev_ms, latency.n, latency.payload_bytes
                ));
            }
            Ok(EXIT_OK)
        }
        BenchCommand::Cost(args) => {
            let mut rows = Vec::new();
            for spec in &args.scenarios {
                rows.push(parse_scenario_row(spec)?);
            }
            for spec in &args.amortized {
                rows.push(parse_amortized_row(spec)?);
            }
            if rows.is_empty() {
                return Err(Failure::io(
                    "at least one --scenario or --amortized is required",
                ));
            }
            let (table, csv) = bench::comparison_table(&rows)?;
            if out.json {
                out.emit_json(&rows);
            } else if args.csv {
                print!("{csv}");
            } else {
                print!("{table}");
            }
            Ok(EXIT_OK)
        }
        BenchCommand::Echo { port, delay_ms } => {
            let server = EchoServer::spawn(
                &format!("127.0.0.1:{port}"),
                Duration::from_millis(*delay_ms),
            )?;
            println!("listening on {}", server.addr());
            loop {
                std::thread::park();
            }
        }
    }
}

fn parse_scenario_row(spec: &str) -> Result<ComparisonRow, Failure> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 4 {
        return Err(Failure::io(format!(
            "bad --scenario {spec:?}, expected label:n_jobs:avg_minutes:rate"
        )));
    }
    cost_row(parts[0], parts[1], parts[2], parse_f64(parts[3], spec)?, spec)
}

fn parse_amortized_row(spec: &str) -> Result<ComparisonRow, Failure> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 5 {
        return Err(Failure::io(format!(
            "bad --amortized {spec:?}, expected label:n_jobs:avg_minutes:price:lifetime_years"
        )));
    }
    let rate =
        bench::amortized_hourly_rate(parse_f64(parts[3], spec)?, parse_f64(parts[4], spec)?);
    cost_row(parts[0], parts[1], parts[2], rate, spec)
}

fn cost_row(
    label: &str,
    n_jobs: &str,
    minutes: &str,
    rate: f64,
    spec: &str,
) -> Result<ComparisonRow, Failure> {
    Ok(ComparisonRow {
        label: label.to_string(),
        throughput: None,
        latency: None,
        cost: CostScenario {
            label: label.to_string(),
            cost_per_hour: rate,
            n_jobs: n_jobs
                .parse()
                .map_err(|_| Failure::io(format!("bad n_jobs in {spec:?}")))?,
            avg_minutes_per_job: parse_f64(minutes, spec)?,
        },
    })
}

fn parse_f64(s: &str, context: &str) -> Result<f64, Failure> {
    s.parse()
        .map_err(|_| Failure::io(format!("bad number {s:?} in {context:?}")))
}

fn cmd_stage(args: &StageArgs) -> Result<i32, Failure> {
    let fault = std::env::var(simsched::FAULT_ENV).ok();
    let corrupt_this_phase = matches!(
        (args.phase.as_str(), fault.as_deref()),
        ("in", Some("corrupt_stage_in")) | ("out", Some("corrupt_stage_out"))
    );
    let corrupt = |path: &Path| -> std::io::Result<()> {
        let mut data = fs::read(path)?;
        if data.is_empty() {
            data.push(0xFF);
        } else {
            let mid = data.len() / 2;
            data[mid] ^= 0xFF;
        }
        fs::write(path, data)
    };

    let mut receipts: Vec<TransferReceipt> = Vec::new();
    if args.src.is_dir() {
        // Copy the directory's contents into dst, corrupting at most the
        // first file when a fault is injected.
        let mut files = Vec::new();
        collect_files_sorted(&args.src, &mut files)?;
        let mut first = true;
        for file in files {
            let rel = file.strip_prefix(&args.src).expect("under src");
            let dst = args.dst.join(rel);
            let hook: Option<&dyn Fn(&Path) -> std::io::Result<()>> =
                if corrupt_this_phase && first {
                    Some(&corrupt)
                } else {
                    None
                };
            receipts.push(integrity::transfer_verified_with(&file, &dst, hook)?);
            first = false;
        }
    } else {
        let hook: Option<&dyn Fn(&Path) -> std::io::Result<()>> = if corrupt_this_phase {
            Some(&corrupt)
        } else {
            None
        };
        receipts.push(integrity::transfer_verified_with(&args.src, &args.dst, hook)?);
    }
    if let Some(receipt_path) = &args.receipt {
        let mut lines = String::new();
        for receipt in &receipts {
            lines.push_str(&serde_json::to_string(receipt)?);
            lines.push('\n');
        }
        use std::io::Write;
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(receipt_path)?;
        file.write_all(lines.as_bytes())?;
    }
    Ok(EXIT_OK)
}

fn collect_files_sorted(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), Failure> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_files_sorted(&path, out)?;
        } else if path.is_file() {
            out.push(path);
        }
    }
    Ok(())
}

fn cmd_provenance(args: &ProvenanceArgs) -> Result<i32, Failure> {
    let receipt_text = fs::read_to_string(&args.inputs_receipt)?;
    let mut inputs = Vec::new();
    for line in receipt_text.lines().filter(|l| !l.trim().is_empty()) {
        let receipt: TransferReceipt = serde_json::from_str(line)?;
        let src = PathBuf::from(&receipt.src);
        let path = src
            .strip_prefix(&args.archive_root)
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_else(|_| receipt.src.clone());
        inputs.push(FileDigest {
            path,
            digest: receipt.digest,
        });
    }

    let mut output_files = Vec::new();
    collect_files_sorted(&args.output_dir, &mut output_files)?;
    let mut outputs = Vec::new();
    for file in output_files {
        if let Some(name) = file.file_name().map(|n| n.to_string_lossy().into_owned()) {
            if name == integrity::PROVENANCE_FILENAME
                || name == format!("{}.tmp", integrity::PROVENANCE_FILENAME)
            {
                continue;
            }
        }
        let rel = file
            .strip_prefix(&args.output_dir)
            .expect("under output dir")
            .to_string_lossy()
            .into_owned();
        outputs.push(FileDigest {
            digest: integrity::digest_file(&file)?,
            path: rel,
        });
    }

    let record = ProvenanceRecord {
        pipeline_name: args.pipeline.clone(),
        pipeline_version: args.pipeline_version.clone(),
        container_digest: args.container_digest.clone(),
        checksum_algorithm: integrity::CHECKSUM_ALGORITHM.to_string(),
        started_at: args.started_at.clone(),
        finished_at: integrity::utc_now_string(),
        user: std::env::var("USER")
            .or_else(|_| std::env::var("LOGNAME"))
            .unwrap_or_else(|_| "unknown".into()),
        hostname: hostname(),
        inputs,
        outputs,
    };
    integrity::write_provenance(&record, &args.output_dir)?;
    Ok(EXIT_OK)
}

fn hostname() -> String {
    if let Ok(name) = std::env::var("HOSTNAME") {
        if !name.is_empty() {
            return name;
        }
    }
    fs::read_to_string("/proc/sys/kernel/hostname")
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|_| "unknown".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_all_subcommands() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn scenario_parsing() {
        let row = parse_scenario_row("HPC:6:375.5:0.0096").unwrap();
        assert_eq!(row.cost.n_jobs, 6);
        assert_eq!(row.cost.avg_minutes_per_job, 375.5);
        assert_eq!(row.cost.cost_per_hour, 0.0096);
        assert!(parse_scenario_row("HPC:6:375.5").is_err());

        let row = parse_amortized_row("Local:6:386.0:4000:5").unwrap();
        assert!((row.cost.cost_per_hour - 4000.0 / (5.0 * 8760.0)).abs() < 1e-12);
        assert!(parse_amortized_row("Local:6:386.0:4000").is_err());
    }

    #[test]
    fn tier_kind_parsing() {
        assert_eq!(parse_tier_kind("general").unwrap(), TierKind::General);
        assert_eq!(
            parse_tier_kind("restricted").unwrap(),
            TierKind::Restricted
        );
        assert!(parse_tier_kind("other").is_err());
    }
}
