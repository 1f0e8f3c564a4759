//! Command-line front end for the retrieval–reflection line-completion
//! pipeline: index a repository, build a benchmark, run it, report results,
//! and replay a single task with a full trace.

mod config_file;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use repoflex_core::bench::{
    aggregate, build_benchmark, emit_report, load_outcomes, read_tasks_jsonl, run_benchmark,
    write_tasks_jsonl, BackendPair, BackendSpec, ReportFormat, RunOptions, TaskOutcome,
};
use repoflex_core::corpus_index::{
    build_index, ingest_repo, write_index, IndexParams, IngestFilters, LeakageGuard,
};
use repoflex_core::experience::ExperienceCache;
use repoflex_core::gateway::{load_script, Backend, BackendKind, HttpChatBackend};
use repoflex_core::loop_controller::{run_task, Gateways, LoopConfig, LoopMode};

use config_file::{parse_config_file, FileConfig, RoleBackendConfig};

#[derive(Parser)]
#[command(
    name = "repoflex",
    version,
    about = "Retrieval-augmented, self-reflective line completion over repositories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk a repository into a token-set index file.
    Index(IndexArgs),
    /// Sample line-completion tasks from a repository clone.
    BuildBench(BuildBenchArgs),
    /// Run the completion loop over a task file.
    Run(RunArgs),
    /// Aggregate run logs into a per-repository report.
    Report(ReportArgs),
    /// Run a single task and print the per-iteration trace.
    SolveOne(SolveOneArgs),
}

#[derive(Args)]
struct IndexArgs {
    /// Repository root to ingest.
    #[arg(long, value_name = "DIR")]
    repo: PathBuf,
    /// Output index file (one JSON record per line).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Window size in lines.
    #[arg(long, value_name = "N", default_value_t = 20)]
    window: usize,
    /// Window stride in lines.
    #[arg(long, value_name = "N", default_value_t = 10)]
    stride: usize,
}

#[derive(Args)]
struct BuildBenchArgs {
    /// Repository root to sample from.
    #[arg(long, value_name = "DIR")]
    repo: PathBuf,
    /// Repository name recorded in each task.
    #[arg(long, value_name = "NAME")]
    name: String,
    /// Number of tasks to sample.
    #[arg(long, value_name = "N", default_value_t = 200)]
    count: usize,
    /// Sampler seed.
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
    /// Output task file (JSONL).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModeFlag {
    Full,
    NoReflect,
    NoEvaluator,
}

impl From<ModeFlag> for LoopMode {
    fn from(flag: ModeFlag) -> Self {
        match flag {
            ModeFlag::Full => LoopMode::Full,
            ModeFlag::NoReflect => LoopMode::NoReflect,
            ModeFlag::NoEvaluator => LoopMode::NoEvaluator,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Task file produced by build-bench.
    #[arg(long, value_name = "FILE")]
    tasks: PathBuf,
    /// Directory containing one clone per repository name.
    #[arg(long, value_name = "DIR")]
    repos: PathBuf,
    /// Run configuration file.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Run directory; logs and the manifest are written here.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Ablation mode override.
    #[arg(long, value_enum)]
    mode: Option<ModeFlag>,
    /// Withhold ground truth from the running loop.
    #[arg(long)]
    blind: bool,
    /// Rerun tasks that already have run logs.
    #[arg(long)]
    force: bool,
    /// Concurrent task workers.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum FormatFlag {
    Markdown,
    Csv,
    Jsonl,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding the logs to aggregate.
    #[arg(long, value_name = "DIR")]
    run_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatFlag::Markdown)]
    format: FormatFlag,
    /// Output file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct SolveOneArgs {
    /// Task id to solve (as listed in the task file).
    #[arg(long, value_name = "ID")]
    task_id: String,
    /// Task file containing the task.
    #[arg(long, value_name = "FILE")]
    tasks: PathBuf,
    /// Directory containing one clone per repository name.
    #[arg(long, value_name = "DIR")]
    repos: PathBuf,
    /// Run configuration file.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Ablation mode override.
    #[arg(long, value_enum)]
    mode: Option<ModeFlag>,
    /// Withhold ground truth from the running loop.
    #[arg(long)]
    blind: bool,
    /// Print prompts, feedback, and wire traffic, not just scores.
    #[arg(long)]
    trace: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Index(args) => cmd_index(args),
        Command::BuildBench(args) => cmd_build_bench(args),
        Command::Run(args) => cmd_run(args),
        Command::Report(args) => cmd_report(args),
        Command::SolveOne(args) => cmd_solve_one(args),
    }
}

fn cmd_index(args: IndexArgs) -> Result<ExitCode> {
    let params = IndexParams {
        window_size: args.window,
        stride: args.stride,
    };
    let outcome = ingest_repo(&args.repo, None, &IngestFilters::default())?;
    for warning in &outcome.warnings {
        eprintln!("warning: skipped {}: {}", warning.path, warning.reason);
    }
    let index = build_index(&outcome.files, params)?;
    write_index(&index, &args.out)?;
    println!(
        "indexed {} files into {} chunks ({} skipped) -> {}",
        outcome.files.len(),
        index.len(),
        outcome.warnings.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_build_bench(args: BuildBenchArgs) -> Result<ExitCode> {
    let tasks = build_benchmark(&args.repo, &args.name, args.count, args.seed)?;
    write_tasks_jsonl(&tasks, &args.out)?;
    println!(
        "sampled {} tasks from {} (seed {}) -> {}",
        tasks.len(),
        args.name,
        args.seed,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Run metadata written before the first backend call; config errors surface
/// before any model is contacted.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    run_id: String,
    tool_version: String,
    started_at_unix: u64,
    tasks_file: String,
    repos_root: String,
    index_params: IndexParams,
    loop_config: LoopConfig,
    actor_backend: BackendSummary,
    reflector_backend: BackendSummary,
}

/// Backend wiring without secrets: only the key's environment-variable name
/// is recorded.
#[derive(Debug, Serialize, Deserialize)]
struct BackendSummary {
    kind: BackendKind,
    endpoint_url: Option<String>,
    model_name: Option<String>,
    api_key_env: Option<String>,
    script: Option<String>,
    sentinel: Option<String>,
}

impl BackendSummary {
    fn of(role: &RoleBackendConfig) -> Self {
        BackendSummary {
            kind: role.config.kind,
            endpoint_url: role.config.endpoint_url.clone(),
            model_name: role.config.model_name.clone(),
            api_key_env: role.config.api_key_env.clone(),
            script: role.script.as_ref().map(|p| p.display().to_string()),
            sentinel: role.sentinel.clone(),
        }
    }
}

#[derive(Debug, Serialize)]
struct RunSummary {
    finished_at_unix: u64,
    task_count: usize,
    error_count: usize,
    resumed_count: usize,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn build_backend_spec(role: &RoleBackendConfig, trace_wire: bool) -> Result<BackendSpec> {
    match role.config.kind {
        BackendKind::HttpChat => {
            let mut backend = HttpChatBackend::from_config(&role.config)?;
            backend.log_wire = trace_wire;
            Ok(BackendSpec::Shared(Arc::new(Backend::HttpChat(backend))))
        }
        BackendKind::Scripted => {
            let path = role
                .script
                .as_ref()
                .context("scripted backend requires a `script` path")?;
            Ok(BackendSpec::Scripted(load_script(path)?))
        }
        BackendKind::Oracle => Ok(BackendSpec::Oracle {
            sentinel: role
                .sentinel
                .clone()
                .context("oracle backend requires a `sentinel`")?,
            wrong_line: role.wrong_line.clone(),
        }),
    }
}

fn backends_from_config(config: &FileConfig, trace_wire: bool) -> Result<BackendPair> {
    let actor = config
        .actor
        .as_ref()
        .context("config file must define an actor backend (actor.kind = ...)")?;
    let reflector = config
        .reflector
        .as_ref()
        .context("config file must define a reflector backend (reflector.kind = ...)")?;
    Ok(BackendPair {
        actor: build_backend_spec(actor, trace_wire)?,
        reflector: build_backend_spec(reflector, trace_wire)?,
    })
}

fn effective_loop_config(
    file: &FileConfig,
    mode: Option<ModeFlag>,
    blind: bool,
) -> Result<LoopConfig> {
    let mut loop_config = file.loop_config.clone();
    if let Some(mode) = mode {
        loop_config.mode = mode.into();
    }
    if blind {
        loop_config.blind = true;
    }
    loop_config.validate().map_err(anyhow::Error::msg)?;
    Ok(loop_config)
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let file_config = parse_config_file(&args.config)?;
    let loop_config = effective_loop_config(&file_config, args.mode, args.blind)?;
    let tasks = read_tasks_jsonl(&args.tasks)?;
    let backends = backends_from_config(&file_config, false)?;
    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("cannot create run dir {}", args.out_dir.display()))?;
    let run_id = args
        .out_dir
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "run".to_string());
    let manifest = RunManifest {
        run_id,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at_unix: unix_now(),
        tasks_file: args.tasks.display().to_string(),
        repos_root: args.repos.display().to_string(),
        index_params: file_config.index_params,
        loop_config: loop_config.clone(),
        actor_backend: BackendSummary::of(file_config.actor.as_ref().unwrap()),
        reflector_backend: BackendSummary::of(file_config.reflector.as_ref().unwrap()),
    };
    write_json(&args.out_dir.join("manifest.json"), &manifest)?;

    let opts = RunOptions {
        repos_root: args.repos.clone(),
        run_dir: args.out_dir.clone(),
        index_params: file_config.index_params,
        force: args.force,
        workers,
    };
    let outcomes = run_benchmark(&tasks, &backends, &loop_config, &opts)?;

    let error_count = outcomes.iter().filter(|o| o.error.is_some()).count();
    let resumed_count = outcomes.iter().filter(|o| o.resumed).count();
    for outcome in &outcomes {
        print_outcome_line(outcome);
    }
    println!(
        "{} tasks: {} ok, {} errors, {} resumed",
        outcomes.len(),
        outcomes.len() - error_count,
        error_count,
        resumed_count
    );
    write_json(
        &args.out_dir.join("run_summary.json"),
        &RunSummary {
            finished_at_unix: unix_now(),
            task_count: outcomes.len(),
            error_count,
            resumed_count,
        },
    )?;

    Ok(if error_count > 0 {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn print_outcome_line(outcome: &TaskOutcome) {
    match (&outcome.result, &outcome.error) {
        (Some(result), _) => println!(
            "{} em={} es={:.3} stop={:?} iters={}{}",
            outcome.task_id,
            result.final_record.em,
            result.final_record.es,
            result.stop_reason,
            result.iterations_run,
            if outcome.resumed { " (resumed)" } else { "" }
        ),
        (None, Some(error)) => println!("{} ERROR: {error}", outcome.task_id),
        (None, None) => println!("{} ERROR: unknown", outcome.task_id),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    std::fs::write(path, body).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode> {
    let outcomes = load_outcomes(&args.run_dir)?;
    // The manifest's config snapshot travels into the report when present.
    let manifest_path = args.run_dir.join("manifest.json");
    let loop_config = match std::fs::read_to_string(&manifest_path) {
        Ok(text) => serde_json::from_str::<RunManifest>(&text)
            .map(|m| m.loop_config)
            .unwrap_or_default(),
        Err(_) => LoopConfig::default(),
    };
    let report = aggregate(&outcomes, &loop_config);
    let format = match args.format {
        FormatFlag::Markdown => ReportFormat::Markdown,
        FormatFlag::Csv => ReportFormat::Csv,
        FormatFlag::Jsonl => ReportFormat::Jsonl,
    };
    emit_report(&report, format, &args.out)?;
    println!(
        "report over {} repos ({} tasks) -> {}",
        report.per_repo.len(),
        outcomes.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_solve_one(args: SolveOneArgs) -> Result<ExitCode> {
    let file_config = parse_config_file(&args.config)?;
    let loop_config = effective_loop_config(&file_config, args.mode, args.blind)?;
    let tasks = read_tasks_jsonl(&args.tasks)?;
    let task = tasks
        .iter()
        .find(|t| t.task_id == args.task_id)
        .with_context(|| {
            format!(
                "task id {:?} not found in {}",
                args.task_id,
                args.tasks.display()
            )
        })?;

    let repo_root = args.repos.join(&task.repo_name);
    let guard = LeakageGuard {
        file_path: task.file_path.clone(),
        line_no: task.line_no,
    };
    let ingested = ingest_repo(&repo_root, Some(&guard), &IngestFilters::default())?;
    let index = build_index(&ingested.files, file_config.index_params)?;

    let backends = backends_from_config(&file_config, args.trace)?;
    let actor = backends.actor.for_task(task);
    let reflector = backends.reflector.for_task(task);
    let gateways = Gateways {
        actor: &actor,
        reflector: &reflector,
    };

    let mut cache = ExperienceCache::new();
    let result = run_task(task, &index, &gateways, &loop_config, &mut cache, None)?;

    println!("task {} ({} chunks indexed)", task.task_id, index.len());
    for rec in cache.records(&task.task_id) {
        println!("— iteration {} —", rec.iteration);
        if args.trace {
            println!("retrieval target:");
            for line in &rec.target_lines {
                println!("  | {line}");
            }
            println!("prompt:\n{}", rec.prompt_rendered);
            for hit in &rec.retrieval_trace {
                println!(
                    "  retrieved {}:{}-{} score {:.4}",
                    hit.file_path, hit.start_line, hit.end_line, hit.score
                );
            }
        }
        println!("generated: {}", rec.generated_line);
        println!("em={} es={:.4}", rec.em, rec.es);
        if let Some(feedback) = &rec.feedback {
            if args.trace {
                println!("evaluation analysis: {}", feedback.evaluation_analysis);
                println!("contextual analysis: {}", feedback.contextual_analysis);
            }
            for line in &feedback.suggestions {
                println!("suggestion: {line}");
            }
        }
    }
    println!(
        "final: iteration {} em={} es={:.4} stop={:?} iterations_run={}",
        result.final_record.iteration,
        result.final_record.em,
        result.final_record.es,
        result.stop_reason,
        result.iterations_run
    );
    Ok(ExitCode::SUCCESS)
}
