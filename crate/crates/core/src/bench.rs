//! Benchmark construction from local repository clones, the task runner, and
//! per-repo aggregation.
//!
//! Tasks are sampled uniformly without replacement over eligible lines:
//! non-blank, not comment-only, and not inside a triple-quoted string (by a
//! simple paired-delimiter scan). Sampling is fully determined by
//! (repo content, seed, count).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus_index::{
    build_index, fingerprint_files, ingest_repo, CorpusError, IndexParams, IngestFilters,
    LeakageGuard, SourceFile,
};
use crate::experience::{read_run_log, ExperienceCache, RunLogWriter};
use crate::gateway::{Backend, OracleBackend, ScriptEntry, ScriptedBackend};
use crate::loop_controller::{run_task, Gateways, LoopConfig, LoopResult};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("repository has {eligible} eligible lines, {requested} requested")]
    InsufficientEligible { eligible: usize, requested: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed task file {path}: {detail}")]
    MalformedTasks { path: PathBuf, detail: String },
    #[error("malformed report {path}: {detail}")]
    MalformedReport { path: PathBuf, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub sampler_seed: u64,
    pub repo_fingerprint: String,
}

/// One benchmark sample: complete `file_path:line_no` given everything before it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionTask {
    pub task_id: String,
    pub repo_name: String,
    pub file_path: String,
    /// 1-based line to complete.
    pub line_no: usize,
    /// All file lines strictly before `line_no`.
    pub prefix: Vec<String>,
    pub ground_truth: String,
    pub created_meta: TaskMeta,
}

/// Lines eligible as completion targets, per file.
///
/// A line qualifies when it is non-blank, its strip does not start with `#`,
/// and the line does not begin inside a `'''`/`"""` string. The scan is a
/// cheap approximation: the opening line of a triple-quoted string still
/// counts as code.
fn eligible_lines(file: &SourceFile) -> Vec<usize> {
    let mut eligible = Vec::new();
    let mut open_delimiter: Option<&str> = None;
    for (idx, line) in file.lines.iter().enumerate() {
        let inside_string = open_delimiter.is_some();
        let mut rest = line.as_str();
        loop {
            match open_delimiter {
                Some(delim) => match rest.find(delim) {
                    Some(pos) => {
                        rest = &rest[pos + delim.len()..];
                        open_delimiter = None;
                    }
                    None => break,
                },
                None => {
                    let single = rest.find("'''");
                    let double = rest.find("\"\"\"");
                    let (pos, delim) = match (single, double) {
                        (Some(s), Some(d)) if s < d => (s, "'''"),
                        (Some(s), None) => (s, "'''"),
                        (_, Some(d)) => (d, "\"\"\""),
                        (None, None) => break,
                    };
                    rest = &rest[pos + delim.len()..];
                    open_delimiter = Some(delim);
                }
            }
        }
        let stripped = line.trim();
        if !inside_string && !stripped.is_empty() && !stripped.starts_with('#') {
            eligible.push(idx + 1);
        }
    }
    eligible
}

/// Samples `count` completion tasks uniformly without replacement over the
/// repository's eligible lines; deterministic for a fixed seed.
pub fn build_benchmark(
    repo_root: &Path,
    repo_name: &str,
    count: usize,
    seed: u64,
) -> Result<Vec<CompletionTask>, BenchError> {
    let outcome = ingest_repo(repo_root, None, &IngestFilters::default())?;
    let fingerprint = fingerprint_files(&outcome.files);

    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for (file_idx, file) in outcome.files.iter().enumerate() {
        for line_no in eligible_lines(file) {
            candidates.push((file_idx, line_no));
        }
    }
    if candidates.len() < count {
        return Err(BenchError::InsufficientEligible {
            eligible: candidates.len(),
            requested: count,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<(usize, usize)> =
        rand::seq::index::sample(&mut rng, candidates.len(), count)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
    picks.sort_by(|a, b| {
        outcome.files[a.0]
            .path
            .cmp(&outcome.files[b.0].path)
            .then(a.1.cmp(&b.1))
    });

    let tasks = picks
        .into_iter()
        .map(|(file_idx, line_no)| {
            let file = &outcome.files[file_idx];
            CompletionTask {
                task_id: format!("{repo_name}:{}:{line_no}", file.path),
                repo_name: repo_name.to_string(),
                file_path: file.path.clone(),
                line_no,
                prefix: file.lines[..line_no - 1].to_vec(),
                ground_truth: file.lines[line_no - 1].clone(),
                created_meta: TaskMeta {
                    sampler_seed: seed,
                    repo_fingerprint: fingerprint.clone(),
                },
            }
        })
        .collect();
    Ok(tasks)
}

pub fn write_tasks_jsonl(tasks: &[CompletionTask], path: &Path) -> Result<(), BenchError> {
    let mut out = String::new();
    for task in tasks {
        out.push_str(&serde_json::to_string(task).expect("task serialization"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_tasks_jsonl(path: &Path) -> Result<Vec<CompletionTask>, BenchError> {
    let text = fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut tasks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let task: CompletionTask =
            serde_json::from_str(line).map_err(|e| BenchError::MalformedTasks {
                path: path.to_path_buf(),
                detail: format!("line {}: {e}", i + 1),
            })?;
        tasks.push(task);
    }
    Ok(tasks)
}

/// Filesystem-safe log name: sanitized task id plus a short content hash to
/// keep distinct ids distinct.
pub fn log_file_name(task_id: &str) -> String {
    let sanitized: String = task_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    let digest = Sha256::digest(task_id.as_bytes());
    format!(
        "{sanitized}-{:02x}{:02x}{:02x}{:02x}.log",
        digest[0], digest[1], digest[2], digest[3]
    )
}

/// How to build the actor/reflector backend for each task.
///
/// Mock backends are instantiated fresh per task (scripts are single-consumer;
/// the oracle needs the task's own ground truth); an HTTP backend is shared so
/// its request limiter spans all workers.
#[derive(Clone)]
pub enum BackendSpec {
    Shared(Arc<Backend>),
    Scripted(Vec<ScriptEntry>),
    Oracle {
        sentinel: String,
        wrong_line: Option<String>,
    },
}

impl BackendSpec {
    pub fn for_task(&self, task: &CompletionTask) -> Arc<Backend> {
        match self {
            BackendSpec::Shared(backend) => Arc::clone(backend),
            BackendSpec::Scripted(entries) => {
                Arc::new(Backend::Scripted(ScriptedBackend::new(entries.clone())))
            }
            BackendSpec::Oracle {
                sentinel,
                wrong_line,
            } => Arc::new(Backend::Oracle(OracleBackend::new(
                sentinel.clone(),
                task.ground_truth.clone(),
                wrong_line.clone(),
            ))),
        }
    }
}

#[derive(Clone)]
pub struct BackendPair {
    pub actor: BackendSpec,
    pub reflector: BackendSpec,
}

pub struct RunOptions {
    /// Directory containing one clone per `repo_name`.
    pub repos_root: PathBuf,
    /// Run directory; one log per task is written here.
    pub run_dir: PathBuf,
    pub index_params: IndexParams,
    /// Rerun tasks even when a log already exists.
    pub force: bool,
    pub workers: usize,
}

/// Outcome of one task: a loop result, or the error that prevented one.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub task_id: String,
    pub repo_name: String,
    pub result: Option<LoopResult>,
    pub error: Option<String>,
    /// True when the outcome was reloaded from an existing run log.
    pub resumed: bool,
}

/// Runs every task, retrieval index rebuilt per task under its leakage guard.
/// Tasks with an existing run log are reloaded, not rerun, unless `force`.
/// Failed tasks produce error outcomes; they are never silently dropped.
pub fn run_benchmark(
    tasks: &[CompletionTask],
    backends: &BackendPair,
    config: &LoopConfig,
    opts: &RunOptions,
) -> Result<Vec<TaskOutcome>, BenchError> {
    fs::create_dir_all(&opts.run_dir).map_err(|source| BenchError::Io {
        path: opts.run_dir.clone(),
        source,
    })?;

    let slots: Vec<Mutex<Option<TaskOutcome>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    let cursor = AtomicUsize::new(0);
    let workers = opts.workers.max(1).min(tasks.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                if i >= tasks.len() {
                    break;
                }
                let outcome = run_one(&tasks[i], backends, config, opts);
                *slots[i].lock().unwrap() = Some(outcome);
            });
        }
    });

    Ok(slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every task processed"))
        .collect())
}

fn run_one(
    task: &CompletionTask,
    backends: &BackendPair,
    config: &LoopConfig,
    opts: &RunOptions,
) -> TaskOutcome {
    let outcome = |result: Option<LoopResult>, error: Option<String>, resumed: bool| TaskOutcome {
        task_id: task.task_id.clone(),
        repo_name: task.repo_name.clone(),
        result,
        error,
        resumed,
    };

    let log_path = opts.run_dir.join(log_file_name(&task.task_id));
    if log_path.exists() && !opts.force {
        return match read_run_log(&log_path) {
            Ok(log) => match log.result {
                Some(result) => outcome(Some(result), None, true),
                None => outcome(
                    None,
                    Some("incomplete run log; rerun with force".to_string()),
                    true,
                ),
            },
            Err(e) => outcome(None, Some(format!("unreadable run log: {e}")), true),
        };
    }

    let repo_root = opts.repos_root.join(&task.repo_name);
    let guard = LeakageGuard {
        file_path: task.file_path.clone(),
        line_no: task.line_no,
    };
    let ingested = match ingest_repo(&repo_root, Some(&guard), &IngestFilters::default()) {
        Ok(i) => i,
        Err(e) => return outcome(None, Some(e.to_string()), false),
    };
    let index = match build_index(&ingested.files, opts.index_params) {
        Ok(i) => i,
        Err(e) => return outcome(None, Some(e.to_string()), false),
    };

    let actor = backends.actor.for_task(task);
    let reflector = backends.reflector.for_task(task);
    let gateways = Gateways {
        actor: &actor,
        reflector: &reflector,
    };

    let mut log = match RunLogWriter::create(&log_path, &task.task_id, &task.repo_name) {
        Ok(w) => w,
        Err(e) => return outcome(None, Some(e.to_string()), false),
    };
    let mut cache = ExperienceCache::new();
    match run_task(task, &index, &gateways, config, &mut cache, Some(&mut log)) {
        Ok(result) => outcome(Some(result), None, false),
        Err(e) => outcome(None, Some(e.to_string()), false),
    }
}

/// Reloads outcomes from the run logs in a run directory (newest state wins).
pub fn load_outcomes(run_dir: &Path) -> Result<Vec<TaskOutcome>, BenchError> {
    let mut paths = Vec::new();
    let entries = fs::read_dir(run_dir).map_err(|source| BenchError::Io {
        path: run_dir.to_path_buf(),
        source,
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| BenchError::Io {
            path: run_dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "log") {
            paths.push(path);
        }
    }
    paths.sort();

    let mut outcomes = Vec::new();
    for path in paths {
        match read_run_log(&path) {
            Ok(log) => outcomes.push(TaskOutcome {
                task_id: log.task_id.clone(),
                repo_name: log.repo_name.clone(),
                error: match log.result {
                    Some(_) => None,
                    None => Some("incomplete run log".to_string()),
                },
                result: log.result,
                resumed: true,
            }),
            Err(e) => {
                return Err(BenchError::MalformedReport {
                    path,
                    detail: e.to_string(),
                })
            }
        }
    }
    Ok(outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepoStats {
    pub task_count: usize,
    pub mean_em: f64,
    pub mean_es: f64,
    /// stop_reason -> count; tasks that never produced a result count as "error".
    pub stop_reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub per_repo: BTreeMap<String, RepoStats>,
    pub config: LoopConfig,
}

/// Per-repo arithmetic means of the final records. Tasks without any result
/// contribute zero scores and an "error" histogram entry.
pub fn aggregate(outcomes: &[TaskOutcome], config: &LoopConfig) -> BenchReport {
    #[derive(Default)]
    struct Accum {
        count: usize,
        em_sum: f64,
        es_sum: f64,
        reasons: BTreeMap<String, usize>,
    }

    let mut groups: BTreeMap<String, Accum> = BTreeMap::new();
    for outcome in outcomes {
        let acc = groups.entry(outcome.repo_name.clone()).or_default();
        acc.count += 1;
        let reason = match &outcome.result {
            Some(result) => {
                acc.em_sum += f64::from(result.final_record.em);
                acc.es_sum += result.final_record.es;
                serde_json::to_value(result.stop_reason)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_else(|| "unknown".to_string())
            }
            None => "error".to_string(),
        };
        *acc.reasons.entry(reason).or_insert(0) += 1;
    }

    let per_repo = groups
        .into_iter()
        .map(|(repo, acc)| {
            let n = acc.count as f64;
            (
                repo,
                RepoStats {
                    task_count: acc.count,
                    mean_em: acc.em_sum / n,
                    mean_es: acc.es_sum / n,
                    stop_reasons: acc.reasons,
                },
            )
        })
        .collect();
    BenchReport {
        per_repo,
        config: config.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Markdown,
    Csv,
    Jsonl,
}

const STOP_REASON_COLUMNS: [&str; 5] = [
    "exact_match",
    "stagnation",
    "max_iter",
    "backend_error",
    "error",
];

pub fn render_report(report: &BenchReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => render_markdown(report),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Jsonl => render_jsonl(report),
    }
}

pub fn emit_report(
    report: &BenchReport,
    format: ReportFormat,
    path: &Path,
) -> Result<(), BenchError> {
    fs::write(path, render_report(report, format)).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn render_markdown(report: &BenchReport) -> String {
    let mut out = String::new();
    out.push_str("| Repository | Tasks | EM | ES | Stop reasons |\n");
    out.push_str("|---|---:|---:|---:|---|\n");
    for (repo, stats) in &report.per_repo {
        let reasons: Vec<String> = stats
            .stop_reasons
            .iter()
            .map(|(k, v)| format!("{k}: {v}"))
            .collect();
        out.push_str(&format!(
            "| {repo} | {} | {:.3} | {:.3} | {} |\n",
            stats.task_count,
            stats.mean_em,
            stats.mean_es,
            reasons.join(", ")
        ));
    }
    out.push_str("\nConfig: `");
    out.push_str(&serde_json::to_string(&report.config).expect("config serialization"));
    out.push_str("`\n");
    out
}

fn render_csv(report: &BenchReport) -> String {
    let mut writer = csv::WriterBuilder::new()
        .flexible(true)
        .from_writer(Vec::new());
    writer
        .write_record(
            ["repo", "task_count", "mean_em", "mean_es"]
                .into_iter()
                .chain(STOP_REASON_COLUMNS),
        )
        .expect("csv header");
    writer
        .write_record([
            "__config__",
            &serde_json::to_string(&report.config).expect("config serialization"),
        ])
        .expect("csv config record");
    for (repo, stats) in &report.per_repo {
        let mut record = vec![
            repo.clone(),
            stats.task_count.to_string(),
            stats.mean_em.to_string(),
            stats.mean_es.to_string(),
        ];
        for reason in STOP_REASON_COLUMNS {
            record.push(
                stats
                    .stop_reasons
                    .get(reason)
                    .copied()
                    .unwrap_or(0)
                    .to_string(),
            );
        }
        writer.write_record(&record).expect("csv row");
    }
    String::from_utf8(writer.into_inner().expect("csv flush")).expect("csv utf-8")
}

pub fn parse_report_csv(path: &Path) -> Result<BenchReport, BenchError> {
    let malformed = |detail: String| BenchError::MalformedReport {
        path: path.to_path_buf(),
        detail,
    };
    let text = fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut config = None;
    let mut per_repo = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| malformed(e.to_string()))?;
        let repo = record.get(0).unwrap_or_default().to_string();
        if repo == "__config__" {
            let raw = record
                .get(1)
                .ok_or_else(|| malformed("missing config".into()))?;
            config = Some(
                serde_json::from_str::<LoopConfig>(raw)
                    .map_err(|e| malformed(format!("config: {e}")))?,
            );
            continue;
        }
        let field = |i: usize| {
            record
                .get(i)
                .ok_or_else(|| malformed(format!("row {repo}: missing column {i}")))
        };
        let mut stop_reasons = BTreeMap::new();
        for (offset, reason) in STOP_REASON_COLUMNS.iter().enumerate() {
            let count: usize = field(4 + offset)?
                .parse()
                .map_err(|e| malformed(format!("row {repo}: {e}")))?;
            if count > 0 {
                stop_reasons.insert(reason.to_string(), count);
            }
        }
        per_repo.insert(
            repo.clone(),
            RepoStats {
                task_count: field(1)?
                    .parse()
                    .map_err(|e| malformed(format!("row {repo}: {e}")))?,
                mean_em: field(2)?
                    .parse()
                    .map_err(|e| malformed(format!("row {repo}: {e}")))?,
                mean_es: field(3)?
                    .parse()
                    .map_err(|e| malformed(format!("row {repo}: {e}")))?,
                stop_reasons,
            },
        );
    }
    Ok(BenchReport {
        per_repo,
        config: config.ok_or_else(|| malformed("missing __config__ record".into()))?,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine {
    Config { config: LoopConfig },
    Repo { repo: String, stats: RepoStats },
}

fn render_jsonl(report: &BenchReport) -> String {
    let mut out = String::new();
    let mut push = |line: &ReportLine| {
        out.push_str(&serde_json::to_string(line).expect("report serialization"));
        out.push('\n');
    };
    push(&ReportLine::Config {
        config: report.config.clone(),
    });
    for (repo, stats) in &report.per_repo {
        push(&ReportLine::Repo {
            repo: repo.clone(),
            stats: stats.clone(),
        });
    }
    out
}

pub fn parse_report_jsonl(path: &Path) -> Result<BenchReport, BenchError> {
    let malformed = |detail: String| BenchError::MalformedReport {
        path: path.to_path_buf(),
        detail,
    };
    let text = fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut config = None;
    let mut per_repo = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ReportLine =
            serde_json::from_str(line).map_err(|e| malformed(format!("line {}: {e}", i + 1)))?;
        match parsed {
            ReportLine::Config { config: c } => config = Some(c),
            ReportLine::Repo { repo, stats } => {
                per_repo.insert(repo, stats);
            }
        }
    }
    Ok(BenchReport {
        per_repo,
        config: config.ok_or_else(|| malformed("missing config line".into()))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loop_controller::StopReason;
    use std::collections::BTreeSet;

    fn toy_repo(dir: &Path, files: &[(&str, &str)]) {
        for (name, body) in files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).unwrap();
            }
            fs::write(path, body).unwrap();
        }
    }

    #[test]
    fn eligibility_skips_comments_blanks_and_docstrings() {
        let file = SourceFile {
            path: "a.py".to_string(),
            lines: [
                "# leading comment", // 1: comment
                "x = 1",             // 2: eligible
                "",                  // 3: blank
                "s = \"\"\"open",    // 4: eligible (code starts the string)
                "inside doc",        // 5: inside
                "\"\"\"",            // 6: starts inside
                "    y = 2  ",       // 7: eligible
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        };
        assert_eq!(eligible_lines(&file), vec![2, 4, 7]);
    }

    #[test]
    fn eligibility_handles_one_line_docstring() {
        let file = SourceFile {
            path: "a.py".to_string(),
            lines: ["d = '''one liner'''", "z = 3"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        };
        assert_eq!(eligible_lines(&file), vec![1, 2]);
    }

    #[test]
    fn build_benchmark_is_seed_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = (1..=50).map(|i| format!("value_{i} = {i}\n")).collect();
        toy_repo(dir.path(), &[("mod.py", &body)]);

        let a = build_benchmark(dir.path(), "toy", 10, 7).unwrap();
        let b = build_benchmark(dir.path(), "toy", 10, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);

        let c = build_benchmark(dir.path(), "toy", 10, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn build_benchmark_tasks_are_consistent() {
        let dir = tempfile::tempdir().unwrap();
        toy_repo(
            dir.path(),
            &[("m.py", "alpha = 1\nbeta = 2\ngamma = 3\ndelta = 4\n")],
        );
        let tasks = build_benchmark(dir.path(), "toy", 3, 1).unwrap();
        let mut seen = BTreeSet::new();
        for task in &tasks {
            assert!(!task.ground_truth.trim().is_empty());
            assert!(!task.ground_truth.trim().starts_with('#'));
            assert_eq!(task.prefix.len(), task.line_no - 1);
            assert!(seen.insert((task.file_path.clone(), task.line_no)));
            assert_eq!(task.created_meta.sampler_seed, 1);
        }
    }

    #[test]
    fn build_benchmark_rejects_comment_only_repos() {
        let dir = tempfile::tempdir().unwrap();
        toy_repo(dir.path(), &[("c.py", "# one\n# two\n\n# three\n")]);
        let err = build_benchmark(dir.path(), "toy", 1, 0).unwrap_err();
        match err {
            BenchError::InsufficientEligible {
                eligible,
                requested,
            } => {
                assert_eq!(eligible, 0);
                assert_eq!(requested, 1);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn tasks_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        toy_repo(dir.path(), &[("m.py", "a = 1\nb = 2\nc = 3\n")]);
        let tasks = build_benchmark(dir.path(), "toy", 2, 3).unwrap();
        let path = dir.path().join("tasks.jsonl");
        write_tasks_jsonl(&tasks, &path).unwrap();
        assert_eq!(read_tasks_jsonl(&path).unwrap(), tasks);
    }

    #[test]
    fn log_file_names_are_safe_and_distinct() {
        let a = log_file_name("repo:src/a.py:10");
        let b = log_file_name("repo:src/a_py:10");
        assert_ne!(a, b);
        assert!(a.ends_with(".log"));
        assert!(!a.contains('/'));
        assert!(!a.contains(':'));
    }

    fn outcome(repo: &str, em: u8, es: f64, stop: StopReason) -> TaskOutcome {
        use crate::experience::IterationRecord;
        TaskOutcome {
            task_id: format!("{repo}:f.py:1"),
            repo_name: repo.to_string(),
            result: Some(LoopResult {
                task_id: format!("{repo}:f.py:1"),
                final_record: IterationRecord {
                    iteration: 0,
                    target_lines: Vec::new(),
                    prompt_rendered: String::new(),
                    generated_line: String::new(),
                    em,
                    es,
                    feedback: None,
                    retrieval_trace: Vec::new(),
                },
                stop_reason: stop,
                iterations_run: 1,
            }),
            error: None,
            resumed: false,
        }
    }

    #[test]
    fn aggregate_computes_per_repo_means() {
        let outcomes = vec![
            outcome("r1", 1, 1.0, StopReason::ExactMatch),
            outcome("r1", 0, 0.5, StopReason::MaxIterations),
            outcome("r1", 1, 1.0, StopReason::ExactMatch),
            outcome("r2", 1, 1.0, StopReason::ExactMatch),
        ];
        let report = aggregate(&outcomes, &LoopConfig::default());
        assert_eq!(report.per_repo.len(), 2);
        let r1 = &report.per_repo["r1"];
        assert!((r1.mean_em - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r1.task_count, 3);
        assert_eq!(r1.stop_reasons["exact_match"], 2);
        assert_eq!(report.per_repo["r2"].mean_em, 1.0);
    }

    #[test]
    fn aggregate_counts_errors() {
        let mut failed = outcome("r1", 0, 0.0, StopReason::MaxIterations);
        failed.result = None;
        failed.error = Some("missing repo".to_string());
        let report = aggregate(&[failed], &LoopConfig::default());
        assert_eq!(report.per_repo["r1"].stop_reasons["error"], 1);
        assert_eq!(report.per_repo["r1"].mean_em, 0.0);
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let mut outcomes = vec![
            outcome("r1", 1, 1.0, StopReason::ExactMatch),
            outcome("r2", 0, 0.25, StopReason::Stagnation),
            outcome("r1", 0, 0.75, StopReason::MaxIterations),
        ];
        let a = aggregate(&outcomes, &LoopConfig::default());
        outcomes.reverse();
        let b = aggregate(&outcomes, &LoopConfig::default());
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_empty_is_valid() {
        let report = aggregate(&[], &LoopConfig::default());
        assert!(report.per_repo.is_empty());
    }

    #[test]
    fn report_round_trips_csv_and_jsonl() {
        let outcomes = vec![
            outcome("r1", 1, 1.0, StopReason::ExactMatch),
            outcome("r1", 0, 0.625, StopReason::Stagnation),
            outcome("r2", 0, 0.3333333333333333, StopReason::MaxIterations),
        ];
        let report = aggregate(&outcomes, &LoopConfig::default());
        let dir = tempfile::tempdir().unwrap();

        let csv_path = dir.path().join("report.csv");
        emit_report(&report, ReportFormat::Csv, &csv_path).unwrap();
        assert_eq!(parse_report_csv(&csv_path).unwrap(), report);

        let jsonl_path = dir.path().join("report.jsonl");
        emit_report(&report, ReportFormat::Jsonl, &jsonl_path).unwrap();
        assert_eq!(parse_report_jsonl(&jsonl_path).unwrap(), report);

        // One JSON object per line.
        let text = fs::read_to_string(&jsonl_path).unwrap();
        for line in text.lines() {
            serde_json::from_str::<serde_json::Value>(line).unwrap();
        }
    }

    #[test]
    fn report_output_is_bit_stable() {
        let report = aggregate(
            &[outcome("r1", 1, 1.0, StopReason::ExactMatch)],
            &LoopConfig::default(),
        );
        for format in [
            ReportFormat::Markdown,
            ReportFormat::Csv,
            ReportFormat::Jsonl,
        ] {
            assert_eq!(
                render_report(&report, format),
                render_report(&report, format)
            );
        }
    }

    #[test]
    fn markdown_has_one_row_per_repo() {
        let outcomes = vec![
            outcome("alpha", 1, 1.0, StopReason::ExactMatch),
            outcome("beta", 0, 0.5, StopReason::Stagnation),
        ];
        let report = aggregate(&outcomes, &LoopConfig::default());
        let md = render_report(&report, ReportFormat::Markdown);
        assert!(md.contains("| alpha |"));
        assert!(md.contains("| beta |"));
        assert_eq!(md.lines().filter(|l| l.starts_with("| ")).count(), 3); // header + 2 rows
    }
}
