//! Per-task iteration history: the feedback store consulted by retrieval and
//! the record the final answer is selected from.
//!
//! Every iteration is appended to an in-memory cache and, when a writer is
//! attached, to a line-delimited run log so interrupted runs stay inspectable.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loop_controller::LoopResult;
use crate::reflector::Feedback;

pub const RUN_LOG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperienceError {
    #[error("iteration {got} out of order for task {task_id} (expected {expected})")]
    OutOfOrder {
        task_id: String,
        got: usize,
        expected: usize,
    },
    #[error("no records for task {task_id}")]
    NotRun { task_id: String },
    #[error("run log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed run log {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
}

/// One retrieved snippet in the per-iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTraceEntry {
    pub file_path: String,
    pub start_line: usize,
    pub end_line: usize,
    pub score: f64,
}

/// Everything one loop pass produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Lines of the retrieval target this pass searched with.
    pub target_lines: Vec<String>,
    pub prompt_rendered: String,
    pub generated_line: String,
    pub em: u8,
    pub es: f64,
    pub feedback: Option<Feedback>,
    pub retrieval_trace: Vec<RetrievalTraceEntry>,
}

/// Append-only store of iteration records, keyed by task.
#[derive(Debug, Default)]
pub struct ExperienceCache {
    records: BTreeMap<String, Vec<IterationRecord>>,
}

impl ExperienceCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record; iteration indices must stay contiguous per task.
    pub fn record(&mut self, task_id: &str, rec: IterationRecord) -> Result<(), ExperienceError> {
        let list = self.records.entry(task_id.to_string()).or_default();
        if rec.iteration != list.len() {
            return Err(ExperienceError::OutOfOrder {
                task_id: task_id.to_string(),
                got: rec.iteration,
                expected: list.len(),
            });
        }
        list.push(rec);
        Ok(())
    }

    pub fn records(&self, task_id: &str) -> &[IterationRecord] {
        self.records.get(task_id).map_or(&[], Vec::as_slice)
    }

    /// Suggestion lines from the most recent feedback that actually carried
    /// suggestions; empty when no iteration produced any.
    pub fn latest_suggestions(&self, task_id: &str) -> Vec<String> {
        self.records(task_id)
            .iter()
            .rev()
            .filter_map(|rec| rec.feedback.as_ref())
            .map(|fb| &fb.suggestions)
            .find(|s| !s.is_empty())
            .cloned()
            .unwrap_or_default()
    }

    /// Record maximizing (em, es); the earliest iteration wins ties.
    pub fn best(&self, task_id: &str) -> Result<&IterationRecord, ExperienceError> {
        let records = self.records(task_id);
        let mut best = records.first().ok_or_else(|| ExperienceError::NotRun {
            task_id: task_id.to_string(),
        })?;
        for rec in &records[1..] {
            if (rec.em, rec.es) > (best.em, best.es) {
                best = rec;
            }
        }
        Ok(best)
    }

    pub fn last(&self, task_id: &str) -> Result<&IterationRecord, ExperienceError> {
        self.records(task_id)
            .last()
            .ok_or_else(|| ExperienceError::NotRun {
                task_id: task_id.to_string(),
            })
    }
}

/// One line of a run log. The header opens the file; iteration lines are
/// appended as they complete; the result line closes a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunLogLine {
    Header {
        version: u32,
        task_id: String,
        repo_name: String,
    },
    Iteration(IterationRecord),
    Result(LoopResult),
}

/// Appends run-log lines with a flush per line so a crash or interrupt leaves
/// a readable prefix.
pub struct RunLogWriter {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl RunLogWriter {
    pub fn create(path: &Path, task_id: &str, repo_name: &str) -> Result<Self, ExperienceError> {
        let io_err = |source| ExperienceError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let file = fs::File::create(path).map_err(io_err)?;
        let mut writer = RunLogWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        writer.append(&RunLogLine::Header {
            version: RUN_LOG_VERSION,
            task_id: task_id.to_string(),
            repo_name: repo_name.to_string(),
        })?;
        Ok(writer)
    }

    pub fn append_iteration(&mut self, rec: &IterationRecord) -> Result<(), ExperienceError> {
        self.append(&RunLogLine::Iteration(rec.clone()))
    }

    pub fn finish(&mut self, result: &LoopResult) -> Result<(), ExperienceError> {
        self.append(&RunLogLine::Result(result.clone()))
    }

    fn append(&mut self, line: &RunLogLine) -> Result<(), ExperienceError> {
        let io_err = |source| ExperienceError::Io {
            path: self.path.clone(),
            source,
        };
        let encoded = serde_json::to_string(line).map_err(|e| ExperienceError::Malformed {
            path: self.path.clone(),
            detail: e.to_string(),
        })?;
        self.out.write_all(encoded.as_bytes()).map_err(io_err)?;
        self.out.write_all(b"\n").map_err(io_err)?;
        self.out.flush().map_err(io_err)
    }
}

/// A parsed run log: header metadata, the iteration records, and the closing
/// result when the run completed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub task_id: String,
    pub repo_name: String,
    pub records: Vec<IterationRecord>,
    pub result: Option<LoopResult>,
}

pub fn read_run_log(path: &Path) -> Result<RunLog, ExperienceError> {
    let io_err = |source| ExperienceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let malformed = |detail: String| ExperienceError::Malformed {
        path: path.to_path_buf(),
        detail,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut header: Option<(String, String)> = None;
    let mut records = Vec::new();
    let mut result = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RunLogLine =
            serde_json::from_str(&line).map_err(|e| malformed(format!("line {}: {e}", i + 1)))?;
        match parsed {
            RunLogLine::Header {
                version,
                task_id,
                repo_name,
            } => {
                if version != RUN_LOG_VERSION {
                    return Err(malformed(format!("unsupported version {version}")));
                }
                header = Some((task_id, repo_name));
            }
            RunLogLine::Iteration(rec) => records.push(rec),
            RunLogLine::Result(res) => result = Some(res),
        }
    }
    let (task_id, repo_name) = header.ok_or_else(|| malformed("missing header".to_string()))?;
    Ok(RunLog {
        task_id,
        repo_name,
        records,
        result,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(iteration: usize, em: u8, es: f64, suggestions: Option<Vec<&str>>) -> IterationRecord {
        IterationRecord {
            iteration,
            target_lines: vec![format!("target {iteration}")],
            prompt_rendered: format!("prompt {iteration}"),
            generated_line: format!("gen {iteration}"),
            em,
            es,
            feedback: suggestions.map(|s| Feedback {
                evaluation_analysis: "e".to_string(),
                contextual_analysis: "c".to_string(),
                suggestions: s.iter().map(|x| x.to_string()).collect(),
                raw: "raw".to_string(),
            }),
            retrieval_trace: Vec::new(),
        }
    }

    #[test]
    fn record_appends_in_order() {
        let mut cache = ExperienceCache::new();
        for i in 0..3 {
            cache.record("t", rec(i, 0, 0.1, None)).unwrap();
        }
        assert_eq!(cache.records("t").len(), 3);
        assert_eq!(cache.records("t")[2].iteration, 2);
    }

    #[test]
    fn record_rejects_out_of_order() {
        let mut cache = ExperienceCache::new();
        cache.record("t", rec(0, 0, 0.1, None)).unwrap();
        let err = cache.record("t", rec(2, 0, 0.1, None)).unwrap_err();
        assert!(matches!(
            err,
            ExperienceError::OutOfOrder { expected: 1, .. }
        ));
    }

    #[test]
    fn tasks_are_independent() {
        let mut cache = ExperienceCache::new();
        cache.record("a", rec(0, 0, 0.1, None)).unwrap();
        cache.record("b", rec(0, 0, 0.2, None)).unwrap();
        cache.record("a", rec(1, 0, 0.3, None)).unwrap();
        assert_eq!(cache.records("a").len(), 2);
        assert_eq!(cache.records("b").len(), 1);
    }

    #[test]
    fn latest_suggestions_empty_without_records() {
        let cache = ExperienceCache::new();
        assert!(cache.latest_suggestions("t").is_empty());
    }

    #[test]
    fn latest_suggestions_takes_most_recent() {
        let mut cache = ExperienceCache::new();
        cache
            .record("t", rec(0, 0, 0.1, Some(vec!["old"])))
            .unwrap();
        cache
            .record("t", rec(1, 0, 0.2, Some(vec!["s1", "s2", "s3"])))
            .unwrap();
        assert_eq!(cache.latest_suggestions("t"), vec!["s1", "s2", "s3"]);
    }

    #[test]
    fn latest_suggestions_falls_back_past_feedbackless_records() {
        let mut cache = ExperienceCache::new();
        cache
            .record("t", rec(0, 0, 0.1, Some(vec!["keep_me"])))
            .unwrap();
        cache.record("t", rec(1, 0, 0.2, None)).unwrap();
        assert_eq!(cache.latest_suggestions("t"), vec!["keep_me"]);
    }

    #[test]
    fn best_is_es_argmax_when_em_ties() {
        let mut cache = ExperienceCache::new();
        for (i, es) in [0.5, 0.8, 0.7].iter().enumerate() {
            cache.record("t", rec(i, 0, *es, None)).unwrap();
        }
        assert_eq!(cache.best("t").unwrap().iteration, 1);
    }

    #[test]
    fn best_prefers_exact_match() {
        let mut cache = ExperienceCache::new();
        cache.record("t", rec(0, 0, 0.9, None)).unwrap();
        cache.record("t", rec(1, 1, 1.0, None)).unwrap();
        assert_eq!(cache.best("t").unwrap().iteration, 1);
    }

    #[test]
    fn best_breaks_ties_toward_earliest() {
        let mut cache = ExperienceCache::new();
        cache.record("t", rec(0, 0, 0.6, None)).unwrap();
        cache.record("t", rec(1, 0, 0.5, None)).unwrap();
        cache.record("t", rec(2, 0, 0.6, None)).unwrap();
        assert_eq!(cache.best("t").unwrap().iteration, 0);
    }

    #[test]
    fn best_requires_records() {
        let cache = ExperienceCache::new();
        assert!(matches!(
            cache.best("missing"),
            Err(ExperienceError::NotRun { .. })
        ));
    }

    #[test]
    fn run_log_round_trips() {
        use crate::loop_controller::{LoopResult, StopReason};

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.log");
        let records = vec![rec(0, 0, 0.5, Some(vec!["s = 1"])), rec(1, 1, 1.0, None)];
        let result = LoopResult {
            task_id: "t1".to_string(),
            final_record: records[1].clone(),
            stop_reason: StopReason::ExactMatch,
            iterations_run: 2,
        };
        {
            let mut w = RunLogWriter::create(&path, "t1", "repo").unwrap();
            for r in &records {
                w.append_iteration(r).unwrap();
            }
            w.finish(&result).unwrap();
        }
        let log = read_run_log(&path).unwrap();
        assert_eq!(log.task_id, "t1");
        assert_eq!(log.repo_name, "repo");
        assert_eq!(log.records, records);
        assert_eq!(log.result, Some(result));
    }

    #[test]
    fn partial_run_log_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.log");
        {
            let mut w = RunLogWriter::create(&path, "t1", "repo").unwrap();
            w.append_iteration(&rec(0, 0, 0.5, None)).unwrap();
            // No result line: simulates an interrupted run.
        }
        let log = read_run_log(&path).unwrap();
        assert_eq!(log.records.len(), 1);
        assert!(log.result.is_none());
    }
}
