//! The per-task retrieve → generate → evaluate → reflect loop and its
//! stopping criteria.
//!
//! The loop stops as soon as a generation matches exactly, after
//! `stagnation_threshold` consecutive iterations whose edit-similarity gain is
//! below `min_improvement`, or at the iteration cap — whichever comes first.
//! Ablation modes cut the loop down to a single retrieval-augmented pass or
//! run it with the evaluator's scores withheld.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::{self, SnippetOrder};
use crate::bench::CompletionTask;
use crate::corpus_index::CorpusIndex;
use crate::experience::{
    ExperienceCache, ExperienceError, IterationRecord, RetrievalTraceEntry, RunLogWriter,
};
use crate::gateway::{Backend, GatewayError};
use crate::metrics::EvalResult;
use crate::reflector;
use crate::retriever::{build_feedback_target, build_initial_target, retrieve, RetrievedSnippet};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("task {task_id}: {source}")]
    Gateway {
        task_id: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Experience(#[from] ExperienceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    /// Retrieve, generate, evaluate, reflect; feedback steers later passes.
    Full,
    /// One retrieval-augmented generation pass; no reflection, no experience.
    NoReflect,
    /// Reflection runs but never sees scores; no score-based stopping.
    NoEvaluator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalPick {
    /// Highest (em, es) record, earliest on ties.
    Best,
    /// Whatever the last iteration produced.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub max_iterations: usize,
    /// Consecutive sub-threshold improvements tolerated before stopping.
    pub stagnation_threshold: usize,
    /// Minimum edit-similarity gain that counts as improvement.
    pub min_improvement: f64,
    /// Lines in the retrieval target.
    pub target_lines: usize,
    /// Snippets retrieved per prompt.
    pub top_k: usize,
    /// Cap on feedback suggestion lines entering the retrieval target.
    pub max_suggestion_lines: usize,
    /// Prompt size cap in characters.
    pub prompt_budget: usize,
    /// Unfinished-code lines kept at the end of the prompt.
    pub prefix_tail_lines: usize,
    pub snippet_order: SnippetOrder,
    pub mode: LoopMode,
    pub final_pick: FinalPick,
    /// Withhold ground truth from the running loop; scores are still recorded
    /// for reporting but never steer generation, reflection, or stopping.
    pub blind: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            max_iterations: 10,
            stagnation_threshold: 3,
            min_improvement: 0.01,
            target_lines: 10,
            top_k: 10,
            max_suggestion_lines: 5,
            prompt_budget: 6000,
            prefix_tail_lines: 30,
            snippet_order: SnippetOrder::Desc,
            mode: LoopMode::Full,
            final_pick: FinalPick::Best,
            blind: false,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_iterations < 1 {
            return Err("max_iterations must be >= 1".into());
        }
        if self.stagnation_threshold < 1 {
            return Err("stagnation_threshold must be >= 1".into());
        }
        if !(self.min_improvement > 0.0 && self.min_improvement < 1.0) {
            return Err("min_improvement must be in (0, 1)".into());
        }
        if self.target_lines < 1 {
            return Err("target_lines must be >= 1".into());
        }
        if self.top_k < 1 {
            return Err("top_k must be >= 1".into());
        }
        if self.max_suggestion_lines > self.target_lines {
            return Err("max_suggestion_lines must not exceed target_lines".into());
        }
        if self.prompt_budget == 0 {
            return Err("prompt_budget must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ExactMatch,
    Stagnation,
    #[serde(rename = "max_iter")]
    MaxIterations,
    BackendError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopResult {
    pub task_id: String,
    pub final_record: IterationRecord,
    pub stop_reason: StopReason,
    pub iterations_run: usize,
}

/// The two model endpoints the loop talks to.
pub struct Gateways<'a> {
    pub actor: &'a Backend,
    pub reflector: &'a Backend,
}

struct LoopState<'a> {
    task: &'a CompletionTask,
    config: &'a LoopConfig,
    cache: &'a mut ExperienceCache,
    log: Option<&'a mut RunLogWriter>,
}

impl LoopState<'_> {
    fn record(&mut self, rec: IterationRecord) -> Result<(), ExperienceError> {
        self.cache.record(&self.task.task_id, rec.clone())?;
        if let Some(log) = self.log.as_deref_mut() {
            log.append_iteration(&rec)?;
        }
        Ok(())
    }

    fn finish(
        &mut self,
        stop_reason: StopReason,
        iterations_run: usize,
    ) -> Result<LoopResult, ExperienceError> {
        let task_id = &self.task.task_id;
        let final_record = match self.cache.records(task_id).is_empty() {
            // Nothing generated at all (first actor call failed): a sentinel
            // empty record keeps downstream aggregation total.
            true => IterationRecord {
                iteration: 0,
                target_lines: Vec::new(),
                prompt_rendered: String::new(),
                generated_line: String::new(),
                em: 0,
                es: 0.0,
                feedback: None,
                retrieval_trace: Vec::new(),
            },
            false => match (stop_reason, self.config.final_pick) {
                // A failed backend ends the run with the best answer seen so far.
                (StopReason::BackendError, _) => self.cache.best(task_id)?.clone(),
                (_, FinalPick::Best) => self.cache.best(task_id)?.clone(),
                (_, FinalPick::Last) => self.cache.last(task_id)?.clone(),
            },
        };
        let result = LoopResult {
            task_id: task_id.clone(),
            final_record,
            stop_reason,
            iterations_run,
        };
        if let Some(log) = self.log.as_deref_mut() {
            log.finish(&result)?;
        }
        Ok(result)
    }
}

/// Runs the loop for one task against an index built with the task's leakage
/// guard. A backend outage ends the run with `StopReason::BackendError`;
/// other gateway failures (script bugs, bad config) are hard errors.
pub fn run_task(
    task: &CompletionTask,
    index: &CorpusIndex,
    gateways: &Gateways<'_>,
    config: &LoopConfig,
    cache: &mut ExperienceCache,
    log: Option<&mut RunLogWriter>,
) -> Result<LoopResult, PipelineError> {
    let single_shot = config.mode == LoopMode::NoReflect;
    // Scores steer the loop only in the full, non-blind configuration.
    let evaluator_steers = config.mode == LoopMode::Full && !config.blind;
    let scores_visible = evaluator_steers;
    let max_iterations = if single_shot {
        1
    } else {
        config.max_iterations
    };

    let mut state = LoopState {
        task,
        config,
        cache,
        log,
    };
    let mut target = build_initial_target(&task.prefix, config.target_lines);
    let mut best_es = 0.0f64;
    let mut no_improvement = 0usize;
    let mut iterations = 0usize;

    while iterations < max_iterations {
        let snippets = retrieve(index, &target, config.top_k);
        let prompt = actor::assemble_completion_prompt(
            &snippets,
            &task.prefix,
            config.prompt_budget,
            config.prefix_tail_lines,
            config.snippet_order,
        );

        let raw = match actor::generate_completion(gateways.actor, &prompt) {
            Ok(raw) => raw,
            Err(GatewayError::BackendUnavailable { .. }) => {
                return Ok(state.finish(StopReason::BackendError, iterations)?);
            }
            Err(source) => {
                return Err(PipelineError::Gateway {
                    task_id: task.task_id.clone(),
                    source,
                })
            }
        };
        let generated_line = actor::postprocess_line(&raw);
        let scores = EvalResult::evaluate(&generated_line, &task.ground_truth);

        let mut rec = IterationRecord {
            iteration: iterations,
            target_lines: target.lines.clone(),
            prompt_rendered: prompt.rendered.clone(),
            generated_line,
            em: scores.em,
            es: scores.es,
            feedback: None,
            retrieval_trace: trace_of(&snippets),
        };

        if evaluator_steers && scores.em == 1 {
            state.record(rec)?;
            return Ok(state.finish(StopReason::ExactMatch, iterations + 1)?);
        }
        if evaluator_steers {
            if scores.es - best_es < config.min_improvement {
                no_improvement += 1;
            } else {
                no_improvement = 0;
                best_es = scores.es;
            }
            if no_improvement >= config.stagnation_threshold {
                state.record(rec)?;
                return Ok(state.finish(StopReason::Stagnation, iterations + 1)?);
            }
        }

        if !single_shot {
            let reflection_prompt = reflector::assemble_reflection_prompt(
                &rec.prompt_rendered,
                &rec.generated_line,
                scores.em,
                scores.es,
                scores_visible,
            );
            match reflector::reflect(gateways.reflector, &reflection_prompt) {
                Ok(reply) => {
                    rec.feedback = Some(reflector::parse_feedback(
                        &reply,
                        config.max_suggestion_lines,
                    ));
                }
                Err(GatewayError::BackendUnavailable { .. }) => {
                    state.record(rec)?;
                    return Ok(state.finish(StopReason::BackendError, iterations + 1)?);
                }
                Err(source) => {
                    return Err(PipelineError::Gateway {
                        task_id: task.task_id.clone(),
                        source,
                    })
                }
            }
        }

        state.record(rec)?;
        iterations += 1;

        if !single_shot {
            let suggestions = state.cache.latest_suggestions(&task.task_id);
            target = if suggestions.is_empty() {
                build_initial_target(&task.prefix, config.target_lines)
            } else {
                build_feedback_target(
                    &suggestions,
                    &task.prefix,
                    config.target_lines,
                    config.max_suggestion_lines,
                )
            };
        }
    }

    // Single-shot runs report the exact-match stop when they hit the answer.
    let stop = if single_shot
        && state
            .cache
            .records(&task.task_id)
            .last()
            .is_some_and(|r| r.em == 1)
    {
        StopReason::ExactMatch
    } else {
        StopReason::MaxIterations
    };
    Ok(state.finish(stop, iterations)?)
}

fn trace_of(snippets: &[RetrievedSnippet]) -> Vec<RetrievalTraceEntry> {
    snippets
        .iter()
        .map(|s| RetrievalTraceEntry {
            file_path: s.chunk.file_path.clone(),
            start_line: s.chunk.start_line,
            end_line: s.chunk.end_line,
            score: s.score,
        })
        .collect()
}
