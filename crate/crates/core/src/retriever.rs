//! Retrieval targets and Jaccard-ranked chunk search.
//!
//! A retrieval target is an n-line query block: on the first pass it is the
//! tail of the unfinished code; on later passes feedback suggestion lines are
//! stacked above the tail.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::corpus_index::{tokenize, Chunk, CorpusIndex};

/// The n-line query block used for similarity search.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalTarget {
    pub lines: Vec<String>,
    pub token_set: BTreeSet<String>,
    /// How many leading lines came from feedback suggestions (0 on the first pass).
    pub feedback_line_count: usize,
}

/// A chunk together with its similarity to the target.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedSnippet {
    pub chunk: Chunk,
    pub score: f64,
}

fn non_blank_tail(prefix_lines: &[String], take: usize) -> Vec<String> {
    let non_blank: Vec<&String> = prefix_lines
        .iter()
        .filter(|l| !l.trim().is_empty())
        .collect();
    let start = non_blank.len().saturating_sub(take);
    non_blank[start..]
        .iter()
        .map(|s| (*s).to_string())
        .collect()
}

fn target_from_lines(lines: Vec<String>, feedback_line_count: usize) -> RetrievalTarget {
    let token_set = tokenize(&lines.join("\n"));
    RetrievalTarget {
        lines,
        token_set,
        feedback_line_count,
    }
}

/// First-pass target: the last `target_lines` non-blank prefix lines.
pub fn build_initial_target(prefix_lines: &[String], target_lines: usize) -> RetrievalTarget {
    assert!(target_lines >= 1, "target_lines must be >= 1");
    target_from_lines(non_blank_tail(prefix_lines, target_lines), 0)
}

/// Feedback-augmented target: up to `max_suggestion_lines` suggestion lines
/// stacked above the last `target_lines - x` non-blank prefix lines.
pub fn build_feedback_target(
    suggestions: &[String],
    prefix_lines: &[String],
    target_lines: usize,
    max_suggestion_lines: usize,
) -> RetrievalTarget {
    assert!(target_lines >= 1, "target_lines must be >= 1");
    assert!(
        max_suggestion_lines <= target_lines,
        "suggestion cap must not exceed the target length"
    );
    let x = suggestions.len().min(max_suggestion_lines);
    let mut lines: Vec<String> = suggestions[..x].to_vec();
    lines.extend(non_blank_tail(prefix_lines, target_lines - x));
    target_from_lines(lines, x)
}

/// `|a ∩ b| / |a ∪ b|`; two empty sets score 0.0 so an empty query matches nothing.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let intersection = a.intersection(b).count();
    let union = a.len() + b.len() - intersection;
    if union == 0 {
        0.0
    } else {
        intersection as f64 / union as f64
    }
}

/// Top-k chunks by descending score; ties broken by (file path, start line).
pub fn retrieve(
    index: &CorpusIndex,
    target: &RetrievalTarget,
    top_k: usize,
) -> Vec<RetrievedSnippet> {
    assert!(top_k >= 1, "top_k must be >= 1");
    let mut scored: Vec<RetrievedSnippet> = index
        .chunks()
        .iter()
        .map(|chunk| RetrievedSnippet {
            score: jaccard(&target.token_set, &chunk.token_set),
            chunk: chunk.clone(),
        })
        .collect();
    scored.sort_by(rank_order);
    scored.truncate(top_k);
    scored
}

fn rank_order(a: &RetrievedSnippet, b: &RetrievedSnippet) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.chunk.file_path.cmp(&b.chunk.file_path))
        .then_with(|| a.chunk.start_line.cmp(&b.chunk.start_line))
}
