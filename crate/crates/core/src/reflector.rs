//! Reflection prompt assembly and feedback parsing.
//!
//! The reflector model reviews a completion (the generation prompt, the
//! generated line, and optionally its scores) and answers in three labeled
//! sections; the suggestions section feeds the next retrieval target.

use serde::{Deserialize, Serialize};

use crate::gateway::{Backend, GatewayError, GenRequest};

pub const EVALUATION_HEADER: &str = "Evaluation Analysis";
pub const CONTEXTUAL_HEADER: &str = "Contextual Analysis";
pub const SUGGESTIONS_HEADER: &str = "Specific Suggestions";

/// Parsed reflector reply. `raw` keeps the verbatim model text for the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub evaluation_analysis: String,
    pub contextual_analysis: String,
    pub suggestions: Vec<String>,
    pub raw: String,
}

/// Builds the reflection prompt: the original generation prompt, the generated
/// code, and (when visible) the evaluator scores, followed by the three-section
/// answer instructions.
pub fn assemble_reflection_prompt(
    initial_prompt: &str,
    generated: &str,
    em: u8,
    es: f64,
    scores_visible: bool,
) -> String {
    let shown_generated = if generated.trim().is_empty() {
        "(empty)"
    } else {
        generated
    };
    let mut prompt = String::new();
    prompt.push_str("Review this code completion attempt.\n\n");
    prompt.push_str("--- generation prompt ---\n");
    prompt.push_str(initial_prompt);
    prompt.push_str("\n--- end generation prompt ---\n\n");
    prompt.push_str("Generated code:\n");
    prompt.push_str(shown_generated);
    prompt.push('\n');
    if scores_visible {
        prompt.push_str(&format!("\nScores:\nEM: {em}\nES: {es:.2}\n"));
    }
    prompt.push_str(&format!(
        "\nAnswer in exactly three sections.\n\
         {EVALUATION_HEADER}:\n\
         <assess the completion{}>\n\
         {CONTEXTUAL_HEADER}:\n\
         <analyze the syntax and semantics of the generated code in its surrounding context>\n\
         {SUGGESTIONS_HEADER}:\n\
         <plain code lines, one per line, that would improve the completion>\n",
        if scores_visible {
            " against the scores above"
        } else {
            ""
        }
    ));
    prompt
}

/// Sends the reflection prompt and returns the raw reply verbatim.
pub fn reflect(backend: &Backend, prompt: &str) -> Result<String, GatewayError> {
    let resp = backend.generate(&GenRequest::reflector(prompt.to_string()))?;
    Ok(resp.text)
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Evaluation,
    Contextual,
    Suggestions,
}

/// Byte offset of an ASCII needle in `haystack`, ignoring ASCII case.
/// Safe to slice at the returned offsets: a match is all-ASCII in the original.
fn find_ascii_ci(haystack: &str, needle: &str) -> Option<usize> {
    let h = haystack.as_bytes();
    let n = needle.as_bytes();
    if n.is_empty() || h.len() < n.len() {
        return None;
    }
    (0..=h.len() - n.len()).find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

fn header_match(line: &str) -> Option<(Section, usize, usize)> {
    for (section, header) in [
        (Section::Evaluation, EVALUATION_HEADER),
        (Section::Contextual, CONTEXTUAL_HEADER),
        (Section::Suggestions, SUGGESTIONS_HEADER),
    ] {
        if let Some(pos) = find_ascii_ci(line, header) {
            return Some((section, pos, header.len()));
        }
    }
    None
}

fn strip_bullet(line: &str) -> &str {
    let trimmed = line.trim();
    for prefix in ["- ", "* ", "+ "] {
        if let Some(rest) = trimmed.strip_prefix(prefix) {
            return rest.trim();
        }
    }
    // Numbered list markers: "1. code" / "2) code".
    let digits = trimmed.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &trimmed[digits..];
        if let Some(rest) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return rest.trim();
        }
    }
    trimmed
}

const CODE_KEYWORDS: [&str; 14] = [
    "def", "return", "import", "from", "class", "if", "elif", "else", "for", "while", "with",
    "raise", "pass", "yield",
];

fn looks_like_code(line: &str) -> bool {
    let trimmed = line.trim();
    if trimmed.contains(['=', '(', ')', ':', '.']) {
        return true;
    }
    trimmed
        .split_whitespace()
        .next()
        .is_some_and(|first| CODE_KEYWORDS.contains(&first))
}

/// Total parser for reflector replies.
///
/// Splits on the three case-insensitive section headers. When no header is
/// found at all, falls back to treating every code-looking line as a
/// suggestion. Suggestions are capped at `max_suggestion_lines` so downstream
/// retrieval-target composition stays within bounds.
pub fn parse_feedback(raw: &str, max_suggestion_lines: usize) -> Feedback {
    let mut evaluation = Vec::new();
    let mut contextual = Vec::new();
    let mut suggestions = Vec::new();
    let mut section = Section::None;
    let mut any_header = false;

    for line in raw.lines() {
        if let Some((next, pos, len)) = header_match(line) {
            any_header = true;
            section = next;
            let remainder = line[pos + len..]
                .trim_matches(|c: char| c == ':' || c == '*' || c == '#' || c.is_whitespace());
            if !remainder.is_empty() {
                match section {
                    Section::Evaluation => evaluation.push(remainder.to_string()),
                    Section::Contextual => contextual.push(remainder.to_string()),
                    Section::Suggestions => suggestions.push(remainder.to_string()),
                    Section::None => {}
                }
            }
            continue;
        }
        match section {
            Section::None => {}
            Section::Evaluation => evaluation.push(line.trim().to_string()),
            Section::Contextual => contextual.push(line.trim().to_string()),
            Section::Suggestions => {
                if line.trim_start().starts_with("```") {
                    continue;
                }
                let cleaned = strip_bullet(line);
                if !cleaned.is_empty() {
                    suggestions.push(cleaned.to_string());
                }
            }
        }
    }

    if !any_header {
        suggestions = raw
            .lines()
            .filter(|l| !l.trim().is_empty() && looks_like_code(l))
            .map(|l| l.trim().to_string())
            .collect();
    }
    suggestions.truncate(max_suggestion_lines);

    Feedback {
        evaluation_analysis: evaluation.join("\n").trim().to_string(),
        contextual_analysis: contextual.join("\n").trim().to_string(),
        suggestions,
        raw: raw.to_string(),
    }
}

/// Renders a feedback value back into the three-section reply shape.
/// Mainly useful for building scripted reflector fixtures.
pub fn render_feedback(feedback: &Feedback) -> String {
    let mut out = String::new();
    out.push_str(EVALUATION_HEADER);
    out.push_str(":\n");
    out.push_str(&feedback.evaluation_analysis);
    out.push('\n');
    out.push_str(CONTEXTUAL_HEADER);
    out.push_str(":\n");
    out.push_str(&feedback.contextual_analysis);
    out.push('\n');
    out.push_str(SUGGESTIONS_HEADER);
    out.push_str(":\n");
    for line in &feedback.suggestions {
        out.push_str(line);
        out.push('\n');
    }
    out
}
