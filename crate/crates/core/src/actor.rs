//! Completion prompt assembly and single-line post-processing.
//!
//! The prompt is retrieved snippets (each under a `# path:start-end` header)
//! followed by the tail of the unfinished code; the model is expected to
//! continue with the missing line.

use serde::{Deserialize, Serialize};

use crate::gateway::{Backend, GatewayError, GenRequest};
use crate::retriever::RetrievedSnippet;

/// Render order of snippet blocks inside the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnippetOrder {
    /// Highest-scored snippet first (default).
    Desc,
    /// Highest-scored snippet last, closest to the unfinished code.
    Asc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnippetBlock {
    pub file_path: String,
    pub start_line: usize,
    pub end_line: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionPrompt {
    pub snippet_blocks: Vec<SnippetBlock>,
    pub prefix_tail: Vec<String>,
    pub rendered: String,
}

fn render_block(block: &SnippetBlock) -> String {
    format!(
        "# {}:{}-{}\n{}\n\n",
        block.file_path, block.start_line, block.end_line, block.text
    )
}

/// Assembles the completion prompt under a character budget.
///
/// Snippets are retained greedily from the highest score down: the retained
/// set is the longest score-descending prefix that fits, so enlarging the
/// budget never drops a previously retained snippet. If the prefix tail alone
/// exceeds the budget its oldest lines are dropped, but never below one line.
pub fn assemble_completion_prompt(
    snippets: &[RetrievedSnippet],
    prefix_lines: &[String],
    budget_chars: usize,
    prefix_tail_lines: usize,
    order: SnippetOrder,
) -> CompletionPrompt {
    assert!(budget_chars > 0, "budget must be positive");

    let tail_start = prefix_lines.len().saturating_sub(prefix_tail_lines);
    let mut prefix_tail: Vec<String> = prefix_lines[tail_start..].to_vec();
    while prefix_tail.len() > 1 && prefix_tail.join("\n").chars().count() > budget_chars {
        prefix_tail.remove(0);
    }
    let tail_text = prefix_tail.join("\n");
    let tail_len = tail_text.chars().count();

    let mut ranked: Vec<&RetrievedSnippet> = snippets.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.chunk.file_path.cmp(&b.chunk.file_path))
            .then_with(|| a.chunk.start_line.cmp(&b.chunk.start_line))
    });

    let mut retained: Vec<SnippetBlock> = Vec::new();
    let mut used = tail_len;
    for snippet in ranked {
        let block = SnippetBlock {
            file_path: snippet.chunk.file_path.clone(),
            start_line: snippet.chunk.start_line,
            end_line: snippet.chunk.end_line,
            text: snippet.chunk.text.clone(),
        };
        let cost = render_block(&block).chars().count();
        if used + cost > budget_chars {
            break;
        }
        used += cost;
        retained.push(block);
    }

    if order == SnippetOrder::Asc {
        retained.reverse();
    }

    let mut rendered = String::new();
    for block in &retained {
        rendered.push_str(&render_block(block));
    }
    rendered.push_str(&tail_text);

    CompletionPrompt {
        snippet_blocks: retained,
        prefix_tail,
        rendered,
    }
}

/// Sends the rendered prompt to the actor backend and returns its text verbatim.
pub fn generate_completion(
    backend: &Backend,
    prompt: &CompletionPrompt,
) -> Result<String, GatewayError> {
    let resp = backend.generate(&GenRequest::actor(prompt.rendered.clone()))?;
    Ok(resp.text)
}

/// First non-blank line of the raw output, skipping markdown code-fence lines.
pub fn postprocess_line(raw: &str) -> String {
    raw.lines()
        .filter(|line| !line.trim_start().starts_with("```"))
        .find(|line| !line.trim().is_empty())
        .unwrap_or("")
        .to_string()
}
