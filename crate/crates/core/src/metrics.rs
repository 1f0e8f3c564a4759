//! Exact-match and edit-similarity scoring for predicted lines.

use serde::{Deserialize, Serialize};

/// Scores for one predicted line against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// 1 if the normalized prediction equals the normalized truth, else 0.
    pub em: u8,
    /// Edit similarity in `[0, 1]`.
    pub es: f64,
}

impl EvalResult {
    pub fn evaluate(pred: &str, truth: &str) -> Self {
        EvalResult {
            em: exact_match(pred, truth),
            es: edit_similarity(pred, truth),
        }
    }
}

/// Strips leading and trailing whitespace; internal characters untouched.
pub fn normalize(line: &str) -> &str {
    line.trim()
}

/// 1 iff the two lines are equal after normalization.
pub fn exact_match(pred: &str, truth: &str) -> u8 {
    u8::from(normalize(pred) == normalize(truth))
}

/// Character-level edit distance (insertions, deletions, substitutions).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }

    // Two-row DP over the shorter string.
    let (outer, inner) = if a.len() >= b.len() {
        (&a, &b)
    } else {
        (&b, &a)
    };
    let mut row: Vec<usize> = (0..=inner.len()).collect();
    for (i, oc) in outer.iter().enumerate() {
        let mut prev_diag = row[0];
        row[0] = i + 1;
        for (j, ic) in inner.iter().enumerate() {
            let cost = usize::from(oc != ic);
            let next = (row[j + 1] + 1).min(row[j] + 1).min(prev_diag + cost);
            prev_diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[inner.len()]
}

/// `1 - lev(pred, truth) / max(|pred|, |truth|)` over normalized strings.
///
/// Both-empty is defined as 1.0: identical strings must score 1 and the
/// formula's denominator vanishes there.
pub fn edit_similarity(pred: &str, truth: &str) -> f64 {
    let pred = normalize(pred);
    let truth = normalize(truth);
    let max_len = pred.chars().count().max(truth.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - levenshtein(pred, truth) as f64 / max_len as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_strips_outer_whitespace() {
        assert_eq!(normalize("  return x  "), "return x");
        assert_eq!(normalize("return x"), "return x");
        assert_eq!(normalize("\ta = b\t"), "a = b");
    }

    #[test]
    fn exact_match_basic() {
        assert_eq!(exact_match("return x", "return x"), 1);
        assert_eq!(exact_match("return x", "return y"), 0);
        assert_eq!(exact_match("  a=b", "a=b  "), 1);
    }

    #[test]
    fn levenshtein_known_distances() {
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("same", "same"), 0);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("abc", ""), 3);
        assert_eq!(levenshtein("", ""), 0);
    }

    #[test]
    fn edit_similarity_single_substitution() {
        // "return x" vs "return y": one substitution over 8 chars.
        assert_eq!(edit_similarity("return x", "return y"), 0.875);
    }

    #[test]
    fn edit_similarity_identity_and_empty() {
        assert_eq!(edit_similarity("foo(bar)", "foo(bar)"), 1.0);
        assert_eq!(edit_similarity("", ""), 1.0);
        assert_eq!(edit_similarity("   ", "\t"), 1.0);
    }

    #[test]
    fn exact_match_implies_full_similarity() {
        let pairs = [("a = 1", "  a = 1"), ("x", "x"), ("", " ")];
        for (p, t) in pairs {
            if exact_match(p, t) == 1 {
                assert_eq!(edit_similarity(p, t), 1.0);
            }
        }
    }

    #[test]
    fn evaluate_bundles_both_metrics() {
        let r = EvalResult::evaluate("return x", "return y");
        assert_eq!(r.em, 0);
        assert_eq!(r.es, 0.875);
        let r = EvalResult::evaluate("return x", "return x");
        assert_eq!(r.em, 1);
        assert_eq!(r.es, 1.0);
    }
}
