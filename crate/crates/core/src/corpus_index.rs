//! Repository ingestion and the sliding-window chunk index.
//!
//! A repository snapshot is read into [`SourceFile`]s, cut into fixed-stride
//! line windows ([`Chunk`]s), tokenized, and frozen into an immutable
//! [`CorpusIndex`] that retrieval ranks against.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read repository root {root}: {detail}")]
    RootUnreadable { root: PathBuf, detail: String },
    #[error("invalid chunk geometry: window_size={window_size}, stride={stride}")]
    BadGeometry { window_size: usize, stride: usize },
    #[error("index file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed index file {path}: {detail}")]
    MalformedIndex { path: PathBuf, detail: String },
}

/// One text file of the repository snapshot, newline-stripped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFile {
    /// Repo-relative path with `/` separators.
    pub path: String,
    pub lines: Vec<String>,
}

/// A contiguous window of source lines plus its token set; the unit of retrieval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub file_path: String,
    /// 1-based, inclusive.
    pub start_line: usize,
    /// 1-based, inclusive.
    pub end_line: usize,
    pub text: String,
    #[serde(rename = "tokens")]
    pub token_set: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexParams {
    pub window_size: usize,
    pub stride: usize,
}

impl Default for IndexParams {
    fn default() -> Self {
        IndexParams {
            window_size: 20,
            stride: 10,
        }
    }
}

/// Immutable, deterministically ordered chunk index over one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIndex {
    chunks: Vec<Chunk>,
    params: IndexParams,
    fingerprint: String,
}

impl CorpusIndex {
    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn params(&self) -> IndexParams {
        self.params
    }

    /// Content hash of the ingested files (post leakage guard).
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }
}

/// File selection for ingestion.
#[derive(Debug, Clone)]
pub struct IngestFilters {
    /// Allowed extensions, without the dot.
    pub extensions: Vec<String>,
}

impl Default for IngestFilters {
    fn default() -> Self {
        IngestFilters {
            extensions: vec!["py".to_string()],
        }
    }
}

/// Marks the completion point inside the task's own file: the target line and
/// everything after it stay out of the corpus.
#[derive(Debug, Clone)]
pub struct LeakageGuard {
    /// Repo-relative path of the task file.
    pub file_path: String,
    /// 1-based line being completed; ingestion keeps lines strictly before it.
    pub line_no: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestWarning {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub files: Vec<SourceFile>,
    pub warnings: Vec<IngestWarning>,
}

/// Reads matching files under `root`, applying the leakage guard to the task
/// file. Undecodable files are skipped with a warning; an unreadable root is
/// fatal.
pub fn ingest_repo(
    root: &Path,
    guard: Option<&LeakageGuard>,
    filters: &IngestFilters,
) -> Result<IngestOutcome, CorpusError> {
    if !root.is_dir() {
        return Err(CorpusError::RootUnreadable {
            root: root.to_path_buf(),
            detail: "not a readable directory".to_string(),
        });
    }

    let mut paths = Vec::new();
    for entry in WalkDir::new(root) {
        let entry = entry.map_err(|e| CorpusError::RootUnreadable {
            root: root.to_path_buf(),
            detail: e.to_string(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let ext = entry
            .path()
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("");
        if filters.extensions.iter().any(|allowed| allowed == ext) {
            paths.push(entry.path().to_path_buf());
        }
    }
    paths.sort();

    let mut files = Vec::new();
    let mut warnings = Vec::new();
    for path in paths {
        let rel = path
            .strip_prefix(root)
            .unwrap_or(&path)
            .to_string_lossy()
            .replace('\\', "/");
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                warnings.push(IngestWarning {
                    path: rel,
                    reason: format!("unreadable: {e}"),
                });
                continue;
            }
        };
        let text = match String::from_utf8(bytes) {
            Ok(t) => t,
            Err(_) => {
                warnings.push(IngestWarning {
                    path: rel,
                    reason: "not valid UTF-8".to_string(),
                });
                continue;
            }
        };
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        if let Some(g) = guard {
            if g.file_path == rel {
                lines.truncate(g.line_no.saturating_sub(1));
            }
        }
        files.push(SourceFile { path: rel, lines });
    }
    Ok(IngestOutcome { files, warnings })
}

/// Maximal runs of `[A-Za-z0-9_]`, lowercased, with set semantics.
pub fn tokenize(text: &str) -> BTreeSet<String> {
    let mut tokens = BTreeSet::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_ascii_alphanumeric() || c == '_' {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            tokens.insert(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.insert(current);
    }
    tokens
}

/// Cuts a file into windows starting at lines 1, 1+stride, 1+2*stride, ….
/// The last window may be shorter so the final line is always covered.
pub fn chunk_file(file: &SourceFile, window_size: usize, stride: usize) -> Vec<Chunk> {
    assert!(window_size >= 1, "window_size must be >= 1");
    assert!(
        stride >= 1 && stride <= window_size,
        "stride must be in 1..=window_size"
    );
    let total = file.lines.len();
    let mut chunks = Vec::new();
    let mut start = 1usize;
    while start <= total {
        let end = (start + window_size - 1).min(total);
        let text = file.lines[start - 1..end].join("\n");
        let token_set = tokenize(&text);
        chunks.push(Chunk {
            file_path: file.path.clone(),
            start_line: start,
            end_line: end,
            text,
            token_set,
        });
        start += stride;
    }
    chunks
}

/// Builds the immutable index: chunks ordered by (file path, start line),
/// fingerprint stable for identical inputs.
pub fn build_index(files: &[SourceFile], params: IndexParams) -> Result<CorpusIndex, CorpusError> {
    if params.window_size < 1 || params.stride < 1 || params.stride > params.window_size {
        return Err(CorpusError::BadGeometry {
            window_size: params.window_size,
            stride: params.stride,
        });
    }
    let mut sorted: Vec<&SourceFile> = files.iter().collect();
    sorted.sort_by(|a, b| a.path.cmp(&b.path));

    let mut chunks = Vec::new();
    for file in &sorted {
        chunks.extend(chunk_file(file, params.window_size, params.stride));
    }
    let fingerprint = fingerprint_files(files);
    Ok(CorpusIndex {
        chunks,
        params,
        fingerprint,
    })
}

/// Order-independent content hash over (path, lines) of every file.
pub fn fingerprint_files(files: &[SourceFile]) -> String {
    let mut sorted: Vec<&SourceFile> = files.iter().collect();
    sorted.sort_by(|a, b| a.path.cmp(&b.path));
    let mut hasher = Sha256::new();
    for file in sorted {
        hasher.update(file.path.as_bytes());
        hasher.update([0u8]);
        for line in &file.lines {
            hasher.update(line.as_bytes());
            hasher.update(*b"\n");
        }
        hasher.update([0u8]);
    }
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    window_size: usize,
    stride: usize,
    fingerprint: String,
}

/// One JSON record per line: a header carrying params and fingerprint, then
/// one record per chunk.
pub fn write_index(index: &CorpusIndex, path: &Path) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    let header = IndexHeader {
        window_size: index.params.window_size,
        stride: index.params.stride,
        fingerprint: index.fingerprint.clone(),
    };
    serde_json::to_writer(&mut out, &header).expect("header serialization");
    out.push(b'\n');
    for chunk in &index.chunks {
        serde_json::to_writer(&mut out, chunk).expect("chunk serialization");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&out).map_err(io_err)?;
    Ok(())
}

pub fn read_index(path: &Path) -> Result<CorpusIndex, CorpusError> {
    let malformed = |detail: String| CorpusError::MalformedIndex {
        path: path.to_path_buf(),
        detail,
    };
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| malformed("empty file".to_string()))?
        .map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let header: IndexHeader =
        serde_json::from_str(&header_line).map_err(|e| malformed(format!("header: {e}")))?;
    let mut chunks = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let chunk: Chunk = serde_json::from_str(&line)
            .map_err(|e| malformed(format!("chunk record {}: {e}", i + 1)))?;
        chunks.push(chunk);
    }
    Ok(CorpusIndex {
        chunks,
        params: IndexParams {
            window_size: header.window_size,
            stride: header.stride,
        },
        fingerprint: header.fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(path: &str, lines: &[&str]) -> SourceFile {
        SourceFile {
            path: path.to_string(),
            lines: lines.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn tokenize_splits_on_non_word_chars() {
        let tokens = tokenize("def foo(bar):");
        let expected: BTreeSet<String> = ["def", "foo", "bar"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(tokens, expected);
    }

    #[test]
    fn tokenize_empty_and_case_fold() {
        assert!(tokenize("").is_empty());
        let tokens = tokenize("Foo foo FOO");
        assert_eq!(tokens.len(), 1);
        assert!(tokens.contains("foo"));
    }

    #[test]
    fn chunk_windows_cover_the_file() {
        let f = file("a.py", &["l1", "l2", "l3", "l4", "l5"]);
        let chunks = chunk_file(&f, 2, 2);
        let spans: Vec<(usize, usize)> =
            chunks.iter().map(|c| (c.start_line, c.end_line)).collect();
        assert_eq!(spans, vec![(1, 2), (3, 4), (5, 5)]);
    }

    #[test]
    fn chunk_single_window_when_file_is_short() {
        let f = file("a.py", &["only"]);
        let chunks = chunk_file(&f, 20, 10);
        assert_eq!(chunks.len(), 1);
        assert_eq!((chunks[0].start_line, chunks[0].end_line), (1, 1));
    }

    #[test]
    fn chunk_overlapping_stride() {
        let lines: Vec<String> = (1..=20).map(|i| format!("line{i}")).collect();
        let f = SourceFile {
            path: "a.py".to_string(),
            lines,
        };
        let chunks = chunk_file(&f, 20, 10);
        let spans: Vec<(usize, usize)> =
            chunks.iter().map(|c| (c.start_line, c.end_line)).collect();
        assert_eq!(spans, vec![(1, 20), (11, 20)]);
    }

    #[test]
    fn chunk_empty_file_yields_nothing() {
        let f = file("a.py", &[]);
        assert!(chunk_file(&f, 2, 2).is_empty());
    }

    #[test]
    fn build_index_counts_and_determinism() {
        let files = vec![
            file("b.py", &["x = 1", "y = 2", "z = 3", "w = 4", "v = 5"]),
            file("a.py", &["a = 1", "b = 2", "c = 3", "d = 4", "e = 5"]),
        ];
        let params = IndexParams {
            window_size: 2,
            stride: 2,
        };
        let index = build_index(&files, params).unwrap();
        assert_eq!(index.len(), 6);
        // Ordered by path then start line regardless of input order.
        assert_eq!(index.chunks()[0].file_path, "a.py");
        let again = build_index(&files, params).unwrap();
        assert_eq!(index.fingerprint(), again.fingerprint());
        assert_eq!(index, again);
    }

    #[test]
    fn build_index_empty_corpus() {
        let index = build_index(&[], IndexParams::default()).unwrap();
        assert!(index.is_empty());
    }

    #[test]
    fn build_index_rejects_bad_geometry() {
        let err = build_index(
            &[],
            IndexParams {
                window_size: 2,
                stride: 3,
            },
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::BadGeometry { .. }));
    }

    #[test]
    fn ingest_filters_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.py"), "x = 1\ny = 2\n").unwrap();
        fs::write(dir.path().join("README.md"), "# readme\n").unwrap();
        let out = ingest_repo(dir.path(), None, &IngestFilters::default()).unwrap();
        assert_eq!(out.files.len(), 1);
        assert_eq!(out.files[0].path, "a.py");
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn ingest_applies_leakage_guard() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = (1..=10).map(|i| format!("line{i}\n")).collect();
        fs::write(dir.path().join("t.py"), body).unwrap();
        let guard = LeakageGuard {
            file_path: "t.py".to_string(),
            line_no: 7,
        };
        let out = ingest_repo(dir.path(), Some(&guard), &IngestFilters::default()).unwrap();
        assert_eq!(out.files[0].lines.len(), 6);
        assert_eq!(out.files[0].lines.last().unwrap(), "line6");
    }

    #[test]
    fn ingest_skips_undecodable_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.py"), "a = 1\n").unwrap();
        fs::write(dir.path().join("b.py"), "b = 2\n").unwrap();
        fs::write(dir.path().join("c.py"), [0xffu8, 0xfe, 0x00, 0x41]).unwrap();
        let out = ingest_repo(dir.path(), None, &IngestFilters::default()).unwrap();
        assert_eq!(out.files.len(), 2);
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(out.warnings[0].path, "c.py");
    }

    #[test]
    fn ingest_unreadable_root_is_fatal() {
        let err = ingest_repo(
            Path::new("/nonexistent/definitely/missing"),
            None,
            &IngestFilters::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::RootUnreadable { .. }));
    }

    #[test]
    fn index_cache_round_trip_is_byte_stable() {
        let files = vec![file(
            "a.py",
            &["def foo():", "    return 1", "", "x = foo()"],
        )];
        let index = build_index(
            &files,
            IndexParams {
                window_size: 2,
                stride: 2,
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("index1.jsonl");
        let p2 = dir.path().join("index2.jsonl");
        write_index(&index, &p1).unwrap();
        write_index(&index, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let loaded = read_index(&p1).unwrap();
        assert_eq!(loaded, index);
    }
}
