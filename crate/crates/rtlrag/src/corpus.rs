//! Dataset ingestion for repository-level completion samples.
//!
//! One JSON object per line:
//! `{"id", "repo", "context_files": [{"path", "text"}], "current_path",
//!   "current_prefix", "target"}`
//! Unknown fields are tolerated (counted, not stored). Everything else about
//! the schema is enforced strictly so scoring never runs on garbage.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: not a JSON object: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    SchemaViolation {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: duplicate sample id `{id}`")]
    DuplicateId { line: usize, id: String },
}

/// One file of repository context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoFile {
    pub path: String,
    pub text: String,
}

/// One completion sample: repository context, the incomplete current file,
/// and the expected next line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoSample {
    pub id: String,
    pub repo: String,
    pub context_files: Vec<RepoFile>,
    pub current_path: String,
    pub current_prefix: String,
    pub target: String,
}

/// Samples in file order, plus where they came from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<RepoSample>,
    pub source_path: PathBuf,
    /// Fields present in the file but not part of the schema.
    pub unknown_field_count: usize,
}

const SAMPLE_FIELDS: [&str; 6] = [
    "id",
    "repo",
    "context_files",
    "current_path",
    "current_prefix",
    "target",
];

fn get_str(
    obj: &serde_json::Map<String, serde_json::Value>,
    field: &str,
    line: usize,
) -> Result<String, CorpusError> {
    match obj.get(field) {
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(CorpusError::SchemaViolation {
            line,
            field: field.to_string(),
            message: format!("expected a string, got {}", json_kind(other)),
        }),
        None => Err(CorpusError::SchemaViolation {
            line,
            field: field.to_string(),
            message: "missing".to_string(),
        }),
    }
}

fn json_kind(v: &serde_json::Value) -> &'static str {
    match v {
        serde_json::Value::Null => "null",
        serde_json::Value::Bool(_) => "a bool",
        serde_json::Value::Number(_) => "a number",
        serde_json::Value::String(_) => "a string",
        serde_json::Value::Array(_) => "an array",
        serde_json::Value::Object(_) => "an object",
    }
}

fn check_path(path: &str, field: &str, line: usize) -> Result<(), CorpusError> {
    if path.is_empty() {
        return Err(CorpusError::SchemaViolation {
            line,
            field: field.to_string(),
            message: "empty path".to_string(),
        });
    }
    if path.starts_with('/') || path.starts_with('\\') {
        return Err(CorpusError::SchemaViolation {
            line,
            field: field.to_string(),
            message: format!("path `{path}` must be repo-relative"),
        });
    }
    Ok(())
}

fn parse_sample(line_no: usize, raw: &str, unknown: &mut usize) -> Result<RepoSample, CorpusError> {
    let value: serde_json::Value =
        serde_json::from_str(raw).map_err(|e| CorpusError::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
    let obj = value.as_object().ok_or_else(|| CorpusError::MalformedLine {
        line: line_no,
        message: format!("expected an object, got {}", json_kind(&value)),
    })?;

    *unknown += obj
        .keys()
        .filter(|k| !SAMPLE_FIELDS.contains(&k.as_str()))
        .count();

    let id = get_str(obj, "id", line_no)?;
    let repo = get_str(obj, "repo", line_no)?;
    let current_path = get_str(obj, "current_path", line_no)?;
    let current_prefix = get_str(obj, "current_prefix", line_no)?;
    let target = get_str(obj, "target", line_no)?;

    check_path(&current_path, "current_path", line_no)?;
    if target.contains('\n') {
        return Err(CorpusError::SchemaViolation {
            line: line_no,
            field: "target".to_string(),
            message: "target must be a single line (contains a newline)".to_string(),
        });
    }

    let files_value = obj
        .get("context_files")
        .ok_or_else(|| CorpusError::SchemaViolation {
            line: line_no,
            field: "context_files".to_string(),
            message: "missing".to_string(),
        })?;
    let files_array = files_value
        .as_array()
        .ok_or_else(|| CorpusError::SchemaViolation {
            line: line_no,
            field: "context_files".to_string(),
            message: format!("expected an array, got {}", json_kind(files_value)),
        })?;

    let mut context_files = Vec::with_capacity(files_array.len());
    for (i, entry) in files_array.iter().enumerate() {
        let field = format!("context_files[{i}]");
        let file_obj = entry.as_object().ok_or_else(|| CorpusError::SchemaViolation {
            line: line_no,
            field: field.clone(),
            message: format!("expected an object, got {}", json_kind(entry)),
        })?;
        *unknown += file_obj
            .keys()
            .filter(|k| k.as_str() != "path" && k.as_str() != "text")
            .count();
        let path = get_str(file_obj, "path", line_no).map_err(|e| rename_field(e, &field))?;
        let text = get_str(file_obj, "text", line_no).map_err(|e| rename_field(e, &field))?;
        check_path(&path, &format!("{field}.path"), line_no)?;
        context_files.push(RepoFile { path, text });
    }

    if context_files.is_empty() && current_prefix.is_empty() {
        return Err(CorpusError::SchemaViolation {
            line: line_no,
            field: "context_files".to_string(),
            message: "sample has neither context files nor a current prefix".to_string(),
        });
    }

    Ok(RepoSample {
        id,
        repo,
        context_files,
        current_path,
        current_prefix,
        target,
    })
}

fn rename_field(err: CorpusError, prefix: &str) -> CorpusError {
    match err {
        CorpusError::SchemaViolation { line, field, message } => CorpusError::SchemaViolation {
            line,
            field: format!("{prefix}.{field}"),
            message,
        },
        other => other,
    }
}

/// Loads up to `limit` samples from a JSONL file, enforcing the schema and
/// sample invariants. Streams line by line; stops reading once `limit` is
/// reached.
pub fn load_dataset(path: &Path, limit: Option<usize>) -> Result<Dataset, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut samples: Vec<RepoSample> = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    let mut unknown = 0usize;

    for (idx, line) in reader.lines().enumerate() {
        if let Some(limit) = limit {
            if samples.len() >= limit {
                break;
            }
        }
        let line_no = idx + 1;
        let raw = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if raw.trim().is_empty() {
            continue;
        }
        let sample = parse_sample(line_no, &raw, &mut unknown)?;
        if !seen_ids.insert(sample.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: sample.id,
            });
        }
        samples.push(sample);
    }

    Ok(Dataset {
        samples,
        source_path: path.to_path_buf(),
        unknown_field_count: unknown,
    })
}

/// Writes samples as JSONL in the load schema. Inverse of [`load_dataset`]
/// for valid samples.
pub fn write_dataset(samples: &[RepoSample], path: &Path) -> Result<(), CorpusError> {
    let mut out = File::create(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    for sample in samples {
        let line = serde_json::to_string(sample).expect("sample serialization is infallible");
        writeln!(out, "{line}").map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

/// Joins files into one block: each file as a `// File: <path>` header
/// line, its text, then one blank line. Zero files give "".
pub fn concat_files(files: &[RepoFile]) -> String {
    let mut out = String::new();
    for file in files {
        let _ = write!(out, "// File: {}\n{}\n\n", file.path, file.text);
    }
    out
}

/// [`concat_files`] over a sample's context files.
pub fn concat_repo_context(sample: &RepoSample) -> String {
    concat_files(&sample.context_files)
}
