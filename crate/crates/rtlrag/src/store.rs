//! Exact in-process vector store over chunk embeddings.
//!
//! Search is a flat scan: every eligible entry is scored by dot product
//! (vectors are unit norm, so this is cosine similarity) and sorted. That
//! makes results exact by construction; the interface would also fit an
//! approximate index, which is why exactness is pinned down by tests.
//!
//! On disk: one JSON header line `{"dim", "count", "version": 1}` followed
//! by one JSON entry per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::Embedding;
use crate::split::Chunk;

const FORMAT_VERSION: u64 = 1;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("chunk/embedding count mismatch: {chunks} chunks, {embeddings} embeddings")]
    LengthMismatch { chunks: usize, embeddings: usize },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate chunk id `{0}`")]
    DuplicateChunkId(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("store file corrupt at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("unsupported store format version {0}")]
    UnsupportedVersion(u64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreEntry {
    pub chunk_id: String,
    pub source_path: String,
    pub ordinal: usize,
    pub text: String,
    pub embedding: Embedding,
}

/// Hit from [`VectorStore::top_k`]; `index` addresses the store entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub index: usize,
    pub chunk_id: String,
    pub score: f64,
}

/// Frozen after construction; shareable across threads.
#[derive(Debug, Clone)]
pub struct VectorStore {
    entries: Vec<StoreEntry>,
    dim: usize,
}

/// Pairs chunks with their embeddings and freezes them into a store.
/// Zero-vector embeddings are kept (the store mirrors the chunk list) but
/// never surface in search results.
pub fn build_store(chunks: &[Chunk], embeddings: Vec<Embedding>) -> Result<VectorStore, StoreError> {
    if chunks.len() != embeddings.len() {
        return Err(StoreError::LengthMismatch {
            chunks: chunks.len(),
            embeddings: embeddings.len(),
        });
    }
    let dim = embeddings.first().map_or(0, Embedding::dim);
    let mut seen = std::collections::HashSet::new();
    let mut entries = Vec::with_capacity(chunks.len());
    for (chunk, embedding) in chunks.iter().zip(embeddings) {
        if embedding.dim() != dim {
            return Err(StoreError::DimensionMismatch {
                expected: dim,
                got: embedding.dim(),
            });
        }
        let chunk_id = chunk.id();
        if !seen.insert(chunk_id.clone()) {
            return Err(StoreError::DuplicateChunkId(chunk_id));
        }
        entries.push(StoreEntry {
            chunk_id,
            source_path: chunk.source_path.clone(),
            ordinal: chunk.ordinal,
            text: chunk.text.clone(),
            embedding,
        });
    }
    Ok(VectorStore { entries, dim })
}

impl VectorStore {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    /// Top `k` entries by cosine similarity, descending. Ties are broken by
    /// ascending (source_path, ordinal) so results are reproducible.
    pub fn top_k(&self, query: &Embedding, k: usize) -> Result<Vec<SearchHit>, StoreError> {
        if self.entries.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        if query.dim() != self.dim {
            return Err(StoreError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let mut hits: Vec<SearchHit> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.embedding.is_zero())
            .map(|(index, e)| SearchHit {
                index,
                chunk_id: e.chunk_id.clone(),
                score: query.dot(&e.embedding).clamp(-1.0, 1.0),
            })
            .collect();
        hits.sort_by(|a, b| {
            b.score.total_cmp(&a.score).then_with(|| {
                let ea = &self.entries[a.index];
                let eb = &self.entries[b.index];
                (&ea.source_path, ea.ordinal).cmp(&(&eb.source_path, eb.ordinal))
            })
        });
        hits.truncate(k);
        Ok(hits)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let io_err = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        let header = serde_json::json!({
            "dim": self.dim,
            "count": self.entries.len(),
            "version": FORMAT_VERSION,
        });
        writeln!(out, "{header}").map_err(io_err)?;
        for entry in &self.entries {
            let line = serde_json::to_string(entry).expect("entry serialization is infallible");
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<VectorStore, StoreError> {
        let io_err = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        let mut lines = reader.lines().enumerate();

        #[derive(Deserialize)]
        struct Header {
            dim: usize,
            count: usize,
            version: u64,
        }
        let (_, first) = lines.next().ok_or(StoreError::Corrupt {
            line: 1,
            message: "empty file, expected a header line".to_string(),
        })?;
        let first = first.map_err(io_err)?;
        let header: Header = serde_json::from_str(&first).map_err(|e| StoreError::Corrupt {
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        if header.version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion(header.version));
        }

        let mut entries = Vec::with_capacity(header.count);
        let mut seen = std::collections::HashSet::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let raw = line.map_err(io_err)?;
            if raw.trim().is_empty() {
                continue;
            }
            let entry: StoreEntry = serde_json::from_str(&raw).map_err(|e| StoreError::Corrupt {
                line: line_no,
                message: e.to_string(),
            })?;
            if entry.embedding.dim() != header.dim {
                return Err(StoreError::Corrupt {
                    line: line_no,
                    message: format!(
                        "embedding dim {} does not match header dim {}",
                        entry.embedding.dim(),
                        header.dim
                    ),
                });
            }
            let norm = entry.embedding.l2_norm();
            if norm != 0.0 && (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(StoreError::Corrupt {
                    line: line_no,
                    message: format!("embedding norm {norm} is neither 0 nor 1"),
                });
            }
            if !seen.insert(entry.chunk_id.clone()) {
                return Err(StoreError::DuplicateChunkId(entry.chunk_id));
            }
            entries.push(entry);
        }
        if entries.len() != header.count {
            return Err(StoreError::Corrupt {
                line: entries.len() + 1,
                message: format!(
                    "header promised {} entries, file has {}",
                    header.count,
                    entries.len()
                ),
            });
        }
        Ok(VectorStore {
            entries,
            dim: header.dim,
        })
    }
}
