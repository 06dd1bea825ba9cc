//! Keyword splitting of repository files into retrieval chunks.
//!
//! Files are first cut into pieces after every separator occurrence (the
//! separator stays with the preceding piece, so `endmodule` stays attached
//! to its module body), then consecutive pieces are greedily merged while
//! the merged text stays within the chunk token budget. Chunks never span
//! file boundaries and concatenate back to the original file byte-exactly.

use crate::corpus::RepoFile;
use crate::tokenize::{TokenCounter, TokenizeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKeyword {
    /// Split after every "\n".
    LineBreak,
    /// Split after every "endmodule" occurrence.
    EndModule,
    /// Split after every non-overlapping "\n\n", scanning left to right.
    DoubleBreak,
}

impl SplitKeyword {
    pub fn separator(self) -> &'static str {
        match self {
            SplitKeyword::LineBreak => "\n",
            SplitKeyword::EndModule => "endmodule",
            SplitKeyword::DoubleBreak => "\n\n",
        }
    }

    /// Name used by the CLI and in reports.
    pub fn name(self) -> &'static str {
        match self {
            SplitKeyword::LineBreak => "line",
            SplitKeyword::EndModule => "endmodule",
            SplitKeyword::DoubleBreak => "para",
        }
    }

    pub const ALL: [SplitKeyword; 3] = [
        SplitKeyword::LineBreak,
        SplitKeyword::EndModule,
        SplitKeyword::DoubleBreak,
    ];
}

impl std::str::FromStr for SplitKeyword {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "line" => Ok(SplitKeyword::LineBreak),
            "endmodule" => Ok(SplitKeyword::EndModule),
            "para" => Ok(SplitKeyword::DoubleBreak),
            other => Err(format!(
                "unknown split keyword `{other}` (expected line, endmodule or para)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitStrategy {
    pub keyword: SplitKeyword,
    /// Token budget per chunk; must be >= 1.
    pub chunk_size: usize,
}

impl SplitStrategy {
    pub fn new(keyword: SplitKeyword, chunk_size: usize) -> Self {
        assert!(chunk_size >= 1, "chunk_size must be at least 1");
        SplitStrategy { keyword, chunk_size }
    }
}

impl Default for SplitStrategy {
    fn default() -> Self {
        SplitStrategy {
            keyword: SplitKeyword::LineBreak,
            chunk_size: 4096,
        }
    }
}

/// One retrieval unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub text: String,
    pub source_path: String,
    /// Position within one make_chunks run, consecutive from 0.
    pub ordinal: usize,
    /// Count of `text` under the counter the run was configured with.
    pub token_len: usize,
    /// Single indivisible piece longer than chunk_size, kept whole.
    pub oversize: bool,
}

impl Chunk {
    pub fn id(&self) -> String {
        format!("{}#{}", self.source_path, self.ordinal)
    }
}

/// Cuts file text after every separator occurrence. Lossless: joining the
/// pieces reproduces the text byte-exactly, and no piece is empty.
pub fn split_pieces(file: &RepoFile, strategy: SplitStrategy) -> Vec<&str> {
    file.text
        .split_inclusive(strategy.keyword.separator())
        .collect()
}

/// Splits every file and greedily merges consecutive pieces within the
/// chunk budget. A lone piece over budget becomes its own oversize chunk.
pub fn make_chunks(
    files: &[RepoFile],
    strategy: SplitStrategy,
    counter: &TokenCounter,
) -> Result<Vec<Chunk>, TokenizeError> {
    assert!(strategy.chunk_size >= 1, "chunk_size must be at least 1");
    let mut chunks: Vec<Chunk> = Vec::new();

    for file in files {
        let mut current = String::new();
        let mut current_len = 0usize;

        let flush = |text: &mut String, len: usize, oversize: bool, out: &mut Vec<Chunk>| {
            if text.is_empty() {
                return;
            }
            out.push(Chunk {
                text: std::mem::take(text),
                source_path: file.path.clone(),
                ordinal: 0, // assigned below once the full run is known
                token_len: len,
                oversize,
            });
        };

        for piece in split_pieces(file, strategy) {
            if current.is_empty() {
                let len = counter.count(piece)?;
                current.push_str(piece);
                current_len = len;
                if len > strategy.chunk_size {
                    flush(&mut current, current_len, true, &mut chunks);
                }
                continue;
            }

            let mut candidate = String::with_capacity(current.len() + piece.len());
            candidate.push_str(&current);
            candidate.push_str(piece);
            let merged_len = counter.count(&candidate)?;
            if merged_len <= strategy.chunk_size {
                current = candidate;
                current_len = merged_len;
            } else {
                flush(&mut current, current_len, false, &mut chunks);
                let len = counter.count(piece)?;
                current.push_str(piece);
                current_len = len;
                if len > strategy.chunk_size {
                    flush(&mut current, current_len, true, &mut chunks);
                }
            }
        }
        flush(&mut current, current_len, false, &mut chunks);
    }

    for (i, chunk) in chunks.iter_mut().enumerate() {
        chunk.ordinal = i;
    }
    Ok(chunks)
}
