//! Fine-tuning dataset preparation.
//!
//! Each sample becomes an (input, output) pair where the input is exactly
//! the evaluation pipeline's direct-path prompt, so training and inference
//! see the same conditioning. Over-budget samples drop whole context files
//! from the front (the current file is never dropped, only tail-kept);
//! downstream trainers mask the input and compute loss on the output only.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{concat_files, RepoSample};
use crate::pipeline::{fit_file_section, render_prompt, PipelineError, PromptTemplate};
use crate::tokenize::TokenCounter;

#[derive(Debug, Error)]
pub enum FtError {
    #[error("{path} already exists; pass --force to overwrite")]
    FileExists { path: PathBuf },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed fine-tune sample: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FtMeta {
    pub sample_id: String,
    /// Context files were dropped or the current file was tail-cut.
    pub truncated: bool,
    pub input_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FtSample {
    pub input: String,
    pub output: String,
    pub meta: FtMeta,
}

/// A sample that could not fit the budget at all, with the reason.
#[derive(Debug, Clone)]
pub struct SkippedSample {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct FtPrepOutcome {
    pub samples: Vec<FtSample>,
    pub skipped: Vec<SkippedSample>,
}

/// Builds one fine-tune input for a sample under `budget` tokens.
fn prepare_one(
    sample: &RepoSample,
    template: PromptTemplate,
    counter: &TokenCounter,
    budget: usize,
) -> Result<Result<FtSample, String>, PipelineError> {
    // try suffixes of the file list, longest first; index 0 is the full
    // direct-path prompt
    for drop in 0..=sample.context_files.len() {
        let context = concat_files(&sample.context_files[drop..]);
        let input = render_prompt(
            template,
            &context,
            &sample.current_path,
            &sample.current_prefix,
        );
        let input_tokens = counter.count(&input)?;
        if input_tokens <= budget {
            return Ok(Ok(FtSample {
                input,
                output: sample.target.clone(),
                meta: FtMeta {
                    sample_id: sample.id.clone(),
                    truncated: drop > 0,
                    input_tokens,
                },
            }));
        }
    }

    // every context file dropped and still over budget: tail-keep the file
    // section itself
    match fit_file_section(
        template,
        counter,
        &sample.current_path,
        &sample.current_prefix,
        budget,
    ) {
        Ok((file_text, _)) => {
            let input = render_prompt(template, "", &sample.current_path, &file_text);
            let input_tokens = counter.count(&input)?;
            Ok(Ok(FtSample {
                input,
                output: sample.target.clone(),
                meta: FtMeta {
                    sample_id: sample.id.clone(),
                    truncated: true,
                    input_tokens,
                },
            }))
        }
        Err(PipelineError::BudgetImpossible { budget, needed }) => Ok(Err(format!(
            "budget {budget} cannot fit the current file's last line ({needed} tokens needed)"
        ))),
        Err(other) => Err(other),
    }
}

/// Prepares fine-tune pairs for every sample. Samples whose current file
/// cannot fit the budget even after tail-keeping are skipped with a reason.
pub fn prepare_ft_dataset(
    samples: &[RepoSample],
    template: PromptTemplate,
    counter: &TokenCounter,
    budget: usize,
) -> Result<FtPrepOutcome, PipelineError> {
    assert!(budget >= 1, "fine-tune budget must be at least 1 token");
    let mut outcome = FtPrepOutcome::default();
    for sample in samples {
        match prepare_one(sample, template, counter, budget)? {
            Ok(ft) => outcome.samples.push(ft),
            Err(reason) => outcome.skipped.push(SkippedSample {
                sample_id: sample.id.clone(),
                reason,
            }),
        }
    }
    Ok(outcome)
}

/// Writes `{"input", "output", "meta"}` JSONL. Refuses to overwrite an
/// existing file unless `overwrite` is set.
pub fn export_jsonl(samples: &[FtSample], path: &Path, overwrite: bool) -> Result<(), FtError> {
    if !overwrite && path.exists() {
        return Err(FtError::FileExists {
            path: path.to_path_buf(),
        });
    }
    let io_err = |source| FtError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for sample in samples {
        let line = serde_json::to_string(sample).expect("sample serialization is infallible");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    Ok(())
}

/// Inverse of [`export_jsonl`].
pub fn load_ft_jsonl(path: &Path) -> Result<Vec<FtSample>, FtError> {
    let io_err = |source| FtError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let raw = line.map_err(io_err)?;
        if raw.trim().is_empty() {
            continue;
        }
        let sample: FtSample = serde_json::from_str(&raw).map_err(|e| FtError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(samples)
}
