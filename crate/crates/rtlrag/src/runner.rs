//! Dataset evaluation: a worker pool over samples, per-sample scoring, and
//! run artifacts (records, summaries, manifest).
//!
//! A sample that fails anywhere (tokenizer, retrieval, backend) becomes an
//! error record; it never aborts the run and never shifts another sample's
//! result. Records keep dataset order so identical runs write identical
//! bytes.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::GenerationBackend;
use crate::corpus::{concat_repo_context, RepoSample};
use crate::metrics::{
    bucket_label, edit_similarity, edit_similarity_raw, exact_match, exact_match_raw, summarize,
    EvalRecord, EvalSummary,
};
use crate::pipeline::{assemble_prompt, first_line, PipelineConfig};
use crate::tokenize::TokenizeError;

#[derive(Debug, Clone)]
pub struct RunSettings {
    pub pipeline: PipelineConfig,
    pub backend: GenerationBackend,
    pub workers: usize,
    pub buckets: Vec<usize>,
    /// Evaluate only samples whose repo+prefix context reaches this count.
    pub min_context_tokens: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<EvalRecord>,
    pub summary: EvalSummary,
    /// Samples excluded by the min-context filter.
    pub filtered_out: usize,
}

/// Token count of the sample's whole context: concatenated repo files plus
/// the current prefix, measured as one string.
pub fn context_token_count(
    config: &PipelineConfig,
    sample: &RepoSample,
) -> Result<usize, TokenizeError> {
    let mut cat = concat_repo_context(sample);
    cat.push_str(&sample.current_prefix);
    config.counter.count(&cat)
}

fn error_record(
    sample: &RepoSample,
    context_tokens: usize,
    bucket: String,
    path_taken: Option<crate::pipeline::PathTaken>,
    message: String,
) -> EvalRecord {
    EvalRecord {
        sample_id: sample.id.clone(),
        prediction: String::new(),
        target: sample.target.clone(),
        em: 0,
        es: 0.0,
        em_raw: 0,
        es_raw: 0.0,
        context_tokens,
        path_taken,
        bucket,
        truncated_chunks: 0,
        truncated_query: false,
        error: Some(message),
    }
}

/// Runs one sample end to end. Infallible by design: failures come back as
/// error records.
pub fn eval_one(settings: &RunSettings, sample: &RepoSample) -> EvalRecord {
    let context_tokens = match context_token_count(&settings.pipeline, sample) {
        Ok(n) => n,
        Err(e) => {
            return error_record(sample, 0, bucket_label(0, &settings.buckets), None, e.to_string())
        }
    };
    let bucket = bucket_label(context_tokens, &settings.buckets);

    let assembly = match assemble_prompt(&settings.pipeline, sample) {
        Ok(a) => a,
        Err(e) => return error_record(sample, context_tokens, bucket, None, e.to_string()),
    };
    let (truncated_chunks, truncated_query) = assembly
        .retrieved
        .as_ref()
        .map_or((0, false), |r| (r.truncated_chunks, r.truncated_query));

    let raw = match settings.backend.generate(&assembly.prompt, sample) {
        Ok(raw) => raw,
        Err(e) => {
            let mut record = error_record(
                sample,
                context_tokens,
                bucket,
                Some(assembly.path_taken),
                e.to_string(),
            );
            record.truncated_chunks = truncated_chunks;
            record.truncated_query = truncated_query;
            return record;
        }
    };
    let prediction = first_line(&raw).to_string();

    EvalRecord {
        sample_id: sample.id.clone(),
        em: u8::from(exact_match(&prediction, &sample.target)),
        es: edit_similarity(&prediction, &sample.target),
        em_raw: u8::from(exact_match_raw(&prediction, &sample.target)),
        es_raw: edit_similarity_raw(&prediction, &sample.target),
        prediction,
        target: sample.target.clone(),
        context_tokens,
        path_taken: Some(assembly.path_taken),
        bucket,
        truncated_chunks,
        truncated_query,
        error: None,
    }
}

/// Evaluates all samples with `settings.workers` threads. Records come back
/// in dataset order regardless of completion order.
pub fn evaluate_samples(
    samples: &[RepoSample],
    settings: &RunSettings,
    config_fingerprint: serde_json::Value,
) -> RunOutput {
    let workers = settings.workers.max(1).min(samples.len().max(1));
    let cursor = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Option<EvalRecord>>>> = Mutex::new(vec![None; samples.len()]);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = cursor.fetch_add(1, Ordering::Relaxed);
                if index >= samples.len() {
                    break;
                }
                let sample = &samples[index];
                let outcome = match settings.min_context_tokens {
                    Some(min)
                        if context_token_count(&settings.pipeline, sample)
                            .map_or(false, |n| n < min) =>
                    {
                        None
                    }
                    _ => Some(eval_one(settings, sample)),
                };
                slots.lock().unwrap()[index] = Some(outcome);
            });
        }
    });

    let mut records = Vec::with_capacity(samples.len());
    let mut filtered_out = 0usize;
    for slot in slots.into_inner().unwrap() {
        match slot.expect("every slot filled by the pool") {
            Some(record) => records.push(record),
            None => filtered_out += 1,
        }
    }
    let summary = summarize(&records, &settings.buckets, config_fingerprint);
    RunOutput {
        records,
        summary,
        filtered_out,
    }
}

/// Everything needed to rerun a run: invocation, resolved settings, input
/// fingerprint, timing, tool version.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub tool_version: String,
    pub dataset_path: String,
    pub dataset_sha256: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub resolved_config: serde_json::Value,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn write_manifest(manifest: &RunManifest, path: &PathBuf) -> std::io::Result<()> {
    let text =
        serde_json::to_string_pretty(manifest).expect("manifest serialization is infallible");
    std::fs::write(path, text + "\n")
}
