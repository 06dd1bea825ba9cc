//! Retrieval of repository chunks for one completion sample.
//!
//! The current-file prefix is the query. Chunks are ranked by cosine
//! similarity and admitted greedily in rank order until one does not fit
//! the token budget; admission stops there, so the admitted set is always
//! a prefix of the ranking. Each chunk is charged for its fully rendered
//! block, provenance header included.

use thiserror::Error;

use crate::corpus::RepoSample;
use crate::embed::{embed_batch, embed_text, EmbedError, EmbedderConfig};
use crate::split::{make_chunks, Chunk, SplitStrategy};
use crate::store::{build_store, StoreError};
use crate::tokenize::{longest_suffix_within, TokenCounter, TokenizeError};

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// The context block assembled for one sample.
#[derive(Debug, Clone)]
pub struct RetrievedContext {
    /// Admitted chunks with their similarity scores, descending.
    pub chunks: Vec<(Chunk, f64)>,
    /// Sum of the admitted chunks' rendered-block token counts.
    pub total_tokens: usize,
    pub budget: usize,
    /// Query prefix exceeded the embedder window; its tail was embedded.
    pub truncated_query: bool,
    /// Chunks longer than the embedder window (embedded from their head).
    pub truncated_chunks: usize,
}

/// One ranked candidate, admitted or not. The admitted entries form a
/// prefix of the ranking.
#[derive(Debug, Clone)]
pub struct RankedChunk {
    pub chunk: Chunk,
    pub score: f64,
    pub admitted: bool,
}

/// [`RetrievedContext`] plus the full ranking, for inspection tooling.
#[derive(Debug, Clone)]
pub struct Retrieval {
    pub context: RetrievedContext,
    pub ranking: Vec<RankedChunk>,
}

/// A chunk as it will appear in the prompt: provenance header, text, and a
/// trailing newline so the next block starts on a fresh line.
pub fn render_chunk_block(chunk: &Chunk) -> String {
    format!("// Retrieved from: {}\n{}\n", chunk.source_path, chunk.text)
}

/// Greedy budget admission: walk costs in rank order, admit while the
/// running total fits, stop at the first misfit. Returns how many were
/// admitted and their total cost.
pub fn greedy_admit(costs: &[usize], budget: usize) -> (usize, usize) {
    let mut total = 0usize;
    let mut admitted = 0usize;
    for &cost in costs {
        match total.checked_add(cost) {
            Some(next) if next <= budget => {
                total = next;
                admitted += 1;
            }
            _ => break,
        }
    }
    (admitted, total)
}

pub fn retrieve(
    sample: &RepoSample,
    strategy: SplitStrategy,
    embedder: &EmbedderConfig,
    counter: &TokenCounter,
    budget: usize,
) -> Result<RetrievedContext, RetrieveError> {
    Ok(retrieve_detailed(sample, strategy, embedder, counter, budget)?.context)
}

/// Full retrieval with the complete ranking kept for inspection.
pub fn retrieve_detailed(
    sample: &RepoSample,
    strategy: SplitStrategy,
    embedder: &EmbedderConfig,
    counter: &TokenCounter,
    budget: usize,
) -> Result<Retrieval, RetrieveError> {
    let chunks = make_chunks(&sample.context_files, strategy, counter)?;

    let mut truncated_chunks = 0usize;
    if let Some(window) = embedder.max_input_tokens() {
        for chunk in &chunks {
            if chunk.token_len > window {
                truncated_chunks += 1;
            }
        }
    }

    let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
    let embeddings = embed_batch(embedder, counter, &texts)?;
    let store = build_store(&chunks, embeddings)?;

    // the query keeps the TAIL of the prefix: the code right before the
    // line being completed matters most
    let prefix = sample.current_prefix.as_str();
    let mut truncated_query = false;
    let query_text = match embedder.max_input_tokens() {
        Some(window) if counter.count(prefix)? > window => {
            truncated_query = true;
            longest_suffix_within(counter, prefix, window)?
        }
        _ => prefix,
    };
    let query = embed_text(embedder, counter, query_text)?;

    let hits = store.top_k(&query, store.len())?;
    let mut costs = Vec::with_capacity(hits.len());
    for hit in &hits {
        costs.push(counter.count(&render_chunk_block(&chunks[hit.index]))?);
    }
    let (admitted, total_tokens) = greedy_admit(&costs, budget);

    let ranking: Vec<RankedChunk> = hits
        .iter()
        .enumerate()
        .map(|(rank, hit)| RankedChunk {
            chunk: chunks[hit.index].clone(),
            score: hit.score,
            admitted: rank < admitted,
        })
        .collect();
    let admitted_chunks: Vec<(Chunk, f64)> = ranking[..admitted]
        .iter()
        .map(|r| (r.chunk.clone(), r.score))
        .collect();

    Ok(Retrieval {
        context: RetrievedContext {
            chunks: admitted_chunks,
            total_tokens,
            budget,
            truncated_query,
            truncated_chunks,
        },
        ranking,
    })
}
