//! The length-gated completion pipeline.
//!
//! A sample whose fully rendered direct prompt (all context files inlined)
//! is under the budget L goes to the model as-is; anything at or over L is
//! rebuilt through retrieval: the current-file section is tail-fitted
//! first, the leftover budget goes to retrieved chunks. The gate can be
//! disabled to force retrieval everywhere, which is the ablation knob.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, GenerationBackend};
use crate::corpus::{concat_repo_context, RepoSample};
use crate::embed::EmbedderConfig;
use crate::retrieve::{
    render_chunk_block, retrieve_detailed, RankedChunk, RetrieveError, RetrievedContext,
};
use crate::split::SplitStrategy;
use crate::tokenize::{TokenCounter, TokenizeError};

#[derive(Debug, Error)]
pub enum PipelineError {
    /// The budget cannot hold even the template plus the prefix's last line.
    #[error("budget {budget} cannot fit the prompt scaffolding ({needed} tokens needed)")]
    BudgetImpossible { budget: usize, needed: usize },
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error("backend failed for sample `{sample_id}`: {source}")]
    Backend {
        sample_id: String,
        #[source]
        source: BackendError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathTaken {
    Direct,
    Rag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptTemplate {
    /// Raw continuation: context, then `// Current file: <path>`, then the
    /// prefix. No instruction text.
    DefaultV1,
    /// Same body behind a short instruction header, for chat-style models.
    InstructV1,
}

impl PromptTemplate {
    pub fn name(self) -> &'static str {
        match self {
            PromptTemplate::DefaultV1 => "default-v1",
            PromptTemplate::InstructV1 => "instruct-v1",
        }
    }
}

impl std::str::FromStr for PromptTemplate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default-v1" => Ok(PromptTemplate::DefaultV1),
            "instruct-v1" => Ok(PromptTemplate::InstructV1),
            other => Err(format!(
                "unknown template `{other}` (expected default-v1 or instruct-v1)"
            )),
        }
    }
}

/// Placement of retrieved chunks inside the prompt. Selection is always by
/// descending score; this only flips the printed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextOrder {
    /// Most relevant chunk first.
    Desc,
    /// Most relevant chunk last, closest to the current file.
    Asc,
}

impl std::str::FromStr for ContextOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desc" => Ok(ContextOrder::Desc),
            "asc" => Ok(ContextOrder::Asc),
            other => Err(format!("unknown context order `{other}` (expected desc or asc)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Total prompt budget L in tokens. The gate sends a sample direct only
    /// when its rendered direct prompt counts strictly under L.
    pub budget: usize,
    pub strategy: SplitStrategy,
    pub embedder: EmbedderConfig,
    pub counter: TokenCounter,
    pub gate_enabled: bool,
    pub template: PromptTemplate,
    pub context_order: ContextOrder,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            budget: 10240,
            strategy: SplitStrategy::default(),
            embedder: EmbedderConfig::default(),
            counter: TokenCounter::Char4,
            gate_enabled: true,
            template: PromptTemplate::DefaultV1,
            context_order: ContextOrder::Desc,
        }
    }
}

/// Everything decided while building one prompt.
#[derive(Debug, Clone)]
pub struct PromptAssembly {
    pub path_taken: PathTaken,
    /// Inlined repo context (direct) or rendered retrieved blocks (rag).
    pub context_text: String,
    /// The current-file section; always a suffix of current_prefix.
    pub file_text: String,
    pub prompt: String,
    pub prompt_tokens: usize,
    /// file_text is a proper suffix (the prefix head was cut).
    pub file_truncated: bool,
    /// Present on the rag path.
    pub retrieved: Option<RetrievedContext>,
}

/// A finished generation and the assembly that produced it.
#[derive(Debug, Clone)]
pub struct Completion {
    pub prediction: String,
    pub assembly: PromptAssembly,
}

const INSTRUCT_HEADER: &str = "// Instruction: continue the current Verilog file. \
Reply with exactly the next line of code and nothing else.";

/// Renders the prompt string. An empty context collapses to just the
/// current-file section; otherwise the context sits above it, separated by
/// one newline.
pub fn render_prompt(
    template: PromptTemplate,
    context: &str,
    current_path: &str,
    file_text: &str,
) -> String {
    let body = if context.is_empty() {
        format!("// Current file: {current_path}\n{file_text}")
    } else {
        format!("{context}\n// Current file: {current_path}\n{file_text}")
    };
    match template {
        PromptTemplate::DefaultV1 => body,
        PromptTemplate::InstructV1 => format!("{INSTRUCT_HEADER}\n\n{body}"),
    }
}

/// The prompt the direct path would send: all context files inlined.
pub fn direct_prompt(template: PromptTemplate, sample: &RepoSample) -> String {
    render_prompt(
        template,
        &concat_repo_context(sample),
        &sample.current_path,
        &sample.current_prefix,
    )
}

/// Gate decision: direct iff enabled and the rendered direct prompt counts
/// strictly under the budget. A prompt of exactly L goes to retrieval.
pub fn decide_path(config: &PipelineConfig, sample: &RepoSample) -> Result<PathTaken, PipelineError> {
    if !config.gate_enabled {
        return Ok(PathTaken::Rag);
    }
    let tokens = config.counter.count(&direct_prompt(config.template, sample))?;
    if tokens < config.budget {
        Ok(PathTaken::Direct)
    } else {
        Ok(PathTaken::Rag)
    }
}

/// Largest suffix of `current_prefix` that fits the budget when rendered
/// with an empty context. The whole-prefix fast path keeps file_truncated
/// false; otherwise at least the prefix's final line must fit.
pub(crate) fn fit_file_section(
    template: PromptTemplate,
    counter: &TokenCounter,
    current_path: &str,
    current_prefix: &str,
    budget: usize,
) -> Result<(String, bool), PipelineError> {
    let rendered = |file_text: &str| render_prompt(template, "", current_path, file_text);
    if counter.count(&rendered(current_prefix))? <= budget {
        return Ok((current_prefix.to_string(), false));
    }

    let last_line_start = current_prefix.rfind('\n').map_or(0, |i| i + 1);
    let last_line = &current_prefix[last_line_start..];
    let needed = counter.count(&rendered(last_line))?;
    if needed > budget {
        return Err(PipelineError::BudgetImpossible { budget, needed });
    }

    // binary search the smallest suffix start that still fits; the count of
    // a rendered suffix only grows as the suffix extends leftward
    let bounds: Vec<usize> = current_prefix
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(current_prefix.len()))
        .collect();
    let mut lo = 0; // does not fit (whole prefix)
    let mut hi = bounds
        .binary_search(&last_line_start)
        .expect("line starts on a char boundary"); // fits
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if counter.count(&rendered(&current_prefix[bounds[mid]..]))? <= budget {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok((current_prefix[bounds[hi]..].to_string(), true))
}

fn render_context_blocks(context: &RetrievedContext, order: ContextOrder) -> String {
    let mut blocks: Vec<String> = context
        .chunks
        .iter()
        .map(|(chunk, _)| render_chunk_block(chunk))
        .collect();
    if order == ContextOrder::Asc {
        blocks.reverse();
    }
    let mut joined = blocks.concat();
    // drop the final separator newline; the template adds its own
    if joined.ends_with('\n') {
        joined.pop();
    }
    joined
}

/// Builds the prompt for one sample, choosing the path per the gate.
pub fn assemble_prompt(
    config: &PipelineConfig,
    sample: &RepoSample,
) -> Result<PromptAssembly, PipelineError> {
    Ok(assemble_prompt_detailed(config, sample)?.0)
}

/// [`assemble_prompt`] plus the full retrieval ranking (rag path only),
/// with admitted flags reflecting the final prompt after any backstop
/// drops.
pub fn assemble_prompt_detailed(
    config: &PipelineConfig,
    sample: &RepoSample,
) -> Result<(PromptAssembly, Option<Vec<RankedChunk>>), PipelineError> {
    if decide_path(config, sample)? == PathTaken::Direct {
        let context_text = concat_repo_context(sample);
        let prompt = render_prompt(
            config.template,
            &context_text,
            &sample.current_path,
            &sample.current_prefix,
        );
        let prompt_tokens = config.counter.count(&prompt)?;
        return Ok((
            PromptAssembly {
                path_taken: PathTaken::Direct,
                context_text,
                file_text: sample.current_prefix.clone(),
                prompt,
                prompt_tokens,
                file_truncated: false,
                retrieved: None,
            },
            None,
        ));
    }

    let (file_text, file_truncated) = fit_file_section(
        config.template,
        &config.counter,
        &sample.current_path,
        &sample.current_prefix,
        config.budget,
    )?;
    let base = render_prompt(config.template, "", &sample.current_path, &file_text);
    let overhead = config.counter.count(&base)? + config.counter.count("\n")?;
    let retr_budget = config.budget.saturating_sub(overhead);
    let retrieval = retrieve_detailed(
        sample,
        config.strategy,
        &config.embedder,
        &config.counter,
        retr_budget,
    )?;
    let mut retrieved = retrieval.context;
    let mut ranking = retrieval.ranking;

    // backstop: the block-sum bound is tight for the local counters, but a
    // recount here keeps prompt_tokens <= budget even for external counters
    // with unusual seam behavior; dropping the lowest-ranked chunk always
    // converges to the bare file section, which fits by construction
    loop {
        let context_text = render_context_blocks(&retrieved, config.context_order);
        let prompt = render_prompt(
            config.template,
            &context_text,
            &sample.current_path,
            &file_text,
        );
        let prompt_tokens = config.counter.count(&prompt)?;
        if prompt_tokens <= config.budget || retrieved.chunks.is_empty() {
            // admitted chunks stay a prefix of the ranking through drops
            for (rank, entry) in ranking.iter_mut().enumerate() {
                entry.admitted = rank < retrieved.chunks.len();
            }
            return Ok((
                PromptAssembly {
                    path_taken: PathTaken::Rag,
                    context_text,
                    file_text,
                    prompt,
                    prompt_tokens,
                    file_truncated,
                    retrieved: Some(retrieved),
                },
                Some(ranking),
            ));
        }
        let (dropped, _) = retrieved.chunks.pop().expect("non-empty checked above");
        retrieved.total_tokens = retrieved
            .total_tokens
            .saturating_sub(config.counter.count(&render_chunk_block(&dropped))?);
    }
}

/// First line of a raw generation, trailing newline and anything after it
/// stripped.
pub fn first_line(raw: &str) -> &str {
    raw.lines().next().unwrap_or("")
}

/// Assembles the prompt, runs the backend, clips to one line.
pub fn complete(
    config: &PipelineConfig,
    backend: &GenerationBackend,
    sample: &RepoSample,
) -> Result<Completion, PipelineError> {
    let assembly = assemble_prompt(config, sample)?;
    let raw = backend
        .generate(&assembly.prompt, sample)
        .map_err(|source| PipelineError::Backend {
            sample_id: sample.id.clone(),
            source,
        })?;
    Ok(Completion {
        prediction: first_line(&raw).to_string(),
        assembly,
    })
}
