//! Token counting schemes and token-bounded truncation helpers.
//!
//! Every budget decision in the pipeline goes through a [`TokenCounter`]
//! so that prompt assembly, retrieval admission and fine-tuning export all
//! measure text the same way.

use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenizeError {
    /// The external tokenizer endpoint failed. Counts from different schemes
    /// are not comparable, so there is no silent fallback.
    #[error("external tokenizer unavailable: {0}")]
    ExternalUnavailable(String),
}

/// A way of measuring text length in tokens.
#[derive(Debug, Clone)]
pub enum TokenCounter {
    /// ceil(byte_length / 4). Cheap approximation, good enough for budgets.
    Char4,
    /// Maximal runs of `[A-Za-z0-9_]`-like characters count one each, and
    /// every non-whitespace punctuation character counts one on its own.
    /// Closer to how code tokenizers behave around operators.
    WhitespacePunct,
    /// Defer to an HTTP tokenizer service for exact counts.
    External(ExternalTokenizer),
}

impl TokenCounter {
    pub fn count(&self, text: &str) -> Result<usize, TokenizeError> {
        match self {
            TokenCounter::Char4 => Ok(text.len().div_ceil(4)),
            TokenCounter::WhitespacePunct => Ok(count_wspunct(text)),
            TokenCounter::External(t) => t.count(text),
        }
    }

    /// True when counting cannot fail and costs nothing to repeat.
    pub fn is_local(&self) -> bool {
        !matches!(self, TokenCounter::External(_))
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn count_wspunct(text: &str) -> usize {
    let mut count = 0;
    let mut in_word = false;
    for c in text.chars() {
        if is_word_char(c) {
            if !in_word {
                count += 1;
                in_word = true;
            }
        } else {
            in_word = false;
            if !c.is_whitespace() {
                count += 1;
            }
        }
    }
    count
}

/// The tokens counted by [`TokenCounter::WhitespacePunct`], in order.
/// Word runs come out as multi-char slices, punctuation one char at a time.
pub fn wspunct_tokens(text: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if is_word_char(c) {
            if word_start.is_none() {
                word_start = Some(i);
            }
        } else {
            if let Some(start) = word_start.take() {
                tokens.push(&text[start..i]);
            }
            if !c.is_whitespace() {
                tokens.push(&text[i..i + c.len_utf8()]);
            }
        }
    }
    if let Some(start) = word_start {
        tokens.push(&text[start..]);
    }
    tokens
}

/// HTTP tokenizer client. POSTs `{"input": text}` and expects
/// `{"count": n}` back.
#[derive(Debug, Clone)]
pub struct ExternalTokenizer {
    endpoint: String,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct CountResponse {
    count: u64,
}

impl ExternalTokenizer {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("default TLS backend is always available");
        ExternalTokenizer {
            endpoint: endpoint.into(),
            client,
        }
    }

    fn count(&self, text: &str) -> Result<usize, TokenizeError> {
        let fail = |m: String| TokenizeError::ExternalUnavailable(m);
        let response = self
            .client
            .post(&self.endpoint)
            .json(&serde_json::json!({ "input": text }))
            .send()
            .map_err(|e| fail(format!("{}: {e}", self.endpoint)))?;
        let status = response.status();
        if !status.is_success() {
            return Err(fail(format!("{}: status {}", self.endpoint, status.as_u16())));
        }
        let body: CountResponse = response
            .json()
            .map_err(|e| fail(format!("{}: bad response body: {e}", self.endpoint)))?;
        Ok(body.count as usize)
    }
}

fn char_boundaries(text: &str) -> Vec<usize> {
    let mut bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).collect();
    bounds.push(text.len());
    bounds
}

/// Longest prefix of `text` whose count is <= `max_tokens`.
///
/// Cuts only at char boundaries. Relies on counts being monotone under
/// extension, which holds for both local schemes.
pub fn longest_prefix_within<'a>(
    counter: &TokenCounter,
    text: &'a str,
    max_tokens: usize,
) -> Result<&'a str, TokenizeError> {
    if counter.count(text)? <= max_tokens {
        return Ok(text);
    }
    let bounds = char_boundaries(text);
    // bounds[lo] keeps the prefix within budget, bounds[hi] does not
    let mut lo = 0;
    let mut hi = bounds.len() - 1;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if counter.count(&text[..bounds[mid]])? <= max_tokens {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(&text[..bounds[lo]])
}

/// Longest suffix of `text` whose count is <= `max_tokens`. Counterpart of
/// [`longest_prefix_within`] for tail-keeping truncation.
pub fn longest_suffix_within<'a>(
    counter: &TokenCounter,
    text: &'a str,
    max_tokens: usize,
) -> Result<&'a str, TokenizeError> {
    if counter.count(text)? <= max_tokens {
        return Ok(text);
    }
    let bounds = char_boundaries(text);
    // suffix starting at bounds[hi] fits, suffix starting at bounds[lo] does not
    let mut lo = 0;
    let mut hi = bounds.len() - 1;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if counter.count(&text[bounds[mid]..])? <= max_tokens {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(&text[bounds[hi]..])
}
