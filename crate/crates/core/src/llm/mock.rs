//! Offline provider: a pure function of the request, routed by a tag in the
//! system message.
//!
//! * `<<SUMMARIZE>>` returns the first sentence of every blank-line separated
//!   section of the last user message, joined by single spaces.
//! * `<<REASON>>` returns `Prediction: <c>. Rationale: <first 12 tokens>.` where
//!   `c` is the number of alphabetic characters in the last user message
//!   modulo the `K=<int>` field of the system message.
//! * `<<CAPTION>>` returns `An image described by <id>.` where `<id>` is the
//!   token following `id:` in the last user message.

use super::{Completion, CompletionRequest, CompletionResponse, LlmError, Provider, Usage};

pub const SUMMARIZE_TAG: &str = "<<SUMMARIZE>>";
pub const REASON_TAG: &str = "<<REASON>>";
pub const CAPTION_TAG: &str = "<<CAPTION>>";

const RATIONALE_TOKENS: usize = 12;

#[derive(Clone, Copy, Debug, Default)]
pub struct MockProvider;

impl MockProvider {
    pub fn respond(request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let system = request.system_message().unwrap_or("");
        let input = request.last_user_message().unwrap_or("");
        let content = if system.contains(SUMMARIZE_TAG) {
            summarize(input)
        } else if system.contains(REASON_TAG) {
            let k = class_count(system)?;
            reason(input, k)
        } else if system.contains(CAPTION_TAG) {
            caption(input)
        } else {
            return Err(LlmError::UnknownTag);
        };
        let prompt_tokens = request.messages.iter().map(|m| m.content.split_whitespace().count() as u64).sum();
        let completion_tokens = content.split_whitespace().count() as u64;
        Ok(CompletionResponse {
            content,
            finish_reason: "stop".into(),
            usage: Some(Usage { prompt_tokens, completion_tokens }),
        })
    }
}

impl Provider for MockProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        request.validate()?;
        Ok(Completion { response: Self::respond(request)?, attempts: 1 })
    }

    fn is_live(&self) -> bool {
        false
    }
}

fn class_count(system: &str) -> Result<usize, LlmError> {
    system
        .match_indices("K=")
        .filter_map(|(i, _)| {
            let digits: String = system[i + 2..].chars().take_while(char::is_ascii_digit).collect();
            digits.parse::<usize>().ok()
        })
        .find(|&k| k > 0)
        .ok_or_else(|| LlmError::InvalidRequest("reasoning prompt lacks a K=<int> field".into()))
}

/// Splits on lines that are empty after trimming.
pub(crate) fn sections(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                out.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        out.push(current.join("\n"));
    }
    out
}

/// Text up to and including the first `.`, `!` or `?` that ends a token.
pub(crate) fn first_sentence(section: &str) -> String {
    let mut out = Vec::new();
    for token in section.split_whitespace() {
        out.push(token);
        if token.ends_with(['.', '!', '?']) {
            break;
        }
    }
    out.join(" ")
}

fn summarize(input: &str) -> String {
    sections(input).iter().map(|s| first_sentence(s)).collect::<Vec<_>>().join(" ")
}

fn reason(input: &str, k: usize) -> String {
    let class = input.chars().filter(|c| c.is_alphabetic()).count() % k;
    let rationale = input.split_whitespace().take(RATIONALE_TOKENS).collect::<Vec<_>>().join(" ");
    format!("Prediction: {class}. Rationale: {rationale}.")
}

fn caption(input: &str) -> String {
    let id = input.split_once("id:").and_then(|(_, rest)| rest.split_whitespace().next()).unwrap_or("unknown");
    format!("An image described by {id}.")
}
