//! Prompt augmentation: paraphrase triggers into a template registry, either
//! through a chat-completion endpoint or with a deterministic offline
//! rewriter.

mod http;
mod offline;
mod registry;

pub use http::{call_endpoint, extract_completion, parse_http_response, ClientConfig, HttpUrl};
pub use offline::offline_paraphrase;
pub use registry::{build_registry, LiveSource, OfflineSource, PromptSource};

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{placeholders, DataError};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("endpoint rejected the credentials (HTTP {0})")]
    Auth(u16),
    #[error("request failed after {attempts} attempt(s){}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Http {
        status: Option<u16>,
        attempts: usize,
        message: String,
    },
    #[error("malformed response: {0}")]
    Response(String),
    #[error("no usable paraphrase of {trigger:?}; regenerate")]
    NoneAccepted { trigger: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// A chat request: instructions, worked demonstrations, then the trigger to
/// paraphrase.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationRequest {
    pub api_instructions: String,
    pub demonstrations: Vec<(String, Vec<String>)>,
    pub contexts: Vec<String>,
    pub model: String,
    pub endpoint: String,
}

impl AugmentationRequest {
    /// The message text sent to the model.
    pub fn prompt_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.api_instructions);
        out.push_str("\n\n");
        for (i, (trigger, results)) in self.demonstrations.iter().enumerate() {
            out.push_str(&format!("Example {}:\nPrompt: {trigger}\nRewrites:\n", i + 1));
            for r in results {
                out.push_str(r);
                out.push('\n');
            }
            out.push('\n');
        }
        for c in &self.contexts {
            out.push_str(&format!("Prompt: {c}\nRewrites:\n"));
        }
        out
    }

    /// JSON body of the chat-completion call.
    pub fn body(&self) -> String {
        serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": self.prompt_text()}],
        })
        .to_string()
    }
}

pub fn build_request(
    trigger: &str,
    demos: &[(String, Vec<String>)],
    n: usize,
    model: &str,
    endpoint: &str,
) -> Result<AugmentationRequest, AugmentError> {
    if trigger.trim().is_empty() {
        return Err(AugmentError::Config("empty trigger".into()));
    }
    if n == 0 {
        return Err(AugmentError::Config("at least one paraphrase must be requested".into()));
    }
    if demos.is_empty() {
        return Err(AugmentError::Config("at least one demonstration is required".into()));
    }
    Ok(AugmentationRequest {
        api_instructions: format!(
            "Rewrite the last prompt below into {n} new prompts with the same meaning. \
             Keep every placeholder in curly braces exactly as written and do not add new ones. \
             Write one prompt per line, without numbering or extra commentary."
        ),
        demonstrations: demos.to_vec(),
        contexts: vec![trigger.to_string()],
        model: model.to_string(),
        endpoint: endpoint.to_string(),
    })
}

/// Paraphrases of one trigger and the subset that passed validation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedPromptBatch {
    pub source: String,
    pub candidates: Vec<String>,
    pub accepted: Vec<String>,
    pub dropped_empty: usize,
    pub dropped_placeholder: usize,
    pub dropped_duplicate: usize,
    /// How many requested prompts could not be produced.
    pub shortfall: usize,
}

/// Lowercase with whitespace runs collapsed; the key for duplicate checks.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn strip_marker(line: &str) -> &str {
    let t = line.trim();
    let t = t.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim_start();
        }
    }
    t
}

fn validate_candidates(trigger: &str, candidates: Vec<String>) -> Result<GeneratedPromptBatch, AugmentError> {
    let want: BTreeSet<String> = placeholders(trigger)?.into_iter().collect();
    let mut seen: HashSet<String> = HashSet::from([normalize(trigger)]);
    let mut batch = GeneratedPromptBatch {
        source: trigger.to_string(),
        ..GeneratedPromptBatch::default()
    };
    for c in &candidates {
        if c.trim().is_empty() {
            batch.dropped_empty += 1;
            continue;
        }
        let ok = placeholders(c)
            .map(|p| {
                let set: BTreeSet<String> = p.iter().cloned().collect();
                set == want && p.len() == set.len()
            })
            .unwrap_or(false);
        if !ok {
            batch.dropped_placeholder += 1;
            continue;
        }
        if !seen.insert(normalize(c)) {
            batch.dropped_duplicate += 1;
            continue;
        }
        batch.accepted.push(c.trim().to_string());
    }
    batch.candidates = candidates;
    Ok(batch)
}

/// Splits a response into one candidate per line and keeps those with the
/// trigger's exact placeholder set, dropping duplicates and blanks.
pub fn parse_and_validate(response: &str, trigger: &str) -> Result<GeneratedPromptBatch, AugmentError> {
    let candidates: Vec<String> = response.lines().map(|l| strip_marker(l).to_string()).collect();
    let batch = validate_candidates(trigger, candidates)?;
    log::debug!(
        "{} candidates, {} accepted ({} blank, {} placeholder mismatch, {} duplicate)",
        batch.candidates.len(),
        batch.accepted.len(),
        batch.dropped_empty,
        batch.dropped_placeholder,
        batch.dropped_duplicate
    );
    if batch.accepted.is_empty() {
        return Err(AugmentError::NoneAccepted {
            trigger: trigger.to_string(),
        });
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demos() -> Vec<(String, Vec<String>)> {
        vec![
            (
                "Rate {item} for {user}.".into(),
                vec!["Give {user}'s score for {item}.".into()],
            ),
            (
                "Will {user} like {item}?".into(),
                vec!["Does {user} enjoy {item}?".into()],
            ),
        ]
    }

    #[test]
    fn request_layout() {
        let r = build_request("How many stars from {user} for {item}?", &demos(), 100, "m", "http://x").unwrap();
        assert!(r.api_instructions.contains("100 new prompts"));
        let text = r.prompt_text();
        let a = text.find("Rate {item} for {user}.").unwrap();
        let b = text.find("Will {user} like {item}?").unwrap();
        let c = text.find("How many stars").unwrap();
        assert!(a < b && b < c);
        let again = build_request("How many stars from {user} for {item}?", &demos(), 100, "m", "http://x").unwrap();
        assert_eq!(r.body(), again.body());
        let body: serde_json::Value = serde_json::from_str(&r.body()).unwrap();
        assert_eq!(body["model"], "m");
        assert_eq!(body["messages"][0]["role"], "user");
    }

    #[test]
    fn request_errors() {
        assert!(build_request("  ", &demos(), 5, "m", "e").is_err());
        assert!(build_request("x", &demos(), 0, "m", "e").is_err());
        assert!(build_request("x", &[], 5, "m", "e").is_err());
    }

    #[test]
    fn filters_placeholder_mismatch() {
        let resp = "Does {user} like {item}?\n\
                    Would {user} enjoy {item}?\n\
                    Is {item} good for {user}?\n\
                    Will {user} be happy?\n\
                    Should {user} buy {item}?";
        let b = parse_and_validate(resp, "Will {user} like {item}?").unwrap();
        assert_eq!(b.candidates.len(), 5);
        assert_eq!(b.accepted.len(), 4);
        assert_eq!(b.dropped_placeholder, 1);
    }

    #[test]
    fn deduplicates_and_strips_markers() {
        let resp = "1. Does {user} like {item}?\n2) does  {user} LIKE {item}?\n- Will {user} like {item}?\n\n{user} {item} {item}";
        let b = parse_and_validate(resp, "Will {user} like {item}?").unwrap();
        assert_eq!(b.accepted, vec!["Does {user} like {item}?"]);
        assert_eq!(b.dropped_duplicate, 2);
        assert_eq!(b.dropped_empty, 1);
        assert_eq!(b.dropped_placeholder, 1);
    }

    #[test]
    fn empty_response_is_an_error() {
        assert!(matches!(
            parse_and_validate("", "Will {user} like {item}?"),
            Err(AugmentError::NoneAccepted { .. })
        ));
    }
}
