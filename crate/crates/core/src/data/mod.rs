//! Synthetic corpus, tokenizer, prompt registry, example construction, and
//! negative sampling.

mod catalog;
mod examples;
mod prompts;
mod sampling;
mod tokenizer;

pub use catalog::{generate_catalog, Catalog, CatalogConfig, Interaction, Item};
pub use examples::{
    make_examples, nl_input, target_tokens, ExampleOptions, ExampleSet, Holdout, IdInput, TrainingExample,
};
pub use prompts::{
    default_triggers, placeholders, read_templates_jsonl, render_prompt, split_prompts, write_templates_jsonl, Family,
    Origin, PromptSplit, PromptTemplate,
};
pub use sampling::{sample_hfm_candidates, sample_icl_candidates, CandidateSet, HfmCandidates, HfmPositive};
pub use tokenizer::{detokenize_words, tokenize_words, IdMode, Vocab};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid catalog configuration: {0}")]
    Config(String),
    #[error("invalid catalog: {0}")]
    Catalog(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("template {template:?}: {message}")]
    Template { template: String, message: String },
    #[error("missing binding for placeholder {{{0}}}")]
    MissingBinding(String),
    #[error("binding {{{0}}} does not appear in the template")]
    ExtraBinding(String),
    #[error("cannot sample {wanted} candidates from {available}")]
    Insufficient { wanted: usize, available: usize },
    #[error("{0}")]
    Precondition(String),
}

/// Mixes `parts` into `base`; used to give every example and draw its own
/// stream so results do not depend on iteration order.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Instruction prepended to a description when matching it against an item ID.
pub const ITEM_MATCH_INSTRUCTION: &str = "Is this description about the given item?";
/// Instruction prepended to a description when matching it against a history.
pub const NEXT_MATCH_INSTRUCTION: &str = "Is this description the next item for the given history?";

/// The vocabulary of a corpus: catalog texts, the literal words of every
/// template, and the matching instructions. Rebuilding from the same inputs
/// gives the same ids.
pub fn build_vocab(catalog: &Catalog, templates: &[PromptTemplate]) -> Vocab {
    let literal: Vec<String> = templates.iter().map(PromptTemplate::literal_text).collect();
    let fixed = [ITEM_MATCH_INSTRUCTION, NEXT_MATCH_INSTRUCTION];
    Vocab::build(
        catalog.texts().chain(literal.iter().map(String::as_str)).chain(fixed),
        catalog.n_users(),
        catalog.n_items(),
    )
}
