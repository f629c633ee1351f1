use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, render_prompt, Catalog, DataError, Family, IdMode, PromptTemplate, Vocab};
use crate::model::{special, Span, SpanLabel, Token};

/// Which interactions a run of [`make_examples`] draws targets from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Holdout {
    /// Training view: each user's final interaction is never a target nor
    /// part of a history.
    ExcludeLast,
    /// Evaluation view: only each user's final interaction is a target.
    OnlyLast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExampleOptions {
    pub id_mode: IdMode,
    pub seed: u64,
    pub holdout: Holdout,
    /// Candidate list length for direct recommendation (one positive).
    pub direct_candidates: usize,
    pub max_id_len: usize,
    pub max_nl_len: usize,
    pub max_target_len: usize,
}

impl Default for ExampleOptions {
    fn default() -> Self {
        Self {
            id_mode: IdMode::IdAtomic,
            seed: 0,
            holdout: Holdout::ExcludeLast,
            direct_candidates: 10,
            max_id_len: 32,
            max_nl_len: 64,
            max_target_len: 24,
        }
    }
}

/// An ID-side sequence and its labelled spans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdInput {
    pub tokens: Vec<Token>,
    pub spans: Vec<Span>,
}

impl IdInput {
    fn new() -> Self {
        Self {
            tokens: vec![special::CLS],
            spans: vec![Span::new(SpanLabel::Cls, 0, 1)],
        }
    }

    fn push(&mut self, label: SpanLabel, toks: &[Token]) {
        self.spans.push(Span::new(label, self.tokens.len(), toks.len()));
        self.tokens.extend_from_slice(toks);
    }

    /// `<cls>` followed by a single item span.
    pub fn item(vocab: &Vocab, item: u32, mode: IdMode) -> Self {
        let mut x = Self::new();
        x.push(SpanLabel::Item, &vocab.item_tokens(item, mode));
        x
    }

    /// `<cls>`, the user span, then one span per item, keeping the most
    /// recent items that fit in `max_len`.
    pub fn user_items(vocab: &Vocab, user: usize, items: &[u32], mode: IdMode, max_len: usize) -> Self {
        let mut x = Self::new();
        x.push(SpanLabel::User, &vocab.user_tokens(user, mode));
        let mut budget = max_len.saturating_sub(x.tokens.len());
        let mut kept = Vec::new();
        for &i in items.iter().rev() {
            let t = vocab.item_tokens(i, mode);
            if t.len() > budget {
                break;
            }
            budget -= t.len();
            kept.push(t);
        }
        for t in kept.iter().rev() {
            x.push(SpanLabel::Item, t);
        }
        x
    }
}

/// `<cls>` followed by the text, truncated to `max_len` tokens in total.
pub fn nl_input(vocab: &Vocab, text: &str, mode: IdMode, max_len: usize) -> Vec<Token> {
    let mut out = vec![special::CLS];
    out.extend(vocab.tokenize(text, mode));
    out.truncate(max_len.max(1));
    out
}

/// Target tokens terminated by `<eos>`, within `max_len`.
pub fn target_tokens(vocab: &Vocab, text: &str, mode: IdMode, max_len: usize) -> Vec<Token> {
    let mut out = vocab.tokenize(text, mode);
    out.truncate(max_len.saturating_sub(1));
    out.push(special::EOS);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub family: Family,
    pub group: u32,
    pub template: String,
    pub user: usize,
    /// The item the target refers to, when there is one.
    pub item: Option<u32>,
    pub id: IdInput,
    pub nl_tokens: Vec<Token>,
    pub target_tokens: Vec<Token>,
    pub target_text: String,
    /// Direct recommendation candidate list, in presentation order.
    pub candidates: Vec<u32>,
    pub bindings: Vec<(String, String)>,
    /// Text appended after the rendered prompt (description or review).
    pub context: String,
}

impl TrainingExample {
    /// NL tokens for the same example under a different template of the
    /// same family.
    pub fn nl_with(
        &self,
        template: &PromptTemplate,
        vocab: &Vocab,
        opts: &ExampleOptions,
    ) -> Result<Vec<Token>, DataError> {
        if template.family != self.family {
            return Err(DataError::Precondition(format!(
                "template {} belongs to {}, not {}",
                template.id, template.family, self.family
            )));
        }
        let b: Vec<(&str, &str)> = self.bindings.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let text = render_prompt(&template.text, &b)?;
        Ok(nl_input(
            vocab,
            &join(&text, &self.context),
            opts.id_mode,
            opts.max_nl_len,
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExampleSet {
    pub examples: Vec<TrainingExample>,
    /// Users skipped for lack of history.
    pub skipped: usize,
}

fn join(prompt: &str, context: &str) -> String {
    if context.is_empty() {
        prompt.to_string()
    } else {
        format!("{prompt} {context}")
    }
}

/// Builds one family's examples. Targets come from the interactions
/// selected by `opts.holdout`; each is used at most once.
pub fn make_examples(
    catalog: &Catalog,
    family: Family,
    templates: &[PromptTemplate],
    vocab: &Vocab,
    opts: &ExampleOptions,
) -> Result<ExampleSet, DataError> {
    let pool: Vec<&PromptTemplate> = templates.iter().filter(|t| t.family == family).collect();
    if pool.is_empty() {
        return Err(DataError::Precondition(format!("no {family} templates supplied")));
    }
    let mode = opts.id_mode;
    let mut examples = Vec::new();
    let mut skipped = 0;
    for (user, history) in catalog.interactions.iter().enumerate() {
        let visible = match opts.holdout {
            Holdout::ExcludeLast => &history[..history.len().saturating_sub(1)],
            Holdout::OnlyLast => &history[..],
        };
        let targets: Vec<usize> = match (family, opts.holdout) {
            (Family::Sequential | Family::Direct, _) => {
                if visible.len() < 2 {
                    skipped += 1;
                    continue;
                }
                vec![visible.len() - 1]
            }
            (_, Holdout::ExcludeLast) => (0..visible.len()).collect(),
            (_, Holdout::OnlyLast) => visible.len().checked_sub(1).into_iter().collect(),
        };
        for j in targets {
            let seed = derive_seed(opts.seed, &[family.index() as u64, user as u64, j as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let template = pool[rng.random_range(0..pool.len())];
            let x = &visible[j];
            let item = catalog
                .item(x.item)
                .ok_or_else(|| DataError::Catalog(format!("unknown item {}", x.item)))?;
            let user_name = format!("user_{user}");
            let item_name = format!("item_{}", x.item);
            let mut candidates = Vec::new();
            let (id, bindings, context, target_text) = match family {
                Family::Rating => (
                    IdInput::user_items(vocab, user, &[x.item], mode, opts.max_id_len),
                    vec![("user", user_name), ("item", item_name)],
                    item.description.clone(),
                    format!("{}.0", x.rating),
                ),
                Family::Explanation => (
                    IdInput::user_items(vocab, user, &[x.item], mode, opts.max_id_len),
                    vec![("user", user_name), ("item", item_name), ("feature", x.feature.clone())],
                    item.description.clone(),
                    x.explanation.clone(),
                ),
                Family::Summarization => (
                    IdInput::user_items(vocab, user, &[x.item], mode, opts.max_id_len),
                    vec![("user", user_name), ("item", item_name)],
                    x.review.clone(),
                    x.summary.clone(),
                ),
                Family::Sequential => {
                    let past: Vec<u32> = visible[..j].iter().map(|h| h.item).collect();
                    (
                        IdInput::user_items(vocab, user, &past, mode, opts.max_id_len),
                        vec![("user", user_name)],
                        String::new(),
                        item_name,
                    )
                }
                Family::Direct => {
                    let n_decoys = opts.direct_candidates.saturating_sub(1);
                    let interacted: Vec<u32> = history.iter().map(|h| h.item).collect();
                    let decoy_pool: Vec<u32> = (0..catalog.n_items() as u32)
                        .filter(|i| !interacted.contains(i))
                        .collect();
                    if decoy_pool.len() < n_decoys {
                        return Err(DataError::Insufficient {
                            wanted: n_decoys,
                            available: decoy_pool.len(),
                        });
                    }
                    candidates = index::sample(&mut rng, decoy_pool.len(), n_decoys)
                        .into_iter()
                        .map(|i| decoy_pool[i])
                        .collect();
                    candidates.push(x.item);
                    candidates.shuffle(&mut rng);
                    let id = IdInput::user_items(vocab, user, &candidates, mode, usize::MAX);
                    if id.tokens.len() > opts.max_id_len {
                        return Err(DataError::Precondition(format!(
                            "{} direct candidates need {} ID tokens; the limit is {}",
                            candidates.len(),
                            id.tokens.len(),
                            opts.max_id_len
                        )));
                    }
                    (id, vec![("user", user_name)], String::new(), item_name)
                }
            };
            let b: Vec<(&str, &str)> = bindings.iter().map(|(k, v)| (*k, v.as_str())).collect();
            let prompt = render_prompt(&template.text, &b)?;
            examples.push(TrainingExample {
                family,
                group: template.group,
                template: template.id.clone(),
                user,
                item: Some(x.item),
                nl_tokens: nl_input(vocab, &join(&prompt, &context), mode, opts.max_nl_len),
                target_tokens: target_tokens(vocab, &target_text, mode, opts.max_target_len),
                target_text,
                id,
                candidates,
                bindings: bindings.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
                context,
            });
        }
    }
    Ok(ExampleSet { examples, skipped })
}

#[cfg(test)]
mod tests {
    use super::super::{default_triggers, generate_catalog, CatalogConfig};
    use super::*;
    use crate::model::build_visible_matrix;
    use std::collections::HashSet;

    fn setup(per_user: usize) -> (Catalog, Vocab, Vec<PromptTemplate>) {
        let c = generate_catalog(
            &CatalogConfig {
                interactions_per_user: per_user,
                ..CatalogConfig::default()
            },
            4,
        )
        .unwrap();
        let t = default_triggers();
        let texts: Vec<String> = t.iter().map(|t| t.literal_text()).collect();
        let v = Vocab::build(
            c.texts().chain(texts.iter().map(String::as_str)),
            c.n_users(),
            c.n_items(),
        );
        (c, v, t)
    }

    fn check_spans(x: &TrainingExample) {
        let covered: usize = x.id.spans.iter().map(|s| s.len).sum();
        assert_eq!(covered, x.id.tokens.len());
        let mut pos = 0;
        for s in &x.id.spans {
            assert_eq!(s.start, pos);
            pos += s.len;
        }
        build_visible_matrix(&x.id.spans).unwrap();
    }

    #[test]
    fn sequential_from_five_interactions() {
        let (c, v, t) = setup(5);
        let opts = ExampleOptions {
            holdout: Holdout::OnlyLast,
            ..ExampleOptions::default()
        };
        let set = make_examples(&c, Family::Sequential, &t, &v, &opts).unwrap();
        assert_eq!(set.examples.len(), c.n_users());
        let x = &set.examples[0];
        let items = x.id.spans.iter().filter(|s| s.label == SpanLabel::Item).count();
        assert_eq!(items, 4);
        assert_eq!(x.item, Some(c.interactions[0][4].item));
        assert_eq!(
            x.target_tokens,
            vec![
                v.id(&format!("item_{}", c.interactions[0][4].item)).unwrap(),
                special::EOS
            ]
        );
        check_spans(x);
    }

    #[test]
    fn direct_has_one_target_among_candidates() {
        let (c, v, t) = setup(8);
        let set = make_examples(&c, Family::Direct, &t, &v, &ExampleOptions::default()).unwrap();
        for x in &set.examples {
            assert_eq!(x.candidates.len(), 10);
            let gold = x.item.unwrap();
            assert_eq!(x.candidates.iter().filter(|&&i| i == gold).count(), 1);
            let history: HashSet<u32> = c.interactions[x.user].iter().map(|h| h.item).collect();
            assert!(x.candidates.iter().all(|i| *i == gold || !history.contains(i)));
            check_spans(x);
        }
    }

    #[test]
    fn every_family_is_deterministic_and_well_formed() {
        let (c, v, t) = setup(8);
        for f in Family::ALL {
            for holdout in [Holdout::ExcludeLast, Holdout::OnlyLast] {
                let opts = ExampleOptions {
                    holdout,
                    seed: 3,
                    ..ExampleOptions::default()
                };
                let a = make_examples(&c, f, &t, &v, &opts).unwrap();
                let b = make_examples(&c, f, &t, &v, &opts).unwrap();
                assert_eq!(a, b);
                assert_eq!(a.skipped, 0);
                for x in &a.examples {
                    check_spans(x);
                    assert_eq!(x.nl_tokens[0], special::CLS);
                    assert_eq!(*x.target_tokens.last().unwrap(), special::EOS);
                    assert!(x.nl_tokens.len() <= opts.max_nl_len);
                    assert!(x.target_tokens.len() <= opts.max_target_len);
                    assert!(x.id.tokens.len() <= opts.max_id_len);
                    assert!(!x.target_tokens.contains(&special::UNK), "{}", x.target_text);
                    // tokenization round-trips the target
                    assert_eq!(
                        v.detokenize(&x.target_tokens).replace(' ', ""),
                        x.target_text.to_lowercase().replace(' ', "")
                    );
                }
            }
        }
    }

    #[test]
    fn each_interaction_is_a_target_at_most_once() {
        let (c, v, t) = setup(8);
        for f in Family::ALL {
            let set = make_examples(&c, f, &t, &v, &ExampleOptions::default()).unwrap();
            let keys: HashSet<(usize, u32)> = set.examples.iter().map(|x| (x.user, x.item.unwrap())).collect();
            assert_eq!(keys.len(), set.examples.len());
            let expected = match f {
                Family::Sequential | Family::Direct => c.n_users(),
                _ => c.n_users() * 7,
            };
            assert_eq!(set.examples.len(), expected);
            // the held-out interaction never shows up
            for x in &set.examples {
                assert_ne!(x.item, Some(c.interactions[x.user][7].item));
            }
        }
    }

    #[test]
    fn ratings_render_with_one_decimal() {
        let (c, v, t) = setup(8);
        let set = make_examples(&c, Family::Rating, &t, &v, &ExampleOptions::default()).unwrap();
        for x in &set.examples {
            let r: f64 = x.target_text.parse().unwrap();
            assert_eq!(x.target_text, format!("{r:.1}"));
        }
    }

    #[test]
    fn nl_with_rerenders_under_other_template() {
        let (c, v, t) = setup(8);
        let opts = ExampleOptions::default();
        let set = make_examples(&c, Family::Explanation, &t, &v, &opts).unwrap();
        let x = &set.examples[0];
        let same = t.iter().find(|p| p.id == x.template).unwrap();
        assert_eq!(x.nl_with(same, &v, &opts).unwrap(), x.nl_tokens);
        let other = t
            .iter()
            .find(|p| p.family == Family::Explanation && p.id != x.template)
            .unwrap();
        assert_ne!(x.nl_with(other, &v, &opts).unwrap(), x.nl_tokens);
        let wrong = t.iter().find(|p| p.family == Family::Rating).unwrap();
        assert!(x.nl_with(wrong, &v, &opts).is_err());
    }

    #[test]
    fn history_truncation_keeps_recent_items() {
        let (_, v, _) = setup(8);
        let x = IdInput::user_items(&v, 0, &[1, 2, 3, 4, 5], IdMode::IdDigitSplit, 12);
        // cls 1 + user 3 + two items of 3 tokens
        assert_eq!(x.tokens.len(), 10);
        assert_eq!(x.tokens[7..], v.item_tokens(5, IdMode::IdDigitSplit)[..]);
    }
}
