use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, DataError};

/// The five recommendation task families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Rating,
    Sequential,
    Explanation,
    Direct,
    Summarization,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Rating,
        Family::Sequential,
        Family::Explanation,
        Family::Direct,
        Family::Summarization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Rating => "rating",
            Family::Sequential => "sequential",
            Family::Explanation => "explanation",
            Family::Direct => "direct",
            Family::Summarization => "summarization",
        }
    }

    pub fn index(self) -> usize {
        Family::ALL.iter().position(|f| *f == self).unwrap_or(0)
    }

    /// Placeholders every template of this family must use.
    pub fn schema(self) -> &'static [&'static str] {
        match self {
            Family::Rating | Family::Summarization => &["item", "user"],
            Family::Sequential | Family::Direct => &["user"],
            Family::Explanation => &["feature", "item", "user"],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Trigger,
    Generated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSplit {
    Seen,
    Zeroshot,
}

impl std::str::FromStr for PromptSplit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seen" => Ok(PromptSplit::Seen),
            "zeroshot" => Ok(PromptSplit::Zeroshot),
            other => Err(format!("unknown split {other:?} (expected seen or zeroshot)")),
        }
    }
}

impl fmt::Display for PromptSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptSplit::Seen => "seen",
            PromptSplit::Zeroshot => "zeroshot",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub id: String,
    pub family: Family,
    pub group: u32,
    pub text: String,
    pub origin: Origin,
    /// `None` for templates that are neither trained on nor held out.
    #[serde(default)]
    pub split: Option<PromptSplit>,
}

impl PromptTemplate {
    pub fn trigger(family: Family, group: u32, n: usize, text: &str) -> Self {
        Self {
            id: format!("{family}/{group}/t{n}"),
            family,
            group,
            text: text.into(),
            origin: Origin::Trigger,
            split: None,
        }
    }

    /// Checks the placeholder set against the family schema.
    pub fn validate(&self) -> Result<(), DataError> {
        let found: BTreeSet<String> = placeholders(&self.text)?.into_iter().collect();
        let want: BTreeSet<String> = self.family.schema().iter().map(|s| s.to_string()).collect();
        if found != want {
            return Err(DataError::Template {
                template: self.id.clone(),
                message: format!(
                    "placeholders {found:?} do not match the {} schema {want:?}",
                    self.family
                ),
            });
        }
        Ok(())
    }

    /// The template with placeholders blanked out.
    pub fn literal_text(&self) -> String {
        let mut out = String::new();
        let mut inside = false;
        for c in self.text.chars() {
            match c {
                '{' => inside = true,
                '}' => {
                    inside = false;
                    out.push(' ');
                }
                c if !inside => out.push(c),
                _ => {}
            }
        }
        out
    }
}

/// Placeholder names in order of appearance.
pub fn placeholders(text: &str) -> Result<Vec<String>, DataError> {
    let err = |m: String| DataError::Template {
        template: text.to_string(),
        message: m,
    };
    let mut out = Vec::new();
    let mut chars = text.char_indices();
    while let Some((i, c)) = chars.next() {
        match c {
            '{' => {
                let mut name = String::new();
                let mut closed = false;
                for (_, c) in chars.by_ref() {
                    if c == '}' {
                        closed = true;
                        break;
                    }
                    name.push(c);
                }
                if !closed {
                    return Err(err(format!("unclosed brace at byte {i}")));
                }
                let valid = name.chars().next().is_some_and(|c| c.is_ascii_lowercase() || c == '_')
                    && name
                        .chars()
                        .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
                if !valid {
                    return Err(err(format!("invalid placeholder name {name:?}")));
                }
                out.push(name);
            }
            '}' => return Err(err(format!("unmatched closing brace at byte {i}"))),
            _ => {}
        }
    }
    Ok(out)
}

/// Substitutes `{name}` placeholders. Every placeholder must be bound and
/// every binding used.
pub fn render_prompt(template: &str, bindings: &[(&str, &str)]) -> Result<String, DataError> {
    let names = placeholders(template)?;
    for n in &names {
        if !bindings.iter().any(|(k, _)| k == n) {
            return Err(DataError::MissingBinding(n.clone()));
        }
    }
    for (k, _) in bindings {
        if !names.iter().any(|n| n == k) {
            return Err(DataError::ExtraBinding(k.to_string()));
        }
    }
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let end = start + rest[start..].find('}').expect("validated above");
        let name = &rest[start + 1..end];
        let value = bindings
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .unwrap_or_default();
        out.push_str(value);
        rest = &rest[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

const TRIGGERS: [(Family, u32, &str); 20] = [
    (
        Family::Rating,
        0,
        "What star rating do you think {user} will give {item}?",
    ),
    (Family::Rating, 0, "How many stars will {user} award {item}?"),
    (
        Family::Rating,
        1,
        "Predict the score that {user} would assign to {item} on a scale from 1 to 5.",
    ),
    (
        Family::Rating,
        1,
        "On a scale of 1 to 5, estimate how {user} rates {item}.",
    ),
    (
        Family::Sequential,
        0,
        "Given the purchase history of {user}, what item will the user buy next?",
    ),
    (
        Family::Sequential,
        0,
        "Which item should be recommended next to {user} based on the history?",
    ),
    (
        Family::Sequential,
        1,
        "{user} has interacted with the listed items. Predict the next item for this user.",
    ),
    (
        Family::Sequential,
        1,
        "Here is the interaction sequence of {user}. Guess the item the user will choose next.",
    ),
    (
        Family::Explanation,
        0,
        "Explain why {user} rated {item} that way, focusing on the {feature}.",
    ),
    (
        Family::Explanation,
        0,
        "Write a short explanation of how {user} feels about the {feature} of {item}.",
    ),
    (
        Family::Explanation,
        1,
        "Generate a comment from {user} about {item} that mentions the {feature}.",
    ),
    (
        Family::Explanation,
        1,
        "Help {user} describe the {feature} of {item} in a few words.",
    ),
    (
        Family::Direct,
        0,
        "Pick the item from the candidates that {user} will most likely buy.",
    ),
    (
        Family::Direct,
        0,
        "Which of the candidate items should we recommend to {user}?",
    ),
    (
        Family::Direct,
        1,
        "Choose the best item among the candidates for {user} to interact with.",
    ),
    (
        Family::Direct,
        1,
        "Select one candidate item that matches the taste of {user}.",
    ),
    (
        Family::Summarization,
        0,
        "Summarize the review that {user} wrote about {item}.",
    ),
    (
        Family::Summarization,
        0,
        "Give a short title for the review of {item} written by {user}.",
    ),
    (
        Family::Summarization,
        1,
        "Write a brief summary of what {user} thinks of {item}.",
    ),
    (
        Family::Summarization,
        1,
        "In a few words, what is the main point of the review of {item} by {user}?",
    ),
];

/// Hand-written seed templates: two groups per family, two triggers per group.
pub fn default_triggers() -> Vec<PromptTemplate> {
    let mut counters: BTreeMap<(Family, u32), usize> = BTreeMap::new();
    TRIGGERS
        .iter()
        .map(|&(f, g, text)| {
            let n = counters.entry((f, g)).or_default();
            let t = PromptTemplate::trigger(f, g, *n, text);
            *n += 1;
            t
        })
        .collect()
}

/// Assigns `n_train` seen and `n_zeroshot` held-out templates per group;
/// the remainder keeps no split.
pub fn split_prompts(
    templates: &[PromptTemplate],
    n_train: usize,
    n_zeroshot: usize,
    seed: u64,
) -> Result<Vec<PromptTemplate>, DataError> {
    let mut groups: BTreeMap<(Family, u32), Vec<usize>> = BTreeMap::new();
    for (i, t) in templates.iter().enumerate() {
        groups.entry((t.family, t.group)).or_default().push(i);
    }
    let mut out = templates.to_vec();
    for ((family, group), mut idx) in groups {
        if idx.len() < n_train + n_zeroshot {
            return Err(DataError::Precondition(format!(
                "group {family}/{group} has {} templates; {} seen + {} zero-shot requested",
                idx.len(),
                n_train,
                n_zeroshot
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[family.index() as u64, u64::from(group)]));
        idx.shuffle(&mut rng);
        for (rank, &i) in idx.iter().enumerate() {
            out[i].split = if rank < n_train {
                Some(PromptSplit::Seen)
            } else if rank < n_train + n_zeroshot {
                Some(PromptSplit::Zeroshot)
            } else {
                None
            };
        }
    }
    Ok(out)
}

pub fn write_templates_jsonl<W: Write>(templates: &[PromptTemplate], mut w: W) -> std::io::Result<()> {
    for t in templates {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads and validates templates; errors carry the 1-based line number.
pub fn read_templates_jsonl<R: BufRead>(r: R) -> Result<Vec<PromptTemplate>, DataError> {
    let mut out: Vec<PromptTemplate> = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in r.lines().enumerate() {
        let at = |message: String| DataError::Parse { line: n + 1, message };
        let line = line.map_err(|e| at(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: PromptTemplate = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        t.validate().map_err(|e| at(e.to_string()))?;
        if !ids.insert(t.id.clone()) {
            return Err(at(format!("duplicate template id {}", t.id)));
        }
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn render_examples() {
        let plain = "Does the description match what's being offered?";
        assert_eq!(render_prompt(plain, &[]).unwrap(), plain);
        assert_eq!(
            render_prompt("{user} likes {item}?", &[("user", "user_1"), ("item", "item_2")]).unwrap(),
            "user_1 likes item_2?"
        );
        assert_eq!(
            render_prompt("{user} likes {item}?", &[("user", "user_1")]),
            Err(DataError::MissingBinding("item".into()))
        );
        assert_eq!(
            render_prompt("{user}", &[("user", "a"), ("item", "b")]),
            Err(DataError::ExtraBinding("item".into()))
        );
        assert!(render_prompt("{user", &[]).is_err());
        assert!(render_prompt("user}", &[]).is_err());
        assert!(render_prompt("{User}", &[("User", "x")]).is_err());
    }

    #[test]
    fn triggers_match_their_schema() {
        let t = default_triggers();
        assert_eq!(t.len(), 20);
        for x in &t {
            x.validate().unwrap();
        }
        for f in Family::ALL {
            for g in 0..2 {
                assert_eq!(t.iter().filter(|x| x.family == f && x.group == g).count(), 2);
            }
        }
        assert_eq!(t[1].id, "rating/0/t1");
    }

    #[test]
    fn schema_violation_is_reported() {
        let bad = PromptTemplate::trigger(Family::Direct, 0, 0, "Recommend {item} to {user}");
        assert!(bad.validate().is_err());
    }

    fn group_of(n: usize) -> Vec<PromptTemplate> {
        (0..n)
            .map(|i| PromptTemplate {
                id: format!("rating/0/g{i}"),
                family: Family::Rating,
                group: 0,
                text: format!("variant {i} for {{user}} and {{item}}"),
                origin: Origin::Generated,
                split: None,
            })
            .collect()
    }

    #[test]
    fn split_counts() {
        let s = split_prompts(&group_of(100), 90, 5, 3).unwrap();
        let count = |want| s.iter().filter(|t| t.split == want).count();
        assert_eq!(count(Some(PromptSplit::Seen)), 90);
        assert_eq!(count(Some(PromptSplit::Zeroshot)), 5);
        assert_eq!(count(None), 5);
        assert_eq!(s, split_prompts(&group_of(100), 90, 5, 3).unwrap());
        assert!(split_prompts(&group_of(50), 90, 5, 3).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_line_numbers() {
        let t = default_triggers();
        let mut buf = Vec::new();
        write_templates_jsonl(&t, &mut buf).unwrap();
        assert_eq!(read_templates_jsonl(&buf[..]).unwrap(), t);
        let mut text = String::from_utf8(buf).unwrap();
        text.push_str("{\"id\":\"x\"}\n");
        match read_templates_jsonl(text.as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 21),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn literal_text_drops_placeholders() {
        let t = PromptTemplate::trigger(Family::Rating, 0, 0, "Will {user} like {item}?");
        assert_eq!(t.literal_text(), "Will   like  ?");
    }

    proptest! {
        #[test]
        fn splits_are_disjoint(seed in any::<u64>(), n in 10usize..40) {
            let s = split_prompts(&group_of(n), n - 6, 5, seed).unwrap();
            let seen: HashSet<_> = s.iter().filter(|t| t.split == Some(PromptSplit::Seen)).map(|t| &t.id).collect();
            let zero: HashSet<_> = s.iter().filter(|t| t.split == Some(PromptSplit::Zeroshot)).map(|t| &t.id).collect();
            prop_assert!(seen.is_disjoint(&zero));
            prop_assert_eq!(seen.len(), n - 6);
            prop_assert_eq!(zero.len(), 5);
        }

        #[test]
        fn rendering_never_leaves_braces(user in "[a-z_0-9]{1,8}", item in "[a-z_0-9]{1,8}") {
            for t in default_triggers() {
                let mut b = vec![("user", user.as_str())];
                if t.family.schema().contains(&"item") {
                    b.push(("item", item.as_str()));
                }
                if t.family.schema().contains(&"feature") {
                    b.push(("feature", "fit"));
                }
                let r = render_prompt(&t.text, &b).unwrap();
                let clean = !r.contains('{') && !r.contains('}');
                prop_assert!(clean);
            }
        }
    }
}
