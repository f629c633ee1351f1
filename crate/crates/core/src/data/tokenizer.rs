use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::model::{special, Token};

/// How `user_N` / `item_N` identifiers are split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdMode {
    /// Identifiers are ordinary text: `item`, `_`, `1471`.
    Word,
    /// Each identifier is one token.
    #[default]
    IdAtomic,
    /// Prefix, underscore, then one token per digit.
    IdDigitSplit,
}

const SPECIALS: [&str; special::RESERVED] = ["<pad>", "<eos>", "<cls>", "<unk>"];

fn id_at(chars: &[char], start: usize) -> Option<(usize, usize)> {
    // returns (prefix_len, end) for `user_<digits>` or `item_<digits>`
    for prefix in ["user_", "item_"] {
        let p: Vec<char> = prefix.chars().collect();
        if chars.len() >= start + p.len() && chars[start..start + p.len()] == p[..] {
            let mut end = start + p.len();
            while end < chars.len() && chars[end].is_ascii_digit() {
                end += 1;
            }
            let digits = end - start - p.len();
            let boundary = end == chars.len() || !(chars[end].is_alphanumeric() || chars[end] == '_');
            if digits > 0 && boundary {
                return Some((p.len() - 1, end));
            }
        }
    }
    None
}

/// Lowercases and splits `text` into word strings: alphanumeric runs, and
/// every other non-space character on its own.
pub fn tokenize_words(text: &str, mode: IdMode) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    for chunk in lower.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if !c.is_alphanumeric() {
                out.push(c.to_string());
                i += 1;
                continue;
            }
            let at_word_start = i == 0 || !chars[i - 1].is_alphanumeric();
            if let Some((plen, end)) = at_word_start.then(|| id_at(&chars, i)).flatten() {
                let prefix: String = chars[i..i + plen].iter().collect();
                let digits: String = chars[i + plen + 1..end].iter().collect();
                match mode {
                    IdMode::IdAtomic => out.push(format!("{prefix}_{digits}")),
                    IdMode::IdDigitSplit => {
                        out.push(prefix);
                        out.push("_".into());
                        out.extend(digits.chars().map(String::from));
                    }
                    IdMode::Word => {
                        out.push(prefix);
                        out.push("_".into());
                        out.push(digits);
                    }
                }
                i = end;
                continue;
            }
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        }
    }
    out
}

fn is_single_digit(s: &str) -> bool {
    s.len() == 1 && s.as_bytes()[0].is_ascii_digit()
}

/// Joins word strings back into readable text.
pub fn detokenize_words<S: AsRef<str>>(words: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    let mut in_id_digits = false;
    for w in words {
        let w = w.as_ref();
        let attach_left = matches!(w, "." | "," | "!" | "?" | ";" | ":" | ")" | "_" | "-" | "'")
            || (in_id_digits && is_single_digit(w));
        if !(glue_next || attach_left) {
            out.push(' ');
        }
        out.push_str(w);
        in_id_digits = (w == "_") || (in_id_digits && is_single_digit(w));
        glue_next = matches!(w, "_" | "-" | "'" | "(");
    }
    out
}

/// Word-level vocabulary: reserved tokens, identifier tokens, then corpus
/// words in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, Token>,
}

impl Vocab {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, n_users: usize, n_items: usize) -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s);
        }
        for u in 0..n_users {
            v.push(&format!("user_{u}"));
        }
        for i in 0..n_items {
            v.push(&format!("item_{i}"));
        }
        for s in ["user", "item", "_", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9"] {
            v.push(s);
        }
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(|t| {
                let mut w = tokenize_words(t, IdMode::IdAtomic);
                w.extend(tokenize_words(t, IdMode::Word));
                w
            })
            .collect();
        for w in &words {
            v.push(w);
        }
        v
    }

    fn push(&mut self, s: &str) {
        if !self.index.contains_key(s) {
            self.index.insert(s.to_string(), self.tokens.len() as Token);
            self.tokens.push(s.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<Token> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: Token) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str, mode: IdMode) -> Vec<Token> {
        tokenize_words(text, mode)
            .iter()
            .map(|w| self.id(w).unwrap_or(special::UNK))
            .collect()
    }

    pub fn user_tokens(&self, user: usize, mode: IdMode) -> Vec<Token> {
        self.tokenize(&format!("user_{user}"), mode)
    }

    pub fn item_tokens(&self, item: u32, mode: IdMode) -> Vec<Token> {
        self.tokenize(&format!("item_{item}"), mode)
    }

    /// Text for `ids`, stopping at `<eos>` and dropping `<pad>`/`<cls>`.
    pub fn detokenize(&self, ids: &[Token]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .take_while(|&&t| t != special::EOS)
            .filter(|&&t| t != special::PAD && t != special::CLS)
            .map(|&t| self.word(t).unwrap_or("<unk>"))
            .collect();
        detokenize_words(&words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn id_modes() {
        assert_eq!(
            tokenize_words("item_1471", IdMode::IdDigitSplit),
            ["item", "_", "1", "4", "7", "1"]
        );
        assert_eq!(tokenize_words("item_1471", IdMode::IdAtomic), ["item_1471"]);
        assert_eq!(tokenize_words("item_1471", IdMode::Word), ["item", "_", "1471"]);
        assert!(tokenize_words("", IdMode::Word).is_empty());
        assert_eq!(
            tokenize_words("Does user_3 like item_12?", IdMode::IdAtomic),
            ["does", "user_3", "like", "item_12", "?"]
        );
        // not identifiers
        assert_eq!(tokenize_words("item_12x", IdMode::IdAtomic), ["item", "_", "12x"]);
        assert_eq!(tokenize_words("myitem_1", IdMode::IdAtomic), ["myitem", "_", "1"]);
    }

    #[test]
    fn words_and_punctuation() {
        assert_eq!(
            tokenize_words("Category: T-shirt. Brand: Nike", IdMode::Word),
            ["category", ":", "t", "-", "shirt", ".", "brand", ":", "nike"]
        );
    }

    #[test]
    fn vocab_lookup_and_unknowns() {
        let v = Vocab::build(["the red mug", "a mug"], 2, 3);
        assert_eq!(v.word(special::PAD), Some("<pad>"));
        assert_eq!(v.word(special::CLS), Some("<cls>"));
        assert_eq!(v.tokenize("item_2", IdMode::IdAtomic).len(), 1);
        assert_eq!(v.tokenize("item_9", IdMode::IdAtomic), vec![special::UNK]);
        assert_eq!(v.tokenize("item_2", IdMode::IdDigitSplit).len(), 3);
        let ids = v.tokenize("The red banana", IdMode::Word);
        assert_eq!(ids[2], special::UNK);
        assert_eq!(
            v.detokenize(&v.tokenize("the red mug.", IdMode::Word)),
            "the red mug <unk>"
        );
        let ids = v.tokenize("user_1 a mug", IdMode::IdDigitSplit);
        assert_eq!(v.detokenize(&ids), "user_1 a mug");
    }

    #[test]
    fn detokenize_stops_at_eos() {
        let v = Vocab::build(["a b"], 0, 0);
        let a = v.id("a").unwrap();
        let b = v.id("b").unwrap();
        assert_eq!(v.detokenize(&[a, special::EOS, b]), "a");
    }

    #[test]
    fn vocab_is_deterministic() {
        let a = Vocab::build(["z y x", "b a"], 1, 1);
        let b = Vocab::build(["b a", "z y x"], 1, 1);
        assert_eq!(a, b);
    }

    fn squash(s: &str) -> String {
        s.to_lowercase().chars().filter(|c| !c.is_whitespace()).collect()
    }

    proptest! {
        #[test]
        fn round_trip_up_to_case_and_whitespace(
            text in "[a-zA-Z0-9 .,:;!?'_-]{0,40}|((user|item)_[0-9]{1,4} ?){1,4}",
            mode in prop_oneof![Just(IdMode::Word), Just(IdMode::IdAtomic), Just(IdMode::IdDigitSplit)],
        ) {
            let words = tokenize_words(&text, mode);
            prop_assert_eq!(squash(&detokenize_words(&words)), squash(&text));
            let v = Vocab::build([text.as_str()], 10_000, 10_000);
            let ids = v.tokenize(&text, mode);
            prop_assert!(!ids.contains(&special::UNK));
            prop_assert_eq!(squash(&v.detokenize(&ids)), squash(&text));
        }
    }
}
