use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{normalize, validate_candidates, AugmentError, GeneratedPromptBatch};

const SYNONYMS: &[(&str, &[&str])] = &[
    ("predict", &["estimate", "forecast"]),
    ("estimate", &["predict", "gauge"]),
    ("guess", &["predict", "work out"]),
    ("rating", &["score", "star score"]),
    ("score", &["rating", "grade"]),
    ("stars", &["points", "star marks"]),
    ("give", &["assign", "award"]),
    ("award", &["give", "grant"]),
    ("assign", &["give", "attach"]),
    ("rates", &["scores", "grades"]),
    ("rated", &["scored", "graded"]),
    ("item", &["product", "article"]),
    ("items", &["products", "articles"]),
    ("user", &["customer", "shopper"]),
    ("buy", &["purchase", "pick up"]),
    ("choose", &["select", "pick"]),
    ("pick", &["choose", "select"]),
    ("select", &["choose", "pick"]),
    ("best", &["most suitable", "ideal"]),
    ("recommend", &["suggest", "propose"]),
    ("recommended", &["suggested", "proposed"]),
    ("write", &["compose", "produce"]),
    ("short", &["brief", "concise"]),
    ("brief", &["short", "compact"]),
    ("explain", &["describe", "clarify"]),
    ("explanation", &["account", "justification"]),
    ("describe", &["characterize", "portray"]),
    ("summarize", &["condense", "recap"]),
    ("summary", &["recap", "digest"]),
    ("review", &["comment", "write-up"]),
    ("history", &["record", "track record"]),
    ("sequence", &["series", "list"]),
    ("next", &["after that", "subsequently"]),
    ("generate", &["create", "produce"]),
    ("comment", &["remark", "note"]),
    ("thinks", &["feels", "believes"]),
    ("likely", &["probably", "plausibly"]),
    ("main", &["central", "key"]),
    ("candidates", &["options", "choices"]),
    ("candidate", &["option", "possible"]),
    ("taste", &["preferences", "liking"]),
    ("matches", &["fits", "suits"]),
    ("help", &["assist", "aid"]),
    ("mentions", &["refers to", "covers"]),
    ("feels", &["thinks", "comes across"]),
    ("focusing", &["concentrating", "centering"]),
];

const PREFIXES: [&str; 10] = [
    "",
    "Please answer: ",
    "Quick question: ",
    "Tell me: ",
    "I need to know: ",
    "Could you help? ",
    "Task: ",
    "Here is a request. ",
    "Kindly respond. ",
    "Think carefully. ",
];

const SUFFIXES: [&str; 8] = [
    "",
    " Answer briefly.",
    " Be concise.",
    " Reply directly.",
    " Keep it short.",
    " Thanks!",
    " One answer only.",
    " Please be precise.",
];

#[derive(Debug)]
enum Piece {
    Fixed(String),
    Choice(Vec<String>),
}

fn match_case(template: &str, word: &str) -> String {
    if template.chars().next().is_some_and(char::is_uppercase) {
        let mut c = word.chars();
        c.next()
            .map(|f| f.to_uppercase().chain(c).collect())
            .unwrap_or_default()
    } else {
        word.to_string()
    }
}

/// Splits text into literal pieces and word slots with alternatives;
/// placeholders are always literal.
fn pieces(text: &str) -> Vec<Piece> {
    let mut out = Vec::new();
    let mut buf = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '{' {
            buf.push(c);
            for d in chars.by_ref() {
                buf.push(d);
                if d == '}' {
                    break;
                }
            }
            continue;
        }
        if c.is_alphabetic() {
            let mut word = String::from(c);
            while let Some(&d) = chars.peek() {
                if d.is_alphabetic() {
                    word.push(d);
                    chars.next();
                } else {
                    break;
                }
            }
            let lower = word.to_lowercase();
            if let Some((_, alts)) = SYNONYMS.iter().find(|(w, _)| *w == lower) {
                out.push(Piece::Fixed(std::mem::take(&mut buf)));
                let mut opts = vec![word.clone()];
                opts.extend(alts.iter().map(|a| match_case(&word, a)));
                out.push(Piece::Choice(opts));
            } else {
                buf.push_str(&word);
            }
            continue;
        }
        buf.push(c);
    }
    out.push(Piece::Fixed(buf));
    out
}

/// `"A, B?"` becomes `"B, a?"` when the text has exactly one clause break.
fn swap_clauses(text: &str) -> Option<String> {
    let (a, b) = text.split_once(", ")?;
    if b.contains(", ") {
        return None;
    }
    let end = b.chars().last().filter(|c| matches!(c, '?' | '.' | '!'))?;
    let b = &b[..b.len() - end.len_utf8()];
    let lower_first = |s: &str| {
        let mut c = s.chars();
        c.next().map_or(String::new(), |f| f.to_lowercase().chain(c).collect())
    };
    let upper_first = |s: &str| {
        let mut c = s.chars();
        c.next().map_or(String::new(), |f| f.to_uppercase().chain(c).collect())
    };
    Some(format!("{}, {}{end}", upper_first(b), lower_first(a)))
}

struct Space {
    bases: Vec<Vec<Piece>>,
    radix: Vec<usize>,
}

impl Space {
    fn new(trigger: &str) -> Self {
        let mut bases = vec![pieces(trigger)];
        if let Some(s) = swap_clauses(trigger) {
            bases.push(pieces(&s));
        }
        let mut radix = vec![bases.len(), PREFIXES.len(), SUFFIXES.len()];
        let max_choices = bases
            .iter()
            .map(|b| b.iter().filter(|p| matches!(p, Piece::Choice(_))).count())
            .max();
        radix.extend(std::iter::repeat_n(3, max_choices.unwrap_or(0)));
        Self { bases, radix }
    }

    fn size(&self) -> u128 {
        self.radix.iter().fold(1u128, |a, &r| a.saturating_mul(r as u128))
    }

    fn render(&self, digits: &[usize]) -> String {
        let base = &self.bases[digits[0]];
        let mut out = String::from(PREFIXES[digits[1]]);
        let mut slot = 3;
        for p in base {
            let s = match p {
                Piece::Fixed(s) => s.clone(),
                Piece::Choice(opts) => {
                    let s = opts[digits[slot] % opts.len()].clone();
                    slot += 1;
                    s
                }
            };
            out.push_str(&s);
        }
        out.push_str(SUFFIXES[digits[2]]);
        out
    }

    fn digits(&self, mut n: u128) -> Vec<usize> {
        self.radix
            .iter()
            .map(|&r| {
                let d = (n % r as u128) as usize;
                n /= r as u128;
                d
            })
            .collect()
    }
}

/// Rule-based paraphrases: synonym substitution, clause reordering, and
/// fixed prefixes/suffixes, all chosen by a seeded generator.
///
/// When the rule space holds fewer than `n` rewrites the batch is short and
/// `shortfall` says by how much.
pub fn offline_paraphrase(trigger: &str, n: usize, seed: u64) -> Result<GeneratedPromptBatch, AugmentError> {
    if n == 0 {
        return Err(AugmentError::Config("at least one paraphrase must be requested".into()));
    }
    if trigger.trim().is_empty() {
        return Err(AugmentError::Config("empty trigger".into()));
    }
    let space = Space::new(trigger);
    let size = space.size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<String> = HashSet::from([normalize(trigger)]);
    let mut out = Vec::with_capacity(n);
    let mut push = |text: String, out: &mut Vec<String>| {
        if out.len() < n && seen.insert(normalize(&text)) {
            out.push(text);
        }
    };
    if size <= (4 * n) as u128 {
        let mut all: Vec<u128> = (0..size).collect();
        all.shuffle(&mut rng);
        for k in all {
            push(space.render(&space.digits(k)), &mut out);
        }
    } else {
        let mut attempts = 0;
        while out.len() < n && attempts < 100 * n {
            attempts += 1;
            let digits: Vec<usize> = space.radix.iter().map(|&r| rng.random_range(0..r)).collect();
            push(space.render(&digits), &mut out);
        }
    }
    let mut batch = validate_candidates(trigger, out)?;
    batch.shortfall = n - batch.accepted.len();
    if batch.shortfall > 0 {
        log::warn!(
            "offline rewriter produced {} of {n} paraphrases for {trigger:?}",
            batch.accepted.len()
        );
    }
    if batch.accepted.is_empty() {
        return Err(AugmentError::NoneAccepted {
            trigger: trigger.to_string(),
        });
    }
    Ok(batch)
}
