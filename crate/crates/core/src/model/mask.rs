use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label of a contiguous run of ID-side tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanLabel {
    Cls,
    User,
    Item,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub label: SpanLabel,
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn new(label: SpanLabel, start: usize, len: usize) -> Self {
        Self { label, start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("no spans given")]
    Empty,
    #[error("span {index} is empty")]
    EmptySpan { index: usize },
    #[error("the first span must be a single <cls> token at position 0")]
    MissingCls,
    #[error("more than one <cls> span")]
    DuplicateCls,
    #[error("span {index} starts at {start} but the previous span ended at {expected}")]
    NotContiguous {
        index: usize,
        start: usize,
        expected: usize,
    },
}

/// Square attention-visibility matrix over ID-side positions (`true` = may attend).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibleMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl VisibleMatrix {
    pub fn full(n: usize) -> Self {
        Self {
            n,
            bits: vec![true; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_visible(&self, from: usize, to: usize) -> bool {
        self.bits[from * self.n + to]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    /// Positions reachable from `p` through at most `hops` attention steps.
    pub fn reachable(&self, p: usize, hops: usize) -> Vec<bool> {
        let mut seen = vec![false; self.n];
        seen[p] = true;
        for _ in 0..hops {
            let frontier = seen.clone();
            for (i, _) in frontier.iter().enumerate().filter(|(_, &s)| s) {
                for (j, s) in seen.iter_mut().enumerate() {
                    *s |= self.is_visible(i, j);
                }
            }
        }
        seen
    }
}

/// Builds the ID-side visibility matrix from a span partition.
///
/// `<cls>` and user tokens see and are seen by every position; tokens of one
/// item span see each other; tokens of different item spans are mutually
/// invisible.
pub fn build_visible_matrix(spans: &[Span]) -> Result<VisibleMatrix, MaskError> {
    let first = spans.first().ok_or(MaskError::Empty)?;
    if first.label != SpanLabel::Cls || first.start != 0 || first.len != 1 {
        return Err(MaskError::MissingCls);
    }
    let mut expected = 0;
    let mut owner = Vec::new();
    for (index, s) in spans.iter().enumerate() {
        if s.len == 0 {
            return Err(MaskError::EmptySpan { index });
        }
        if index > 0 && s.label == SpanLabel::Cls {
            return Err(MaskError::DuplicateCls);
        }
        if s.start != expected {
            return Err(MaskError::NotContiguous {
                index,
                start: s.start,
                expected,
            });
        }
        expected = s.end();
        owner.extend(std::iter::repeat_n(index, s.len));
    }
    let n = expected;
    let mut bits = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let (si, sj) = (&spans[owner[i]], &spans[owner[j]]);
            let bridge = |s: &Span| matches!(s.label, SpanLabel::Cls | SpanLabel::User);
            bits[i * n + j] = bridge(si) || bridge(sj) || owner[i] == owner[j];
        }
    }
    Ok(VisibleMatrix { n, bits })
}
