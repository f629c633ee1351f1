use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Value used when generated text holds no number.
pub const RATING_FALLBACK: f64 = 3.0;

/// A rating read from generated text.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParsedRating {
    pub value: f64,
    /// True when no number was found and the fallback was used.
    pub fallback: bool,
}

/// First decimal literal in `text` (digits with an optional fractional
/// part), clamped to [1, 5]. Text without one yields 3.0 and a flag.
pub fn parse_rating(text: &str) -> ParsedRating {
    let b = text.as_bytes();
    let mut i = 0;
    while i < b.len() {
        if b[i].is_ascii_digit() {
            let start = i;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < b.len() && b[i] == b'.' && b[i + 1].is_ascii_digit() {
                i += 1;
                while i < b.len() && b[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if let Ok(v) = text[start..i].parse::<f64>() {
                if v.is_finite() {
                    return ParsedRating {
                        value: v.clamp(1.0, 5.0),
                        fallback: false,
                    };
                }
            }
        }
        i += 1;
    }
    ParsedRating {
        value: RATING_FALLBACK,
        fallback: true,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
    /// Predictions that fell back to the default rating.
    pub fallbacks: usize,
}

pub fn rating_metrics(preds: &[f64], golds: &[f64]) -> Result<RatingMetrics, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch(preds.len(), golds.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::Empty("rating predictions"));
    }
    let n = preds.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, g) in preds.iter().zip(golds) {
        let d = p - g;
        se += d * d;
        ae += d.abs();
    }
    Ok(RatingMetrics {
        rmse: (se / n).sqrt(),
        mae: ae / n,
        n: preds.len(),
        fallbacks: 0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub n: usize,
}

/// HR@k and NDCG@k for one relevant item per list.
pub fn hit_ndcg(ranks: &[usize], k: usize) -> Result<(f64, f64), EvalError> {
    if k == 0 {
        return Err(EvalError::Cutoff);
    }
    if ranks.is_empty() {
        return Err(EvalError::Empty("ranked lists"));
    }
    let (mut hr, mut ndcg) = (0.0, 0.0);
    for &r in ranks {
        if r == 0 {
            return Err(EvalError::Rank(r));
        }
        if r <= k {
            hr += 1.0;
            ndcg += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let n = ranks.len() as f64;
    Ok((hr / n, ndcg / n))
}

/// 1-based position of `gold` in each ranked list.
pub fn gold_ranks<T: PartialEq>(lists: &[Vec<T>], golds: &[T]) -> Result<Vec<usize>, EvalError> {
    if lists.len() != golds.len() {
        return Err(EvalError::LengthMismatch(lists.len(), golds.len()));
    }
    lists
        .iter()
        .zip(golds)
        .enumerate()
        .map(|(i, (l, g))| {
            l.iter()
                .position(|x| x == g)
                .map(|p| p + 1)
                .ok_or(EvalError::GoldAbsent(i))
        })
        .collect()
}

pub fn ranking_metrics<T: PartialEq>(lists: &[Vec<T>], golds: &[T]) -> Result<RankingMetrics, EvalError> {
    let ranks = gold_ranks(lists, golds)?;
    let (hr5, ndcg5) = hit_ndcg(&ranks, 5)?;
    let (hr10, ndcg10) = hit_ndcg(&ranks, 10)?;
    Ok(RankingMetrics {
        hr5,
        hr10,
        ndcg5,
        ndcg10,
        n: ranks.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextMetrics {
    /// Corpus BLEU of order `bleu_order`.
    pub bleu: f64,
    pub bleu_order: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    pub n: usize,
    /// Pairs skipped for an empty reference.
    pub skipped: usize,
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

fn overlap(h: &HashMap<Vec<&str>, usize>, r: &HashMap<Vec<&str>, usize>) -> usize {
    h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum()
}

/// ROUGE-N F1 of one pair; 0 when there is no overlap.
pub fn rouge_n<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> f64 {
    let (h, r) = (ngrams(hyp, n), ngrams(reference, n));
    let o = overlap(&h, &r) as f64;
    if o == 0.0 {
        return 0.0;
    }
    let p = o / h.values().sum::<usize>() as f64;
    let rc = o / r.values().sum::<usize>() as f64;
    2.0 * p * rc / (p + rc)
}

/// Corpus BLEU with uniform weights up to `order` and the brevity penalty.
/// A precision whose clipped match count is zero becomes
/// `1 / (candidate n-grams + 1)`.
pub fn corpus_bleu<S: AsRef<str>>(pairs: &[(&[S], &[S])], order: usize) -> Result<f64, EvalError> {
    if order == 0 {
        return Err(EvalError::Cutoff);
    }
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    let mut matches = vec![0usize; order];
    let mut totals = vec![0usize; order];
    for (h, r) in pairs {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=order {
            let (hg, rg) = (ngrams(h, n), ngrams(r, n));
            matches[n - 1] += overlap(&hg, &rg);
            totals[n - 1] += hg.values().sum::<usize>();
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..order {
        let p = if matches[n] == 0 {
            1.0 / (totals[n] + 1) as f64
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_p += p.ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_p / order as f64).exp())
}

/// Corpus BLEU-`order` plus ROUGE-1/2 averaged over pairs; pairs with an
/// empty reference are skipped and counted.
pub fn text_metrics<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], order: usize) -> Result<TextMetrics, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch(hyps.len(), refs.len()));
    }
    let pairs: Vec<(&[S], &[S])> = hyps
        .iter()
        .zip(refs)
        .filter(|(_, r)| !r.is_empty())
        .map(|(h, r)| (h.as_slice(), r.as_slice()))
        .collect();
    let skipped = hyps.len() - pairs.len();
    if pairs.is_empty() {
        return Err(EvalError::Empty("text pairs with a reference"));
    }
    let n = pairs.len() as f64;
    Ok(TextMetrics {
        bleu: corpus_bleu(&pairs, order)?,
        bleu_order: order,
        rouge1: pairs.iter().map(|(h, r)| rouge_n(h, r, 1)).sum::<f64>() / n,
        rouge2: pairs.iter().map(|(h, r)| rouge_n(h, r, 2)).sum::<f64>() / n,
        n: pairs.len(),
        skipped,
    })
}
