//! Evaluation: metric oracles, candidate ranking, the seen/zero-shot
//! protocol, and representation probes.

mod metrics;
mod probes;
mod rank;

pub use metrics::{
    corpus_bleu, gold_ranks, hit_ndcg, parse_rating, ranking_metrics, rating_metrics, rouge_n, text_metrics,
    ParsedRating, RankingMetrics, RatingMetrics, TextMetrics, RATING_FALLBACK,
};
pub use probes::{hfm_retrieval, icl_discrimination, MatchTask, RetrievalStats};
pub use rank::{rank_candidates, score_targets, sequence_log_likelihood, sort_scored};

use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    build_vocab, derive_seed, make_examples, tokenize_words, Catalog, DataError, ExampleOptions, Family, Holdout,
    IdMode, PromptSplit, PromptTemplate, TrainingExample, Vocab,
};
use crate::model::{ControlRec, ModelError, Visibility};
use crate::objectives::LossError;
use crate::train::{IdView, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("cutoff must be at least 1")]
    Cutoff,
    #[error("rank {0} is not 1-based")]
    Rank(usize),
    #[error("gold item missing from candidate list {0}")]
    GoldAbsent(usize),
    #[error("no {split} templates for {family}")]
    MissingSplit { split: PromptSplit, family: Family },
    #[error("model vocabulary has {model} tokens but the corpus needs {corpus}")]
    VocabMismatch { model: usize, corpus: usize },
    #[error("metric {name} = {value} outside its range")]
    OutOfRange { name: String, value: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub seed: u64,
    pub families: Vec<Family>,
    /// Prompts sampled per family from the split; `None` uses all of them.
    pub prompts_per_family: Option<usize>,
    /// Sequential ranking uses the gold item plus this many decoys drawn
    /// from items the user never interacted with, or all such items when
    /// there are fewer.
    pub sequential_decoys: usize,
    pub example: ExampleOptions,
    /// Worker threads; 0 picks the available parallelism.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            families: Family::ALL.to_vec(),
            prompts_per_family: Some(10),
            sequential_decoys: 99,
            example: ExampleOptions::default(),
            threads: 0,
        }
    }
}

/// Metrics of one family under one prompt, or pooled over prompts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilyMetrics {
    Rating(RatingMetrics),
    Ranking(RankingMetrics),
    Text(TextMetrics),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub family: Family,
    pub template: String,
    pub metrics: FamilyMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: PromptSplit,
    pub seed: u64,
    pub rating: Option<RatingMetrics>,
    pub sequential: Option<RankingMetrics>,
    pub direct: Option<RankingMetrics>,
    pub explanation: Option<TextMetrics>,
    pub summarization: Option<TextMetrics>,
    pub prompt_ids: Vec<String>,
    pub per_prompt: Vec<PromptResult>,
}

fn check_unit(name: &str, v: f64) -> Result<(), EvalError> {
    if v.is_finite() && (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(EvalError::OutOfRange {
            name: name.to_string(),
            value: v,
        })
    }
}

impl FamilyMetrics {
    fn validate(&self, at: &str) -> Result<(), EvalError> {
        match self {
            FamilyMetrics::Rating(r) => {
                for (n, v) in [("rmse", r.rmse), ("mae", r.mae)] {
                    if !(v.is_finite() && (0.0..=4.0).contains(&v)) {
                        return Err(EvalError::OutOfRange {
                            name: format!("{at}.{n}"),
                            value: v,
                        });
                    }
                }
            }
            FamilyMetrics::Ranking(r) => {
                for (n, v) in [
                    ("hr5", r.hr5),
                    ("hr10", r.hr10),
                    ("ndcg5", r.ndcg5),
                    ("ndcg10", r.ndcg10),
                ] {
                    check_unit(&format!("{at}.{n}"), v)?;
                }
            }
            FamilyMetrics::Text(t) => {
                for (n, v) in [("bleu", t.bleu), ("rouge1", t.rouge1), ("rouge2", t.rouge2)] {
                    check_unit(&format!("{at}.{n}"), v)?;
                }
            }
        }
        Ok(())
    }
}

impl EvalReport {
    /// Pooled metrics of `family`, if it was evaluated.
    pub fn family(&self, family: Family) -> Option<FamilyMetrics> {
        match family {
            Family::Rating => self.rating.map(FamilyMetrics::Rating),
            Family::Sequential => self.sequential.map(FamilyMetrics::Ranking),
            Family::Direct => self.direct.map(FamilyMetrics::Ranking),
            Family::Explanation => self.explanation.map(FamilyMetrics::Text),
            Family::Summarization => self.summarization.map(FamilyMetrics::Text),
        }
    }

    /// Every metric is finite and within its documented range.
    pub fn validate(&self) -> Result<(), EvalError> {
        for f in Family::ALL {
            if let Some(m) = self.family(f) {
                m.validate(f.name())?;
            }
        }
        for p in &self.per_prompt {
            p.metrics.validate(&p.template)?;
        }
        Ok(())
    }

    /// One JSON object per prompt result, then a summary line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for p in &self.per_prompt {
            let mut v = serde_json::to_value(p)?;
            v["record"] = "prompt".into();
            v["split"] = serde_json::to_value(self.split)?;
            writeln!(w, "{v}")?;
        }
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("per_prompt");
        }
        v["record"] = "summary".into();
        writeln!(w, "{v}")
    }

    /// Human-readable lines for the terminal.
    pub fn summary_lines(&self) -> Vec<String> {
        let mut out = vec![format!("split {} ({} prompts)", self.split, self.prompt_ids.len())];
        if let Some(r) = self.rating {
            out.push(format!(
                "rating         RMSE {:.4}  MAE {:.4}  (n={}, fallbacks={})",
                r.rmse, r.mae, r.n, r.fallbacks
            ));
        }
        for (name, m) in [("sequential", self.sequential), ("direct", self.direct)] {
            if let Some(m) = m {
                out.push(format!(
                    "{name:<14} HR@5 {:.4}  HR@10 {:.4}  NDCG@5 {:.4}  NDCG@10 {:.4}  (n={})",
                    m.hr5, m.hr10, m.ndcg5, m.ndcg10, m.n
                ));
            }
        }
        for (name, m) in [("explanation", self.explanation), ("summarization", self.summarization)] {
            if let Some(m) = m {
                out.push(format!(
                    "{name:<14} BLEU-{} {:.4}  ROUGE-1 {:.4}  ROUGE-2 {:.4}  (n={})",
                    m.bleu_order, m.bleu, m.rouge1, m.rouge2, m.n
                ));
            }
        }
        out
    }
}

/// BLEU order reported per text family.
pub fn bleu_order(family: Family) -> usize {
    match family {
        Family::Summarization => 2,
        _ => 4,
    }
}

/// Order-preserving parallel map over a slice.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = if threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        threads
    };
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

/// Outcome for one example.
enum Outcome {
    Rating { pred: f64, gold: f64, fallback: bool },
    Rank(usize),
    Text { hyp: Vec<String>, reference: Vec<String> },
}

struct Ctx<'a> {
    model: &'a ControlRec,
    catalog: &'a Catalog,
    vocab: &'a Vocab,
    opts: &'a EvalOptions,
}

fn sequential_candidates(ctx: &Ctx<'_>, x: &TrainingExample, gold: u32) -> Vec<u32> {
    let history = &ctx.catalog.interactions[x.user];
    let others: Vec<u32> = (0..ctx.catalog.n_items() as u32)
        .filter(|&i| i != gold && !history.iter().any(|h| h.item == i))
        .collect();
    let mut c = if others.len() <= ctx.opts.sequential_decoys {
        others
    } else {
        let seed = derive_seed(ctx.opts.seed, &[Family::Sequential.index() as u64, x.user as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        index::sample(&mut rng, others.len(), ctx.opts.sequential_decoys)
            .into_iter()
            .map(|i| others[i])
            .collect()
    };
    c.push(gold);
    c.sort_unstable();
    c
}

fn run_example(ctx: &Ctx<'_>, x: &TrainingExample) -> Result<Outcome, EvalError> {
    let id = IdView::new(&x.id).map_err(ModelError::from)?;
    let mode = ctx.opts.example.id_mode;
    let generate = || -> Result<String, EvalError> {
        let max = ctx.model.config().max_target_len;
        let g = ctx
            .model
            .generate_greedy(&id.tokens, Visibility::Matrix(&id.mask), &x.nl_tokens, max)?;
        Ok(ctx.vocab.detokenize(&g.tokens))
    };
    let gold = || {
        x.item
            .ok_or_else(|| EvalError::Data(DataError::Precondition("ranking example without a target item".into())))
    };
    Ok(match x.family {
        Family::Rating => {
            let p = parse_rating(&generate()?);
            Outcome::Rating {
                pred: p.value,
                gold: parse_rating(&x.target_text).value,
                fallback: p.fallback,
            }
        }
        Family::Sequential | Family::Direct => {
            let gold = gold()?;
            let cands = if x.family == Family::Direct {
                x.candidates.clone()
            } else {
                sequential_candidates(ctx, x, gold)
            };
            let ranked = rank_candidates(ctx.model, &id, &x.nl_tokens, &cands, gold, ctx.vocab, mode)?;
            Outcome::Rank(
                ranked
                    .iter()
                    .position(|(c, _)| *c == gold)
                    .map_or(usize::MAX, |p| p + 1),
            )
        }
        Family::Explanation | Family::Summarization => Outcome::Text {
            hyp: tokenize_words(&generate()?, IdMode::Word),
            reference: tokenize_words(&x.target_text, IdMode::Word),
        },
    })
}

fn reduce(family: Family, outcomes: &[Outcome]) -> Result<FamilyMetrics, EvalError> {
    match family {
        Family::Rating => {
            let (mut p, mut g, mut fb) = (Vec::new(), Vec::new(), 0);
            for o in outcomes {
                if let Outcome::Rating { pred, gold, fallback } = o {
                    p.push(*pred);
                    g.push(*gold);
                    fb += usize::from(*fallback);
                }
            }
            let mut m = rating_metrics(&p, &g)?;
            m.fallbacks = fb;
            Ok(FamilyMetrics::Rating(m))
        }
        Family::Sequential | Family::Direct => {
            let ranks: Vec<usize> = outcomes
                .iter()
                .filter_map(|o| if let Outcome::Rank(r) = o { Some(*r) } else { None })
                .collect();
            let (hr5, ndcg5) = hit_ndcg(&ranks, 5)?;
            let (hr10, ndcg10) = hit_ndcg(&ranks, 10)?;
            Ok(FamilyMetrics::Ranking(RankingMetrics {
                hr5,
                hr10,
                ndcg5,
                ndcg10,
                n: ranks.len(),
            }))
        }
        Family::Explanation | Family::Summarization => {
            let (mut h, mut r) = (Vec::new(), Vec::new());
            for o in outcomes {
                if let Outcome::Text { hyp, reference } = o {
                    h.push(hyp.clone());
                    r.push(reference.clone());
                }
            }
            Ok(FamilyMetrics::Text(text_metrics(&h, &r, bleu_order(family))?))
        }
    }
}

/// Templates of `split` for `family`, subsampled per the options.
pub fn split_templates(
    registry: &[PromptTemplate],
    family: Family,
    split: PromptSplit,
    limit: Option<usize>,
    seed: u64,
) -> Result<Vec<PromptTemplate>, EvalError> {
    let mut pool: Vec<PromptTemplate> = registry
        .iter()
        .filter(|t| t.family == family && t.split == Some(split))
        .cloned()
        .collect();
    if pool.is_empty() {
        return Err(EvalError::MissingSplit { split, family });
    }
    if let Some(n) = limit {
        if n < pool.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[family.index() as u64, 7]));
            pool.shuffle(&mut rng);
            pool.truncate(n);
            pool.sort_by(|a, b| a.id.cmp(&b.id));
        }
    }
    Ok(pool)
}

/// Runs the requested families on each user's held-out interaction, once
/// per prompt of `split`.
pub fn evaluate(
    model: &ControlRec,
    catalog: &Catalog,
    registry: &[PromptTemplate],
    split: PromptSplit,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let vocab = build_vocab(catalog, registry);
    if vocab.len() != model.config().vocab_size {
        return Err(EvalError::VocabMismatch {
            model: model.config().vocab_size,
            corpus: vocab.len(),
        });
    }
    let ctx = Ctx {
        model,
        catalog,
        vocab: &vocab,
        opts,
    };
    let ex_opts = ExampleOptions {
        holdout: Holdout::OnlyLast,
        seed: opts.seed,
        ..opts.example.clone()
    };
    let mut report = EvalReport {
        split,
        seed: opts.seed,
        rating: None,
        sequential: None,
        direct: None,
        explanation: None,
        summarization: None,
        prompt_ids: Vec::new(),
        per_prompt: Vec::new(),
    };
    let mut families = opts.families.clone();
    families.sort_by_key(|f| f.index());
    families.dedup();
    for family in families {
        let templates = split_templates(registry, family, split, opts.prompts_per_family, opts.seed)?;
        let mut pooled = Vec::new();
        for t in &templates {
            let set = make_examples(catalog, family, std::slice::from_ref(t), &vocab, &ex_opts)?;
            let outcomes = par_map(&set.examples, opts.threads, |x| run_example(&ctx, x))
                .into_iter()
                .collect::<Result<Vec<_>, _>>()?;
            report.per_prompt.push(PromptResult {
                family,
                template: t.id.clone(),
                metrics: reduce(family, &outcomes)?,
            });
            report.prompt_ids.push(t.id.clone());
            pooled.extend(outcomes);
        }
        let m = reduce(family, &pooled)?;
        match (family, m) {
            (Family::Rating, FamilyMetrics::Rating(r)) => report.rating = Some(r),
            (Family::Sequential, FamilyMetrics::Ranking(r)) => report.sequential = Some(r),
            (Family::Direct, FamilyMetrics::Ranking(r)) => report.direct = Some(r),
            (Family::Explanation, FamilyMetrics::Text(r)) => report.explanation = Some(r),
            (Family::Summarization, FamilyMetrics::Text(r)) => report.summarization = Some(r),
            _ => unreachable!("reduce returns the family's metric kind"),
        }
    }
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests;
