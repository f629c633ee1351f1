use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::autodiff::Graph;
use crate::data::{
    derive_seed, sample_hfm_candidates, Catalog, ExampleOptions, Family, HfmPositive, PromptTemplate, TrainingExample,
    Vocab,
};
use crate::model::{ControlRec, Visibility};
use crate::objectives::dot;
use crate::train::{instruction_states, FeatureViews, IclMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchTask {
    /// Item ID against item descriptions.
    Item,
    /// User history against descriptions of the next item.
    Next,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalStats {
    pub trials: usize,
    /// Fraction of trials where the ID anchor scores its own description
    /// strictly above every negative description.
    pub id_to_nl: f64,
    /// The same for a description anchor over ID candidates.
    pub nl_to_id: f64,
}

/// Index of the unique maximum, if there is one.
fn strict_argmax(scores: &[f64]) -> Option<usize> {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    let unique = scores.iter().enumerate().all(|(i, &s)| i == best || s < scores[best]);
    unique.then_some(best)
}

fn cls_vectors(
    model: &ControlRec,
    ids: &[crate::train::IdView],
    nls: &[Vec<u32>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), EvalError> {
    let id = ids
        .iter()
        .map(|v| {
            Ok(model
                .encode_id(&v.tokens, Visibility::Matrix(&v.mask))?
                .cls
                .values()
                .to_vec())
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let nl = nls
        .iter()
        .map(|t| Ok(model.encode_nl(t)?.cls.values().to_vec()))
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok((id, nl))
}

/// Positive-first rate of feature matching over freshly sampled candidate
/// sets of `k` negatives.
pub fn hfm_retrieval(
    model: &ControlRec,
    catalog: &Catalog,
    views: &FeatureViews,
    task: MatchTask,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<RetrievalStats, EvalError> {
    if trials == 0 {
        return Err(EvalError::Empty("retrieval trials"));
    }
    let (id, nl) = match task {
        MatchTask::Item => cls_vectors(model, &views.item_id, &views.item_nl)?,
        MatchTask::Next => cls_vectors(model, &views.history, &views.next_nl)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b) = (0usize, 0usize);
    for t in 0..trials {
        let s = derive_seed(seed, &[t as u64]);
        let (id_pos, nl_pos, c) = match task {
            MatchTask::Item => {
                let item = rng.random_range(0..catalog.n_items());
                (
                    item,
                    item,
                    sample_hfm_candidates(catalog, HfmPositive::Item(item as u32), k, s)?,
                )
            }
            MatchTask::Next => {
                let user = rng.random_range(0..views.history.len());
                let positive = HfmPositive::Sequence {
                    user,
                    next_items: &views.next_items,
                };
                (
                    user,
                    views.next_items[user] as usize,
                    sample_hfm_candidates(catalog, positive, k, s)?,
                )
            }
        };
        let (nl_order, nl_slot) = c.nl.ordered();
        let scores: Vec<f64> = nl_order
            .iter()
            .map(|&i| dot(&id[id_pos], &nl[i]))
            .collect::<Result<_, _>>()?;
        a += usize::from(strict_argmax(&scores) == Some(nl_slot));
        let (id_order, id_slot) = c.id.ordered();
        let scores: Vec<f64> = id_order
            .iter()
            .map(|&i| dot(&nl[nl_pos], &id[i]))
            .collect::<Result<_, _>>()?;
        b += usize::from(strict_argmax(&scores) == Some(id_slot));
    }
    Ok(RetrievalStats {
        trials,
        id_to_nl: a as f64 / trials as f64,
        nl_to_id: b as f64 / trials as f64,
    })
}

/// Fraction of `cases` in which the same-group candidate instruction has
/// the highest pooled-state similarity to the target instruction.
///
/// Cases cycle through the families; each draws an example from
/// `examples`, a target from that family's templates in `templates`, and
/// `m` other-group negatives.
#[allow(clippy::too_many_arguments)]
pub fn icl_discrimination(
    model: &ControlRec,
    vocab: &Vocab,
    opts: &ExampleOptions,
    examples: &[TrainingExample],
    templates: &[PromptTemplate],
    m: usize,
    cases: usize,
    seed: u64,
    mode: IclMode,
) -> Result<f64, EvalError> {
    if cases == 0 {
        return Err(EvalError::Empty("contrast cases"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    for c in 0..cases {
        let f = Family::ALL[c % Family::ALL.len()];
        let pool: Vec<&TrainingExample> = examples.iter().filter(|x| x.family == f).collect();
        let tpl: Vec<PromptTemplate> = templates.iter().filter(|t| t.family == f).cloned().collect();
        if pool.is_empty() || tpl.is_empty() {
            return Err(EvalError::Empty("examples or templates for a family"));
        }
        let x = pool[rng.random_range(0..pool.len())];
        let target = rng.random_range(0..tpl.len());
        let mut g = Graph::new();
        let pv = model.bind(&mut g, false);
        let s = derive_seed(seed, &[c as u64]);
        let (pooled, positive) = instruction_states(model, &mut g, &pv, &tpl, vocab, opts, x, target, m, s, mode)?;
        let anchor = g.value(pooled[0]).values().to_vec();
        let sims: Vec<f64> = pooled[1..]
            .iter()
            .map(|&v| dot(&anchor, g.value(v).values()))
            .collect::<Result<_, _>>()?;
        hits += usize::from(strict_argmax(&sims) == Some(positive));
    }
    Ok(hits as f64 / cases as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_argmax_rejects_ties() {
        assert_eq!(strict_argmax(&[0.1, 0.5, 0.2]), Some(1));
        assert_eq!(strict_argmax(&[0.5, 0.5, 0.2]), None);
        assert_eq!(strict_argmax(&[3.0]), Some(0));
    }
}
