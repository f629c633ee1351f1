use super::EvalError;
use crate::autodiff::{Graph, Tensor};
use crate::data::{IdMode, Vocab};
use crate::model::{special, ControlRec, Token, Visibility};
use crate::train::IdView;

/// `Σ_j log softmax(logits_j)[target_j]`.
pub fn sequence_log_likelihood(logits: &Tensor, target: &[Token]) -> f64 {
    let mut total = 0.0;
    for (j, &t) in target.iter().enumerate() {
        let row = logits.row(j);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += row[t as usize] - lse;
    }
    total
}

/// Log-likelihood of each target sequence given one encoded input; the
/// encoders run once.
pub fn score_targets(
    model: &ControlRec,
    id: &IdView,
    nl: &[Token],
    targets: &[Vec<Token>],
) -> Result<Vec<f64>, EvalError> {
    let mut g = Graph::new();
    let pv = model.bind(&mut g, false);
    let ide = model.encode_id_in(&mut g, &pv, &id.tokens, Visibility::Matrix(&id.mask))?;
    let nle = model.encode_nl_in(&mut g, &pv, nl)?;
    let mem = model.memory_in(&mut g, &ide, &nle)?;
    targets
        .iter()
        .map(|t| {
            let (_, logits) = model.decode_teacher_forced_in(&mut g, &pv, mem, t)?;
            Ok(sequence_log_likelihood(g.value(logits), t))
        })
        .collect()
}

/// Sorts `(id, score)` by descending score, lower id first on ties.
pub fn sort_scored(scored: &mut [(u32, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Candidates ordered by the log-likelihood of their item tokens followed
/// by `<eos>`.
pub fn rank_candidates(
    model: &ControlRec,
    id: &IdView,
    nl: &[Token],
    candidates: &[u32],
    gold: u32,
    vocab: &Vocab,
    mode: IdMode,
) -> Result<Vec<(u32, f64)>, EvalError> {
    if candidates.len() < 2 {
        return Err(EvalError::Empty("candidate list (need at least two)"));
    }
    if !candidates.contains(&gold) {
        return Err(EvalError::GoldAbsent(0));
    }
    let targets: Vec<Vec<Token>> = candidates
        .iter()
        .map(|&c| {
            let mut t = vocab.item_tokens(c, mode);
            t.push(special::EOS);
            t
        })
        .collect();
    let scores = score_targets(model, id, nl, &targets)?;
    let mut scored: Vec<(u32, f64)> = candidates.iter().copied().zip(scores).collect();
    sort_scored(&mut scored);
    Ok(scored)
}
