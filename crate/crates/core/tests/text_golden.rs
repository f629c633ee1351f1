use controlrec::eval::{rouge_n, text_metrics};
use serde::Deserialize;

#[derive(Deserialize)]
struct Pair {
    hyp: String,
    #[serde(rename = "ref")]
    reference: String,
}

#[derive(Deserialize)]
struct Golden {
    pairs: Vec<Pair>,
    rouge1: Vec<f64>,
    rouge2: Vec<f64>,
    mean_rouge1: f64,
    mean_rouge2: f64,
    bleu4: f64,
    bleu2: f64,
}

const TOL: f64 = 1e-9;

fn golden() -> Golden {
    serde_json::from_str(include_str!("data/text_golden.json")).unwrap()
}

fn split(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn per_pair_rouge_matches_golden() {
    let g = golden();
    assert_eq!(g.pairs.len(), 10);
    for (i, p) in g.pairs.iter().enumerate() {
        let (h, r) = (split(&p.hyp), split(&p.reference));
        assert!((rouge_n(&h, &r, 1) - g.rouge1[i]).abs() < TOL, "pair {i} rouge1");
        assert!((rouge_n(&h, &r, 2) - g.rouge2[i]).abs() < TOL, "pair {i} rouge2");
    }
}

#[test]
fn corpus_metrics_match_golden() {
    let g = golden();
    let hyps: Vec<Vec<String>> = g.pairs.iter().map(|p| split(&p.hyp)).collect();
    let refs: Vec<Vec<String>> = g.pairs.iter().map(|p| split(&p.reference)).collect();
    let m4 = text_metrics(&hyps, &refs, 4).unwrap();
    let m2 = text_metrics(&hyps, &refs, 2).unwrap();
    assert!((m4.bleu - g.bleu4).abs() < TOL, "{} vs {}", m4.bleu, g.bleu4);
    assert!((m2.bleu - g.bleu2).abs() < TOL, "{} vs {}", m2.bleu, g.bleu2);
    assert!((m4.rouge1 - g.mean_rouge1).abs() < TOL);
    assert!((m4.rouge2 - g.mean_rouge2).abs() < TOL);
    assert_eq!(m4.skipped, 0);
}
