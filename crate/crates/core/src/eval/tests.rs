use super::*;
use crate::data::{default_triggers, generate_catalog, split_prompts, CatalogConfig, IdInput, Origin};
use crate::model::ModelConfig;
use rand::Rng;

fn registry() -> Vec<PromptTemplate> {
    let mut t = Vec::new();
    for x in default_triggers() {
        for (n, prefix) in ["", "Please: ", "Now: "].iter().enumerate() {
            let mut y = x.clone();
            if n > 0 {
                y.id = format!("{}v{n}", x.id);
                y.text = format!("{prefix}{}", x.text);
                y.origin = Origin::Generated;
            }
            t.push(y);
        }
    }
    split_prompts(&t, 4, 2, 0).unwrap()
}

fn setup() -> (Catalog, Vec<PromptTemplate>, ControlRec) {
    let catalog = generate_catalog(
        &CatalogConfig {
            n_users: 6,
            n_items: 20,
            interactions_per_user: 5,
            ..CatalogConfig::default()
        },
        2,
    )
    .unwrap();
    let reg = registry();
    let vocab = build_vocab(&catalog, &reg);
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        max_target_len: 8,
        ..ModelConfig::toy(vocab.len())
    };
    let model = ControlRec::new(cfg, 3).unwrap();
    (catalog, reg, model)
}

fn opts() -> EvalOptions {
    EvalOptions {
        prompts_per_family: Some(2),
        example: ExampleOptions {
            max_target_len: 8,
            ..ExampleOptions::default()
        },
        ..EvalOptions::default()
    }
}

#[test]
fn brute_force_ranking_agrees() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let lists = rng.random_range(1..6);
        let mut ranked = Vec::new();
        let mut golds = Vec::new();
        let mut brute_ranks = Vec::new();
        for _ in 0..lists {
            let n = rng.random_range(2..=12);
            let mut scored: Vec<(u32, f64)> = (0..n).map(|i| (i as u32, rng.random_range(0..4) as f64)).collect();
            let gold = rng.random_range(0..n) as u32;
            let gs = scored[gold as usize].1;
            // rank by counting everything that beats the gold
            let beaten = scored
                .iter()
                .filter(|(i, s)| *s > gs || (*s == gs && *i < gold))
                .count();
            brute_ranks.push(beaten + 1);
            sort_scored(&mut scored);
            ranked.push(scored.iter().map(|x| x.0).collect::<Vec<_>>());
            golds.push(gold);
        }
        let m = ranking_metrics(&ranked, &golds).unwrap();
        for (k, hr, nd) in [(5, m.hr5, m.ndcg5), (10, m.hr10, m.ndcg10)] {
            let (mut h, mut d) = (0.0, 0.0);
            for &r in &brute_ranks {
                if r <= k {
                    h += 1.0;
                    d += 1.0 / ((r + 1) as f64).log2();
                }
            }
            assert_eq!(hr, h / lists as f64);
            assert_eq!(nd, d / lists as f64);
        }
    }
}

#[test]
fn zeroshot_uses_only_zeroshot_templates() {
    let (c, reg, model) = setup();
    let r = evaluate(&model, &c, &reg, PromptSplit::Zeroshot, &opts()).unwrap();
    assert!(!r.prompt_ids.is_empty());
    for id in &r.prompt_ids {
        let t = reg.iter().find(|t| &t.id == id).unwrap();
        assert_eq!(t.split, Some(PromptSplit::Zeroshot));
    }
    assert_eq!(r.per_prompt.len(), 10);
    r.validate().unwrap();
    let s = evaluate(&model, &c, &reg, PromptSplit::Seen, &opts()).unwrap();
    assert!(s.prompt_ids.iter().all(|id| !r.prompt_ids.contains(id)));
}

#[test]
fn reports_are_deterministic_and_serialize() {
    let (c, reg, model) = setup();
    let a = evaluate(&model, &c, &reg, PromptSplit::Seen, &opts()).unwrap();
    let single = EvalOptions { threads: 1, ..opts() };
    let b = evaluate(&model, &c, &reg, PromptSplit::Seen, &single).unwrap();
    assert_eq!(a, b);
    let mut buf = Vec::new();
    a.write_jsonl(&mut buf).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), a.per_prompt.len() + 1);
    let summary = lines.last().unwrap();
    assert_eq!(summary["record"], "summary");
    assert_eq!(summary["split"], "seen");
    for f in ["rating", "sequential", "direct", "explanation", "summarization"] {
        assert!(summary[f].is_object(), "{f}");
    }
    assert_eq!(a.sequential.unwrap().n, 12);
    assert_eq!(a.summarization.unwrap().bleu_order, 2);
    assert_eq!(a.explanation.unwrap().bleu_order, 4);
}

#[test]
fn missing_split_and_vocab_mismatch() {
    let (c, reg, model) = setup();
    let seen_only: Vec<PromptTemplate> = reg
        .iter()
        .filter(|t| t.split != Some(PromptSplit::Zeroshot))
        .cloned()
        .collect();
    // dropping templates can shrink the vocabulary, so check the split first
    let err = split_templates(&seen_only, Family::Rating, PromptSplit::Zeroshot, None, 0).unwrap_err();
    assert!(matches!(err, EvalError::MissingSplit { .. }));
    let mut other = c.clone();
    other.items[0].description.push_str(" brand-new-word");
    assert!(matches!(
        evaluate(&model, &other, &reg, PromptSplit::Seen, &opts()),
        Err(EvalError::VocabMismatch { .. })
    ));
}

#[test]
fn random_model_ranks_gold_uniformly() {
    let (c, reg, model) = setup();
    let vocab = build_vocab(&c, &reg);
    let nl = crate::data::nl_input(&vocab, "which item next for user_1 ?", IdMode::IdAtomic, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 1000;
    let mut total = 0usize;
    for _ in 0..trials {
        let user = rng.random_range(0..c.n_users());
        let hist: Vec<u32> = c.interactions[user].iter().take(3).map(|x| x.item).collect();
        let id = IdView::new(&IdInput::user_items(&vocab, user, &hist, IdMode::IdAtomic, 32)).unwrap();
        let cands: Vec<u32> = index::sample(&mut rng, c.n_items(), 10)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        let gold = cands[rng.random_range(0..10)];
        let ranked = rank_candidates(&model, &id, &nl, &cands, gold, &vocab, IdMode::IdAtomic).unwrap();
        total += ranked.iter().position(|x| x.0 == gold).unwrap() + 1;
    }
    let mean = total as f64 / trials as f64;
    assert!((mean - 5.5).abs() <= 0.5, "mean rank {mean}");
}

#[test]
fn rank_rejects_bad_lists() {
    let (c, reg, model) = setup();
    let vocab = build_vocab(&c, &reg);
    let id = IdView::new(&IdInput::item(&vocab, 0, IdMode::IdAtomic)).unwrap();
    let nl = vec![crate::model::special::CLS];
    assert!(rank_candidates(&model, &id, &nl, &[1, 2], 3, &vocab, IdMode::IdAtomic).is_err());
    assert!(rank_candidates(&model, &id, &nl, &[1], 1, &vocab, IdMode::IdAtomic).is_err());
}
