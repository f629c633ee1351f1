//! Self-checks of the gradient engine, attention masking, losses, schedules
//! and metrics. Each check is named after the invariant it guards.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_registry, OfflineSource};
use crate::autodiff::{finite_diff_check, FiniteDiff, GradCheckReport, Graph, Primitive, Tensor, TensorError, Var};
use crate::data::{default_triggers, generate_catalog, split_prompts, CatalogConfig, ExampleOptions};
use crate::eval::{ranking_metrics, rating_metrics, rouge_n, sort_scored, text_metrics};
use crate::model::{
    build_visible_matrix, special, ControlRec, ModelConfig, ParamVars, Span, SpanLabel, Token, Visibility,
};
use crate::objectives::{
    contrastive_nll_var, hfm_pair_loss_from_scores, icl_loss, icl_loss_from_scores, lambda3_schedule,
};
use crate::train::{lr_at, TrainConfig, Trainer, TrainingSet};

/// Largest relative gradient error tolerated by the gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Tolerance of the closed-form loss and golden-file comparisons.
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &str, f: impl FnOnce() -> Result<String, String>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape and data agree")
}

/// `Σ c ⊙ y` for a fixed random `c`, so every output coordinate matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.value(y).shape().to_vec();
    let c = uniform(&mut ChaCha8Rng::seed_from_u64(seed), &shape, -1.0, 1.0);
    let c = g.constant(c);
    let p = g.mul(y, c)?;
    g.sum(p)
}

type Case = (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>>);

/// A small loss exercising `p`, with its parameter values. Every case
/// except the ones for `Sum` and `Mul` reduces through [`project`].
fn primitive_case(p: Primitive, rng: &mut ChaCha8Rng) -> Case {
    let mut u = |shape: &[usize], lo: f64, hi: f64| uniform(rng, shape, lo, hi);
    match p {
        Primitive::Sum => (vec![u(&[2, 3], -1.0, 1.0)], Box::new(|g, v| g.sum(v[0]))),
        Primitive::Mul => (
            vec![u(&[2, 3], -1.0, 1.0), u(&[2, 3], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[1])?;
                g.sum(y)
            }),
        ),
        Primitive::MatMul => (
            vec![u(&[2, 3], -1.0, 1.0), u(&[3, 4], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, 1)
            }),
        ),
        Primitive::Add => (
            vec![u(&[3, 2], -1.0, 1.0), u(&[3, 2], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, 2)
            }),
        ),
        Primitive::Sub => (
            vec![u(&[3, 2], -1.0, 1.0), u(&[3, 2], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.sub(v[0], v[1])?;
                project(g, y, 3)
            }),
        ),
        Primitive::Scale => (
            vec![u(&[4], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.scale(v[0], -1.7)?;
                project(g, y, 4)
            }),
        ),
        Primitive::Exp => (
            vec![u(&[2, 2], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.exp(v[0])?;
                project(g, y, 5)
            }),
        ),
        Primitive::Log => (
            vec![u(&[2, 2], 0.5, 2.0)],
            Box::new(|g, v| {
                let y = g.log(v[0])?;
                project(g, y, 6)
            }),
        ),
        Primitive::Tanh => (
            vec![u(&[5], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.tanh(v[0])?;
                project(g, y, 7)
            }),
        ),
        Primitive::Gelu => (
            vec![u(&[6], -3.0, 3.0)],
            Box::new(|g, v| {
                let y = g.gelu(v[0])?;
                project(g, y, 8)
            }),
        ),
        Primitive::MeanAxis => (
            vec![u(&[3, 4], -1.0, 1.0)],
            Box::new(|g, v| {
                let a = g.mean_axis(v[0], 0)?;
                let b = g.mean_axis(v[0], 1)?;
                let a = project(g, a, 9)?;
                let b = project(g, b, 10)?;
                g.add(a, b)
            }),
        ),
        Primitive::Transpose => (
            vec![u(&[2, 3], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.transpose(v[0])?;
                project(g, y, 11)
            }),
        ),
        Primitive::Reshape => (
            vec![u(&[2, 3], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.reshape(v[0], vec![3, 2])?;
                project(g, y, 12)
            }),
        ),
        Primitive::LayerNorm => (
            vec![u(&[3, 4], -1.0, 1.0), u(&[4], 0.5, 1.5), u(&[4], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(g, y, 13)
            }),
        ),
        Primitive::Embedding => (
            vec![u(&[5, 3], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.embedding(v[0], &[4, 0, 4, 2])?;
                project(g, y, 14)
            }),
        ),
        Primitive::ConcatRows => (
            vec![u(&[1, 3], -1.0, 1.0), u(&[2, 3], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.concat_rows(&[v[0], v[1]])?;
                project(g, y, 15)
            }),
        ),
        Primitive::ConcatCols => (
            vec![u(&[2, 1], -1.0, 1.0), u(&[2, 3], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.concat_cols(&[v[0], v[1]])?;
                project(g, y, 16)
            }),
        ),
        Primitive::SliceRows => (
            vec![u(&[4, 2], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.slice_rows(v[0], 1, 2)?;
                project(g, y, 17)
            }),
        ),
        Primitive::SliceCols => (
            vec![u(&[2, 5], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.slice_cols(v[0], 1, 3)?;
                project(g, y, 18)
            }),
        ),
        Primitive::MaskedSoftmax => (
            vec![u(&[3, 4], -1.0, 1.0)],
            Box::new(|g, v| {
                let mask: Vec<bool> = (0..12).map(|i| i % 4 <= i / 4).collect();
                let y = g.masked_softmax(v[0], &mask)?;
                project(g, y, 19)
            }),
        ),
        Primitive::CrossEntropy => (
            vec![u(&[3, 5], -2.0, 2.0)],
            Box::new(|g, v| {
                let y = g.cross_entropy(v[0], &[1, 4, 0], Some(0))?;
                project(g, y, 20)
            }),
        ),
    }
}

/// Primitives in check order: the reductions other cases rely on first.
pub fn primitive_order() -> Vec<Primitive> {
    let mut out = vec![Primitive::Sum, Primitive::Mul];
    out.extend(
        Primitive::ALL
            .iter()
            .filter(|p| !matches!(p, Primitive::Sum | Primitive::Mul)),
    );
    out
}

/// Finite-difference check of every backward rule, in [`primitive_order`].
pub fn primitive_gradients(seed: u64) -> Result<Vec<(Primitive, GradCheckReport)>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitive_order()
        .into_iter()
        .map(|p| {
            let (params, f) = primitive_case(p, &mut rng);
            let report = finite_diff_check(|g: &mut Graph, v: &[Var]| f(g, v), &params, &FiniteDiff::default())?;
            Ok((p, report))
        })
        .collect()
}

/// Finite-difference check of the full training objective with
/// `lambda3 = 1`, K=3, M=2 and a 2-layer width-16 network.
pub fn composed_gradient(seed: u64) -> Result<GradCheckReport, String> {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let catalog = generate_catalog(
        &CatalogConfig {
            n_users: 5,
            n_items: 12,
            interactions_per_user: 4,
            hfm_negatives: 3,
            ..CatalogConfig::default()
        },
        seed,
    )
    .map_err(|e| err(&e))?;
    let reg = build_registry(&default_triggers(), 4, &mut OfflineSource, seed).map_err(|e| err(&e))?;
    let reg = split_prompts(&reg, 3, 1, seed).map_err(|e| err(&e))?;
    let opts = ExampleOptions {
        max_target_len: 6,
        direct_candidates: 5,
        ..ExampleOptions::default()
    };
    let data = TrainingSet::new(catalog, &reg, opts).map_err(|e| err(&e))?;
    let cfg = TrainConfig {
        total_steps: 1,
        batch_size: 2,
        hfm_pairs: 1,
        icl_examples: 1,
        k: 3,
        m: 2,
        seed,
        ..TrainConfig::default()
    };
    let model = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        max_target_len: 6,
        ..ModelConfig::toy(0)
    };
    let trainer = Trainer::new(cfg, model, data).map_err(|e| err(&e))?;
    let params = trainer.model().params().tensors().to_vec();
    let fd = FiniteDiff {
        max_coords_per_tensor: Some(3),
        seed,
        ..FiniteDiff::default()
    };
    finite_diff_check(
        |g: &mut Graph, v: &[Var]| -> Result<Var, TensorError> {
            let pv = ParamVars::from_vars(v.to_vec());
            trainer
                .objective(g, &pv, 0, 1.0)
                .map_err(|e| TensorError::InvalidArgument(e.to_string()))
        },
        &params,
        &fd,
    )
    .map_err(|e| err(&e))
}

/// Gradient correctness: every primitive, then the composed objective.
pub fn check_gradients(seed: u64) -> CheckResult {
    timed("gradient correctness", || {
        let reports = primitive_gradients(seed).map_err(|e| e.to_string())?;
        let failing: Vec<&(Primitive, GradCheckReport)> = reports
            .iter()
            .filter(|(_, r)| !(r.max_rel_error < GRAD_TOLERANCE))
            .collect();
        if let Some((p, r)) = failing.first() {
            let others: Vec<String> = failing[1..].iter().map(|(p, _)| format!("{p:?}")).collect();
            return Err(format!(
                "backward rule of {p:?} is wrong: max relative error {:.3e}{}",
                r.max_rel_error,
                if others.is_empty() {
                    String::new()
                } else {
                    format!(" (downstream failures: {})", others.join(", "))
                }
            ));
        }
        let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
        let total = composed_gradient(seed)?;
        if !(total.max_rel_error < GRAD_TOLERANCE) {
            return Err(format!(
                "composed objective: max relative error {:.3e} at {:?}",
                total.max_rel_error, total.worst
            ));
        }
        Ok(format!(
            "{} primitives (max rel err {worst:.2e}); objective over {} coordinates (max rel err {:.2e})",
            reports.len(),
            total.coords_checked,
            total.max_rel_error
        ))
    })
}

fn tiny_model(layers: usize, seed: u64) -> ControlRec {
    let cfg = ModelConfig {
        n_layers: layers,
        d_model: 16,
        n_heads: 2,
        vocab_size: 40,
        max_id_len: 16,
        max_nl_len: 16,
        max_target_len: 4,
        ff_mult: 2,
    };
    ControlRec::new(cfg, seed).expect("valid tiny config")
}

/// A random `<cls> user item+` sequence: 2–4 items of 1–3 subtokens.
fn random_id_sequence(rng: &mut ChaCha8Rng, vocab: usize) -> (Vec<Token>, Vec<Span>) {
    let mut spans = vec![Span::new(SpanLabel::Cls, 0, 1), Span::new(SpanLabel::User, 1, 1)];
    let mut pos = 2;
    for _ in 0..rng.random_range(2..=4) {
        let len = rng.random_range(1..=3);
        spans.push(Span::new(SpanLabel::Item, pos, len));
        pos += len;
    }
    let mut tokens = vec![special::CLS];
    tokens.extend((1..pos).map(|_| rng.random_range(4..vocab as Token)));
    (tokens, spans)
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Mask exactness: tokens outside the `n_layers`-hop visible region of a
/// position never change its output, and masked pairs get zero attention.
pub fn check_masking(cases: usize, seed: u64) -> CheckResult {
    timed("mask exactness", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let models = [tiny_model(1, seed), tiny_model(2, seed)];
        let mut perturbed = 0;
        for case in 0..cases {
            let model = &models[case % 2];
            let layers = model.config().n_layers;
            let vocab = model.config().vocab_size;
            let (tokens, spans) = random_id_sequence(&mut rng, vocab);
            let vm = build_visible_matrix(&spans).map_err(|e| e.to_string())?;
            let mut g = Graph::new();
            let pv = model.bind(&mut g, false);
            let (enc, trace) = model
                .encode_id_traced(&mut g, &pv, &tokens, Visibility::Matrix(&vm))
                .map_err(|e| e.to_string())?;
            let n = tokens.len();
            for &probs in &trace {
                let values = g.value(probs).values();
                for (i, &v) in values.iter().enumerate() {
                    if !vm.is_visible(i / n, i % n) && v != 0.0 {
                        return Err(format!(
                            "case {case}: masked pair ({}, {}) has attention {v}",
                            i / n,
                            i % n
                        ));
                    }
                }
            }
            let base = g.value(enc.states).clone();
            let p = rng.random_range(0..n);
            let reach = vm.reachable(p, layers);
            for q in (0..n).filter(|&q| !reach[q]) {
                let mut changed = tokens.clone();
                changed[q] = if changed[q] == 4 { 5 } else { 4 };
                let out = model
                    .encode_id(&changed, Visibility::Matrix(&vm))
                    .map_err(|e| e.to_string())?;
                if bits(out.states.row(p)) != bits(base.row(p)) {
                    return Err(format!("case {case}: changing position {q} altered row {p}"));
                }
                perturbed += 1;
            }
        }
        Ok(format!("{cases} sequences, {perturbed} invisible perturbations"))
    })
}

/// Shared-encoder identity: full-visibility ID encoding equals NL encoding.
pub fn check_shared_encoder(cases: usize, seed: u64) -> CheckResult {
    timed("shared encoder identity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = tiny_model(2, seed);
        for case in 0..cases {
            let n = rng.random_range(1..=16);
            let tokens: Vec<Token> = (0..n).map(|_| rng.random_range(0..40)).collect();
            let a = model.encode_id(&tokens, Visibility::Full).map_err(|e| e.to_string())?;
            let b = model.encode_nl(&tokens).map_err(|e| e.to_string())?;
            if bits(a.states.values()) != bits(b.states.values()) {
                return Err(format!("case {case}: encoder outputs differ"));
            }
        }
        Ok(format!("{cases} sequences bit-identical"))
    })
}

fn graph_icl(scores: &[f64], positive: usize, tau: f64) -> Result<f64, String> {
    // unit anchor, so each candidate's score is its first coordinate
    let mut g = Graph::new();
    let anchor = g.constant(Tensor::new(vec![2], vec![1.0, 0.0]).map_err(|e| e.to_string())?);
    let rows: Vec<Var> = scores
        .iter()
        .map(|&s| Ok(g.constant(Tensor::new(vec![2], vec![s, 0.3]).map_err(|e| e.to_string())?)))
        .collect::<Result<_, String>>()?;
    let l = icl_loss(&mut g, anchor, &rows, positive, tau).map_err(|e| e.to_string())?;
    let nll = contrastive_nll_var(&mut g, anchor, &rows, positive, tau).map_err(|e| e.to_string())?;
    let (l, nll) = (g.value(l).values()[0], g.value(nll).values()[0]);
    if (l * scores.len() as f64 - nll).abs() > CLOSED_FORM_TOLERANCE {
        return Err("graph instruction loss is not the set-size-scaled cross entropy".into());
    }
    Ok(l)
}

/// Contrastive closed forms at uniform scores and the large-margin limit.
pub fn check_closed_forms() -> CheckResult {
    timed("contrastive closed forms", || {
        let tau = crate::objectives::DEFAULT_TEMPERATURE;
        let close = |a: f64, b: f64, what: &str| {
            if (a - b).abs() <= CLOSED_FORM_TOLERANCE {
                Ok(())
            } else {
                Err(format!("{what}: {a} vs {b}"))
            }
        };
        for k in [2usize, 5, 10] {
            let s = vec![0.4; k + 1];
            let l = hfm_pair_loss_from_scores(&s, 0, &s, k, tau).map_err(|e| e.to_string())?;
            close(
                l,
                2.0 * ((k + 1) as f64).ln() / (k + 1) as f64,
                &format!("uniform HFM, K={k}"),
            )?;
        }
        for m in [2usize, 5] {
            let s = vec![-0.2; m + 1];
            let expect = ((m + 1) as f64).ln() / (m + 1) as f64;
            close(
                icl_loss_from_scores(&s, 1, tau).map_err(|e| e.to_string())?,
                expect,
                &format!("uniform ICL, M={m}"),
            )?;
            close(
                graph_icl(&s, 1, tau)?,
                expect,
                &format!("uniform ICL graph route, M={m}"),
            )?;
        }
        let (mut prev_h, mut prev_i) = (f64::INFINITY, f64::INFINITY);
        for step in 1..=10 {
            let margin = 2.0 * step as f64;
            let mut s = vec![0.0; 11];
            s[3] = margin;
            let h = hfm_pair_loss_from_scores(&s, 3, &s, 3, tau).map_err(|e| e.to_string())?;
            let i = icl_loss_from_scores(&s[..6], 3, tau).map_err(|e| e.to_string())?;
            if !(h < prev_h && i < prev_i) && !(h == 0.0 && i == 0.0) {
                return Err(format!("losses not decreasing at margin {margin}: {h}, {i}"));
            }
            (prev_h, prev_i) = (h, i);
        }
        if prev_h > CLOSED_FORM_TOLERANCE || prev_i > CLOSED_FORM_TOLERANCE {
            return Err(format!("losses at margin 20 are {prev_h}, {prev_i}"));
        }
        Ok("uniform values and margin limit hold".into())
    })
}

/// Schedule endpoints of the instruction-contrast weight and the LR.
pub fn check_schedules(seed: u64) -> CheckResult {
    timed("schedule endpoints", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let init: f64 = rng.random_range(0.0..=1.0);
            let t: u64 = rng.random_range(1..=100_000);
            let a = lambda3_schedule(0, t, init).map_err(|e| e.to_string())?;
            let b = lambda3_schedule(t, t, init).map_err(|e| e.to_string())?;
            if a != init || b != 1.0 {
                return Err(format!("lambda3 endpoints for ({init}, {t}) are {a}, {b}"));
            }
        }
        let totals = [300u64, 20, 1000, rng.random_range(2..50_000)];
        for total in totals {
            let cfg = TrainConfig {
                total_steps: total,
                ..TrainConfig::default()
            };
            let w = cfg.warmup_steps();
            let got = [0, w, total].map(|s| lr_at(s, &cfg).map_err(|e| e.to_string()));
            let got = [got[0].clone()?, got[1].clone()?, got[2].clone()?];
            if got != [0.0, cfg.peak_lr, cfg.floor_lr] {
                return Err(format!("lr anchors for T={total} are {got:?}"));
            }
        }
        Ok("lambda3 over 20 draws; lr anchors at 4 horizons".into())
    })
}

/// Rank of `gold` counted directly: one plus the candidates that beat it.
fn brute_rank(scored: &[(u32, f64)], gold: u32) -> usize {
    let gs = scored.iter().find(|x| x.0 == gold).map_or(f64::NAN, |x| x.1);
    1 + scored
        .iter()
        .filter(|(i, s)| *s > gs || (*s == gs && *i < gold))
        .count()
}

pub fn ranking_oracle(instances: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..instances {
        let lists = rng.random_range(1..6);
        let (mut ranked, mut golds, mut ranks) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..lists {
            let n = rng.random_range(2..=12);
            let mut scored: Vec<(u32, f64)> = (0..n)
                .map(|i| (i as u32, f64::from(rng.random_range(0..4u8))))
                .collect();
            let gold = rng.random_range(0..n) as u32;
            ranks.push(brute_rank(&scored, gold));
            sort_scored(&mut scored);
            ranked.push(scored.iter().map(|x| x.0).collect::<Vec<_>>());
            golds.push(gold);
        }
        let m = ranking_metrics(&ranked, &golds).map_err(|e| e.to_string())?;
        for (k, hr, nd) in [(5, m.hr5, m.ndcg5), (10, m.hr10, m.ndcg10)] {
            let (mut h, mut d) = (0.0, 0.0);
            for &r in &ranks {
                if r <= k {
                    h += 1.0;
                    d += 1.0 / ((r + 1) as f64).log2();
                }
            }
            if hr != h / lists as f64 || nd != d / lists as f64 {
                return Err(format!(
                    "instance {case}: k={k} gives ({hr}, {nd}), brute force ({}, {})",
                    h / lists as f64,
                    d / lists as f64
                ));
            }
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct GoldenPair {
    hyp: String,
    #[serde(rename = "ref")]
    reference: String,
}

#[derive(Deserialize)]
struct Golden {
    pairs: Vec<GoldenPair>,
    rouge1: Vec<f64>,
    rouge2: Vec<f64>,
    mean_rouge1: f64,
    mean_rouge2: f64,
    bleu4: f64,
    bleu2: f64,
}

pub const TEXT_GOLDEN: &str = include_str!("../tests/data/text_golden.json");

pub fn text_oracle() -> Result<(), String> {
    let g: Golden = serde_json::from_str(TEXT_GOLDEN).map_err(|e| e.to_string())?;
    let split = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let hyps: Vec<Vec<String>> = g.pairs.iter().map(|p| split(&p.hyp)).collect();
    let refs: Vec<Vec<String>> = g.pairs.iter().map(|p| split(&p.reference)).collect();
    let off = |a: f64, b: f64| (a - b).abs() > CLOSED_FORM_TOLERANCE;
    for (i, (h, r)) in hyps.iter().zip(&refs).enumerate() {
        if off(rouge_n(h, r, 1), g.rouge1[i]) || off(rouge_n(h, r, 2), g.rouge2[i]) {
            return Err(format!("golden pair {i}: ROUGE differs"));
        }
    }
    let m4 = text_metrics(&hyps, &refs, 4).map_err(|e| e.to_string())?;
    let m2 = text_metrics(&hyps, &refs, 2).map_err(|e| e.to_string())?;
    if off(m4.bleu, g.bleu4) || off(m2.bleu, g.bleu2) {
        return Err(format!(
            "BLEU {} / {} vs golden {} / {}",
            m4.bleu, m2.bleu, g.bleu4, g.bleu2
        ));
    }
    if off(m4.rouge1, g.mean_rouge1) || off(m4.rouge2, g.mean_rouge2) {
        return Err("mean ROUGE differs from golden".into());
    }
    Ok(())
}

pub fn rating_oracle() -> Result<(), String> {
    let golds = [1.0, 2.0, 3.0, 4.0, 5.0, 2.0, 4.0];
    for delta in [0.0, 0.25, -0.5, 1.0, -2.0] {
        let preds: Vec<f64> = golds.iter().map(|g| g + delta).collect();
        let m = rating_metrics(&preds, &golds).map_err(|e| e.to_string())?;
        if m.mae != f64::abs(delta) || m.rmse != f64::abs(delta) {
            return Err(format!("offset {delta}: MAE {} RMSE {}", m.mae, m.rmse));
        }
    }
    Ok(())
}

pub fn check_metrics(seed: u64) -> CheckResult {
    timed("metric oracles", || {
        ranking_oracle(1000, seed)?;
        text_oracle()?;
        rating_oracle()?;
        Ok("ranking brute force x1000, 10-pair text golden file, rating offsets".into())
    })
}

/// Runs every check in order.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        check_gradients(seed),
        check_masking(500, seed),
        check_shared_encoder(100, seed),
        check_closed_forms(),
        check_schedules(seed),
        check_metrics(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fault;

    #[test]
    fn brute_rank_counts_ties_by_id() {
        let s = [(0, 1.0), (1, 2.0), (2, 1.0), (3, 0.5)];
        assert_eq!(brute_rank(&s, 1), 1);
        assert_eq!(brute_rank(&s, 0), 2);
        assert_eq!(brute_rank(&s, 2), 3);
        assert_eq!(brute_rank(&s, 3), 4);
    }

    #[test]
    fn every_flipped_rule_is_named() {
        for p in Primitive::ALL {
            fault::flip_sign(Some(p));
            let r = check_gradients(0);
            fault::flip_sign(None);
            assert!(!r.passed, "{p:?} flip went unnoticed");
            assert!(
                r.detail.starts_with(&format!("backward rule of {p:?} ")),
                "{p:?}: {}",
                r.detail
            );
        }
    }

    #[test]
    fn gradient_check_passes() {
        let r = check_gradients(0);
        assert!(r.passed, "{}", r.detail);
    }

    #[test]
    fn cheap_checks_pass() {
        for r in [
            check_closed_forms(),
            check_schedules(3),
            check_metrics(3),
            check_shared_encoder(20, 3),
        ] {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn masking_check_passes_and_detects_leaks() {
        let r = check_masking(60, 1);
        assert!(r.passed, "{}", r.detail);
    }
}
