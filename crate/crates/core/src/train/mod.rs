//! Training: learning-rate schedule, AdamW, and the multi-objective step.

mod optim;
mod schedule;
mod views;

pub use optim::AdamW;
pub use schedule::{lr_at, IclMode, TrainConfig};
pub use views::{FeatureViews, IdView, TrainingSet};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::data::{
    derive_seed, sample_hfm_candidates, sample_icl_candidates, DataError, ExampleOptions, Family, HfmPositive,
    PromptTemplate, TrainingExample, Vocab,
};
use crate::model::{Checkpoint, ControlRec, EncodedVars, ModelConfig, ModelError, ParamVars, Visibility};
use crate::objectives::{
    gen_loss, hfm_pair_loss, icl_loss, lambda3_schedule, mean_of, mean_pool, LossError, MatchDirection,
};

const OPTIM_M: &str = "optim.m/";
const OPTIM_V: &str = "optim.v/";

// Seed-derivation tags, one per random stream.
const TAG_GEN: u64 = 1;
const TAG_HFM_ITEM: u64 = 2;
const TAG_HFM_SEQ: u64 = 3;
const TAG_ICL: u64 = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("step {step} is past the last step {total}")]
    StepBeyondTotal { step: u64, total: u64 },
    /// Components not reached before the failure are NaN.
    #[error("non-finite value at step {step} in {at}: gen={gen} hfm={hfm} icl={icl} grad_norm={grad_norm}")]
    NonFinite {
        step: u64,
        at: String,
        gen: f64,
        hfm: f64,
        icl: f64,
        grad_norm: f64,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One line of the loss history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub lambda3: f64,
    pub gen: f64,
    pub hfm_item: f64,
    pub hfm_seq: f64,
    pub hfm: f64,
    pub icl: f64,
    /// `lambda3 · icl`, the instruction-contrast share of `total`.
    pub icl_weighted: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Per-step encoder cache so shared inputs are encoded once per graph.
#[derive(Default)]
struct Encodings {
    item_id: HashMap<usize, EncodedVars>,
    item_nl: HashMap<usize, EncodedVars>,
    next_nl: HashMap<usize, EncodedVars>,
    history: HashMap<usize, EncodedVars>,
}

pub struct Trainer {
    cfg: TrainConfig,
    data: TrainingSet,
    model: ControlRec,
    opt: AdamW,
    step: u64,
}

impl Trainer {
    /// Fresh model; the vocabulary size comes from `data`.
    pub fn new(cfg: TrainConfig, model_cfg: ModelConfig, data: TrainingSet) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model_cfg = ModelConfig {
            vocab_size: data.vocab.len(),
            ..model_cfg
        };
        check_lengths(&model_cfg, &data)?;
        let model = ControlRec::new(model_cfg, derive_seed(cfg.seed, &[0]))?;
        let opt = AdamW::new(
            model.params().tensors(),
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
            cfg.weight_decay,
        );
        Ok(Self {
            cfg,
            data,
            model,
            opt,
            step: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, data: TrainingSet, ckpt: &Checkpoint) -> Result<Self, TrainError> {
        cfg.validate()?;
        if ckpt.meta.model.vocab_size != data.vocab.len() {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint vocabulary has {} tokens, the corpus {}",
                ckpt.meta.model.vocab_size,
                data.vocab.len()
            )));
        }
        if ckpt.meta.step > cfg.total_steps {
            return Err(TrainError::StepBeyondTotal {
                step: ckpt.meta.step,
                total: cfg.total_steps,
            });
        }
        check_lengths(&ckpt.meta.model, &data)?;
        let model = ckpt.to_model()?;
        let mut opt = AdamW::new(
            model.params().tensors(),
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
            cfg.weight_decay,
        );
        let moments = |prefix: &str| -> Result<Vec<Vec<f64>>, TrainError> {
            model
                .params()
                .names()
                .iter()
                .map(|n| {
                    ckpt.tensor(&format!("{prefix}{n}"))
                        .map(|t| t.values().to_vec())
                        .ok_or_else(|| TrainError::Checkpoint(format!("missing optimizer state for {n}")))
                })
                .collect()
        };
        opt.restore(moments(OPTIM_M)?, moments(OPTIM_V)?, ckpt.meta.step)
            .map_err(TrainError::Checkpoint)?;
        Ok(Self {
            cfg,
            data,
            model,
            opt,
            step: ckpt.meta.step,
        })
    }

    pub fn model(&self) -> &ControlRec {
        &self.model
    }

    pub fn data(&self) -> &TrainingSet {
        &self.data
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Steps completed so far.
    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    /// Parameters plus optimizer moments.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model, self.step);
        let (m, v) = self.opt.moments();
        for (prefix, moments) in [(OPTIM_M, m), (OPTIM_V, v)] {
            for ((name, t), values) in self.model.params().iter().zip(moments) {
                let tensor = Tensor::from_parts(t.shape().to_vec(), values.clone());
                ckpt.tensors.push((format!("{prefix}{name}"), tensor));
            }
        }
        ckpt
    }

    /// Runs to the configured step count.
    pub fn run(&mut self) -> Result<Vec<StepRecord>, TrainError> {
        let mut out = Vec::new();
        while !self.is_done() {
            out.push(self.step()?);
        }
        Ok(out)
    }

    /// One optimizer update.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        let s = self.step;
        let total = self.cfg.total_steps;
        if s >= total {
            return Err(TrainError::StepBeyondTotal { step: s, total });
        }
        let lr = lr_at(s, &self.cfg)?;
        let lambda3 = lambda3_schedule(s, total, self.cfg.lambda3_init)?;

        let mut g = Graph::new();
        let pv = self.model.bind(&mut g, true);
        let mut enc = Encodings::default();
        let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).values()[0]);
        let mut rec = StepRecord {
            step: s,
            lr,
            lambda3,
            gen: f64::NAN,
            hfm_item: f64::NAN,
            hfm_seq: f64::NAN,
            hfm: f64::NAN,
            icl: f64::NAN,
            icl_weighted: f64::NAN,
            total: f64::NAN,
            grad_norm: f64::NAN,
        };
        let blame = |rec: &StepRecord, at: &str| TrainError::NonFinite {
            step: s,
            at: at.to_string(),
            gen: rec.gen,
            hfm: rec.hfm,
            icl: rec.icl,
            grad_norm: rec.grad_norm,
        };
        let guard = |rec: &StepRecord, at: &str, e: TrainError| match non_finite_op(&e) {
            Some(op) => blame(rec, &format!("{at} ({op})")),
            None => e,
        };

        let gen = self
            .gen_term(&mut g, &pv, s)
            .map_err(|e| guard(&rec, "generation loss", e))?;
        rec.gen = value(&g, Some(gen));
        let hfm_item = self
            .hfm_item_term(&mut g, &pv, &mut enc, s)
            .map_err(|e| guard(&rec, "item matching loss", e))?;
        rec.hfm_item = value(&g, hfm_item);
        let hfm_seq = self
            .hfm_seq_term(&mut g, &pv, &mut enc, s)
            .map_err(|e| guard(&rec, "sequence matching loss", e))?;
        rec.hfm_seq = value(&g, hfm_seq);
        let hfm = match (hfm_item, hfm_seq) {
            (Some(a), Some(b)) => Some(g.add(a, b)?),
            _ => None,
        };
        rec.hfm = value(&g, hfm);
        let icl = self
            .icl_term(&mut g, &pv, s)
            .map_err(|e| guard(&rec, "instruction contrast loss", e))?;
        rec.icl = value(&g, icl);
        rec.icl_weighted = lambda3 * rec.icl;
        rec.total = rec.gen + rec.hfm + rec.icl_weighted;
        if !rec.total.is_finite() {
            return Err(blame(&rec, "total loss"));
        }

        let mut loss = gen;
        if let Some(h) = hfm {
            loss = g.add(loss, h)?;
        }
        if let Some(i) = icl {
            let w = g.scale(i, lambda3)?;
            loss = g.add(loss, w)?;
        }
        g.backward(loss).map_err(|e| guard(&rec, "backward pass", e.into()))?;
        self.model.params_mut().zero_grads();
        self.model.collect_grads(&g, &pv);
        rec.grad_norm = self
            .model
            .params()
            .tensors()
            .iter()
            .filter_map(Tensor::grad)
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !rec.grad_norm.is_finite() {
            return Err(blame(&rec, "gradient"));
        }
        self.opt.step(self.model.params_mut().tensors_mut(), lr);
        self.model.params_mut().zero_grads();
        self.step += 1;
        log::debug!(
            "step {s}: total {:.4} gen {:.4} hfm {:.4} icl {:.4} lr {lr:.2e}",
            rec.total,
            rec.gen,
            rec.hfm,
            rec.icl
        );
        Ok(rec)
    }

    /// The step-`s` objective `gen + hfm + lambda3 * icl` built over `pv`,
    /// which need not hold the model's own values.
    pub fn objective(&self, g: &mut Graph, pv: &ParamVars, s: u64, lambda3: f64) -> Result<Var, TrainError> {
        let mut enc = Encodings::default();
        let mut loss = self.gen_term(g, pv, s)?;
        for term in [
            self.hfm_item_term(g, pv, &mut enc, s)?,
            self.hfm_seq_term(g, pv, &mut enc, s)?,
        ]
        .into_iter()
        .flatten()
        {
            loss = g.add(loss, term)?;
        }
        if let Some(i) = self.icl_term(g, pv, s)? {
            let w = g.scale(i, lambda3)?;
            loss = g.add(loss, w)?;
        }
        Ok(loss)
    }

    /// Teacher-forced generation loss over a batch mixed round-robin across
    /// the families; each example is re-rendered with a random seen template.
    fn gen_term(&self, g: &mut Graph, pv: &ParamVars, s: u64) -> Result<Var, TrainError> {
        let b = self.cfg.batch_size as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[TAG_GEN, s]));
        let mut losses = Vec::with_capacity(self.cfg.batch_size);
        for j in 0..b {
            let f = Family::ALL[((s * b + j) % Family::ALL.len() as u64) as usize];
            let pool = &self.data.examples[f.index()];
            let templates = &self.data.templates[f.index()];
            let x = &pool[rng.random_range(0..pool.len())];
            let t = &templates[rng.random_range(0..templates.len())];
            let nl = x.nl_with(t, &self.data.vocab, &self.data.opts)?;
            let id = IdView::new(&x.id).map_err(ModelError::from)?;
            let ide = self
                .model
                .encode_id_in(g, pv, &id.tokens, Visibility::Matrix(&id.mask))?;
            let nle = self.model.encode_nl_in(g, pv, &nl)?;
            let mem = self.model.memory_in(g, &ide, &nle)?;
            let (_, logits) = self.model.decode_teacher_forced_in(g, pv, mem, &x.target_tokens)?;
            losses.push(gen_loss(g, logits, &x.target_tokens, None)?);
        }
        Ok(mean_of(g, &losses)?)
    }

    fn item_id(&self, g: &mut Graph, pv: &ParamVars, enc: &mut Encodings, i: usize) -> Result<Var, TrainError> {
        if let Some(e) = enc.item_id.get(&i) {
            return Ok(e.cls);
        }
        let v = &self.data.features.item_id[i];
        let e = self.model.encode_id_in(g, pv, &v.tokens, Visibility::Matrix(&v.mask))?;
        enc.item_id.insert(i, e);
        Ok(e.cls)
    }

    fn item_nl(&self, g: &mut Graph, pv: &ParamVars, enc: &mut Encodings, i: usize) -> Result<Var, TrainError> {
        if let Some(e) = enc.item_nl.get(&i) {
            return Ok(e.cls);
        }
        let e = self.model.encode_nl_in(g, pv, &self.data.features.item_nl[i])?;
        enc.item_nl.insert(i, e);
        Ok(e.cls)
    }

    fn next_nl(&self, g: &mut Graph, pv: &ParamVars, enc: &mut Encodings, i: usize) -> Result<Var, TrainError> {
        if let Some(e) = enc.next_nl.get(&i) {
            return Ok(e.cls);
        }
        let e = self.model.encode_nl_in(g, pv, &self.data.features.next_nl[i])?;
        enc.next_nl.insert(i, e);
        Ok(e.cls)
    }

    fn history(&self, g: &mut Graph, pv: &ParamVars, enc: &mut Encodings, u: usize) -> Result<Var, TrainError> {
        if let Some(e) = enc.history.get(&u) {
            return Ok(e.cls);
        }
        let v = &self.data.features.history[u];
        let e = self.model.encode_id_in(g, pv, &v.tokens, Visibility::Matrix(&v.mask))?;
        enc.history.insert(u, e);
        Ok(e.cls)
    }

    /// Item ID ↔ description matching, averaged over the step's pairs.
    fn hfm_item_term(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        enc: &mut Encodings,
        s: u64,
    ) -> Result<Option<Var>, TrainError> {
        if self.cfg.hfm_pairs == 0 {
            return Ok(None);
        }
        let n_items = self.data.catalog.n_items();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[TAG_HFM_ITEM, s]));
        let mut losses = Vec::new();
        for p in 0..self.cfg.hfm_pairs {
            let item = rng.random_range(0..n_items);
            let seed = derive_seed(self.cfg.seed, &[TAG_HFM_ITEM, s, p as u64, 1]);
            let c = sample_hfm_candidates(&self.data.catalog, HfmPositive::Item(item as u32), self.cfg.k, seed)?;
            let (nl_order, nl_pos) = c.nl.ordered();
            let (id_order, id_pos) = c.id.ordered();
            let anchor_id = self.item_id(g, pv, enc, item)?;
            let anchor_nl = self.item_nl(g, pv, enc, item)?;
            let nl_cands = nl_order
                .iter()
                .map(|&i| self.item_nl(g, pv, enc, i))
                .collect::<Result<Vec<_>, _>>()?;
            let id_cands = id_order
                .iter()
                .map(|&i| self.item_id(g, pv, enc, i))
                .collect::<Result<Vec<_>, _>>()?;
            losses.push(hfm_pair_loss(
                g,
                MatchDirection {
                    anchor: anchor_id,
                    candidates: &nl_cands,
                    positive: nl_pos,
                },
                MatchDirection {
                    anchor: anchor_nl,
                    candidates: &id_cands,
                    positive: id_pos,
                },
                self.cfg.tau,
            )?);
        }
        Ok(Some(mean_of(g, &losses)?))
    }

    /// History ↔ next-item-description matching.
    fn hfm_seq_term(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        enc: &mut Encodings,
        s: u64,
    ) -> Result<Option<Var>, TrainError> {
        if self.cfg.hfm_pairs == 0 {
            return Ok(None);
        }
        let next_items = &self.data.features.next_items;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[TAG_HFM_SEQ, s]));
        let mut losses = Vec::new();
        for p in 0..self.cfg.hfm_pairs {
            let user = rng.random_range(0..next_items.len());
            let seed = derive_seed(self.cfg.seed, &[TAG_HFM_SEQ, s, p as u64, 1]);
            let c = sample_hfm_candidates(
                &self.data.catalog,
                HfmPositive::Sequence { user, next_items },
                self.cfg.k,
                seed,
            )?;
            let (nl_order, nl_pos) = c.nl.ordered();
            let (id_order, id_pos) = c.id.ordered();
            let anchor_id = self.history(g, pv, enc, user)?;
            let anchor_nl = self.next_nl(g, pv, enc, next_items[user] as usize)?;
            let nl_cands = nl_order
                .iter()
                .map(|&i| self.next_nl(g, pv, enc, i))
                .collect::<Result<Vec<_>, _>>()?;
            let id_cands = id_order
                .iter()
                .map(|&u| self.history(g, pv, enc, u))
                .collect::<Result<Vec<_>, _>>()?;
            losses.push(hfm_pair_loss(
                g,
                MatchDirection {
                    anchor: anchor_id,
                    candidates: &nl_cands,
                    positive: nl_pos,
                },
                MatchDirection {
                    anchor: anchor_nl,
                    candidates: &id_cands,
                    positive: id_pos,
                },
                self.cfg.tau,
            )?);
        }
        Ok(Some(mean_of(g, &losses)?))
    }

    /// Instruction contrast: decoder states under the target instruction
    /// against a same-group positive and other-group negatives, all for the
    /// same ID input.
    fn icl_term(&self, g: &mut Graph, pv: &ParamVars, s: u64) -> Result<Option<Var>, TrainError> {
        if self.cfg.icl_examples == 0 {
            return Ok(None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[TAG_ICL, s]));
        let mut losses = Vec::new();
        for e in 0..self.cfg.icl_examples {
            let f = Family::ALL[((s + e as u64) % Family::ALL.len() as u64) as usize];
            let pool = &self.data.examples[f.index()];
            let x = &pool[rng.random_range(0..pool.len())];
            let target = rng.random_range(0..self.data.templates[f.index()].len());
            let seed = derive_seed(self.cfg.seed, &[TAG_ICL, s, e as u64, 1]);
            let (pooled, positive) = instruction_states(
                &self.model,
                g,
                pv,
                &self.data.templates[f.index()],
                &self.data.vocab,
                &self.data.opts,
                x,
                target,
                self.cfg.m,
                seed,
                self.cfg.icl_mode,
            )?;
            losses.push(icl_loss(g, pooled[0], &pooled[1..], positive, self.cfg.tau)?);
        }
        Ok(Some(mean_of(g, &losses)?))
    }
}

/// Mean-pooled decoder states for `x` under `templates[target]` (index 0)
/// followed by sampled same-family candidates, and the positive's slot
/// among the candidates.
#[allow(clippy::too_many_arguments)]
pub fn instruction_states(
    model: &ControlRec,
    g: &mut Graph,
    pv: &ParamVars,
    templates: &[PromptTemplate],
    vocab: &Vocab,
    opts: &ExampleOptions,
    x: &TrainingExample,
    target: usize,
    m: usize,
    seed: u64,
    mode: IclMode,
) -> Result<(Vec<Var>, usize), TrainError> {
    let cands = sample_icl_candidates(templates, target, m, seed)?;
    let (order, positive) = cands.ordered();
    let id = IdView::new(&x.id).map_err(ModelError::from)?;
    let ide = model.encode_id_in(g, pv, &id.tokens, Visibility::Matrix(&id.mask))?;
    let mut pooled = Vec::with_capacity(order.len() + 1);
    for &t in std::iter::once(&target).chain(&order) {
        let nl = x.nl_with(&templates[t], vocab, opts)?;
        let tokens = match mode {
            IclMode::FreeRunning => {
                model
                    .generate_greedy(
                        &id.tokens,
                        Visibility::Matrix(&id.mask),
                        &nl,
                        model.config().max_target_len,
                    )?
                    .tokens
            }
            IclMode::TeacherForced => x.target_tokens.clone(),
        };
        let nle = model.encode_nl_in(g, pv, &nl)?;
        let mem = model.memory_in(g, &ide, &nle)?;
        let (hidden, _) = model.decode_teacher_forced_in(g, pv, mem, &tokens)?;
        pooled.push(mean_pool(g, hidden)?);
    }
    Ok((pooled, positive))
}

fn non_finite_op(e: &TrainError) -> Option<&'static str> {
    let t = match e {
        TrainError::Tensor(t) | TrainError::Model(ModelError::Tensor(t)) | TrainError::Loss(LossError::Tensor(t)) => t,
        _ => return None,
    };
    match t {
        TensorError::NonFinite { op } => Some(op),
        _ => None,
    }
}

fn check_lengths(model: &ModelConfig, data: &TrainingSet) -> Result<(), TrainError> {
    let o = &data.opts;
    if o.max_id_len > model.max_id_len || o.max_nl_len > model.max_nl_len || o.max_target_len > model.max_target_len {
        return Err(TrainError::Config(format!(
            "example lengths (id {}, nl {}, target {}) exceed the model's (id {}, nl {}, target {})",
            o.max_id_len, o.max_nl_len, o.max_target_len, model.max_id_len, model.max_nl_len, model.max_target_len
        )));
    }
    Ok(())
}

/// Trains from scratch and returns the final model and loss history.
pub fn train(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    data: TrainingSet,
) -> Result<(ControlRec, Vec<StepRecord>), TrainError> {
    let mut t = Trainer::new(cfg, model_cfg, data)?;
    let history = t.run()?;
    Ok((t.model, history))
}
