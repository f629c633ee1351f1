use super::params::{init_params, Attn, Ff, Layout, Ln};
use super::{special, ModelConfig, ModelError, ParamStore, Token, VisibleMatrix};
use crate::autodiff::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// Attention pattern for an encoder call.
#[derive(Clone, Copy, Debug)]
pub enum Visibility<'a> {
    Full,
    Matrix(&'a VisibleMatrix),
}

/// Graph handles for every parameter, in [`ParamStore`] order.
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn as_slice(&self) -> &[Var] {
        &self.0
    }

    fn at(&self, i: usize) -> Var {
        self.0[i]
    }
}

/// Encoder output inside a graph; `cls` is row 0 of `states`.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub states: Var,
    pub cls: Var,
    pub len: usize,
}

/// Detached encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedStates {
    pub states: Tensor,
    pub cls: Tensor,
}

/// Result of greedy decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<Token>,
    /// Final-layer decoder states of the generated positions (`len × d_model`).
    pub hidden: Tensor,
}

/// The ControlRec network: shared-weight encoders and a cross-attending decoder.
#[derive(Clone, Debug)]
pub struct ControlRec {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl ControlRec {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let (params, layout) = init_params(&config, seed)?;
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        ParamVars(
            self.params
                .tensors()
                .iter()
                .map(|t| {
                    let t = t.clone();
                    if trainable {
                        g.param(t)
                    } else {
                        g.constant(t)
                    }
                })
                .collect(),
        )
    }

    /// Copies gradients of the bound leaves back onto the parameter tensors.
    pub fn collect_grads(&mut self, g: &Graph, pv: &ParamVars) {
        for (t, &v) in self.params.tensors_mut().iter_mut().zip(pv.as_slice()) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad);
            }
        }
    }

    fn check_tokens(&self, tokens: &[Token], what: &'static str, max: usize) -> Result<Vec<usize>, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence(what));
        }
        if tokens.len() > max {
            return Err(ModelError::SequenceTooLong {
                what,
                len: tokens.len(),
                max,
            });
        }
        tokens
            .iter()
            .map(|&t| {
                if (t as usize) < self.config.vocab_size {
                    Ok(t as usize)
                } else {
                    Err(ModelError::TokenOutOfVocab {
                        token: t,
                        vocab_size: self.config.vocab_size,
                    })
                }
            })
            .collect()
    }

    fn layer_norm(&self, g: &mut Graph, pv: &ParamVars, x: Var, ln: Ln) -> Result<Var, ModelError> {
        Ok(g.layer_norm(x, pv.at(ln.gain), pv.at(ln.bias), LN_EPS)?)
    }

    fn feed_forward(&self, g: &mut Graph, pv: &ParamVars, x: Var, ff: Ff) -> Result<Var, ModelError> {
        let h = g.matmul(x, pv.at(ff.w1))?;
        let h = g.gelu(h)?;
        Ok(g.matmul(h, pv.at(ff.w2))?)
    }

    /// Multi-head attention of `queries` over `memory` under `mask` (row-major `nq × nk`).
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        queries: Var,
        memory: Var,
        mask: &[bool],
        w: Attn,
        trace: &mut Option<&mut Vec<Var>>,
    ) -> Result<Var, ModelError> {
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = g.matmul(queries, pv.at(w.wq))?;
        let k = g.matmul(memory, pv.at(w.wk))?;
        let v = g.matmul(memory, pv.at(w.wv))?;
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let probs = g.masked_softmax(scores, mask)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(probs);
            }
            heads.push(g.matmul(probs, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        Ok(g.matmul(joined, pv.at(w.wo))?)
    }

    fn embed(&self, g: &mut Graph, pv: &ParamVars, ids: &[usize], positions: usize) -> Result<Var, ModelError> {
        let tok = g.embedding(pv.at(self.layout.token_embedding), ids)?;
        let pos_ids: Vec<usize> = (0..ids.len()).collect();
        let pos = g.embedding(pv.at(positions), &pos_ids)?;
        Ok(g.add(tok, pos)?)
    }

    fn encode_impl(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        tokens: &[Token],
        vis: Visibility<'_>,
        what: &'static str,
        max: usize,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<EncodedVars, ModelError> {
        let ids = self.check_tokens(tokens, what, max)?;
        let n = ids.len();
        let full;
        let mask = match vis {
            Visibility::Full => {
                full = vec![true; n * n];
                &full[..]
            }
            Visibility::Matrix(m) => {
                if m.len() != n {
                    return Err(ModelError::MaskLength { mask: m.len(), len: n });
                }
                m.as_slice()
            }
        };
        let mut x = self.embed(g, pv, &ids, self.layout.encoder_positions)?;
        for layer in &self.layout.encoder {
            let h = self.layer_norm(g, pv, x, layer.ln_attn)?;
            let a = self.attention(g, pv, h, h, mask, layer.attn, &mut trace)?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, pv, x, layer.ln_ff)?;
            let f = self.feed_forward(g, pv, h, layer.ff)?;
            x = g.add(x, f)?;
        }
        let states = self.layer_norm(g, pv, x, self.layout.encoder_ln)?;
        let cls = g.slice_rows(states, 0, 1)?;
        let cls = g.reshape(cls, vec![self.config.d_model])?;
        Ok(EncodedVars { states, cls, len: n })
    }

    /// Encodes an ID-side sequence under `vis`.
    pub fn encode_id_in(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        tokens: &[Token],
        vis: Visibility<'_>,
    ) -> Result<EncodedVars, ModelError> {
        self.encode_impl(g, pv, tokens, vis, "ID", self.config.max_id_len, None)
    }

    /// Encodes a natural-language sequence with full visibility.
    pub fn encode_nl_in(&self, g: &mut Graph, pv: &ParamVars, tokens: &[Token]) -> Result<EncodedVars, ModelError> {
        self.encode_impl(g, pv, tokens, Visibility::Full, "NL", self.config.max_nl_len, None)
    }

    /// ID encoding that also returns every attention-probability matrix
    /// (layer-major, head-minor).
    pub fn encode_id_traced(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        tokens: &[Token],
        vis: Visibility<'_>,
    ) -> Result<(EncodedVars, Vec<Var>), ModelError> {
        let mut trace = Vec::new();
        let enc = self.encode_impl(g, pv, tokens, vis, "ID", self.config.max_id_len, Some(&mut trace))?;
        Ok((enc, trace))
    }

    /// Decoder memory: NL states followed by ID states.
    pub fn memory_in(&self, g: &mut Graph, id: &EncodedVars, nl: &EncodedVars) -> Result<Var, ModelError> {
        Ok(g.concat_rows(&[nl.states, id.states])?)
    }

    /// Runs the decoder over `inputs` (already shifted right) and returns
    /// `(final hidden states, vocabulary logits)`.
    pub fn decode_in(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        memory: Var,
        inputs: &[Token],
    ) -> Result<(Var, Var), ModelError> {
        let ids = self.check_tokens(inputs, "target", self.config.max_target_len)?;
        let n = ids.len();
        let nk = g.value(memory).dims2().0;
        let causal: Vec<bool> = (0..n * n).map(|i| i % n <= i / n).collect();
        let open = vec![true; n * nk];
        let mut x = self.embed(g, pv, &ids, self.layout.decoder_positions)?;
        for layer in &self.layout.decoder {
            let h = self.layer_norm(g, pv, x, layer.ln_self)?;
            let a = self.attention(g, pv, h, h, &causal, layer.self_attn, &mut None)?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, pv, x, layer.ln_cross)?;
            let a = self.attention(g, pv, h, memory, &open, layer.cross_attn, &mut None)?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, pv, x, layer.ln_ff)?;
            let f = self.feed_forward(g, pv, h, layer.ff)?;
            x = g.add(x, f)?;
        }
        let hidden = self.layer_norm(g, pv, x, self.layout.decoder_ln)?;
        let logits = g.matmul(hidden, pv.at(self.layout.output))?;
        Ok((hidden, logits))
    }

    /// Teacher-forced decoding: row `j` of the logits predicts `target[j]`.
    pub fn decode_teacher_forced_in(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        memory: Var,
        target: &[Token],
    ) -> Result<(Var, Var), ModelError> {
        self.decode_in(g, pv, memory, &shift_right(target))
    }

    /// Greedy decoding (ties resolve to the lowest token id) until `<eos>`
    /// or `max_len` tokens. Returns only the tokens; use
    /// [`ControlRec::decode_teacher_forced_in`] on them to obtain states.
    pub fn greedy_tokens_in(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        memory: Var,
        max_len: usize,
    ) -> Result<Vec<Token>, ModelError> {
        if max_len == 0 {
            return Err(ModelError::InvalidConfig("max_len must be at least 1".into()));
        }
        let max_len = max_len.min(self.config.max_target_len);
        let mut out: Vec<Token> = Vec::new();
        while out.len() < max_len {
            let inputs = shift_right(&out_with_slot(&out));
            let (_, logits) = self.decode_in(g, pv, memory, &inputs)?;
            let t = g.value(logits);
            let next = argmax(t.row(t.dims2().0 - 1)) as Token;
            out.push(next);
            if next == special::EOS {
                break;
            }
        }
        Ok(out)
    }

    // Convenience wrappers over a private, non-trainable graph.

    pub fn encode_id(&self, tokens: &[Token], vis: Visibility<'_>) -> Result<EncodedStates, ModelError> {
        let mut g = Graph::new();
        let pv = self.bind(&mut g, false);
        let e = self.encode_id_in(&mut g, &pv, tokens, vis)?;
        Ok(detach(&g, &e))
    }

    pub fn encode_nl(&self, tokens: &[Token]) -> Result<EncodedStates, ModelError> {
        let mut g = Graph::new();
        let pv = self.bind(&mut g, false);
        let e = self.encode_nl_in(&mut g, &pv, tokens)?;
        Ok(detach(&g, &e))
    }

    /// Teacher-forced logits (`target.len() × vocab_size`).
    pub fn decode_teacher_forced(
        &self,
        id_tokens: &[Token],
        id_vis: Visibility<'_>,
        nl_tokens: &[Token],
        target: &[Token],
    ) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let pv = self.bind(&mut g, false);
        let id = self.encode_id_in(&mut g, &pv, id_tokens, id_vis)?;
        let nl = self.encode_nl_in(&mut g, &pv, nl_tokens)?;
        let mem = self.memory_in(&mut g, &id, &nl)?;
        let (_, logits) = self.decode_teacher_forced_in(&mut g, &pv, mem, target)?;
        Ok(g.value(logits).clone())
    }

    pub fn generate_greedy(
        &self,
        id_tokens: &[Token],
        id_vis: Visibility<'_>,
        nl_tokens: &[Token],
        max_len: usize,
    ) -> Result<Generation, ModelError> {
        let mut g = Graph::new();
        let pv = self.bind(&mut g, false);
        let id = self.encode_id_in(&mut g, &pv, id_tokens, id_vis)?;
        let nl = self.encode_nl_in(&mut g, &pv, nl_tokens)?;
        let mem = self.memory_in(&mut g, &id, &nl)?;
        let tokens = self.greedy_tokens_in(&mut g, &pv, mem, max_len)?;
        let (hidden, _) = self.decode_teacher_forced_in(&mut g, &pv, mem, &tokens)?;
        Ok(Generation {
            tokens,
            hidden: g.value(hidden).clone(),
        })
    }
}

fn detach(g: &Graph, e: &EncodedVars) -> EncodedStates {
    EncodedStates {
        states: g.value(e.states).clone(),
        cls: g.value(e.cls).clone(),
    }
}

/// Decoder inputs for targets `y`: `[<pad>, y_0, …, y_{n-2}]`.
pub(crate) fn shift_right(target: &[Token]) -> Vec<Token> {
    let mut v = Vec::with_capacity(target.len());
    v.push(special::PAD);
    v.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    v
}

fn out_with_slot(prefix: &[Token]) -> Vec<Token> {
    let mut v = prefix.to_vec();
    v.push(special::PAD);
    v
}

/// Index of the maximum; the lowest index wins ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
