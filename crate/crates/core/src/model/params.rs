use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::autodiff::Tensor;

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces every tensor with a same-named, same-shaped one from `other`.
    pub fn load_from(&mut self, other: impl IntoIterator<Item = (String, Tensor)>) -> Result<(), ModelError> {
        let mut seen = vec![false; self.len()];
        for (name, t) in other {
            let i = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| ModelError::ParamMismatch(format!("unexpected parameter {name}")))?;
            if self.tensors[i].shape() != t.shape() {
                return Err(ModelError::ParamMismatch(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i] = t;
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(ModelError::ParamMismatch(format!(
                "missing parameter {}",
                self.names[i]
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ln {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attn {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ff {
    pub w1: usize,
    pub w2: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderLayer {
    pub ln_attn: Ln,
    pub attn: Attn,
    pub ln_ff: Ln,
    pub ff: Ff,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderLayer {
    pub ln_self: Ln,
    pub self_attn: Attn,
    pub ln_cross: Ln,
    pub cross_attn: Attn,
    pub ln_ff: Ln,
    pub ff: Ff,
}

/// Positions of each weight inside the [`ParamStore`].
///
/// There is a single encoder stack; the ID and NL encoders both read it.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub token_embedding: usize,
    pub encoder_positions: usize,
    pub decoder_positions: usize,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_ln: Ln,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_ln: Ln,
    pub output: usize,
}

enum Init {
    Uniform(f64),
    Normal { fan_in: usize },
    Ones,
    Zeros,
}

struct Builder<'r> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> Result<usize, ModelError> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Uniform(a) => (0..n).map(|_| self.rng.random_range(-a..=a)).collect(),
            Init::Normal { fan_in } => {
                let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt())
                    .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
                (0..n).map(|_| dist.sample(self.rng)).collect()
            }
            Init::Ones => vec![1.0; n],
            Init::Zeros => vec![0.0; n],
        };
        self.names.push(name);
        self.tensors.push(Tensor::new(shape, values)?);
        Ok(self.tensors.len() - 1)
    }

    fn ln(&mut self, prefix: &str, d: usize) -> Result<Ln, ModelError> {
        Ok(Ln {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones)?,
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros)?,
        })
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Result<Attn, ModelError> {
        let mut w = |s: &str| self.add(format!("{prefix}.{s}"), vec![d, d], Init::Normal { fan_in: d });
        Ok(Attn {
            wq: w("wq")?,
            wk: w("wk")?,
            wv: w("wv")?,
            wo: w("wo")?,
        })
    }

    fn ff(&mut self, prefix: &str, d: usize, hidden: usize) -> Result<Ff, ModelError> {
        Ok(Ff {
            w1: self.add(format!("{prefix}.w1"), vec![d, hidden], Init::Normal { fan_in: d })?,
            w2: self.add(format!("{prefix}.w2"), vec![hidden, d], Init::Normal { fan_in: hidden })?,
        })
    }
}

/// Allocates and seeds every parameter for `config`.
pub(crate) fn init_params(config: &ModelConfig, seed: u64) -> Result<(ParamStore, Layout), ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let hidden = d * config.ff_mult;
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng: &mut rng,
    };
    let token_embedding = b.add("embed.token".into(), vec![config.vocab_size, d], Init::Uniform(0.05))?;
    let encoder_positions = b.add(
        "embed.encoder_pos".into(),
        vec![config.max_encoder_len(), d],
        Init::Uniform(0.05),
    )?;
    let decoder_positions = b.add(
        "embed.decoder_pos".into(),
        vec![config.max_target_len, d],
        Init::Uniform(0.05),
    )?;
    let mut encoder = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = format!("encoder.{l}");
        encoder.push(EncoderLayer {
            ln_attn: b.ln(&format!("{p}.ln_attn"), d)?,
            attn: b.attn(&format!("{p}.attn"), d)?,
            ln_ff: b.ln(&format!("{p}.ln_ff"), d)?,
            ff: b.ff(&format!("{p}.ff"), d, hidden)?,
        });
    }
    let encoder_ln = b.ln("encoder.ln_out", d)?;
    let mut decoder = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = format!("decoder.{l}");
        decoder.push(DecoderLayer {
            ln_self: b.ln(&format!("{p}.ln_self"), d)?,
            self_attn: b.attn(&format!("{p}.self_attn"), d)?,
            ln_cross: b.ln(&format!("{p}.ln_cross"), d)?,
            cross_attn: b.attn(&format!("{p}.cross_attn"), d)?,
            ln_ff: b.ln(&format!("{p}.ln_ff"), d)?,
            ff: b.ff(&format!("{p}.ff"), d, hidden)?,
        });
    }
    let decoder_ln = b.ln("decoder.ln_out", d)?;
    let output = b.add(
        "output.proj".into(),
        vec![d, config.vocab_size],
        Init::Normal { fan_in: d },
    )?;
    let layout = Layout {
        token_embedding,
        encoder_positions,
        decoder_positions,
        encoder,
        encoder_ln,
        decoder,
        decoder_ln,
        output,
    };
    Ok((
        ParamStore {
            names: b.names,
            tensors: b.tensors,
        },
        layout,
    ))
}
