use serde::{Deserialize, Serialize};

use super::ModelError;

/// Shape of a ControlRec network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_id_len: usize,
    pub max_nl_len: usize,
    pub max_target_len: usize,
    pub ff_mult: usize,
}

impl Default for ModelConfig {
    /// The T5-small shape: 6 layers, width 512, 8 heads.
    fn default() -> Self {
        Self {
            n_layers: 6,
            d_model: 512,
            n_heads: 8,
            vocab_size: 32000,
            max_id_len: 64,
            max_nl_len: 128,
            max_target_len: 64,
            ff_mult: 4,
        }
    }
}

impl ModelConfig {
    /// The width-64 network used for the scaled training experiment.
    pub fn small(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            ..Self::toy(vocab_size)
        }
    }

    /// A desk-scale network suitable for CPU training runs.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            vocab_size,
            max_id_len: 32,
            max_nl_len: 64,
            max_target_len: 24,
            ff_mult: 2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn max_encoder_len(&self) -> usize {
        self.max_id_len.max(self.max_nl_len)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_id_len", self.max_id_len),
            ("max_nl_len", self.max_nl_len),
            ("max_target_len", self.max_target_len),
            ("ff_mult", self.ff_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < super::special::RESERVED {
            return Err(ModelError::InvalidConfig(
                "vocab_size smaller than the reserved tokens".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_mirrors_small_backbone() {
        let c = ModelConfig::default();
        assert_eq!((c.n_layers, c.d_model, c.n_heads), (6, 512, 8));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = ModelConfig::toy(100);
        c.n_heads = 5;
        assert!(c.validate().is_err());
    }
}
