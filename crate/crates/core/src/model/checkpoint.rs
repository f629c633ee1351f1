//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CTRLREC\0"
//! version    u32      currently 1
//! meta_len   u32      length of the metadata JSON
//! meta       bytes    UTF-8 JSON: {"model": ModelConfig, "step": u64}
//! count      u32      number of tensors
//! count × {
//!   name_len u32, name UTF-8 bytes,
//!   rank     u32, dims rank × u32,
//!   values   product(dims) × f32
//! }
//! ```
//!
//! Nothing time-dependent is stored, so equal models produce equal bytes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ControlRec, ModelConfig, ModelError};
use crate::autodiff::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTRLREC\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_META_LEN: usize = 1 << 20;
const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(self.pos))?;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn from_model(model: &ControlRec, step: u64) -> Self {
        Self {
            meta: CheckpointMeta {
                model: model.config().clone(),
                step,
            },
            tensors: model
                .params()
                .iter()
                .map(|(n, t)| {
                    (
                        n.to_string(),
                        Tensor::from_parts(t.shape().to_vec(), t.values().to_vec()),
                    )
                })
                .collect(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the network; tensors whose names are not model parameters
    /// (for example optimizer state) are ignored.
    pub fn to_model(&self) -> Result<ControlRec, ModelError> {
        let mut model = ControlRec::new(self.meta.model.clone(), 0)?;
        let wanted: Vec<String> = model.params().names().to_vec();
        let chosen = self
            .tensors
            .iter()
            .filter(|(n, _)| wanted.contains(n))
            .map(|(n, t)| (n.clone(), t.clone()));
        model.params_mut().load_from(chosen)?;
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        push_u32(&mut out, meta.len());
        out.extend_from_slice(&meta);
        push_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            push_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            push_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                push_u32(&mut out, d);
            }
            for &v in t.values() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let meta_len = r.u32()? as usize;
        if meta_len > MAX_META_LEN {
            return Err(CheckpointError::Malformed(format!(
                "metadata length {meta_len} too large"
            )));
        }
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for i in 0..count {
            let name_len = r.u32()? as usize;
            if name_len > MAX_NAME_LEN {
                return Err(CheckpointError::Malformed(format!("tensor {i}: name too long")));
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Malformed(format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(CheckpointError::Malformed(format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = r.u32()? as usize;
                if d == 0 {
                    return Err(CheckpointError::Malformed(format!("{name}: zero dimension")));
                }
                numel = numel
                    .checked_mul(d)
                    .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                    .ok_or(CheckpointError::Truncated(r.pos))?;
                shape.push(d);
            }
            let raw = r.take(numel * 4)?;
            let mut values = Vec::with_capacity(numel);
            for c in raw.chunks_exact(4) {
                let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                if !v.is_finite() {
                    return Err(CheckpointError::Malformed(format!("{name}: non-finite value")));
                }
                values.push(f64::from(v));
            }
            if tensors.iter().any(|(n, _): &(String, Tensor)| *n == name) {
                return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
            }
            tensors.push((name, Tensor::from_parts(shape, values)));
        }
        if r.remaining() != 0 {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> ControlRec {
        let mut c = ModelConfig::toy(20);
        c.d_model = 8;
        c.n_heads = 2;
        c.n_layers = 1;
        ControlRec::new(c, 3).unwrap()
    }

    #[test]
    fn round_trip_preserves_f32_values() {
        let m = tiny();
        let ck = Checkpoint::from_model(&m, 42);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.meta.step, 42);
        assert_eq!(back.meta.model, *m.config());
        for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            for (a, b) in t1.values().iter().zip(t2.values()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
        let rebuilt = back.to_model().unwrap();
        assert_eq!(Checkpoint::from_model(&rebuilt, 42).encode(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::from_model(&tiny(), 0).encode();
        assert_eq!(Checkpoint::decode(b"nope"), Err(CheckpointError::BadMagic));
        let mut v = bytes.clone();
        v[8] = 9;
        assert_eq!(Checkpoint::decode(&v), Err(CheckpointError::Version(9)));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra), Err(CheckpointError::Malformed(_))));
    }

    #[test]
    fn missing_parameter_is_reported() {
        let mut ck = Checkpoint::from_model(&tiny(), 0);
        ck.tensors.pop();
        assert!(matches!(ck.to_model(), Err(ModelError::ParamMismatch(_))));
    }

    proptest! {
        #[test]
        fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let _ = Checkpoint::decode(&bytes);
        }

        #[test]
        fn decode_survives_bit_flips(pos in 0usize..400, bit in 0u8..8) {
            let mut bytes = Checkpoint::from_model(&tiny(), 1).encode();
            let p = pos % bytes.len();
            bytes[p] ^= 1 << bit;
            let _ = Checkpoint::decode(&bytes);
        }
    }
}
