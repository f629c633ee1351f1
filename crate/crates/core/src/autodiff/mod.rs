//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records applications of a fixed primitive set; each primitive
//! carries a forward rule and a backward rule. [`finite_diff_check`] compares
//! the backward rules against central differences.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, FiniteDiff, GradCheckReport};
pub use graph::{fault, masked_softmax_rows, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: every dimension must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("masked_softmax: row {row} has no visible entry")]
    FullyMaskedRow { row: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("function is not deterministic: baseline evaluations {first} and {second} differ")]
    Nondeterministic { first: f64, second: f64 },
    #[error("{0}")]
    InvalidArgument(String),
}

/// The differentiable primitives a [`Graph`] can record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Exp,
    Log,
    Tanh,
    Gelu,
    Sum,
    MeanAxis,
    Transpose,
    Reshape,
    LayerNorm,
    Embedding,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    MaskedSoftmax,
    CrossEntropy,
}

impl Primitive {
    pub const ALL: [Primitive; 21] = [
        Primitive::MatMul,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Exp,
        Primitive::Log,
        Primitive::Tanh,
        Primitive::Gelu,
        Primitive::Sum,
        Primitive::MeanAxis,
        Primitive::Transpose,
        Primitive::Reshape,
        Primitive::LayerNorm,
        Primitive::Embedding,
        Primitive::ConcatRows,
        Primitive::ConcatCols,
        Primitive::SliceRows,
        Primitive::SliceCols,
        Primitive::MaskedSoftmax,
        Primitive::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Tanh => "tanh",
            Primitive::Gelu => "gelu",
            Primitive::Sum => "sum",
            Primitive::MeanAxis => "mean_axis",
            Primitive::Transpose => "transpose",
            Primitive::Reshape => "reshape",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Embedding => "embedding",
            Primitive::ConcatRows => "concat_rows",
            Primitive::ConcatCols => "concat_cols",
            Primitive::SliceRows => "slice_rows",
            Primitive::SliceCols => "slice_cols",
            Primitive::MaskedSoftmax => "masked_softmax",
            Primitive::CrossEntropy => "cross_entropy",
        }
    }

    /// The full primitive catalogue with forward and backward rules.
    pub fn primitive_set() -> &'static [Primitive] {
        &Self::ALL
    }
}

impl std::fmt::Display for Primitive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
