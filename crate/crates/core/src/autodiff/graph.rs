use super::{Primitive, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Gelu(Var),
    Sum(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Transpose(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    MaskedSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

impl Op {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::Exp(_) => Primitive::Exp,
            Op::Log(_) => Primitive::Log,
            Op::Tanh(_) => Primitive::Tanh,
            Op::Gelu(_) => Primitive::Gelu,
            Op::Sum(_) => Primitive::Sum,
            Op::MeanAxis { .. } => Primitive::MeanAxis,
            Op::Transpose(_) => Primitive::Transpose,
            Op::Reshape(_) => Primitive::Reshape,
            Op::LayerNorm { .. } => Primitive::LayerNorm,
            Op::Embedding { .. } => Primitive::Embedding,
            Op::ConcatRows(_) => Primitive::ConcatRows,
            Op::ConcatCols(_) => Primitive::ConcatCols,
            Op::SliceRows { .. } => Primitive::SliceRows,
            Op::SliceCols { .. } => Primitive::SliceCols,
            Op::MaskedSoftmax(_) => Primitive::MaskedSoftmax,
            Op::CrossEntropy { .. } => Primitive::CrossEntropy,
        })
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only record of primitive applications.
///
/// Nodes are stored in insertion order, which is a valid topological order
/// because every op only references existing nodes. [`Graph::backward`]
/// walks them in exact reverse order. One graph is built per training step
/// and dropped afterwards.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn matmul_nt_into(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn matmul_tn_into(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax restricted to visible entries.
///
/// The maximum and the normaliser are taken over visible entries only and
/// hidden entries are written as exact zeros, which is the limit of adding
/// an unbounded negative offset to hidden logits. Hidden logits therefore
/// never influence any output bit.
pub fn masked_softmax_rows(logits: &[f64], mask: &[bool], rows: usize, cols: usize) -> Result<Vec<f64>, TensorError> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let x = &logits[r * cols..(r + 1) * cols];
        let m = &mask[r * cols..(r + 1) * cols];
        let max = x
            .iter()
            .zip(m)
            .filter(|(_, &vis)| vis)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(TensorError::FullyMaskedRow { row: r });
        }
        let y = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for ((o, &v), &vis) in y.iter_mut().zip(x).zip(m) {
            if vis {
                *o = (v - max).exp();
                total += *o;
            }
        }
        for (o, &vis) in y.iter_mut().zip(m) {
            if vis {
                *o /= total;
            }
        }
    }
    Ok(out)
}

fn accumulator<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        let mut value = tensor;
        value.zero_grad();
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, inputs: &[Var]) -> Result<Var, TensorError> {
        if values.iter().any(|v| !v.is_finite()) {
            let name = op.primitive().map_or("leaf", Primitive::name);
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Tensor::from_parts(shape, values),
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k) = ta.dims2();
        let n = tb.shape()[1];
        let mut out = vec![0.0; m * n];
        matmul_into(ta.values(), tb.values(), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), vec![m, n], out, &[a, b])
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let out = ta.values().iter().zip(tb.values()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push(op, shape, out, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let t = self.value(a);
        let out = t.values().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push(op, shape, out, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        if !s.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).values().iter().sum();
        self.push(Op::Sum(a), vec![1], vec![s], &[a])
    }

    /// Mean of a matrix over `axis` (0 = rows collapse, 1 = columns collapse).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.shape().len() != 2 || axis > 1 {
            return Err(TensorError::InvalidArgument(format!(
                "mean_axis expects a matrix and axis 0 or 1, got shape {:?} axis {axis}",
                t.shape()
            )));
        }
        let (r, c) = t.dims2();
        let v = t.values();
        let out = if axis == 0 {
            let mut acc = vec![0.0; c];
            for i in 0..r {
                acc.iter_mut().zip(&v[i * c..(i + 1) * c]).for_each(|(a, b)| *a += b);
            }
            acc.iter().map(|a| a / r as f64).collect::<Vec<_>>()
        } else {
            (0..r)
                .map(|i| v[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
                .collect()
        };
        let n = out.len();
        self.push(Op::MeanAxis { x, axis }, vec![n], out, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.shape().len() > 2 {
            return Err(TensorError::InvalidArgument(format!(
                "transpose expects rank <= 2, got {:?}",
                t.shape()
            )));
        }
        let (r, c) = t.dims2();
        let v = t.values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.push(Op::Transpose(x), vec![c, r], out, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let t = self.value(x);
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != t.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: t.shape().to_vec(),
                right: shape,
            });
        }
        let out = t.values().to_vec();
        self.push(Op::Reshape(x), shape, out, &[x])
    }

    /// Row-wise layer normalisation with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (r, c) = tx.dims2();
        if tg.len() != c {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.len() != c {
            return Err(mismatch("layer_norm", tx, tb));
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument("layer_norm eps must be > 0".into()));
        }
        let (xv, gv, bv) = (tx.values(), tg.values(), tb.values());
        let mut normalized = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let n = (row[j] - mean) * is;
                normalized[i * c + j] = n;
                out[i * c + j] = n * gv[j] + bv[j];
            }
        }
        let shape = tx.shape().to_vec();
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            shape,
            out,
            &[x, gain, bias],
        )
    }

    /// Gathers rows of `table` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(TensorError::InvalidArgument(format!(
                "embedding table must be a matrix, got {:?}",
                t.shape()
            )));
        }
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument("embedding lookup with no ids".into()));
        }
        let (v, d) = t.dims2();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, bound: v });
            }
            out.extend_from_slice(t.row(id));
        }
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), d],
            out,
            &[table],
        )
    }

    /// Stacks matrices (or vectors, as single rows) along the sequence axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat_rows of nothing".into()))?;
        let c = self.dims(*first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() > 2 || t.dims2().1 != c {
                return Err(mismatch("concat_rows", self.value(*first), t));
            }
            rows += t.dims2().0;
            out.extend_from_slice(t.values());
        }
        self.push(Op::ConcatRows(parts.to_vec()), vec![rows, c], out, parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat_cols of nothing".into()))?;
        let r = self.dims(*first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.dims2().0 != r {
                return Err(mismatch("concat_cols", self.value(*first), t));
            }
            widths.push(t.dims2().1);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p).values();
            for i in 0..r {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.push(Op::ConcatCols(parts.to_vec()), vec![r, total], out, parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if len == 0 || start + len > r {
            return Err(TensorError::InvalidArgument(format!(
                "slice_rows {start}..{} out of bounds for {r} rows",
                start + len
            )));
        }
        let out = t.values()[start * c..(start + len) * c].to_vec();
        self.push(Op::SliceRows { x, start }, vec![len, c], out, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if len == 0 || start + len > c {
            return Err(TensorError::InvalidArgument(format!(
                "slice_cols {start}..{} out of bounds for {c} cols",
                start + len
            )));
        }
        let v = t.values();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols { x, start }, vec![r, len], out, &[x])
    }

    /// Row-wise softmax where `mask[i] == true` marks a visible entry.
    ///
    /// Hidden entries receive exactly zero probability; a row with no
    /// visible entry is rejected.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let t = self.value(logits);
        if mask.len() != t.len() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                left: t.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let (r, c) = t.dims2();
        let out = masked_softmax_rows(t.values(), mask, r, c)?;
        let shape = t.shape().to_vec();
        self.push(Op::MaskedSoftmax(logits), shape, out, &[logits])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    /// Rows whose target equals `ignore` are excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var, TensorError> {
        let t = self.value(logits);
        let (r, c) = t.dims2();
        if targets.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let targets: Vec<Option<usize>> = targets
            .iter()
            .map(|&y| if Some(y) == ignore { None } else { Some(y) })
            .collect();
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::InvalidArgument(
                "cross_entropy with no non-ignored targets".into(),
            ));
        }
        let v = t.values();
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for (i, y) in targets.iter().enumerate() {
            let row = &v[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            if let Some(y) = *y {
                if y >= c {
                    return Err(TensorError::IndexOutOfRange { index: y, bound: c });
                }
                loss += lse - row[y];
            }
        }
        loss /= count as f64;
        self.push(
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
            vec![1],
            vec![loss],
            &[logits],
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients of leaves created with `requires_grad` are added to their
    /// gradient slot, so repeated calls accumulate until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let Some(mut g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            if let Some(p) = node.op.primitive() {
                let sign = fault::sign_for(p);
                if sign != 1.0 {
                    g.iter_mut().for_each(|x| *x *= sign);
                }
            }
            self.backprop_node(idx, &g, &mut grads);
        }

        for (idx, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[idx].op) {
                if self.nodes[idx].value.requires_grad() {
                    self.nodes[idx].value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr) => {
                accumulator(grads, nodes, $v)
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = ta.dims2();
                let nn = tb.shape()[1];
                if wants(*a) {
                    matmul_nt_into(g, tb.values(), acc!(*a), m, k, nn);
                }
                if wants(*b) {
                    matmul_tn_into(ta.values(), g, acc!(*b), m, k, nn);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        acc!(*v).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(*b) {
                    acc!(*b).iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.values(), nodes[b.0].value.values());
                if wants(*a) {
                    let ga = acc!(*a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                acc!(*a).iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
            }
            Op::Exp(a) => {
                let y = node.value.values();
                let ga = acc!(*a);
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i];
                }
            }
            Op::Log(a) => {
                let x = nodes[a.0].value.values();
                let ga = acc!(*a);
                for i in 0..g.len() {
                    ga[i] += g[i] / x[i];
                }
            }
            Op::Tanh(a) => {
                let y = node.value.values();
                let ga = acc!(*a);
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Gelu(a) => {
                let x = nodes[a.0].value.values();
                let ga = acc!(*a);
                for i in 0..g.len() {
                    ga[i] += g[i] * gelu_grad(x[i]);
                }
            }
            Op::Sum(a) => {
                acc!(*a).iter_mut().for_each(|x| *x += g[0]);
            }
            Op::MeanAxis { x, axis } => {
                let (r, c) = nodes[x.0].value.dims2();
                let gx = acc!(*x);
                if *axis == 0 {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j] / r as f64;
                        }
                    }
                } else {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[i] / c as f64;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = nodes[x.0].value.dims2();
                let gx = acc!(*x);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(x) => {
                acc!(*x).iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (r, c) = nodes[x.0].value.dims2();
                let gv = nodes[gain.0].value.values();
                if wants(*bias) {
                    let gb = acc!(*bias);
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                }
                if wants(*gain) {
                    let gg = acc!(*gain);
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * normalized[i * c + j];
                        }
                    }
                }
                if wants(*x) {
                    let gx = acc!(*x);
                    let mut dn = vec![0.0; c];
                    for i in 0..r {
                        let nrow = &normalized[i * c..(i + 1) * c];
                        for j in 0..c {
                            dn[j] = g[i * c + j] * gv[j];
                        }
                        let mean_dn = dn.iter().sum::<f64>() / c as f64;
                        let mean_dn_n = dn.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[i * c + j] += inv_std[i] * (dn[j] - mean_dn - nrow[j] * mean_dn_n);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.dims2().1;
                let gt = acc!(*table);
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[row * d + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if wants(*p) {
                        acc!(*p)
                            .iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(a, b)| *a += b);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.dims2().1;
                    if wants(*p) {
                        let gp = acc!(*p);
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = nodes[x.0].value.dims2().1;
                let gx = acc!(*x);
                gx[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].value.dims2().1;
                let (r, len) = node.value.dims2();
                let gx = acc!(*x);
                for i in 0..r {
                    for j in 0..len {
                        gx[i * c + start + j] += g[i * len + j];
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                // Hidden outputs are exactly zero, so their gradient vanishes.
                let y = node.value.values();
                let (r, c) = node.value.dims2();
                let gx = acc!(*x);
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let c = nodes[logits.0].value.dims2().1;
                let scale = g[0] / *count as f64;
                let gl = acc!(*logits);
                for (i, y) in targets.iter().enumerate() {
                    let Some(y) = *y else { continue };
                    for j in 0..c {
                        gl[i * c + j] += scale * probs[i * c + j];
                    }
                    gl[i * c + y] -= scale;
                }
            }
        }
    }
}

/// Backward-rule fault hook for mutation testing of the verification suite.
pub mod fault {
    use super::Primitive;

    #[cfg(any(test, feature = "fault-injection"))]
    thread_local! {
        static FLIPPED: std::cell::Cell<Option<Primitive>> = const { std::cell::Cell::new(None) };
    }

    /// Negates the backward rule of `p` on the current thread until reset.
    #[cfg(any(test, feature = "fault-injection"))]
    pub fn flip_sign(p: Option<Primitive>) {
        FLIPPED.with(|f| f.set(p));
    }

    /// Environment variable naming a primitive whose rule
    /// [`install_from_env`] flips.
    pub const FAULT_ENV: &str = "CONTROLREC_FAULT_PRIMITIVE";

    /// Applies a fault named in [`FAULT_ENV`] (by its `Debug` name) and
    /// returns it. Without the `fault-injection` feature this does nothing.
    pub fn install_from_env() -> Option<Primitive> {
        #[cfg(any(test, feature = "fault-injection"))]
        {
            let name = std::env::var(FAULT_ENV).ok()?;
            let p = Primitive::ALL.into_iter().find(|p| format!("{p:?}") == name)?;
            flip_sign(Some(p));
            Some(p)
        }
        #[cfg(not(any(test, feature = "fault-injection")))]
        None
    }

    #[inline]
    pub(crate) fn sign_for(_p: Primitive) -> f64 {
        #[cfg(any(test, feature = "fault-injection"))]
        if FLIPPED.with(|f| f.get()) == Some(_p) {
            return -1.0;
        }
        1.0
    }
}
