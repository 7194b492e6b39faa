//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] owns every [`Tensor`] created during a forward pass; ops return
//! lightweight [`TensorId`] handles. Calling [`Tape::backward`] on a scalar
//! sweeps the tape once in reverse construction order and accumulates
//! gradients into the `grad` buffers of leaves that were created with
//! `requires_grad`. Repeated backward calls accumulate; [`Tape::zero_grads`]
//! resets.
//!
//! Reductions (`softmax`, `logsumexp`, `max_last`) act along the **last**
//! axis; `logsumexp` and `softmax` subtract the row max before
//! exponentiating so results stay finite for inputs up to ~1e308.

use super::kernels;
use thiserror::Error;

/// Errors produced by tape operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: domain error on value {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: index {index} out of bounds for size {size}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward target must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tensor id {id} is not on this tape (tape has {len} nodes)")]
    NotOnTape { id: usize, len: usize },
    #[error("{op}: expected a non-empty operand list")]
    EmptyOperands { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    AddBias(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    MatMul(TensorId, TensorId),
    GatherRows(TensorId, Box<[usize]>),
    SliceRows(TensorId, usize),
    SliceCols(TensorId, usize),
    ConcatCols(Box<[TensorId]>),
    StackScalars(Box<[TensorId]>),
    Pick(TensorId, usize),
    Exp(TensorId),
    Log(TensorId),
    Softplus(TensorId),
    Gelu(TensorId),
    MaxLast(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    SoftmaxLast(TensorId),
    LogSumExpLast(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    },
    Attention {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        causal: bool,
    },
}

/// A dense tensor on the tape: row-major f64 data plus an optional gradient.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    op: Op,
    /// Forward by-products needed by backward (softmax rows of attention,
    /// normalized rows of layer norm, argmax indices of max).
    aux: Vec<f64>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

const LN_EPS: f64 = 1e-5;

/// Records a forward computation and replays it in reverse for gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
}

fn outer_inner(shape: &[usize]) -> (usize, usize) {
    let inner = *shape.last().unwrap_or(&1);
    let outer = shape.iter().rev().skip(1).product::<usize>().max(1);
    (outer, inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop all nodes but keep the allocation.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: TensorId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::NotOnTape {
                id: id.0,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        self.push_aux(shape, data, requires_grad, op, Vec::new())
    }

    fn push_aux(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
        aux: Vec<f64>,
    ) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite forward value");
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
            op,
            aux,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Extract the value of a one-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- constructors ----

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                op: "leaf",
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    /// A leaf that does not require gradients.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    // ---- elementwise / structural ops ----

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(Vec<usize>, usize)> {
        self.check(a)?;
        self.check(b)?;
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok((self.nodes[a.0].shape.clone(), self.nodes[a.0].data.len()))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, _) = self.binary_same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, data, rg, Op::Add(a, b)))
    }

    /// `[r,c] + [c]` row-broadcast add (bias).
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        self.check(a)?;
        self.check(bias)?;
        let (r, c) = outer_inner(&self.nodes[a.0].shape);
        if self.nodes[bias.0].data.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..r {
            for (d, bv) in data[i * c..(i + 1) * c].iter_mut().zip(&self.nodes[bias.0].data) {
                *d += bv;
            }
        }
        let rg = self.requires(a) || self.requires(bias);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, rg, Op::AddBias(a, bias)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, _) = self.binary_same_shape("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, data, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, _) = self.binary_same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, data, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        self.check(a)?;
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a);
        Ok(self.push(shape, data, rg, Op::Scale(a, c)))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        self.check(a)?;
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a);
        Ok(self.push(shape, data, rg, Op::AddScalar(a)))
    }

    /// Strict 2-d matrix product `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check(a)?;
        self.check(b)?;
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kernels::mm_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut data);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], data, rg, Op::MatMul(a, b)))
    }

    /// Embedding lookup: gather rows of a `[v,d]` table.
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        self.check(table)?;
        let st = &self.nodes[table.0].shape;
        if st.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                lhs: st.clone(),
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfBounds {
                op: "gather_rows",
                index: bad,
                size: v,
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&self.nodes[table.0].data[i * d..(i + 1) * d]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            vec![ids.len(), d],
            data,
            rg,
            Op::GatherRows(table, ids.to_vec().into_boxed_slice()),
        ))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.check(a)?;
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 || start + len > s[0] || len == 0 {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_rows",
                index: start + len,
                size: s.first().copied().unwrap_or(0),
            });
        }
        let d = s[1];
        let data = self.nodes[a.0].data[start * d..(start + len) * d].to_vec();
        let rg = self.requires(a);
        Ok(self.push(vec![len, d], data, rg, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.check(a)?;
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_cols",
                index: start + len,
                size: s.get(1).copied().unwrap_or(0),
            });
        }
        let (r, c) = (s[0], s[1]);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.nodes[a.0].data[i * c + start..i * c + start + len]);
        }
        let rg = self.requires(a);
        Ok(self.push(vec![r, len], data, rg, Op::SliceCols(a, start)))
    }

    /// Concatenate 2-d tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::EmptyOperands { op: "concat_cols" });
        }
        for &p in parts {
            self.check(p)?;
        }
        let r = self.nodes[parts[0].0].shape[0];
        let mut c_total = 0;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[0] != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: s.clone(),
                });
            }
            c_total += s[1];
        }
        let mut data = Vec::with_capacity(r * c_total);
        for i in 0..r {
            for &p in parts {
                let c = self.nodes[p.0].shape[1];
                data.extend_from_slice(&self.nodes[p.0].data[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            vec![r, c_total],
            data,
            rg,
            Op::ConcatCols(parts.to_vec().into_boxed_slice()),
        ))
    }

    /// Stack one-element tensors into a vector `[n]`.
    pub fn stack_scalars(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::EmptyOperands { op: "stack_scalars" });
        }
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            self.check(p)?;
            if self.nodes[p.0].data.len() != 1 {
                return Err(TensorError::NotScalar {
                    shape: self.nodes[p.0].shape.clone(),
                });
            }
            data.push(self.nodes[p.0].data[0]);
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            vec![parts.len()],
            data,
            rg,
            Op::StackScalars(parts.to_vec().into_boxed_slice()),
        ))
    }

    /// Extract one element (flat index) as a `[1]` tensor.
    pub fn pick(&mut self, a: TensorId, index: usize) -> Result<TensorId> {
        self.check(a)?;
        let n = self.nodes[a.0].data.len();
        if index >= n {
            return Err(TensorError::IndexOutOfBounds {
                op: "pick",
                index,
                size: n,
            });
        }
        let v = self.nodes[a.0].data[index];
        let rg = self.requires(a);
        Ok(self.push(vec![1], vec![v], rg, Op::Pick(a, index)))
    }

    // ---- unary math ----

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.check(a)?;
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a);
        Ok(self.push(shape, data, rg, Op::Exp(a)))
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        self.check(a)?;
        if let Some(&bad) = self.nodes[a.0].data.iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                value: bad,
            });
        }
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a);
        Ok(self.push(shape, data, rg, Op::Log(a)))
    }

    pub fn softplus(&mut self, a: TensorId) -> Result<TensorId> {
        self.check(a)?;
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| kernels::softplus(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a);
        Ok(self.push(shape, data, rg, Op::Softplus(a)))
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        self.check(a)?;
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a);
        Ok(self.push(shape, data, rg, Op::Gelu(a)))
    }

    // ---- reductions ----

    /// Max along the last axis; output keeps the axis with size 1.
    /// Ties resolve to the first maximal element.
    pub fn max_last(&mut self, a: TensorId) -> Result<TensorId> {
        self.check(a)?;
        let (outer, inner) = outer_inner(&self.nodes[a.0].shape);
        let mut data = Vec::with_capacity(outer);
        let mut aux = Vec::with_capacity(outer);
        for i in 0..outer {
            let row = &self.nodes[a.0].data[i * inner..(i + 1) * inner];
            let (mut best, mut arg) = (f64::NEG_INFINITY, 0usize);
            for (j, &v) in row.iter().enumerate() {
                if v > best {
                    best = v;
                    arg = j;
                }
            }
            data.push(best);
            aux.push(arg as f64);
        }
        let mut shape = self.nodes[a.0].shape.clone();
        *shape.last_mut().unwrap() = 1;
        let rg = self.requires(a);
        Ok(self.push_aux(shape, data, rg, Op::MaxLast(a), aux))
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        self.check(a)?;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.requires(a);
        Ok(self.push(vec![1], vec![s], rg, Op::SumAll(a)))
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        self.check(a)?;
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.requires(a);
        Ok(self.push(vec![1], vec![s / n], rg, Op::MeanAll(a)))
    }

    /// Softmax along the last axis (max-subtracted for stability).
    pub fn softmax_last(&mut self, a: TensorId) -> Result<TensorId> {
        self.check(a)?;
        let (outer, inner) = outer_inner(&self.nodes[a.0].shape);
        let mut data = vec![0.0; outer * inner];
        for i in 0..outer {
            let row = &self.nodes[a.0].data[i * inner..(i + 1) * inner];
            softmax_row(row, &mut data[i * inner..(i + 1) * inner]);
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a);
        Ok(self.push(shape, data, rg, Op::SoftmaxLast(a)))
    }

    /// Log-sum-exp along the last axis (max-subtracted for stability);
    /// output keeps the axis with size 1.
    pub fn logsumexp_last(&mut self, a: TensorId) -> Result<TensorId> {
        self.check(a)?;
        let (outer, inner) = outer_inner(&self.nodes[a.0].shape);
        let mut data = Vec::with_capacity(outer);
        for i in 0..outer {
            let row = &self.nodes[a.0].data[i * inner..(i + 1) * inner];
            data.push(logsumexp_row(row));
        }
        let mut shape = self.nodes[a.0].shape.clone();
        *shape.last_mut().unwrap() = 1;
        let rg = self.requires(a);
        Ok(self.push(shape, data, rg, Op::LogSumExpLast(a)))
    }

    // ---- normalization / attention ----

    /// Row-wise layer normalization of `x [r,c]` with gain `gamma [c]` and
    /// shift `beta [c]`; epsilon fixed at 1e-5.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (r, c) = outer_inner(&self.nodes[x.0].shape);
        if self.nodes[gamma.0].data.len() != c || self.nodes[beta.0].data.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let mut data = vec![0.0; r * c];
        // aux layout: r*c normalized values, then r inverse stds
        let mut aux = vec![0.0; r * c + r];
        for i in 0..r {
            let row = &self.nodes[x.0].data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            aux[r * c + i] = inv_std;
            for j in 0..c {
                let xh = (row[j] - mean) * inv_std;
                aux[i * c + j] = xh;
                data[i * c + j] = self.nodes[gamma.0].data[j] * xh + self.nodes[beta.0].data[j];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push_aux(shape, data, rg, Op::LayerNorm { x, gamma, beta }, aux))
    }

    /// Single-head scaled dot-product attention over `[len, dh]` inputs.
    /// With `causal`, position i attends only to positions <= i.
    pub fn attention(&mut self, q: TensorId, k: TensorId, v: TensorId, causal: bool) -> Result<TensorId> {
        self.check(q)?;
        self.check(k)?;
        self.check(v)?;
        let sq = self.nodes[q.0].shape.clone();
        for &other in &[k, v] {
            if self.nodes[other.0].shape != sq || sq.len() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    lhs: sq.clone(),
                    rhs: self.nodes[other.0].shape.clone(),
                });
            }
        }
        let (len, dh) = (sq[0], sq[1]);
        let scale = 1.0 / (dh as f64).sqrt();
        // aux holds the softmaxed score matrix P [len,len]
        let mut probs = vec![0.0; len * len];
        let qd = &self.nodes[q.0].data;
        let kd = &self.nodes[k.0].data;
        for i in 0..len {
            let limit = if causal { i + 1 } else { len };
            let qrow = &qd[i * dh..(i + 1) * dh];
            let mut scores = vec![0.0; limit];
            for (j, s) in scores.iter_mut().enumerate() {
                let krow = &kd[j * dh..(j + 1) * dh];
                *s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_row(&scores, &mut probs[i * len..i * len + limit]);
        }
        let mut data = vec![0.0; len * dh];
        kernels::mm_nn(&probs, &self.nodes[v.0].data, len, len, dh, &mut data);
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        Ok(self.push_aux(vec![len, dh], data, rg, Op::Attention { q, k, v, causal }, probs))
    }

    // ---- backward ----

    /// Populate gradients of every `requires_grad` leaf reachable from a
    /// scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.check(loss)?;
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let n = self.nodes.len();
        let mut buf: Vec<Option<Vec<f64>>> = vec![None; n];
        buf[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = buf[idx].take() else { continue };
            self.apply_backward(idx, &gy, &mut buf);
            // keep the loss-side buffer attached on leaves
            if matches!(self.nodes[idx].op, Op::Leaf) {
                buf[idx] = Some(gy);
            }
        }

        for idx in 0..n {
            if !matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].requires_grad {
                continue;
            }
            if let Some(g) = buf[idx].take() {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn accumulate(buf: &mut [Option<Vec<f64>>], nodes: &[Tensor], id: TensorId, add: impl FnOnce(&mut [f64])) {
        if !nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut buf[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; nodes[id.0].data.len()]);
        }
        add(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn apply_backward(&self, idx: usize, gy: &[f64], buf: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accumulate(buf, nodes, *a, |g| {
                    for (x, y) in g.iter_mut().zip(gy) {
                        *x += y;
                    }
                });
                Self::accumulate(buf, nodes, *b, |g| {
                    for (x, y) in g.iter_mut().zip(gy) {
                        *x += y;
                    }
                });
            }
            Op::AddBias(a, bias) => {
                Self::accumulate(buf, nodes, *a, |g| {
                    for (x, y) in g.iter_mut().zip(gy) {
                        *x += y;
                    }
                });
                let c = nodes[bias.0].data.len();
                let r = node.data.len() / c;
                Self::accumulate(buf, nodes, *bias, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += gy[i * c + j];
                        }
                    }
                });
            }
            Op::Sub(a, b) => {
                Self::accumulate(buf, nodes, *a, |g| {
                    for (x, y) in g.iter_mut().zip(gy) {
                        *x += y;
                    }
                });
                Self::accumulate(buf, nodes, *b, |g| {
                    for (x, y) in g.iter_mut().zip(gy) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (&nodes[a.0].data, &nodes[b.0].data);
                Self::accumulate(buf, nodes, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * db[i];
                    }
                });
                Self::accumulate(buf, nodes, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * da[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                Self::accumulate(buf, nodes, *a, |g| {
                    for (x, y) in g.iter_mut().zip(gy) {
                        *x += y * c;
                    }
                });
            }
            Op::AddScalar(a) => {
                Self::accumulate(buf, nodes, *a, |g| {
                    for (x, y) in g.iter_mut().zip(gy) {
                        *x += y;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (da, db) = (&nodes[a.0].data, &nodes[b.0].data);
                // dA += dY * B^T
                Self::accumulate(buf, nodes, *a, |g| {
                    kernels::mm_nt(gy, db, m, n, k, g);
                });
                // dB += A^T * dY
                Self::accumulate(buf, nodes, *b, |g| {
                    kernels::mm_tn(da, gy, m, k, n, g);
                });
            }
            Op::GatherRows(table, ids) => {
                let d = nodes[table.0].shape[1];
                Self::accumulate(buf, nodes, *table, |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += gy[r * d + j];
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let d = nodes[a.0].shape[1];
                let start = *start;
                Self::accumulate(buf, nodes, *a, |g| {
                    for (i, y) in gy.iter().enumerate() {
                        g[start * d + i] += y;
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let c = nodes[a.0].shape[1];
                let len = node.shape[1];
                let start = *start;
                let r = node.shape[0];
                Self::accumulate(buf, nodes, *a, |g| {
                    for i in 0..r {
                        for j in 0..len {
                            g[i * c + start + j] += gy[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let r = node.shape[0];
                let c_total = node.shape[1];
                let mut offset = 0;
                for &p in parts.iter() {
                    let c = nodes[p.0].shape[1];
                    let off = offset;
                    Self::accumulate(buf, nodes, p, |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[i * c + j] += gy[i * c_total + off + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::StackScalars(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    Self::accumulate(buf, nodes, p, |g| {
                        g[0] += gy[i];
                    });
                }
            }
            Op::Pick(a, index) => {
                let index = *index;
                Self::accumulate(buf, nodes, *a, |g| {
                    g[index] += gy[0];
                });
            }
            Op::Exp(a) => {
                let out = &node.data;
                Self::accumulate(buf, nodes, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * out[i];
                    }
                });
            }
            Op::Log(a) => {
                let x = &nodes[a.0].data;
                Self::accumulate(buf, nodes, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] / x[i];
                    }
                });
            }
            Op::Softplus(a) => {
                let x = &nodes[a.0].data;
                Self::accumulate(buf, nodes, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * kernels::sigmoid(x[i]);
                    }
                });
            }
            Op::Gelu(a) => {
                let x = &nodes[a.0].data;
                Self::accumulate(buf, nodes, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * kernels::gelu_grad(x[i]);
                    }
                });
            }
            Op::MaxLast(a) => {
                let (_, inner) = outer_inner(&nodes[a.0].shape);
                let aux = &node.aux;
                Self::accumulate(buf, nodes, *a, |g| {
                    for (i, y) in gy.iter().enumerate() {
                        let arg = aux[i] as usize;
                        g[i * inner + arg] += y;
                    }
                });
            }
            Op::SumAll(a) => {
                Self::accumulate(buf, nodes, *a, |g| {
                    for x in g.iter_mut() {
                        *x += gy[0];
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = nodes[a.0].data.len() as f64;
                Self::accumulate(buf, nodes, *a, |g| {
                    for x in g.iter_mut() {
                        *x += gy[0] / n;
                    }
                });
            }
            Op::SoftmaxLast(a) => {
                let (outer, inner) = outer_inner(&nodes[a.0].shape);
                let y = &node.data;
                Self::accumulate(buf, nodes, *a, |g| {
                    for i in 0..outer {
                        let yrow = &y[i * inner..(i + 1) * inner];
                        let gyrow = &gy[i * inner..(i + 1) * inner];
                        let dot: f64 = yrow.iter().zip(gyrow).map(|(a, b)| a * b).sum();
                        for j in 0..inner {
                            g[i * inner + j] += yrow[j] * (gyrow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSumExpLast(a) => {
                let (outer, inner) = outer_inner(&nodes[a.0].shape);
                let x = &nodes[a.0].data;
                let out = &node.data;
                Self::accumulate(buf, nodes, *a, |g| {
                    for i in 0..outer {
                        for j in 0..inner {
                            g[i * inner + j] += gy[i] * (x[i * inner + j] - out[i]).exp();
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (r, c) = outer_inner(&nodes[x.0].shape);
                let aux = &node.aux;
                let gamma_d = &nodes[gamma.0].data;
                Self::accumulate(buf, nodes, *x, |g| {
                    for i in 0..r {
                        let xh = &aux[i * c..(i + 1) * c];
                        let inv_std = aux[r * c + i];
                        let gyrow = &gy[i * c..(i + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let gg = gyrow[j] * gamma_d[j];
                            m1 += gg;
                            m2 += gg * xh[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let gg = gyrow[j] * gamma_d[j];
                            g[i * c + j] += inv_std * (gg - m1 - xh[j] * m2);
                        }
                    }
                });
                Self::accumulate(buf, nodes, *gamma, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += gy[i * c + j] * aux[i * c + j];
                        }
                    }
                });
                Self::accumulate(buf, nodes, *beta, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += gy[i * c + j];
                        }
                    }
                });
            }
            Op::Attention { q, k, v, causal } => {
                let (len, dh) = (node.shape[0], node.shape[1]);
                let scale = 1.0 / (dh as f64).sqrt();
                let probs = &node.aux; // [len,len], causal rows zero-padded
                let (qd, kd, vd) = (&nodes[q.0].data, &nodes[k.0].data, &nodes[v.0].data);

                // dV += P^T * dY
                Self::accumulate(buf, nodes, *v, |g| {
                    kernels::mm_tn(probs, gy, len, len, dh, g);
                });

                // dS = P .* (dP - rowsum(dP .* P)), dP = dY * V^T
                let mut dscores = vec![0.0; len * len];
                for i in 0..len {
                    let limit = if *causal { i + 1 } else { len };
                    let gyrow = &gy[i * dh..(i + 1) * dh];
                    let prow = &probs[i * len..i * len + limit];
                    let mut dp = vec![0.0; limit];
                    for (j, d) in dp.iter_mut().enumerate() {
                        let vrow = &vd[j * dh..(j + 1) * dh];
                        *d = gyrow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    }
                    let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for j in 0..limit {
                        dscores[i * len + j] = prow[j] * (dp[j] - dot) * scale;
                    }
                }
                // dQ += dS * K ; dK += dS^T * Q
                Self::accumulate(buf, nodes, *q, |g| {
                    kernels::mm_nn(&dscores, kd, len, len, dh, g);
                });
                Self::accumulate(buf, nodes, *k, |g| {
                    kernels::mm_tn(&dscores, qd, len, len, dh, g);
                });
            }
        }
    }
}

/// Stable softmax of one row into `out` (lengths must match).
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Stable log-sum-exp of a slice.
pub fn logsumexp_row(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
    m + sum.ln()
}
