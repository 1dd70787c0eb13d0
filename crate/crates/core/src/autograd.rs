//! Dense f64 tensors and a reverse-mode tape.
//!
//! Every differentiable operation is a method on [`Tape`]. Calling one computes
//! the forward value immediately and, when any input requires a gradient,
//! appends a record holding the backward rule. [`Tape::backward`] walks the
//! records in reverse order exactly once.
//!
//! Shapes are explicit and row-major. The only broadcasting is
//! scalar-times-tensor ([`Tape::scale`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: dimensions must be positive")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Marks the tensor as a gradient-carrying leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizers and initializers. Not recorded anywhere.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Untaped matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = matmul_dims(self, other)?;
        Tensor::new(vec![m, n], gemm(&self.data, &other.data, m, k, n))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok((a.shape[0], a.shape[1], b.shape[1]))
}

/// `C = A·B` for row-major `A: m×k`, `B: k×n`.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_acc(a, b, &mut c, m, k, n);
    c
}

/// `C += A·B`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `dA += dC·Bᵀ` for `dC: m×n`, `B: k×n`.
fn gemm_acc_nt(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = dc_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            da[i * k + p] += dot;
        }
    }
}

/// `dB += Aᵀ·dC` for `A: m×k`, `dC: m×n`.
fn gemm_acc_tn(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let db_row = &mut db[p * n..(p + 1) * n];
            for (d, &g) in db_row.iter_mut().zip(dc_row) {
                *d += a_ip * g;
            }
        }
    }
}

/// Token-level reduction used by [`Tape::cross_entropy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Matmul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        a: TensorId,
        factor: f64,
    },
    Sum {
        a: TensorId,
    },
    Transpose {
        a: TensorId,
        rows: usize,
        cols: usize,
    },
    Reshape {
        a: TensorId,
    },
    Slice {
        a: TensorId,
        src_cols: usize,
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
    },
    ConcatCols {
        parts: Vec<(TensorId, usize)>,
        rows: usize,
    },
    ConcatRows {
        parts: Vec<(TensorId, usize)>,
    },
    Embedding {
        table: TensorId,
        ids: Vec<usize>,
        dim: usize,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        dim: usize,
    },
    Gelu {
        a: TensorId,
    },
    Softmax {
        a: TensorId,
        outer: usize,
        len: usize,
        inner: usize,
    },
    CausalSoftmax {
        a: TensorId,
        size: usize,
    },
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        vocab: usize,
        denom: f64,
    },
}

#[derive(Debug)]
struct Record {
    output: TensorId,
    op: Op,
}

/// Arena of tensors plus the ordered list of differentiable operations that
/// produced them. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    tensors: Vec<Tensor>,
    records: Vec<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an existing tensor (parameter or constant).
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.tensors.push(tensor);
        TensorId(self.tensors.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of recorded (differentiable) operations.
    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.tensors[id.0].requires_grad)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[TensorId]) -> TensorId {
        let requires_grad = self.needs_grad(inputs);
        self.tensors.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        });
        let output = TensorId(self.tensors.len() - 1);
        if requires_grad {
            self.records.push(Record { output, op });
        }
        output
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k, n) = matmul_dims(self.value(a), self.value(b))?;
        let data = gemm(&self.value(a).data, &self.value(b).data, m, k, n);
        Ok(self.push(vec![m, n], data, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let data = self.value(a).data.iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Scale { a, factor }, &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total = self.value(a).data.iter().sum();
        self.push(Vec::new(), vec![total], Op::Sum { a }, &[a])
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let t = self.value(a);
        if t.shape.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                left: t.shape.clone(),
                right: vec![],
            });
        }
        let (rows, cols) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = t.data[i * cols + j];
            }
        }
        Ok(self.push(vec![cols, rows], data, Op::Transpose { a, rows, cols }, &[a]))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let data = self.value(a).data.clone();
        Ok(self.push(shape, data, Op::Reshape { a }, &[a]))
    }

    /// Rectangular block `rows × cols` of a 2-D tensor.
    pub fn slice(
        &mut self,
        a: TensorId,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<TensorId> {
        let t = self.value(a);
        if t.shape.len() != 2 || rows.is_empty() || cols.is_empty() || rows.end > t.shape[0] || cols.end > t.shape[1] {
            return Err(Error::Shape {
                op: "slice",
                left: t.shape.clone(),
                right: vec![rows.start, rows.end, cols.start, cols.end],
            });
        }
        let src_cols = t.shape[1];
        let (nr, nc) = (rows.len(), cols.len());
        let mut data = Vec::with_capacity(nr * nc);
        for r in rows.clone() {
            data.extend_from_slice(&t.data[r * src_cols + cols.start..r * src_cols + cols.end]);
        }
        let op = Op::Slice {
            a,
            src_cols,
            row0: rows.start,
            col0: cols.start,
            rows: nr,
            cols: nc,
        };
        Ok(self.push(vec![nr, nc], data, op, &[a]))
    }

    /// Side-by-side concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: s.to_vec(),
                });
            }
            widths.push((p, s[1]));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, w) in &widths {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(vec![rows, total], data, Op::ConcatCols { parts: widths, rows }, parts))
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let cols = self.shape(first)[1];
        let mut lens = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: s.to_vec(),
                });
            }
            rows += s[0];
            lens.push((p, self.value(p).numel()));
            data.extend_from_slice(&self.value(p).data);
        }
        Ok(self.push(vec![rows, cols], data, Op::ConcatRows { parts: lens }, parts))
    }

    /// Row gather: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let t = self.value(table);
        if t.shape.len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                left: t.shape.clone(),
                right: vec![],
            });
        }
        let (n_rows, dim) = (t.shape[0], t.shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n_rows) {
            return Err(Error::invalid(format!(
                "embedding index {bad} out of range for table with {n_rows} rows"
            )));
        }
        if ids.is_empty() {
            return Err(Error::invalid("embedding lookup with no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&t.data[i * dim..(i + 1) * dim]);
        }
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
            dim,
        };
        Ok(self.push(vec![ids.len(), dim], data, op, &[table]))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let dim = self.value(x).cols();
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(Error::Shape {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let xs = &self.value(x).data;
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let rows = xs.len() / dim;
        let mut normalized = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * dim..(r + 1) * dim];
            let (mean, rstd) = row_stats(row, eps);
            inv_std[r] = rstd;
            for j in 0..dim {
                let h = (row[j] - mean) * rstd;
                normalized[r * dim + j] = h;
                out[r * dim + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            normalized,
            inv_std,
            dim,
        };
        Ok(self.push(shape, out, op, &[x, gamma, beta]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data = self.value(a).data.iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Gelu { a }, &[a])
    }

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let (outer, len, inner) = axis_split(self.shape(a), axis)?;
        let data = softmax_kernel(&self.value(a).data, outer, len, inner);
        let shape = self.shape(a).to_vec();
        let op = Op::Softmax { a, outer, len, inner };
        Ok(self.push(shape, data, op, &[a]))
    }

    /// Row softmax of a square score matrix where row `i` only sees columns
    /// `0..=i`; masked entries come out as exactly zero.
    pub fn causal_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Shape {
                op: "causal_softmax",
                left: s.to_vec(),
                right: vec![],
            });
        }
        let size = s[0];
        let x = &self.value(a).data;
        let mut out = vec![0.0; size * size];
        for i in 0..size {
            let row = &x[i * size..i * size + i + 1];
            let probs = softmax_kernel(row, 1, i + 1, 1);
            out[i * size..i * size + i + 1].copy_from_slice(&probs);
        }
        Ok(self.push(vec![size, size], out, Op::CausalSoftmax { a, size }, &[a]))
    }

    /// Masked token cross-entropy of `logits: N×V` against `targets`.
    ///
    /// Masked rows contribute nothing and their targets are not validated.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
        reduction: Reduction,
    ) -> Result<TensorId> {
        let t = self.value(logits);
        let vocab = t.cols();
        let rows = t.rows();
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: t.shape.clone(),
                right: vec![targets.len(), mask.len()],
            });
        }
        let active = mask.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(Error::EmptyLoss);
        }
        if let Some((pos, &bad)) = targets.iter().enumerate().find(|&(i, &tgt)| mask[i] && tgt >= vocab) {
            return Err(Error::invalid(format!(
                "target id {bad} at position {pos} is outside the vocabulary of {vocab}"
            )));
        }
        let mut total = 0.0;
        for r in (0..rows).filter(|&r| mask[r]) {
            let row = &t.data[r * vocab..(r + 1) * vocab];
            total += log_sum_exp(row) - row[targets[r]];
        }
        let denom = match reduction {
            Reduction::Mean => active as f64,
            Reduction::Sum => 1.0,
        };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            vocab,
            denom,
        };
        Ok(self.push(Vec::new(), vec![total / denom], op, &[logits]))
    }

    /// Fills `grad` on every `requires_grad` tensor of the tape with
    /// d(loss)/d(tensor). Tensors the loss does not depend on get zeros.
    /// Gradients from a previous call are overwritten.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let l = self.value(loss);
        if l.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                l.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.tensors.len()];
        if l.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for rec in self.records.iter().rev() {
            let Some(g_out) = grads[rec.output.0].take() else {
                continue;
            };
            backprop(&self.tensors, rec, &g_out, &mut grads);
            grads[rec.output.0] = Some(g_out);
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            if t.requires_grad {
                let n = t.data.len();
                t.grad = Some(g.unwrap_or_else(|| vec![0.0; n]));
            }
        }
        Ok(())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn softmax_kernel(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let max = (0..len).map(|a| x[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..len {
                let e = (x[idx(a)] - max).exp();
                out[idx(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[idx(a)] /= total;
            }
        }
    }
    out
}

/// Untaped softmax along `axis` (max-subtracted).
pub fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(&t.shape, axis)?;
    Tensor::new(t.shape.clone(), softmax_kernel(&t.data, outer, len, inner))
}

/// Softmax of a single logits row.
pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    softmax_kernel(row, 1, row.len(), 1)
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], tensors: &[Tensor], id: TensorId) -> &'a mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; tensors[id.0].data.len()])
}

fn backprop(tensors: &[Tensor], rec: &Record, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let wants = |id: TensorId| tensors[id.0].requires_grad;
    match &rec.op {
        &Op::Matmul { a, b, m, k, n } => {
            if wants(a) {
                let bv = &tensors[b.0].data;
                gemm_acc_nt(g, bv, slot(grads, tensors, a), m, k, n);
            }
            if wants(b) {
                let av = &tensors[a.0].data;
                gemm_acc_tn(av, g, slot(grads, tensors, b), m, k, n);
            }
        }
        &Op::Add { a, b } => {
            for id in [a, b] {
                if wants(id) {
                    add_into(slot(grads, tensors, id), g);
                }
            }
        }
        &Op::Mul { a, b } => {
            if wants(a) {
                let other = &tensors[b.0].data;
                let da = slot(grads, tensors, a);
                for ((d, &gi), &o) in da.iter_mut().zip(g).zip(other) {
                    *d += gi * o;
                }
            }
            if wants(b) {
                let other = &tensors[a.0].data;
                let db = slot(grads, tensors, b);
                for ((d, &gi), &o) in db.iter_mut().zip(g).zip(other) {
                    *d += gi * o;
                }
            }
        }
        &Op::Scale { a, factor } => {
            if wants(a) {
                for (d, &gi) in slot(grads, tensors, a).iter_mut().zip(g) {
                    *d += gi * factor;
                }
            }
        }
        &Op::Sum { a } => {
            if wants(a) {
                for d in slot(grads, tensors, a).iter_mut() {
                    *d += g[0];
                }
            }
        }
        &Op::Transpose { a, rows, cols } => {
            if wants(a) {
                let da = slot(grads, tensors, a);
                for i in 0..rows {
                    for j in 0..cols {
                        da[i * cols + j] += g[j * rows + i];
                    }
                }
            }
        }
        &Op::Reshape { a } => {
            if wants(a) {
                add_into(slot(grads, tensors, a), g);
            }
        }
        &Op::Slice {
            a,
            src_cols,
            row0,
            col0,
            rows,
            cols,
        } => {
            if wants(a) {
                let da = slot(grads, tensors, a);
                for r in 0..rows {
                    let dst = (row0 + r) * src_cols + col0;
                    add_into(&mut da[dst..dst + cols], &g[r * cols..(r + 1) * cols]);
                }
            }
        }
        Op::ConcatCols { parts, rows } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(p, w) in parts {
                if wants(p) {
                    let dp = slot(grads, tensors, p);
                    for r in 0..*rows {
                        let src = r * total + offset;
                        add_into(&mut dp[r * w..(r + 1) * w], &g[src..src + w]);
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &(p, len) in parts {
                if wants(p) {
                    add_into(slot(grads, tensors, p), &g[offset..offset + len]);
                }
                offset += len;
            }
        }
        Op::Embedding { table, ids, dim } => {
            if wants(*table) {
                let dt = slot(grads, tensors, *table);
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut dt[i * dim..(i + 1) * dim], &g[r * dim..(r + 1) * dim]);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            normalized,
            inv_std,
            dim,
        } => {
            let dim = *dim;
            let rows = g.len() / dim;
            if wants(*gamma) {
                let dg = slot(grads, tensors, *gamma);
                for r in 0..rows {
                    for j in 0..dim {
                        dg[j] += g[r * dim + j] * normalized[r * dim + j];
                    }
                }
            }
            if wants(*beta) {
                let db = slot(grads, tensors, *beta);
                for r in 0..rows {
                    add_into(db, &g[r * dim..(r + 1) * dim]);
                }
            }
            if wants(*x) {
                let gam = &tensors[gamma.0].data;
                let dx = slot(grads, tensors, *x);
                let n = dim as f64;
                for r in 0..rows {
                    let gr = &g[r * dim..(r + 1) * dim];
                    let hr = &normalized[r * dim..(r + 1) * dim];
                    let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                    let mean_dh = dh.iter().sum::<f64>() / n;
                    let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..dim {
                        dx[r * dim + j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            }
        }
        &Op::Gelu { a } => {
            if wants(a) {
                let xs = &tensors[a.0].data;
                let da = slot(grads, tensors, a);
                for ((d, &gi), &x) in da.iter_mut().zip(g).zip(xs) {
                    *d += gi * gelu_grad(x);
                }
            }
        }
        &Op::Softmax { a, outer, len, inner } => {
            if wants(a) {
                let y = &tensors[rec.output.0].data;
                let da = slot(grads, tensors, a);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            da[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            }
        }
        &Op::CausalSoftmax { a, size } => {
            if wants(a) {
                let y = &tensors[rec.output.0].data;
                let da = slot(grads, tensors, a);
                for i in 0..size {
                    let base = i * size;
                    let dot: f64 = (0..=i).map(|j| g[base + j] * y[base + j]).sum();
                    for j in 0..=i {
                        da[base + j] += y[base + j] * (g[base + j] - dot);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            vocab,
            denom,
        } => {
            if wants(*logits) {
                let x = &tensors[logits.0].data;
                let dl = slot(grads, tensors, *logits);
                let scale = g[0] / denom;
                for (r, (&tgt, _)) in targets.iter().zip(mask).enumerate().filter(|(_, (_, &m))| m) {
                    let row = &x[r * vocab..(r + 1) * vocab];
                    let probs = softmax_row(row);
                    let dr = &mut dl[r * vocab..(r + 1) * vocab];
                    for (j, p) in probs.into_iter().enumerate() {
                        let onehot = if j == tgt { 1.0 } else { 0.0 };
                        dr[j] += scale * (p - onehot);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
