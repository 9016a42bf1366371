//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse and propagates adjoints into every node that
//! (transitively) depends on a leaf with `requires_grad`. Frozen leaves still
//! take part in the forward pass and relay gradients to their consumers, but
//! never receive a gradient buffer of their own.

use std::collections::HashMap;
use std::rc::Rc;

use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Multi-head scaled dot-product attention over packed rows.
///
/// `segments` are `(start_row, len)` pairs that must tile the rows of q/k/v
/// in order; attention never crosses a segment boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attention {
    pub heads: usize,
    pub causal: bool,
    pub segments: Vec<(usize, usize)>,
}

impl Attention {
    pub fn single(len: usize, heads: usize, causal: bool) -> Self {
        Self {
            heads,
            causal,
            segments: vec![(0, len)],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: Rc<Attention>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(u64, String, Var)>,
    param_index: HashMap<(u64, String), Var>,
    grads: HashMap<usize, Vec<f64>>,
}

/// `c = a·b + beta·c` for strided row/col layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs + 1;
    assert!(k == 0 || a.len() >= span(m, k, rsa, csa));
    assert!(k == 0 || b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// In-place softmax of one row; masked slots (`false`) become exactly zero.
fn softmax_row(row: &mut [f64], mask: Option<&[bool]>) -> bool {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    true
}

fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let n = nodes[v.0].value.len();
    adj[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node so the tape can be reused for the next step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.param_index.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = value.with_requires_grad(false);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it collects a
    /// gradient during `backward`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let mut value = tensor;
        value.clear_grad();
        self.nodes.push(Node {
            value: value.with_requires_grad(false),
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Leaf bound to a named entry of `params`; repeated calls for the same
    /// name return the same node.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        let key = (params.id(), name.to_string());
        if let Some(&v) = self.param_index.get(&key) {
            return Ok(v);
        }
        let frozen = params
            .is_frozen(name)
            .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))?;
        let t = params.get(name)?.clone().with_requires_grad(!frozen);
        let v = self.leaf(t);
        self.params.push((key.0, key.1.clone(), v));
        self.param_index.insert(key, v);
        Ok(v)
    }

    pub(crate) fn param_bindings(&self, set: u64) -> impl Iterator<Item = (&str, Var)> {
        self.params
            .iter()
            .filter(move |(id, _, _)| *id == set)
            .map(|(_, n, v)| (n.as_str(), *v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a `requires_grad` leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(&v.0).map(Vec::as_slice)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::shape(op, format!("expected rank 2, got {:?}", self.shape(v))))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            0.0,
            &mut out,
            (n, 1),
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-D vector to every row of a `[.. x D]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.value(bias).len() != d {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::config("eps", "layer norm epsilon must be positive"));
        }
        let d = *self.shape(x).last().unwrap();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?} with gain {:?} and bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Softmax over the last axis. `mask`, when given, holds `rows x L`
    /// booleans (`true` = attend) matching the trailing two axes and is
    /// broadcast over any leading axes.
    pub fn masked_softmax(&mut self, logits: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let l = *shape.last().unwrap();
        let mask_rows = if shape.len() >= 2 {
            shape[shape.len() - 2]
        } else {
            1
        };
        if let Some(m) = mask {
            if m.len() != mask_rows * l {
                return Err(Error::shape(
                    "masked_softmax",
                    format!("mask of {} entries for logits {:?}", m.len(), shape),
                ));
            }
        }
        let mut out = self.value(logits).data().to_vec();
        for (r, row) in out.chunks_mut(l).enumerate() {
            let mrow = mask.map(|m| {
                let i = r % mask_rows;
                &m[i * l..(i + 1) * l]
            });
            if !softmax_row(row, mrow) {
                return Err(Error::DegenerateRow { row: r });
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax(logits), &[logits]))
    }

    /// Mean negative log-likelihood over rows whose mask entry is `true`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t_len, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t_len || mask.len() != t_len {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "logits {:?} with {} targets and {} mask entries",
                    self.shape(logits),
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!(
                "target {bad} outside vocabulary of {vocab}"
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Data("cross_entropy: loss mask is all false".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (r, row) in probs.chunks_mut(vocab).enumerate() {
            softmax_row(row, None);
            if mask[r] {
                total -= row[targets[r]].ln();
            }
        }
        // Recompute the selected log-probabilities through log-sum-exp so that
        // near-certain predictions do not round to ln(0).
        if !total.is_finite() {
            total = 0.0;
            let src = self.value(logits).data();
            for r in (0..t_len).filter(|&r| mask[r]) {
                let row = &src[r * vocab..(r + 1) * vocab];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[targets[r]];
            }
        }
        let loss = total / count as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Embedding lookup: rows `ids` of a `[V x D]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "no ids"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("row {id} outside table of {v}")));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "nothing to concatenate"));
        };
        let (_, cols) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("width {c} does not match {cols}"),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {rows}", start + len),
            ));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let t = Tensor::new(vec![len, cols], data)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "mean_rows")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; cols];
        for row in src.chunks(cols) {
            add_into(&mut out, row);
        }
        for v in &mut out {
            *v /= rows as f64;
        }
        let t = Tensor::new(vec![1, cols], out)?;
        Ok(self.push(t, Op::MeanRows(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Fused multi-head attention: `softmax(Q Kᵀ/√d_head [+ causal mask]) V`
    /// per head and per segment. q, k, v are `[N x D]`, output is `[N x D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &Attention) -> Result<Var> {
        let (n, d) = self.dims2(q, "attention")?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("width {d} not divisible by {} heads", spec.heads),
            ));
        }
        let mut cursor = 0;
        for &(s, l) in &spec.segments {
            if s != cursor || l == 0 {
                return Err(Error::shape("attention", "segments must tile the rows in order"));
            }
            cursor += l;
        }
        if cursor != n {
            return Err(Error::shape(
                "attention",
                format!("segments cover {cursor} of {n} rows"),
            ));
        }
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let probs_len: usize = spec.segments.iter().map(|&(_, l)| l * l).sum::<usize>() * spec.heads;
        let mut probs = vec![0.0; probs_len];
        let mut out = vec![0.0; n * d];
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut p_off = 0;
        for &(s, l) in &spec.segments {
            for h in 0..spec.heads {
                let base = s * d + h * dh;
                let p = &mut probs[p_off..p_off + l * l];
                // scores = Q_h K_hᵀ
                gemm(l, dh, l, &qd[base..], (d, 1), &kd[base..], (1, d), 0.0, p, (l, 1));
                for (i, row) in p.chunks_mut(l).enumerate() {
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = if spec.causal && j > i {
                            f64::NEG_INFINITY
                        } else {
                            *x * scale
                        };
                    }
                    softmax_row(row, None);
                }
                gemm(l, l, dh, p, (l, 1), &vd[base..], (d, 1), 0.0, &mut out[base..], (d, 1));
                p_off += l * l;
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                spec: Rc::new(spec.clone()),
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Gradient(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.clear();
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if self.nodes[i].requires_grad {
                self.grads.insert(i, g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(adj, nodes, $v)
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = nodes[b.0].value.dims2().unwrap().1;
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let da = acc!(*a);
                    gemm(m, n, k, g, (n, 1), nodes[b.0].value.data(), (1, n), 1.0, da, (k, 1));
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let db = acc!(*b);
                    gemm(k, m, n, nodes[a.0].value.data(), (1, k), g, (n, 1), 1.0, db, (n, 1));
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (m, n) = nodes[a.0].value.dims2().unwrap();
                    let da = acc!(*a);
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        add_into(acc!(*v), g);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    add_into(acc!(*x), g);
                }
                if wants(*b) {
                    let db = acc!(*b);
                    for row in g.chunks(db.len()) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = nodes[b.0].value.data();
                    for ((d, gi), bi) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if wants(*b) {
                    let av = nodes[a.0].value.data();
                    for ((d, gi), ai) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    for (d, gi) in acc!(*a).iter_mut().zip(g) {
                        *d += gi * c;
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    for d in acc!(*a).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let xv = nodes[a.0].value.data();
                    for ((d, gi), &x) in acc!(*a).iter_mut().zip(g).zip(xv) {
                        *d += gi * gelu_grad_scalar(x);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[gain.0].value.len();
                if wants(*x) {
                    let gv = nodes[gain.0].value.data();
                    let dx = acc!(*x);
                    let mut dxhat = vec![0.0; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] += rs * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if wants(*gain) {
                    let dg = acc!(*gain);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if wants(*bias) {
                    let db = acc!(*bias);
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let y = nodes[i].value.data();
                    let l = *nodes[i].value.shape().last().unwrap();
                    let da = acc!(*a);
                    for ((dr, gr), yr) in da.chunks_mut(l).zip(g.chunks(l)).zip(y.chunks(l)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..l {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                if wants(*logits) {
                    let vocab = nodes[logits.0].value.dims2().unwrap().1;
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let scale = g[0] / count;
                    let dl = acc!(*logits);
                    for (r, &t) in targets.iter().enumerate() {
                        if !mask[r] {
                            continue;
                        }
                        let row = &probs[r * vocab..(r + 1) * vocab];
                        let dr = &mut dl[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            dr[j] += scale * row[j];
                        }
                        dr[t] -= scale;
                    }
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let d = nodes[table.0].value.dims2().unwrap().1;
                    let dt = acc!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    if wants(*p) {
                        add_into(acc!(*p), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let cols = nodes[x.0].value.dims2().unwrap().1;
                    let dx = acc!(*x);
                    add_into(&mut dx[start * cols..start * cols + g.len()], g);
                }
            }
            Op::MeanRows(x) => {
                if wants(*x) {
                    let (rows, cols) = nodes[x.0].value.dims2().unwrap();
                    let dx = acc!(*x);
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] += g[c] / rows as f64;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    add_into(acc!(*x), g);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let (_, d) = nodes[q.0].value.dims2().unwrap();
                let dh = d / spec.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (
                    nodes[q.0].value.data(),
                    nodes[k.0].value.data(),
                    nodes[v.0].value.data(),
                );
                let (wq, wk, wv) = (wants(*q), wants(*k), wants(*v));
                let mut dscore = Vec::new();
                let mut p_off = 0;
                for &(s, l) in &spec.segments {
                    for h in 0..spec.heads {
                        let base = s * d + h * dh;
                        let p = &probs[p_off..p_off + l * l];
                        p_off += l * l;
                        if wv {
                            // dV = Pᵀ dO
                            let dv = acc!(*v);
                            gemm(l, l, dh, p, (1, l), &g[base..], (d, 1), 1.0, &mut dv[base..], (d, 1));
                        }
                        if !(wq || wk) {
                            continue;
                        }
                        // dP = dO Vᵀ, then softmax backward in place.
                        dscore.clear();
                        dscore.resize(l * l, 0.0);
                        gemm(l, dh, l, &g[base..], (d, 1), &vd[base..], (1, d), 0.0, &mut dscore, (l, 1));
                        for (dr, pr) in dscore.chunks_mut(l).zip(p.chunks(l)) {
                            let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for j in 0..l {
                                dr[j] = pr[j] * (dr[j] - dot) * scale;
                            }
                        }
                        if wq {
                            let dq = acc!(*q);
                            gemm(l, l, dh, &dscore, (l, 1), &kd[base..], (d, 1), 1.0, &mut dq[base..], (d, 1));
                        }
                        if wk {
                            let dk = acc!(*k);
                            gemm(l, l, dh, &dscore, (1, l), &qd[base..], (d, 1), 1.0, &mut dk[base..], (d, 1));
                        }
                    }
                }
            }
        }
    }
}
