//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends one node whose inputs are strictly earlier nodes, so the
//! tape is topologically ordered by construction and a single reverse sweep
//! visits each op exactly once.

use std::borrow::Cow;
use std::cell::{Ref, RefCell};

use crate::tensor::{
    axpy, dot, log_sum_exp, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_into, Tensor,
    TensorError,
};

/// Variance epsilon of every layer normalization.
pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Abs(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    NllSum {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Reshape(Var),
    Transpose(Var),
    Select {
        x: Var,
        index: usize,
    },
    Rows {
        x: Var,
        start: usize,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations. Leaves may borrow parameter tensors for
/// the lifetime `'p` so a forward pass never copies model weights.
pub struct Tape<'p> {
    nodes: RefCell<Vec<Node<'p>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A differentiable leaf borrowing `t`.
    pub fn param(&self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// A differentiable leaf owning its value.
    pub fn param_owned(&self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// A non-differentiable leaf.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// A non-differentiable leaf borrowing `t`.
    pub fn constant_ref(&self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let t = self.value(v).clone();
        t
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    // -----------------------------------------------------------------------
    // ops
    // -----------------------------------------------------------------------

    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(TensorError::shape(
                    "matmul",
                    format!("{:?} · {:?}", ta.shape(), tb.shape()),
                ));
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let mut out = Tensor::zeros(&[m, n]);
            matmul_acc(ta.data(), tb.data(), out.data_mut(), m, k, n);
            out
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    /// Affine map `x·wᵀ + b` with `x: [t×in]`, `w: [out×in]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            if tw.shape().len() != 2 || tx.cols() != tw.shape()[1] {
                return Err(TensorError::shape(
                    "linear",
                    format!("input {:?} against weight {:?}", tx.shape(), tw.shape()),
                ));
            }
            let (t, din, dout) = (tx.rows(), tx.cols(), tw.shape()[0]);
            let mut out = Tensor::zeros(&[t, dout]);
            if let Some(b) = b {
                let tb = &nodes[b.0].value;
                if tb.len() != dout {
                    return Err(TensorError::shape(
                        "linear",
                        format!("bias of {} for {} outputs", tb.len(), dout),
                    ));
                }
                for r in 0..t {
                    out.row_mut(r).copy_from_slice(tb.data());
                }
            }
            matmul_nt_acc(tx.data(), tw.data(), out.data_mut(), t, din, dout);
            out
        };
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.rg(&ins);
        Ok(self.push(Cow::Owned(out), Op::Linear { x, w, b }, rg))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Sub(a, b), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b), rg))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let nodes = self.nodes.borrow();
        let ta = &nodes[a.0].value;
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved")
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x * c);
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(out), Op::Scale(a, c), rg)
    }

    pub fn abs(&self, a: Var) -> Var {
        let out = self.map(a, f64::abs);
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(out), Op::Abs(a), rg)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let out = self.map(a, |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        });
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(out), Op::Gelu(a), rg)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let d = tx.cols();
            if tg.len() != d || tb.len() != d {
                return Err(TensorError::shape(
                    "layer_norm",
                    format!("input width {d}, gain {}, bias {}", tg.len(), tb.len()),
                ));
            }
            let rows = tx.rows();
            let mut out = Tensor::zeros(tx.shape());
            let mut xhat = vec![0.0; tx.len()];
            let mut rstd = vec![0.0; rows];
            for r in 0..rows {
                let row = tx.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                rstd[r] = rs;
                let o = out.row_mut(r);
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    o[j] = h * tg.data()[j] + tb.data()[j];
                }
            }
            (out, xhat, rstd)
        };
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax along `axis`, stabilized by max-subtraction.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (out, outer, len, inner) = {
            let t = self.value(x);
            let shape = t.shape();
            if axis >= shape.len() {
                return Err(TensorError::shape(
                    "softmax",
                    format!("axis {axis} for shape {shape:?}"),
                ));
            }
            let outer: usize = shape[..axis].iter().product();
            let len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut out = Tensor::zeros(shape);
            let mut buf = vec![0.0; len];
            let mut res = vec![0.0; len];
            for o in 0..outer {
                for i in 0..inner {
                    for l in 0..len {
                        buf[l] = t.data()[(o * len + l) * inner + i];
                    }
                    softmax_into(&buf, &mut res);
                    for l in 0..len {
                        out.data_mut()[(o * len + l) * inner + i] = res[l];
                    }
                }
            }
            (out, outer, len, inner)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            Cow::Owned(out),
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Gathers rows `ids` of `table: [n×d]` into `[ids.len()×d]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let out = {
            let t = self.value(table);
            if t.shape().len() != 2 {
                return Err(TensorError::shape("embedding", "table must be 2-D"));
            }
            if ids.is_empty() {
                return Err(TensorError::shape("embedding", "no ids"));
            }
            let (n, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                if i >= n {
                    return Err(TensorError::shape(
                        "embedding",
                        format!("id {i} out of range for {n} rows"),
                    ));
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![ids.len(), d], data)?
        };
        let rg = self.rg(&[table]);
        Ok(self.push(
            Cow::Owned(out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Summed negative log-likelihood of `targets` under row-wise
    /// log-softmax of `logits`. Rows whose target is `None` are skipped.
    pub fn nll_sum(&self, logits: Var, targets: &[Option<usize>]) -> Result<Var, TensorError> {
        let (loss, probs) = {
            let t = self.value(logits);
            let (rows, v) = (t.rows(), t.cols());
            if targets.len() != rows {
                return Err(TensorError::shape(
                    "nll_sum",
                    format!("{} targets for {rows} rows", targets.len()),
                ));
            }
            let mut probs = vec![0.0; t.len()];
            let mut loss = 0.0;
            for (r, tgt) in targets.iter().enumerate() {
                let Some(tgt) = *tgt else { continue };
                if tgt >= v {
                    return Err(TensorError::shape(
                        "nll_sum",
                        format!("target {tgt} out of range for width {v}"),
                    ));
                }
                let row = t.row(r);
                loss += log_sum_exp(row) - row[tgt];
                softmax_into(row, &mut probs[r * v..(r + 1) * v]);
            }
            (loss, probs)
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::NllSum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Causal multi-head scaled dot-product attention over `[t×d]` inputs.
    pub fn causal_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.shape().len() != 2 {
                return Err(TensorError::shape(
                    "causal_attention",
                    format!("q {:?} k {:?} v {:?}", tq.shape(), tk.shape(), tv.shape()),
                ));
            }
            let (t, d) = (tq.shape()[0], tq.shape()[1]);
            if heads == 0 || d % heads != 0 {
                return Err(TensorError::shape(
                    "causal_attention",
                    format!("width {d} not divisible into {heads} heads"),
                ));
            }
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut out = Tensor::zeros(&[t, d]);
            let mut probs = vec![0.0; heads * t * t];
            let mut scores = vec![0.0; t];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qi = &tq.row(i)[off..off + dh];
                    for j in 0..=i {
                        scores[j] = dot(qi, &tk.row(j)[off..off + dh]) * scale;
                    }
                    let p = &mut probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                    softmax_into(&scores[..=i], p);
                    let orow = &mut out.row_mut(i)[off..off + dh];
                    for j in 0..=i {
                        axpy(p[j], &tv.row(j)[off..off + dh], orow);
                    }
                }
            }
            (out, probs)
        };
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Cow::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Cow::Owned(out), Op::Reshape(x), rg))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self, x: Var) -> Result<Var, TensorError> {
        let out = {
            let t = self.value(x);
            if t.shape().len() != 2 {
                return Err(TensorError::shape("transpose", "expects a 2-D tensor"));
            }
            let (r, c) = (t.shape()[0], t.shape()[1]);
            let mut out = Tensor::zeros(&[c, r]);
            for i in 0..r {
                for j in 0..c {
                    out.data_mut()[j * r + i] = t.data()[i * c + j];
                }
            }
            out
        };
        let rg = self.rg(&[x]);
        Ok(self.push(Cow::Owned(out), Op::Transpose(x), rg))
    }

    /// One entry (flat row-major index) as a scalar.
    pub fn select(&self, x: Var, index: usize) -> Result<Var, TensorError> {
        let val = {
            let t = self.value(x);
            *t.data().get(index).ok_or_else(|| {
                TensorError::shape("select", format!("index {index} of {}", t.len()))
            })?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(Cow::Owned(Tensor::scalar(val)), Op::Select { x, index }, rg))
    }

    /// Rows `start..start+count` of a matrix.
    pub fn rows(&self, x: Var, start: usize, count: usize) -> Result<Var, TensorError> {
        let out = {
            let t = self.value(x);
            if t.shape().len() != 2 || count == 0 || start + count > t.rows() {
                return Err(TensorError::shape(
                    "rows",
                    format!("rows {start}..{} of {:?}", start + count, t.shape()),
                ));
            }
            let c = t.cols();
            Tensor::new(
                vec![count, c],
                t.data()[start * c..(start + count) * c].to_vec(),
            )?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(Cow::Owned(out), Op::Rows { x, start }, rg))
    }

    // -----------------------------------------------------------------------
    // backward
    // -----------------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        if !nodes[loss.0].value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let want = |v: Var| nodes[v.0].requires_grad;
            let acc = |v: Var, delta: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                match &mut grads[v.0] {
                    Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |v: Var| nodes[v.0].value.as_ref();

            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if want(*a) {
                        let mut ga = vec![0.0; m * k];
                        matmul_nt_acc(&g, tb.data(), &mut ga, m, n, k);
                        acc(*a, ga, &mut grads);
                    }
                    if want(*b) {
                        let mut gb = vec![0.0; k * n];
                        matmul_tn_acc(ta.data(), &g, &mut gb, m, k, n);
                        acc(*b, gb, &mut grads);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (tx, tw) = (val(*x), val(*w));
                    let (t, din, dout) = (tx.rows(), tx.cols(), tw.shape()[0]);
                    if want(*x) {
                        let mut gx = vec![0.0; t * din];
                        matmul_acc(&g, tw.data(), &mut gx, t, dout, din);
                        acc(*x, gx, &mut grads);
                    }
                    if want(*w) {
                        let mut gw = vec![0.0; dout * din];
                        matmul_tn_acc(&g, tx.data(), &mut gw, t, dout, din);
                        acc(*w, gw, &mut grads);
                    }
                    if let Some(b) = b {
                        if want(*b) {
                            let mut gb = vec![0.0; dout];
                            for r in 0..t {
                                axpy(1.0, &g[r * dout..(r + 1) * dout], &mut gb);
                            }
                            acc(*b, gb, &mut grads);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if want(*a) {
                        acc(*a, g.clone(), &mut grads);
                    }
                    if want(*b) {
                        acc(*b, g, &mut grads);
                    }
                }
                Op::Sub(a, b) => {
                    if want(*a) {
                        acc(*a, g.clone(), &mut grads);
                    }
                    if want(*b) {
                        acc(*b, g.iter().map(|v| -v).collect(), &mut grads);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if want(*a) {
                        let ga = g.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                        acc(*a, ga, &mut grads);
                    }
                    if want(*b) {
                        let gb = g.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                        acc(*b, gb, &mut grads);
                    }
                }
                Op::Scale(a, c) => {
                    if want(*a) {
                        acc(*a, g.iter().map(|v| v * c).collect(), &mut grads);
                    }
                }
                Op::Sum(a) => {
                    if want(*a) {
                        acc(*a, vec![g[0]; val(*a).len()], &mut grads);
                    }
                }
                Op::Abs(a) => {
                    if want(*a) {
                        let ga = g
                            .iter()
                            .zip(val(*a).data())
                            .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -g } else { 0.0 })
                            .collect();
                        acc(*a, ga, &mut grads);
                    }
                }
                Op::Gelu(a) => {
                    if want(*a) {
                        let ga = g
                            .iter()
                            .zip(val(*a).data())
                            .map(|(g, &x)| {
                                let u = GELU_C * (x + GELU_A * x * x * x);
                                let th = u.tanh();
                                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                                g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                            })
                            .collect();
                        acc(*a, ga, &mut grads);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let tg = val(*gain);
                    let d = tg.len();
                    let rows = rstd.len();
                    if want(*x) {
                        let mut gx = vec![0.0; rows * d];
                        let mut dxhat = vec![0.0; d];
                        for r in 0..rows {
                            let gr = &g[r * d..(r + 1) * d];
                            let xh = &xhat[r * d..(r + 1) * d];
                            for j in 0..d {
                                dxhat[j] = gr[j] * tg.data()[j];
                            }
                            let m1 = dxhat.iter().sum::<f64>() / d as f64;
                            let m2 = dot(&dxhat, xh) / d as f64;
                            for j in 0..d {
                                gx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                            }
                        }
                        acc(*x, gx, &mut grads);
                    }
                    if want(*gain) {
                        let mut gg = vec![0.0; d];
                        for r in 0..rows {
                            for j in 0..d {
                                gg[j] += g[r * d + j] * xhat[r * d + j];
                            }
                        }
                        acc(*gain, gg, &mut grads);
                    }
                    if want(*bias) {
                        let mut gb = vec![0.0; d];
                        for r in 0..rows {
                            axpy(1.0, &g[r * d..(r + 1) * d], &mut gb);
                        }
                        acc(*bias, gb, &mut grads);
                    }
                }
                Op::Softmax {
                    x,
                    outer,
                    len,
                    inner,
                } => {
                    if want(*x) {
                        let y = node.value.data();
                        let mut gx = vec![0.0; y.len()];
                        for o in 0..*outer {
                            for i in 0..*inner {
                                let idx = |l: usize| (o * len + l) * inner + i;
                                let s: f64 = (0..*len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                                for l in 0..*len {
                                    gx[idx(l)] = y[idx(l)] * (g[idx(l)] - s);
                                }
                            }
                        }
                        acc(*x, gx, &mut grads);
                    }
                }
                Op::Embedding { table, ids } => {
                    if want(*table) {
                        let tt = val(*table);
                        let d = tt.cols();
                        let mut gt = vec![0.0; tt.len()];
                        for (r, &id) in ids.iter().enumerate() {
                            axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                        }
                        acc(*table, gt, &mut grads);
                    }
                }
                Op::NllSum {
                    logits,
                    targets,
                    probs,
                } => {
                    if want(*logits) {
                        let v = val(*logits).cols();
                        let mut gl = vec![0.0; probs.len()];
                        for (r, tgt) in targets.iter().enumerate() {
                            let Some(tgt) = *tgt else { continue };
                            for j in 0..v {
                                gl[r * v + j] = g[0] * probs[r * v + j];
                            }
                            gl[r * v + tgt] -= g[0];
                        }
                        acc(*logits, gl, &mut grads);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                    let (t, d) = (tq.shape()[0], tq.shape()[1]);
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = vec![0.0; t * d];
                    let mut gk = vec![0.0; t * d];
                    let mut gv = vec![0.0; t * d];
                    let mut dp = vec![0.0; t];
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..t {
                            let p = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                            let gi = &g[i * d + off..i * d + off + dh];
                            for j in 0..=i {
                                dp[j] = dot(gi, &tv.row(j)[off..off + dh]);
                                axpy(p[j], gi, &mut gv[j * d + off..j * d + off + dh]);
                            }
                            let s: f64 = (0..=i).map(|j| p[j] * dp[j]).sum();
                            let qi = &tq.row(i)[off..off + dh];
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - s) * scale;
                                if ds != 0.0 {
                                    axpy(ds, &tk.row(j)[off..off + dh], &mut gq[i * d + off..i * d + off + dh]);
                                    axpy(ds, qi, &mut gk[j * d + off..j * d + off + dh]);
                                }
                            }
                        }
                    }
                    if want(*q) {
                        acc(*q, gq, &mut grads);
                    }
                    if want(*k) {
                        acc(*k, gk, &mut grads);
                    }
                    if want(*v) {
                        acc(*v, gv, &mut grads);
                    }
                }
                Op::Reshape(x) => {
                    if want(*x) {
                        acc(*x, g, &mut grads);
                    }
                }
                Op::Transpose(x) => {
                    if want(*x) {
                        let tx = val(*x);
                        let (r, c) = (tx.shape()[0], tx.shape()[1]);
                        let mut gx = vec![0.0; r * c];
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] = g[j * r + i];
                            }
                        }
                        acc(*x, gx, &mut grads);
                    }
                }
                Op::Select { x, index } => {
                    if want(*x) {
                        let mut gx = vec![0.0; val(*x).len()];
                        gx[*index] = g[0];
                        acc(*x, gx, &mut grads);
                    }
                }
                Op::Rows { x, start } => {
                    if want(*x) {
                        let tx = val(*x);
                        let c = tx.cols();
                        let mut gx = vec![0.0; tx.len()];
                        gx[start * c..start * c + g.len()].copy_from_slice(&g);
                        acc(*x, gx, &mut grads);
                    }
                }
            }
        }

        // Only leaves keep gradients; intermediates were consumed above.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to leaf `v`, or `None` when `v` is
    /// not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but materializes zeros for unreachable leaves.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let b = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let i3 = tape.constant(Tensor::identity(3));
        let r = tape.matmul(i3, b).unwrap();
        assert_eq!(tape.value(r).data(), tape.value(b).data());

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let r = tape.matmul(a, c).unwrap();
        assert_eq!(tape.value(r).data(), &[11.0]);

        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let r = tape.matmul(z, b).unwrap();
        assert!(tape.value(r).data().iter().all(|&v| v == 0.0));

        assert!(matches!(
            tape.matmul(a, b),
            Err(TensorError::Shape { op: "matmul", .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let c = 0.7;
        let x = tape.constant(Tensor::vector(vec![c, c + 2f64.ln()]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.to_tensor(s);
        assert!((v.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((v.data()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_along_first_axis() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]));
        let s = tape.softmax(x, 0).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn backward_examples() {
        let w = t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
        let tape = Tape::new();
        let wv = tape.param(&w);
        let loss = tape.sum(wv);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(wv).unwrap(), &[1.0; 6]);

        let x = Tensor::scalar(3.0);
        let tape = Tape::new();
        let xv = tape.param(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(xv).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = Tensor::zeros(&[2, 2]);
        let tape = Tape::new();
        let wv = tape.param(&w);
        let y = tape.scale(wv, 2.0);
        assert!(matches!(tape.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn unreachable_leaves_have_no_gradient() {
        let a = Tensor::scalar(1.0);
        let b = Tensor::scalar(2.0);
        let tape = Tape::new();
        let av = tape.param(&a);
        let bv = tape.param(&b);
        let _unused = tape.scale(bv, 3.0);
        let loss = tape.scale(av, 2.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(av).unwrap(), &[2.0]);
        assert!(g.get(bv).is_none());
        assert_eq!(g.get_or_zeros(bv, 1), vec![0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(4.0));
        let p = tape.param_owned(Tensor::scalar(2.0));
        let y = tape.mul(c, p).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &[4.0]);
    }
}
