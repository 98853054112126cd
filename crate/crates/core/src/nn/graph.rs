//! Tape-based reverse-mode differentiation.
//!
//! Each operation appends a node holding its forward value and enough state
//! to propagate gradients. Nodes are created in topological order, so
//! [`Graph::backward`] is a single reverse sweep over the tape. Parameters
//! are borrowed from a [`ParamRegistry`] rather than copied.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::masks::NEG_INF;
use crate::nn::{gemm, Gradients, ParamRegistry, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Probabilities below this are clamped inside log-losses.
pub const LOG_CLAMP: f64 = 1e-12;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, T),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    MaskedSoftmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanPoolRows {
        x: Var,
        rows: Vec<usize>,
    },
    Im2Col {
        x: Var,
        width: usize,
        left: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<T>,
        weights: Vec<T>,
    },
    Sum(Var),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'a, T: Scalar> {
    registry: Option<&'a ParamRegistry<T>>,
    nodes: Vec<Node<'a, T>>,
    params: BTreeMap<String, Var>,
    backward_done: bool,
}

fn check(cond: bool, op: &'static str, detail: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::shape(op, detail()))
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// A graph with no parameter source; only constants are available.
    pub fn new() -> Self {
        Self {
            registry: None,
            nodes: Vec::new(),
            params: BTreeMap::new(),
            backward_done: false,
        }
    }

    pub fn with_params(registry: &'a ParamRegistry<T>) -> Self {
        Self {
            registry: Some(registry),
            ..Self::new()
        }
    }

    /// Drops every recorded node so the graph can be rebuilt.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Differentiable input not backed by the registry.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registry parameter `name`; repeated lookups return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let registry = self
            .registry
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let value = registry.get(name)?;
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check(ta.shape() == tb.shape(), name, || {
            format!("{:?} vs {:?}", ta.shape(), tb.shape())
        })?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[r, :] + bias` for every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        check(tb.len() == c, "add_bias", || {
            format!("bias {:?} for input {:?}", tb.shape(), tx.shape())
        })?;
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v = *v + b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, h) = (T::of(scale), T::of(shift));
        let t = self.value(x);
        let data = t.data().iter().map(|&v| s * v + h).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Affine(x, s), &[x])
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    /// `a[m,k] * b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] * b[n,k]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (br, bc) = self.rc(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        check(k == kb, "matmul", || {
            format!(
                "{:?} x {:?}{}",
                self.shape(a),
                self.shape(b),
                if trans_b { "^T" } else { "" }
            )
        })?;
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            T::zero(),
            &mut out,
        );
        let out = Tensor::new([m, n], out)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(
            x,
            |v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// Row-wise `softmax(x + mask)` for a square additive mask.
    pub fn masked_softmax(&mut self, x: Var, mask: &[f32]) -> Result<Var> {
        self.softmax_impl(x, Some(mask))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<&[f32]>) -> Result<Var> {
        let (r, c) = self.rc(x);
        if let Some(mask) = mask {
            check(mask.len() == r * c, "masked_softmax", || {
                format!("mask of {} cells for {r}x{c} scores", mask.len())
            })?;
        }
        let blocked = NEG_INF * 0.5;
        let t = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let o = &mut out[i * c..(i + 1) * c];
            o.copy_from_slice(row);
            if let Some(mask) = mask {
                let mrow = &mask[i * c..(i + 1) * c];
                if mrow.iter().all(|&m| m <= blocked) {
                    return Err(Error::DegenerateRow { row: i });
                }
                for (v, &m) in o.iter_mut().zip(mrow) {
                    *v = *v + T::of(m as f64);
                }
            }
            let max = o.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in o.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in o.iter_mut() {
                *v = *v / sum;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::MaskedSoftmax(x), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), "concat_cols", || "no inputs".into())?;
        let rows = self.value(parts[0]).rows();
        check(
            parts.iter().all(|&p| self.value(p).rows() == rows),
            "concat_cols",
            || "row counts differ".into(),
        )?;
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::new([rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rc(x);
        check(start + len <= c, "slice_cols", || {
            format!("{start}..{} of {c} columns", start + len)
        })?;
        let t = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row_slice(i)[start..start + len]);
        }
        let out = Tensor::new([r, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), "concat_rows", || "no inputs".into())?;
        let cols = self.value(parts[0]).cols();
        check(
            parts.iter().all(|&p| self.value(p).cols() == cols),
            "concat_rows",
            || "column counts differ".into(),
        )?;
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::new([rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `idx` of `x`, in order, duplicates allowed (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.rc(x);
        check(idx.iter().all(|&i| i < r), "gather_rows", || {
            format!("index out of range for {r} rows")
        })?;
        let t = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new([idx.len(), c], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.gather_rows(x, &[i])
    }

    /// Column-wise max over `rows` of `x`, producing `1 x cols`.
    pub fn max_pool_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.rc(x);
        check(
            !rows.is_empty() && rows.iter().all(|&i| i < r),
            "max_pool_rows",
            || format!("bad row set {rows:?} for {r} rows"),
        )?;
        let t = self.value(x);
        let mut argmax = vec![rows[0]; c];
        let mut out = t.row_slice(rows[0]).to_vec();
        for &i in &rows[1..] {
            for (j, &v) in t.row_slice(i).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let out = Tensor::new([1, c], out)?;
        Ok(self.push(out, Op::MaxPoolRows { x, argmax }, &[x]))
    }

    pub fn mean_pool_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.rc(x);
        check(
            !rows.is_empty() && rows.iter().all(|&i| i < r),
            "mean_pool_rows",
            || format!("bad row set {rows:?} for {r} rows"),
        )?;
        let t = self.value(x);
        let mut out = vec![T::zero(); c];
        for &i in rows {
            for (o, &v) in out.iter_mut().zip(t.row_slice(i)) {
                *o = *o + v;
            }
        }
        let n = T::of(rows.len() as f64);
        out.iter_mut().for_each(|v| *v = *v / n);
        let out = Tensor::new([1, c], out)?;
        Ok(self.push(
            out,
            Op::MeanPoolRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Sliding windows of `width` rows with zero "same" padding: row `i` of
    /// the result is `[x[i-left], ..., x[i-left+width-1]]` flattened, where
    /// `left = (width - 1) / 2`.
    pub fn im2col_same(&mut self, x: Var, width: usize) -> Result<Var> {
        check(width >= 1, "im2col_same", || {
            "width must be positive".into()
        })?;
        let (n, c) = self.rc(x);
        let left = (width - 1) / 2;
        let t = self.value(x);
        let mut data = vec![T::zero(); n * width * c];
        for i in 0..n {
            for w in 0..width {
                let src = i as isize + w as isize - left as isize;
                if src >= 0 && (src as usize) < n {
                    let dst = &mut data[(i * width + w) * c..(i * width + w + 1) * c];
                    dst.copy_from_slice(t.row_slice(src as usize));
                }
            }
        }
        let out = Tensor::new([n, width * c], data)?;
        Ok(self.push(out, Op::Im2Col { x, width, left }, &[x]))
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.rc(x);
        check(
            self.value(gamma).len() == c && self.value(beta).len() == c,
            "layer_norm",
            || format!("gain/shift size vs {c} columns"),
        )?;
        let eps = T::of(eps);
        let n = T::of(c as f64);
        let t = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = t.row_slice(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// `-sum_k y_k ln(max(softmax(logits)_k, 1e-12))` over a `1 x n` logit
    /// row. Clamped terms are constant and contribute no gradient.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        check(t.len() == targets.len(), "softmax_xent", || {
            format!("{} logits, {} targets", t.len(), targets.len())
        })?;
        let max = t.data().iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = t.data().iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        let probs: Vec<T> = exps.iter().map(|&e| e / sum).collect();
        let clamp = T::of(LOG_CLAMP);
        let mut loss = T::zero();
        let mut weights = vec![T::zero(); probs.len()];
        for (k, (&p, &y)) in probs.iter().zip(targets).enumerate() {
            let y = T::of(y);
            if y == T::zero() {
                continue;
            }
            if p > clamp {
                loss = loss - y * p.ln();
                weights[k] = y;
            } else {
                loss = loss - y * clamp.ln();
            }
        }
        let out = Tensor::new([1, 1], vec![loss])?;
        Ok(self.push(
            out,
            Op::SoftmaxXent {
                logits,
                probs,
                weights,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let out = Tensor::new([1, 1], vec![s]).expect("scalar");
        self.push(out, Op::Sum(x), &[x])
    }

    /// Reverse sweep from the scalar `loss`; parameter gradients are added
    /// into `grads`.
    pub fn backward(&mut self, loss: Var, grads: &mut Gradients<T>) -> Result<()> {
        let node_grads = self.backward_nodes(loss)?;
        for (name, &v) in &self.params {
            if let Some(g) = &node_grads[v.0] {
                grads.accumulate(name, g)?;
            }
        }
        Ok(())
    }

    /// Like [`Graph::backward`] but returns the gradient of every node; used
    /// for inputs created with [`Graph::variable`].
    pub fn backward_nodes(&mut self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        if self.backward_done {
            return Err(Error::StaleGraph);
        }
        check(self.value(loss).len() == 1, "backward", || {
            format!("loss must be scalar, got {:?}", self.shape(loss))
        })?;
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &(v, sign) in &[(*a, 1.0), (*b, 1.0)] {
                    if needs(v) {
                        let s = T::of(sign);
                        for (d, &x) in acc(grads, v, len(v)).iter_mut().zip(g) {
                            *d = *d + s * x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                for &(v, sign) in &[(*a, 1.0), (*b, -1.0)] {
                    if needs(v) {
                        let s = T::of(sign);
                        for (d, &x) in acc(grads, v, len(v)).iter_mut().zip(g) {
                            *d = *d + s * x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    for ((d, &x), &y) in acc(grads, *a, va.len()).iter_mut().zip(g).zip(vb) {
                        *d = *d + x * y;
                    }
                }
                if needs(*b) {
                    for ((d, &x), &y) in acc(grads, *b, vb.len()).iter_mut().zip(g).zip(va) {
                        *d = *d + x * y;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    for (d, &v) in acc(grads, *x, g.len()).iter_mut().zip(g) {
                        *d = *d + v;
                    }
                }
                if needs(*b) {
                    let c = len(*b);
                    let db = acc(grads, *b, c);
                    for row in g.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::Affine(x, s) => {
                if needs(*x) {
                    for (d, &v) in acc(grads, *x, g.len()).iter_mut().zip(g) {
                        *d = *d + *s * v;
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.rc(*a);
                let n = node.value.cols();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    // dA = G * op(B)^T
                    let da = acc(grads, *a, m * k);
                    gemm(m, n, k, g, false, vb, !trans_b, T::one(), da);
                }
                if needs(*b) {
                    let db = acc(grads, *b, vb.len());
                    if *trans_b {
                        // B is n x k: dB = G^T * A
                        gemm(n, m, k, g, true, va, false, T::one(), db);
                    } else {
                        // B is k x n: dB = A^T * G
                        gemm(k, m, n, va, true, g, false, T::one(), db);
                    }
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let y = node.value.data();
                    for ((d, &v), &o) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(y) {
                        if o > T::zero() {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if needs(*x) {
                    let y = node.value.data();
                    for ((d, &v), &o) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(y) {
                        *d = *d + v * o * (T::one() - o);
                    }
                }
            }
            Op::Tanh(x) => {
                if needs(*x) {
                    let y = node.value.data();
                    for ((d, &v), &o) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(y) {
                        *d = *d + v * (T::one() - o * o);
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                if needs(*x) {
                    let c = node.value.cols();
                    let y = node.value.data();
                    let dx = acc(grads, *x, g.len());
                    for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + yv * (gv - dot);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if needs(p) {
                        let dp = acc(grads, p, rows * c);
                        for r in 0..rows {
                            for j in 0..c {
                                dp[r * c + j] = dp[r * c + j] + g[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                if needs(*x) {
                    let (r, c) = self.rc(*x);
                    let w = node.value.cols();
                    let dx = acc(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..w {
                            dx[i * c + start + j] = dx[i * c + start + j] + g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = len(p);
                    if needs(p) {
                        for (d, &v) in acc(grads, p, n).iter_mut().zip(&g[offset..offset + n]) {
                            *d = *d + v;
                        }
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, idx } => {
                if needs(*x) {
                    let c = node.value.cols();
                    let dx = acc(grads, *x, len(*x));
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..c {
                            dx[r * c + j] = dx[r * c + j] + g[k * c + j];
                        }
                    }
                }
            }
            Op::MaxPoolRows { x, argmax } => {
                if needs(*x) {
                    let c = node.value.cols();
                    let dx = acc(grads, *x, len(*x));
                    for (j, &r) in argmax.iter().enumerate() {
                        dx[r * c + j] = dx[r * c + j] + g[j];
                    }
                }
            }
            Op::MeanPoolRows { x, rows } => {
                if needs(*x) {
                    let c = node.value.cols();
                    let n = T::of(rows.len() as f64);
                    let dx = acc(grads, *x, len(*x));
                    for &r in rows {
                        for j in 0..c {
                            dx[r * c + j] = dx[r * c + j] + g[j] / n;
                        }
                    }
                }
            }
            Op::Im2Col { x, width, left } => {
                if needs(*x) {
                    let (n, c) = self.rc(*x);
                    let dx = acc(grads, *x, n * c);
                    for i in 0..n {
                        for w in 0..*width {
                            let src = i as isize + w as isize - *left as isize;
                            if src >= 0 && (src as usize) < n {
                                let s = src as usize;
                                let base = (i * width + w) * c;
                                for j in 0..c {
                                    dx[s * c + j] = dx[s * c + j] + g[base + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gam = self.value(*gamma).data();
                if needs(*beta) {
                    let db = acc(grads, *beta, c);
                    for row in g.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                }
                if needs(*gamma) {
                    let dg = acc(grads, *gamma, c);
                    for (row, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, &v), &h) in dg.iter_mut().zip(row).zip(hrow) {
                            *d = *d + v * h;
                        }
                    }
                }
                if needs(*x) {
                    let n = T::of(c as f64);
                    let dx = acc(grads, *x, g.len());
                    for (i, ((drow, grow), hrow)) in dx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        let gh: Vec<T> = grow.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let mean_g = gh.iter().copied().sum::<T>() / n;
                        let mean_gh = gh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for ((d, &gv), &h) in drow.iter_mut().zip(&gh).zip(hrow) {
                            *d = *d + inv_std[i] * (gv - mean_g - h * mean_gh);
                        }
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                probs,
                weights,
            } => {
                if needs(*logits) {
                    let total: T = weights.iter().copied().sum();
                    let dl = acc(grads, *logits, probs.len());
                    for ((d, &p), &w) in dl.iter_mut().zip(probs).zip(weights) {
                        *d = *d + g[0] * (total * p - w);
                    }
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    for d in acc(grads, *x, len(*x)).iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}
