//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. All
//! tensors are treated as 2-D matrices (`rows x cols`); row vectors are
//! `1 x n` and scalars are `1 x 1`. Calling [`Graph::backward`] on a scalar
//! variable walks the tape in reverse and returns a gradient for every
//! parameter of the bound [`ParamSet`].

use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::tensor::{matmul_into, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    MeanRows(Var),
    SumRows(Var),
    SumAll(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterAddRows { x: Var, idx: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Scalar = f32> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

fn mismatch<T: Scalar>(op: &'static str, ts: &[&Tensor<T>]) -> NnError {
    NnError::ShapeMismatch { op, shapes: ts.iter().map(|t| t.shape().to_vec()).collect() }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Graph { params, nodes: Vec::with_capacity(256), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_row(&mut self, values: &[f64]) -> Var {
        self.input(Tensor::row(values.iter().map(|&x| T::lit(x)).collect()))
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.input(Tensor::scalar(T::lit(x)))
    }

    /// Variable bound to a named parameter. Repeated calls return the same var.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self.params.index_of(name).ok_or_else(|| NnError::UnknownParam(name.into()))?;
        if let Some(v) = self.param_vars[idx] {
            return Ok(v);
        }
        let value = self.params.by_index(idx).1.clone();
        let v = self.push(value, Op::Param, true);
        self.param_vars[idx] = Some(v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", &[ta, tb]));
        }
        let mut out = Tensor::zeros(&[ta.rows(), tb.cols()]);
        matmul_into(ta, false, tb, false, out.data_mut(), false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `b` must match `a` or be a `1 x cols` row broadcast over rows.
    fn broadcast_ok(a: &Tensor<T>, b: &Tensor<T>) -> bool {
        (a.rows() == b.rows() && a.cols() == b.cols()) || (b.rows() == 1 && a.cols() == b.cols())
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !Self::broadcast_ok(ta, tb) {
            return Err(mismatch(name, &[ta, tb]));
        }
        let cols = ta.cols();
        let bd = tb.data();
        let bcast = tb.rows() != ta.rows() || ta.rows() == 1;
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, if bcast { bd[i % cols] } else { bd[i] }))
            .collect();
        Tensor::new(vec![ta.rows(), cols], data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::Shift(a), rg)
    }

    /// Concatenate along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(NnError::ShapeMismatch { op: "concat", shapes: vec![] });
        }
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = if axis == 0 {
            let cols = tensors[0].cols();
            if tensors.iter().any(|t| t.cols() != cols) {
                return Err(mismatch("concat", &tensors));
            }
            let rows = tensors.iter().map(|t| t.rows()).sum();
            let data = tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
            Tensor::new(vec![rows, cols], data)?
        } else {
            let rows = tensors[0].rows();
            if tensors.iter().any(|t| t.rows() != rows) {
                return Err(mismatch("concat", &tensors));
            }
            let cols: usize = tensors.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for t in &tensors {
                    data.extend_from_slice(t.row_slice(r));
                }
            }
            Tensor::new(vec![rows, cols], data)?
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).clone().reshape(&[rows, cols])?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Mean over rows: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows() == 0 {
            return Err(mismatch("mean_rows", &[t]));
        }
        let mut out = self.sum_rows_value(a);
        let inv = T::one() / T::lit(t.rows() as f64);
        out.data_mut().iter_mut().for_each(|x| *x *= inv);
        let rg = self.rg(a);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    fn sum_rows_value(&self, a: Var) -> Tensor<T> {
        let t = self.value(a);
        let mut out = Tensor::zeros(&[1, t.cols()]);
        for r in 0..t.rows() {
            for (o, &x) in out.data_mut().iter_mut().zip(t.row_slice(r)) {
                *o += x;
            }
        }
        out
    }

    /// Sum over rows: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.sum_rows_value(a);
        let rg = self.rg(a);
        self.push(out, Op::SumRows(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    fn row_softmax(t: &Tensor<T>) -> Tensor<T> {
        let cols = t.cols();
        let mut out = t.clone();
        for chunk in out.data_mut().chunks_mut(cols.max(1)) {
            let m = chunk.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut s = T::zero();
            for x in chunk.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in chunk.iter_mut() {
                *x /= s;
            }
        }
        out
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = Self::row_softmax(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let lse = Self::row_lse(t);
        let cols = t.cols();
        let data = t.data().iter().enumerate().map(|(i, &x)| x - lse[i / cols]).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    fn row_lse(t: &Tensor<T>) -> Vec<T> {
        t.data()
            .chunks(t.cols().max(1))
            .map(|chunk| {
                let m = chunk.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                if m == T::neg_infinity() {
                    return m;
                }
                m + chunk.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
            })
            .collect()
    }

    /// Row-wise log-sum-exp: `r x c -> r x 1`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let lse = Self::row_lse(t);
        let out = Tensor::new(vec![t.rows(), 1], lse).expect("row count");
        let rg = self.rg(a);
        self.push(out, Op::LogSumExp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.ln());
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(0.044715);
        let half = T::lit(0.5);
        let out = self.value(a).map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (`1 x c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = tx.cols();
        if tg.numel() != cols || tb.numel() != cols || cols == 0 {
            return Err(mismatch("layer_norm", &[tx, tg, tb]));
        }
        let eps = T::lit(1e-5);
        let n = T::lit(cols as f64);
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.numel());
        for chunk in tx.data().chunks(cols) {
            let mean = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in chunk.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Select rows of `x` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(NnError::IndexOutOfRange { op: "gather_rows", index: i, len: rows });
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(vec![idx.len(), cols], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Row `r` of `x` is added into output row `idx[r]`; output has `n_out` rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let t = self.value(x);
        if idx.len() != t.rows() {
            return Err(NnError::ShapeMismatch {
                op: "scatter_add_rows",
                shapes: vec![t.shape().to_vec(), vec![idx.len()]],
            });
        }
        let cols = t.cols();
        let mut out = Tensor::zeros(&[n_out, cols]);
        for (r, &i) in idx.iter().enumerate() {
            if i >= n_out {
                return Err(NnError::IndexOutOfRange { op: "scatter_add_rows", index: i, len: n_out });
            }
            let src = t.row_slice(r);
            for (o, &s) in out.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                *o += s;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::ScatterAddRows { x, idx: idx.to_vec() }, rg))
    }

    /// Dense multi-head scaled dot-product attention over the rows of `q`, `k`, `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (tq.rows(), tq.cols());
        let m = tk.rows();
        if heads == 0
            || d % heads != 0
            || tk.cols() != d
            || tv.cols() != d
            || tv.rows() != m
            || m == 0
        {
            return Err(mismatch("attention", &[tq, tk, tv]));
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * n * m];
        let mut out = Tensor::zeros(&[n, d]);
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            // scores = q_h k_h^T * scale
            T::gemm(
                n,
                dh,
                m,
                scale,
                &tq.data()[h * dh..],
                d as isize,
                1,
                &tk.data()[h * dh..],
                1,
                d as isize,
                T::zero(),
                p,
                m as isize,
                1,
            );
            for row in p.chunks_mut(m) {
                let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut s = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
            // out_h = p v_h
            T::gemm(
                n,
                m,
                dh,
                T::one(),
                p,
                m as isize,
                1,
                &tv.data()[h * dh..],
                d as isize,
                1,
                T::zero(),
                &mut out.data_mut()[h * dh..],
                d as isize,
                1,
            );
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Gradients of scalar `loss` with respect to every bound parameter.
    /// Parameters not reachable from `loss` receive zeros.
    pub fn backward(&self, loss: Var) -> Result<ParamSet<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(NnError::NonScalarLoss(lt.shape().to_vec()));
        }
        if !lt.all_finite() {
            return Err(NnError::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut out = self.params.zeros_like();
        for (idx, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = grads[v.0].take() {
                    *out.by_index_mut(idx) = g.reshape(self.params.by_index(idx).1.shape())?;
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient for a possibly row-broadcast operand.
    fn reduce_to(&self, v: Var, g: Tensor<T>) -> Tensor<T> {
        let target = self.value(v);
        if target.rows() == g.rows() {
            return g;
        }
        let mut out = Tensor::zeros(&[1, g.cols()]);
        for r in 0..g.rows() {
            for (o, &x) in out.data_mut().iter_mut().zip(g.row_slice(r)) {
                *o += x;
            }
        }
        out
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(&[ta.rows(), ta.cols()]);
                    matmul_into(g, false, tb, true, ga.data_mut(), false);
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(&[tb.rows(), tb.cols()]);
                    matmul_into(ta, true, g, false, gb.data_mut(), false);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                let gb = self.reduce_to(*b, g.clone());
                self.acc(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                let gb = self.reduce_to(*b, g.map(|x| -x));
                self.acc(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = ta.cols();
                let bcast = tb.rows() != ta.rows() || ta.rows() == 1;
                let bd = tb.data();
                let bval = |i: usize| if bcast { bd[i % cols] } else { bd[i] };
                if self.rg(*a) {
                    let data = g.data().iter().enumerate().map(|(i, &x)| x * bval(i)).collect();
                    self.acc(grads, *a, Tensor::new(ta.shape().to_vec(), data)?);
                }
                if self.rg(*b) {
                    let data = g.data().iter().zip(ta.data()).map(|(&x, &av)| x * av).collect();
                    let gb = self.reduce_to(*b, Tensor::new(vec![ta.rows(), cols], data)?);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|x| x * s));
            }
            Op::Shift(a) => self.acc(grads, *a, g.clone()),
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        offset += rows;
                        self.acc(grads, p, Tensor::new(vec![rows, cols], slice)?);
                    }
                } else {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let mut data = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + pc]);
                        }
                        offset += pc;
                        self.acc(grads, p, Tensor::new(vec![rows, pc], data)?);
                    }
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, g.clone().reshape(&shape)?);
            }
            Op::MeanRows(a) | Op::SumRows(a) => {
                let t = self.value(*a);
                let f = match node.op {
                    Op::MeanRows(_) => T::one() / T::lit(t.rows() as f64),
                    _ => T::one(),
                };
                let mut data = Vec::with_capacity(t.numel());
                for _ in 0..t.rows() {
                    data.extend(g.data().iter().map(|&x| x * f));
                }
                self.acc(grads, *a, Tensor::new(t.shape().to_vec(), data)?);
            }
            Op::SumAll(a) => {
                let t = self.value(*a);
                self.acc(grads, *a, Tensor::full(t.shape(), g.item()));
            }
            Op::Softmax(a) => {
                let cols = y.cols();
                let mut data = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    data.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::LogSoftmax(a) => {
                let cols = y.cols();
                let mut data = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let s: T = gr.iter().copied().sum();
                    data.extend(yr.iter().zip(gr).map(|(&ly, &q)| q - ly.exp() * s));
                }
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::LogSumExp(a) => {
                let t = self.value(*a);
                let cols = t.cols();
                let data = t
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let r = i / cols;
                        let lse = y.data()[r];
                        if lse == T::neg_infinity() {
                            T::zero()
                        } else {
                            g.data()[r] * (x - lse).exp()
                        }
                    })
                    .collect();
                self.acc(grads, *a, Tensor::new(t.shape().to_vec(), data)?);
            }
            Op::Log(a) => {
                let t = self.value(*a);
                let data = g.data().iter().zip(t.data()).map(|(&q, &x)| q / x).collect();
                self.acc(grads, *a, Tensor::new(t.shape().to_vec(), data)?);
            }
            Op::Exp(a) => {
                let data = g.data().iter().zip(y.data()).map(|(&q, &e)| q * e).collect();
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::Relu(a) => {
                let t = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&q, &x)| if x > T::zero() { q } else { T::zero() })
                    .collect();
                self.acc(grads, *a, Tensor::new(t.shape().to_vec(), data)?);
            }
            Op::Gelu(a) => {
                let t = self.value(*a);
                let c = T::lit(GELU_C);
                let k = T::lit(0.044715);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let data = g
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&q, &x)| {
                        let u = c * (x + k * x * x * x);
                        let th = u.tanh();
                        let du = c * (T::one() + three * k * x * x);
                        q * (half * (T::one() + th) + half * x * (T::one() - th * th) * du)
                    })
                    .collect();
                self.acc(grads, *a, Tensor::new(t.shape().to_vec(), data)?);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let cols = y.cols();
                let gam = self.value(*gamma).data();
                let n = T::lit(cols as f64);
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = vec![T::zero(); cols];
                    let mut gbeta = vec![T::zero(); cols];
                    for (gr, hr) in g.data().chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            gg[j] += gr[j] * hr[j];
                            gbeta[j] += gr[j];
                        }
                    }
                    let gs = self.value(*gamma).shape().to_vec();
                    let bs = self.value(*beta).shape().to_vec();
                    self.acc(grads, *gamma, Tensor::new(gs, gg)?);
                    self.acc(grads, *beta, Tensor::new(bs, gbeta)?);
                }
                if self.rg(*x) {
                    let mut data = Vec::with_capacity(y.numel());
                    for ((gr, hr), &inv) in g.data().chunks(cols).zip(xhat.chunks(cols)).zip(inv_std) {
                        let gh: Vec<T> = gr.iter().zip(gam).map(|(&q, &w)| q * w).collect();
                        let s1: T = gh.iter().copied().sum();
                        let s2: T = gh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        data.extend(
                            gh.iter().zip(hr).map(|(&a, &h)| inv / n * (n * a - s1 - h * s2)),
                        );
                    }
                    self.acc(grads, *x, Tensor::new(y.shape().to_vec(), data)?);
                }
            }
            Op::GatherRows { x, idx } => {
                let t = self.value(*x);
                let cols = t.cols();
                let mut gx = Tensor::zeros(t.shape());
                for (r, &i) in idx.iter().enumerate() {
                    let src = g.row_slice(r);
                    for (o, &s) in gx.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                        *o += s;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::ScatterAddRows { x, idx } => {
                let t = self.value(*x);
                let mut data = Vec::with_capacity(t.numel());
                for &i in idx {
                    data.extend_from_slice(g.row_slice(i));
                }
                self.acc(grads, *x, Tensor::new(t.shape().to_vec(), data)?);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d, m) = (tq.rows(), tq.cols(), tk.rows());
                let dh = d / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let mut gq = Tensor::zeros(&[n, d]);
                let mut gk = Tensor::zeros(&[m, d]);
                let mut gv = Tensor::zeros(&[m, d]);
                let mut dp = vec![T::zero(); n * m];
                for h in 0..*heads {
                    let p = &probs[h * n * m..(h + 1) * n * m];
                    // dV_h = P^T dO_h
                    T::gemm(
                        m,
                        n,
                        dh,
                        T::one(),
                        p,
                        1,
                        m as isize,
                        &g.data()[h * dh..],
                        d as isize,
                        1,
                        T::zero(),
                        &mut gv.data_mut()[h * dh..],
                        d as isize,
                        1,
                    );
                    // dP = dO_h V_h^T
                    T::gemm(
                        n,
                        dh,
                        m,
                        T::one(),
                        &g.data()[h * dh..],
                        d as isize,
                        1,
                        &tv.data()[h * dh..],
                        1,
                        d as isize,
                        T::zero(),
                        &mut dp,
                        m as isize,
                        1,
                    );
                    // dS = P * (dP - rowsum(dP * P)), scaled
                    for (pr, dr) in p.chunks(m).zip(dp.chunks_mut(m)) {
                        let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                        for (dv, &pv) in dr.iter_mut().zip(pr) {
                            *dv = pv * (*dv - dot) * scale;
                        }
                    }
                    // dQ_h = dS K_h
                    T::gemm(
                        n,
                        m,
                        dh,
                        T::one(),
                        &dp,
                        m as isize,
                        1,
                        &tk.data()[h * dh..],
                        d as isize,
                        1,
                        T::zero(),
                        &mut gq.data_mut()[h * dh..],
                        d as isize,
                        1,
                    );
                    // dK_h = dS^T Q_h
                    T::gemm(
                        m,
                        n,
                        dh,
                        T::one(),
                        &dp,
                        1,
                        m as isize,
                        &tq.data()[h * dh..],
                        d as isize,
                        1,
                        T::zero(),
                        &mut gk.data_mut()[h * dh..],
                        d as isize,
                        1,
                    );
                }
                self.acc(grads, *q, gq);
                self.acc(grads, *k, gk);
                self.acc(grads, *v, gv);
            }
        }
        Ok(())
    }
}

/// Builds a graph with `build`, then differentiates the scalar it returns.
pub fn forward_backward<T, F>(params: &ParamSet<T>, build: F) -> Result<(T, ParamSet<T>)>
where
    T: Scalar,
    F: FnOnce(&mut Graph<'_, T>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let loss = build(&mut g)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), grads))
}
