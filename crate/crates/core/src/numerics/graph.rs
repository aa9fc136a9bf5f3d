//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node; [`Graph::backward`] walks
//! the nodes in reverse creation order and accumulates exact gradients.
//! Parameters enter the graph by reference through [`Graph::leaf`], so a
//! forward pass never copies weight matrices. A graph belongs to one thread;
//! independent graphs (one per essay in a minibatch) can run side by side.

use std::borrow::Cow;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

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
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { table: Var, ids: Vec<usize> },
    GatherCols { x: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    SparseAttention { q: Var, k: Var, v: Var, sets: Vec<Vec<usize>>, scale: f64, probs: Vec<Vec<f64>> },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Work counters, used to check cost claims by instrumentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GraphStats {
    /// Scalar multiply-adds performed by matrix products.
    pub matmul_ops: u64,
    /// Query-key dot products evaluated by attention score computations.
    pub qk_products: u64,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    stats: GraphStats,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> GraphStats {
        self.stats
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(shape, Cow::Owned(value), op, needs)
    }

    /// Trainable input borrowed from `t`; gradients flow to it.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.values()), Op::Leaf, true)
    }

    /// Owned trainable input.
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_values()), Op::Leaf, true)
    }

    /// Owned input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_values()), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.to_vec()).expect("consistent node")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v` as a tensor; zeros when nothing flowed into it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].shape.clone();
        let values = match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.len()],
        };
        Tensor::new(shape, values).expect("consistent node")
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dimensions disagree: {:?} x {:?}", self.shape(a), self.shape(b))));
        }
        self.stats.matmul_ops += (m * k * n) as u64;
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        Ok(self.derived(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul_bt widths disagree: {:?} x {:?}ᵀ", self.shape(a), self.shape(b))));
        }
        self.stats.matmul_ops += (m * k * n) as u64;
        self.stats.qk_products += (m * n) as u64;
        let out = kernels::matmul_bt(self.value(a), self.value(b), m, k, n);
        Ok(self.derived(vec![m, n], out, Op::MatMulBt(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the vector `row` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        if self.value(row).len() != c {
            return Err(Error::Shape(format!("add_row: {:?} + {:?}", self.shape(x), self.shape(row))));
        }
        let r = self.value(row);
        let out = self.value(x).chunks(c).flat_map(|xs| xs.iter().zip(r).map(|(a, b)| a + b)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, out, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.derived(shape, out, Op::Scale(x, s), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.derived(shape, out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.derived(shape, out, Op::Sigmoid(x), &[x])
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = kernels::softmax_rows(self.value(x), r, c, None);
        let shape = self.shape(x).to_vec();
        self.derived(shape, out, Op::Softmax(x), &[x])
    }

    /// Row-wise softmax over the entries with `allow[i] == true`; the rest
    /// get probability zero. Every row needs at least one allowed entry.
    pub fn masked_softmax_rows(&mut self, x: Var, allow: &[bool]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if allow.len() != r * c {
            return Err(Error::Shape(format!("mask of {} entries for {:?}", allow.len(), self.shape(x))));
        }
        if let Some(row) = allow.chunks(c).position(|m| !m.iter().any(|&a| a)) {
            return Err(Error::Contract(format!("softmax row {row} is fully masked")));
        }
        let out = kernels::softmax_rows(self.value(x), r, c, Some(allow));
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, out, Op::Softmax(x), &[x]))
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::Shape(format!(
                "layer_norm: input {:?}, gain {:?}, bias {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// Rows `ids` of `table`, in order.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Input(format!("row id {bad} out of range for table with {r} rows")));
        }
        if ids.is_empty() {
            return Err(Error::Shape("gather_rows needs at least one id".into()));
        }
        let t = self.value(table);
        let out = ids.iter().flat_map(|&i| t[i * c..(i + 1) * c].iter().copied()).collect();
        Ok(self.derived(vec![ids.len(), c], out, Op::GatherRows { table, ids: ids.to_vec() }, &[table]))
    }

    /// Columns `idx` of `x`, in order.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if idx.is_empty() || idx.iter().any(|&j| j >= c) {
            return Err(Error::Shape(format!("gather_cols: bad column selection for {:?}", self.shape(x))));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            out.extend(idx.iter().map(|&j| xs[i * c + j]));
        }
        Ok(self.derived(vec![r, idx.len()], out, Op::GatherCols { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.derived(vec![r, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.derived(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.value(x).iter().sum::<f64>() / n;
        self.derived(vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Mean squared error between two equally shaped nodes.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Attention restricted to per-query key sets:
    /// `out_i = Σ_{j∈sets[i]} softmax_j(scale·q_i·k_j) v_j`.
    pub fn sparse_attention(&mut self, q: Var, k: Var, v: Var, sets: Vec<Vec<usize>>, scale: f64) -> Result<Var> {
        let (l, d) = self.dims(q);
        let (lk, dk) = self.dims(k);
        let (lv, dv) = self.dims(v);
        if d != dk || lk != lv || sets.len() != l {
            return Err(Error::Shape(format!(
                "sparse_attention: q {:?}, k {:?}, v {:?}, {} key sets",
                self.shape(q),
                self.shape(k),
                self.shape(v),
                sets.len()
            )));
        }
        if let Some(i) = sets.iter().position(|s| s.is_empty()) {
            return Err(Error::Contract(format!("query {i} has no admissible key")));
        }
        if sets.iter().flatten().any(|&j| j >= lk) {
            return Err(Error::Shape("sparse_attention: key index out of range".into()));
        }
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; l * dv];
        let mut probs = Vec::with_capacity(l);
        let mut products = 0u64;
        for (i, set) in sets.iter().enumerate() {
            let qi = &qs[i * d..(i + 1) * d];
            let logits: Vec<f64> = set.iter().map(|&j| scale * kernels::dot(qi, &ks[j * d..(j + 1) * d])).collect();
            products += set.len() as u64;
            let p = kernels::softmax_rows(&logits, 1, logits.len(), None);
            let oi = &mut out[i * dv..(i + 1) * dv];
            for (&j, &pj) in set.iter().zip(&p) {
                for (o, &vv) in oi.iter_mut().zip(&vs[j * dv..(j + 1) * dv]) {
                    *o += pj * vv;
                }
            }
            probs.push(p);
        }
        self.stats.qk_products += products;
        self.stats.matmul_ops += products * (d + dv) as u64;
        Ok(self.derived(vec![l, dv], out, Op::SparseAttention { q, k, v, sets, scale, probs }, &[q, k, v]))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every node
    /// it depends on. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Reverse pass seeded with explicit upstream gradients on several nodes.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<f64>)]) -> Result<()> {
        let mut top = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(Error::Shape(format!("seed of length {} for node of shape {:?}", g.len(), self.shape(*v))));
            }
            top = top.max(v.0);
        }
        let mut fresh: Vec<Option<Vec<f64>>> = vec![None; top + 1];
        for (v, g) in seeds {
            add_into(&mut fresh, *v, g);
        }
        for i in (0..=top).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = fresh[i].take() else { continue };
            self.propagate(i, &g, &mut fresh);
            fresh[i] = Some(g);
        }
        for (i, g) in fresh.into_iter().enumerate() {
            if let Some(g) = g {
                add_into(&mut self.grads, Var(i), &g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| -> &[f64] { &nodes[v.0].value };
        let dims = |v: Var| rows_cols(&nodes[v.0].shape);
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(*a);
                let n = dims(*b).1;
                if needs(*a) {
                    let da = kernels::matmul_bt(g, val(*b), m, n, k);
                    add_into(grads, *a, &da);
                }
                if needs(*b) {
                    let db = buf(grads, *b, k * n);
                    kernels::matmul_at_acc(val(*a), g, m, k, n, db);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = dims(*a);
                let n = dims(*b).0;
                if needs(*a) {
                    let da = kernels::matmul(g, val(*b), m, n, k);
                    add_into(grads, *a, &da);
                }
                if needs(*b) {
                    let db = buf(grads, *b, n * k);
                    kernels::matmul_at_acc(g, val(*a), m, n, k, db);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    add_into(grads, *a, g);
                }
                if needs(*b) {
                    add_into(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    add_into(grads, *a, g);
                }
                if needs(*b) {
                    let gb = buf(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    let d: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    add_into(grads, *a, &d);
                }
                if needs(*b) {
                    let d: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    add_into(grads, *b, &d);
                }
            }
            Op::AddRow(x, row) => {
                if needs(*x) {
                    add_into(grads, *x, g);
                }
                if needs(*row) {
                    let c = dims(*x).1;
                    let gr = buf(grads, *row, c);
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = buf(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(o, d)| *o += s * d);
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let d: Vec<f64> = g.iter().zip(xv).map(|(d, &v)| d * kernels::gelu_grad(v)).collect();
                add_into(grads, *x, &d);
            }
            Op::Sigmoid(x) => {
                let y = &nodes[i].value;
                let d: Vec<f64> = g.iter().zip(y.iter()).map(|(d, &s)| d * s * (1.0 - s)).collect();
                add_into(grads, *x, &d);
            }
            Op::Softmax(x) => {
                let (r, c) = dims(*x);
                let y = &nodes[i].value;
                let mut d = vec![0.0; r * c];
                for row in 0..r {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &g[row * c..(row + 1) * c];
                    let dotp = kernels::dot(ys, gs);
                    for j in 0..c {
                        d[row * c + j] = ys[j] * (gs[j] - dotp);
                    }
                }
                add_into(grads, *x, &d);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (r, c) = dims(*x);
                let gv = val(*gain);
                if needs(*gain) {
                    let gg = buf(grads, *gain, c);
                    for row in 0..r {
                        for j in 0..c {
                            gg[j] += g[row * c + j] * xhat[row * c + j];
                        }
                    }
                }
                if needs(*bias) {
                    let gb = buf(grads, *bias, c);
                    for chunk in g.chunks(c) {
                        gb.iter_mut().zip(chunk).for_each(|(o, d)| *o += d);
                    }
                }
                if needs(*x) {
                    let mut dx = vec![0.0; r * c];
                    for row in 0..r {
                        let off = row * c;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = g[off + j] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[off + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dh = g[off + j] * gv[j];
                            dx[off + j] = inv_std[row] * (dh - m1 - xhat[off + j] * m2);
                        }
                    }
                    add_into(grads, *x, &dx);
                }
            }
            Op::GatherRows { table, ids } => {
                let (rows, c) = dims(*table);
                let gt = buf(grads, *table, rows * c);
                for (p, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * c..(id + 1) * c];
                    dst.iter_mut().zip(&g[p * c..(p + 1) * c]).for_each(|(o, d)| *o += d);
                }
            }
            Op::GatherCols { x, idx } => {
                let (r, c) = dims(*x);
                let w = idx.len();
                let gx = buf(grads, *x, r * c);
                for row in 0..r {
                    for (p, &j) in idx.iter().enumerate() {
                        gx[row * c + j] += g[row * w + p];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = dims(Var(i)).1;
                let r = dims(Var(i)).0;
                let mut off = 0;
                for &p in parts {
                    let w = dims(p).1;
                    if needs(p) {
                        let gp = buf(grads, p, r * w);
                        for row in 0..r {
                            let src = &g[row * total + off..row * total + off + w];
                            gp[row * w..(row + 1) * w].iter_mut().zip(src).for_each(|(o, d)| *o += d);
                        }
                    }
                    off += w;
                }
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                let gx = buf(grads, *x, n);
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let gx = buf(grads, *x, n);
                let s = g[0] / n as f64;
                gx.iter_mut().for_each(|o| *o += s);
            }
            Op::SparseAttention { q, k, v, sets, scale, probs } => {
                let (_, d) = dims(*q);
                let (lk, dv) = dims(*v);
                let (qs, ks, vs) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; qs.len()];
                let mut dk = vec![0.0; lk * d];
                let mut dvv = vec![0.0; lk * dv];
                for (qi, (set, p)) in sets.iter().zip(probs).enumerate() {
                    let go = &g[qi * dv..(qi + 1) * dv];
                    let dp: Vec<f64> = set.iter().map(|&j| kernels::dot(go, &vs[j * dv..(j + 1) * dv])).collect();
                    let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for ((&j, &pj), &dpj) in set.iter().zip(p).zip(&dp) {
                        for (o, &x) in dvv[j * dv..(j + 1) * dv].iter_mut().zip(go) {
                            *o += pj * x;
                        }
                        let ds = pj * (dpj - inner) * scale;
                        for t in 0..d {
                            dq[qi * d + t] += ds * ks[j * d + t];
                            dk[j * d + t] += ds * qs[qi * d + t];
                        }
                    }
                }
                if needs(*q) {
                    add_into(grads, *q, &dq);
                }
                if needs(*k) {
                    add_into(grads, *k, &dk);
                }
                if needs(*v) {
                    add_into(grads, *v, &dvv);
                }
            }
        }
    }
}

fn buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(b) => b.iter_mut().zip(g).for_each(|(o, d)| *o += d),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let s = g.sum(xv);
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.5]);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let sq = g.mul(xv, xv).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::zeros(&[2, 2]);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        assert!(matches!(g.backward(xv), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 3f64.ln()], vec![4.2, 4.2]]).unwrap());
        let y = g.softmax_rows(x);
        let v = g.value(y);
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
        assert!((v[2] - 0.5).abs() < 1e-15);
        let single = g.constant(Tensor::scalar(-123.0));
        let s = g.softmax_rows(single);
        assert_eq!(g.value(s), &[1.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let gain = Tensor::filled(&[2], 1.0);
        let bias = Tensor::zeros(&[2]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 5.0]]).unwrap());
        let (gv, bv) = (g.leaf(&gain), g.leaf(&bias));
        let y = g.layer_norm(x, gv, bv, 1e-12).unwrap();
        let v = g.value(y);
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
        assert_eq!(&v[2..], &[0.0, 0.0]);

        let zero_gain = Tensor::zeros(&[2]);
        let b2 = Tensor::vector(vec![0.3, -0.7]);
        let (gz, bz) = (g.leaf(&zero_gain), g.leaf(&b2));
        let y2 = g.layer_norm(x, gz, bz, 1e-5).unwrap();
        assert_eq!(g.value(y2), &[0.3, -0.7, 0.3, -0.7]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn gradient_accumulates_across_calls() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let s = g.sum(xv);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[2.0, 2.0]);
    }
}
