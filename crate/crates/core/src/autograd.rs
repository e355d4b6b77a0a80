//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation eagerly (values are computed at record
//! time) together with what is needed to run it backwards. Nodes whose inputs
//! never depend on a trainable parameter or watched input are marked as not
//! needing a gradient and are skipped during the backward sweep, which keeps
//! frozen sub-networks cheap.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{axis_split, broadcast_map, inverse_perm, mm_nn, mm_nt, mm_tn, permute_data, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    BroadcastAdd(Var, Var, Vec<usize>),
    BroadcastMul(Var, Var, Vec<usize>),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Mean { x: Var, axis: usize },
    MaxAxis { x: Var, axis: usize, argmax: Vec<usize> },
    Interp { x: Var, axis: usize, lo: Vec<usize>, w: Vec<f64> },
    Gather { x: Var, index: Vec<usize> },
    SumAll(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to any recorded node (if one reached it).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every trainable parameter that took part in the forward.
    pub fn params(&self) -> BTreeMap<ParamId, Tensor> {
        let mut out = BTreeMap::new();
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                out.insert(pid, g.clone());
            }
        }
        out
    }
}

fn shape_err<T>(msg: alloc::string::String) -> Result<T> {
    Err(Error::Contract(msg))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient should be tracked.
    pub fn watch(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A parameter leaf. Frozen parameters never receive gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(alloc::format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape(), data).expect("zip shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    /// `a + b` with `b` broadcast (numpy rules, right-aligned) to `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_map(self.shape(a), self.shape(b))?;
        let bv = self.value(b).data();
        let av = self.value(a);
        let data = av.data().iter().zip(&map).map(|(&x, &j)| x + bv[j]).collect();
        let t = Tensor::new(av.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::BroadcastAdd(a, b, map), ng))
    }

    /// `a * b` with `b` broadcast to `a`'s shape.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_map(self.shape(a), self.shape(b))?;
        let bv = self.value(b).data();
        let av = self.value(a);
        let data = av.data().iter().zip(&map).map(|(&x, &j)| x * bv[j]).collect();
        let t = Tensor::new(av.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::BroadcastMul(a, b, map), ng))
    }

    /// `x[..., k] · w[k, m] -> [..., m]`
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return shape_err(alloc::format!("matmul: {xs:?} x {ws:?}"));
        }
        let (k, m) = (ws[0], ws[1]);
        let rows = self.value(x).numel() / k;
        let mut out = vec![0.0; rows * m];
        mm_nn(self.value(x).data(), self.value(w).data(), &mut out, rows, k, m);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = m;
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(t, Op::MatMul(x, w), ng))
    }

    /// Batched `a[B,n,k] · b[B,k,m]`, or `a · bᵀ` with `b[B,m,k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a);
        let bs = self.shape(b);
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return shape_err(alloc::format!("bmm: {as_:?} x {bs:?}"));
        }
        let (batch, n, k) = (as_[0], as_[1], as_[2]);
        let (kb, m) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if kb != k {
            return shape_err(alloc::format!("bmm inner dims: {as_:?} x {bs:?}"));
        }
        let mut out = vec![0.0; batch * n * m];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..batch {
            let a_i = &av[i * n * k..(i + 1) * n * k];
            let b_i = &bv[i * k * m..(i + 1) * k * m];
            let c_i = &mut out[i * n * m..(i + 1) * n * m];
            if trans_b {
                mm_nt(a_i, b_i, c_i, n, k, m);
            } else {
                mm_nn(a_i, b_i, c_i, n, k, m);
            }
        }
        let t = Tensor::new(&[batch, n, m], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Bmm { a, b, trans_b }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap_or(&1);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = math::exp(*v - mx);
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(xv.shape(), out).expect("softmax");
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(alloc::format!(
                "layer_norm: input {:?}, gamma {:?}, beta {:?}",
                xv.shape(),
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.numel() / d.max(1);
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let (mean, var) = math::mean_var(row);
            let rs = 1.0 / math::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || core::mem::replace(&mut seen[p], true)) {
            return shape_err(alloc::format!("permute {perm:?} of {xs:?}"));
        }
        let t = self.value(x).permute(perm);
        let ng = self.ng(x);
        Ok(self.push(t, Op::Permute(x, perm.to_vec()), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat(&values, axis)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        if axis >= xs.len() || start + len > xs[axis] {
            return shape_err(alloc::format!("slice [{start}, {}) on axis {axis} of {xs:?}", start + len));
        }
        let t = self.value(x).slice_axis(axis, start, len);
        let ng = self.ng(x);
        Ok(self.push(t, Op::Slice { x, axis, start }, ng))
    }

    /// Arithmetic mean over `axis` (the axis is removed).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over `axis` that does not depend on the order of the reduced
    /// elements, and returns constants unchanged: values are sorted, then
    /// `m0 + Σ(xᵢ − m0)/n` with `m0` the smallest.
    pub fn order_free_mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, order_free: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] == 0 {
            return shape_err(alloc::format!("mean over axis {axis} of {xs:?}"));
        }
        let (outer, n, inner) = axis_split(&xs, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for j in 0..inner {
                for i in 0..n {
                    buf[i] = xv[(o * n + i) * inner + j];
                }
                out[o * inner + j] =
                    if order_free { order_free_mean(&mut buf) } else { buf.iter().sum::<f64>() / n as f64 };
            }
        }
        let mut shape = xs;
        shape.remove(axis);
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Mean { x, axis }, ng))
    }

    /// Maximum over `axis` (the axis is removed). Ties go to the first index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] == 0 {
            return shape_err(alloc::format!("max over axis {axis} of {xs:?}"));
        }
        let (outer, n, inner) = axis_split(&xs, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for i in 0..n {
                    let v = xv[(o * n + i) * inner + j];
                    if v > best {
                        best = v;
                        bi = i;
                    }
                }
                out[o * inner + j] = best;
                argmax[o * inner + j] = bi;
            }
        }
        let mut shape = xs;
        shape.remove(axis);
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::MaxAxis { x, axis, argmax }, ng))
    }

    /// Linear interpolation along `axis` to `target` samples with both
    /// endpoints pinned (sample `i` sits at `i·(n−1)/(target−1)`).
    pub fn interpolate(&mut self, x: Var, axis: usize, target: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] == 0 || target == 0 {
            return shape_err(alloc::format!("interpolate axis {axis} of {xs:?} to {target}"));
        }
        let (outer, n, inner) = axis_split(&xs, axis);
        let (lo, w) = interp_weights(n, target);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * target * inner];
        for o in 0..outer {
            for t in 0..target {
                let a = lo[t];
                let b = (a + 1).min(n - 1);
                for j in 0..inner {
                    let va = xv[(o * n + a) * inner + j];
                    let vb = xv[(o * n + b) * inner + j];
                    out[(o * target + t) * inner + j] = va + w[t] * (vb - va);
                }
            }
        }
        let mut shape = xs;
        shape[axis] = target;
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Interp { x, axis, lo, w }, ng))
    }

    /// Rows of the leading axis picked by `index` (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let n = self.shape(x).first().copied().unwrap_or(0);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return shape_err(alloc::format!("gather row {bad} of {n}"));
        }
        let t = self.value(x).select_rows(index);
        let ng = self.ng(x);
        Ok(self.push(t, Op::Gather { x, index: index.to_vec() }, ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() {
            return shape_err(alloc::format!("cross_entropy: logits {ls:?}, {} labels", labels.len()));
        }
        let (b, k) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Data(alloc::format!("label {bad} outside [0, {k})")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &lv[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..k {
                let e = math::exp(row[j] - mx);
                probs[i * k + j] = e;
                s += e;
            }
            for j in 0..k {
                probs[i * k + j] /= s;
            }
            loss += mx + math::ln(s) - row[labels[i]];
        }
        loss /= b as f64;
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, ng))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n = av.len().max(1) as f64;
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), ng))
    }

    /// Back-propagate from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params =
            self.params.iter().filter(|(_, v)| self.nodes[v.0].needs_grad).map(|(&pid, v)| (pid, v.0)).collect();
        Gradients { grads, params }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape mismatch");
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.value(*b).data();
                    let d = gd.iter().zip(bv).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, Tensor::new(g.shape(), d).unwrap());
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    let d = gd.iter().zip(av).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, Tensor::new(g.shape(), d).unwrap());
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * s)),
            Op::BroadcastAdd(a, b, map) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    let mut db = Tensor::zeros(self.shape(*b));
                    let dd = db.data_mut();
                    for (&gi, &j) in gd.iter().zip(map) {
                        dd[j] += gi;
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::BroadcastMul(a, b, map) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.ng(*a) {
                    let d = gd.iter().zip(map).map(|(gi, &j)| gi * bv[j]).collect();
                    self.acc(grads, *a, Tensor::new(g.shape(), d).unwrap());
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(self.shape(*b));
                    let dd = db.data_mut();
                    for ((gi, ai), &j) in gd.iter().zip(av).zip(map) {
                        dd[j] += gi * ai;
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::MatMul(x, w) => {
                let ws = self.shape(*w);
                let (k, m) = (ws[0], ws[1]);
                let xv = self.value(*x);
                let rows = xv.numel() / k;
                if self.ng(*x) {
                    let mut dx = vec![0.0; rows * k];
                    mm_nt(gd, self.value(*w).data(), &mut dx, rows, m, k);
                    self.acc(grads, *x, Tensor::new(xv.shape(), dx).unwrap());
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; k * m];
                    mm_tn(xv.data(), gd, &mut dw, k, rows, m);
                    self.acc(grads, *w, Tensor::new(ws, dw).unwrap());
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let as_ = self.shape(*a);
                let bs = self.shape(*b);
                let (batch, n, k) = (as_[0], as_[1], as_[2]);
                let m = if *trans_b { bs[1] } else { bs[2] };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.ng(*a) {
                    let mut da = vec![0.0; batch * n * k];
                    for i in 0..batch {
                        let g_i = &gd[i * n * m..(i + 1) * n * m];
                        let b_i = &bv[i * k * m..(i + 1) * k * m];
                        let d_i = &mut da[i * n * k..(i + 1) * n * k];
                        if *trans_b {
                            mm_nn(g_i, b_i, d_i, n, m, k);
                        } else {
                            mm_nt(g_i, b_i, d_i, n, m, k);
                        }
                    }
                    self.acc(grads, *a, Tensor::new(as_, da).unwrap());
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; batch * k * m];
                    for i in 0..batch {
                        let g_i = &gd[i * n * m..(i + 1) * n * m];
                        let a_i = &av[i * n * k..(i + 1) * n * k];
                        let d_i = &mut db[i * k * m..(i + 1) * k * m];
                        if *trans_b {
                            // d(b)[m,k] = gᵀ[m,n] · a[n,k]
                            mm_tn(g_i, a_i, d_i, m, n, k);
                        } else {
                            // d(b)[k,m] = aᵀ[k,n] · g[n,m]
                            mm_tn(a_i, g_i, d_i, k, n, m);
                        }
                    }
                    self.acc(grads, *b, Tensor::new(bs, db).unwrap());
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n.max(1)).zip(gd.chunks(n.max(1))).zip(dx.chunks_mut(n.max(1))) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..yr.len() {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(node.value.shape(), dx).unwrap());
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                let rows = rstd.len();
                if self.ng(*beta) {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += gd[r * d + j];
                        }
                    }
                    self.acc(grads, *beta, Tensor::new(&[d], db).unwrap());
                }
                if self.ng(*gamma) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.acc(grads, *gamma, Tensor::new(&[d], dg).unwrap());
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; rows * d];
                    let inv_d = 1.0 / d as f64;
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gam[j];
                            m1 += dh;
                            m2 += dh * xhat[r * d + j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gam[j];
                            dx[r * d + j] = rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(self.shape(*x), dx).unwrap());
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(gi, &xi)| gi * gelu_grad(xi)).collect();
                self.acc(grads, *x, Tensor::new(g.shape(), d).unwrap());
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect();
                self.acc(grads, *x, Tensor::new(g.shape(), d).unwrap());
            }
            Op::Reshape(x) => {
                let t = g.clone().reshape(self.shape(*x)).unwrap();
                self.acc(grads, *x, t);
            }
            Op::Permute(x, perm) => {
                let t = permute_data(gd, g.shape(), &inverse_perm(perm));
                self.acc(grads, *x, t);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.ng(p) {
                        self.acc(grads, p, g.slice_axis(*axis, start, len));
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.ng(*x) {
                    let xs = self.shape(*x);
                    let (outer, n, inner) = axis_split(xs, *axis);
                    let len = g.shape()[*axis];
                    let mut dx = vec![0.0; xs.iter().product()];
                    for o in 0..outer {
                        let src = &gd[o * len * inner..(o + 1) * len * inner];
                        let base = (o * n + start) * inner;
                        dx[base..base + len * inner].copy_from_slice(src);
                    }
                    self.acc(grads, *x, Tensor::new(xs, dx).unwrap());
                }
            }
            Op::Mean { x, axis } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = axis_split(xs, *axis);
                let inv = 1.0 / n as f64;
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            dx[(o * n + i) * inner + j] = gd[o * inner + j] * inv;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(xs, dx).unwrap());
            }
            Op::MaxAxis { x, axis, argmax } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = axis_split(xs, *axis);
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..inner {
                        let i = argmax[o * inner + j];
                        dx[(o * n + i) * inner + j] = gd[o * inner + j];
                    }
                }
                self.acc(grads, *x, Tensor::new(xs, dx).unwrap());
            }
            Op::Interp { x, axis, lo, w } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = axis_split(xs, *axis);
                let target = lo.len();
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for t in 0..target {
                        let a = lo[t];
                        let b = (a + 1).min(n - 1);
                        for j in 0..inner {
                            let gv = gd[(o * target + t) * inner + j];
                            dx[(o * n + a) * inner + j] += gv * (1.0 - w[t]);
                            dx[(o * n + b) * inner + j] += gv * w[t];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(xs, dx).unwrap());
            }
            Op::Gather { x, index } => {
                let xs = self.shape(*x);
                let inner: usize = xs[1..].iter().product();
                let mut dx = vec![0.0; xs.iter().product()];
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..inner {
                        dx[i * inner + j] += gd[r * inner + j];
                    }
                }
                self.acc(grads, *x, Tensor::new(xs, dx).unwrap());
            }
            Op::SumAll(x) => {
                let s = gd[0];
                self.acc(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let ls = self.shape(*logits);
                let (b, k) = (ls[0], ls[1]);
                let s = gd[0] / b as f64;
                let mut d = probs.clone();
                for i in 0..b {
                    d[i * k + labels[i]] -= 1.0;
                }
                for v in d.iter_mut() {
                    *v *= s;
                }
                self.acc(grads, *logits, Tensor::new(ls, d).unwrap());
            }
            Op::Mse(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let s = 2.0 * gd[0] / av.len().max(1) as f64;
                let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| s * (x - y)).collect();
                let shape = self.shape(*a);
                if self.ng(*b) {
                    self.acc(grads, *b, Tensor::new(shape, diff.iter().map(|x| -x).collect()).unwrap());
                }
                self.acc(grads, *a, Tensor::new(shape, diff).unwrap());
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = math::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// See [`Tape::order_free_mean_axis`].
pub fn order_free_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m0 = values[0];
    let s: f64 = values.iter().map(|v| v - m0).sum();
    m0 + s / values.len() as f64
}

/// Lower sample index and blend weight for endpoint-pinned linear
/// interpolation of `n` samples onto `target` positions.
pub fn interp_weights(n: usize, target: usize) -> (Vec<usize>, Vec<f64>) {
    let mut lo = Vec::with_capacity(target);
    let mut w = Vec::with_capacity(target);
    for t in 0..target {
        if n == 1 || target == 1 {
            lo.push(0);
            w.push(0.0);
            continue;
        }
        // exact rational position t·(n−1)/(target−1)
        let num = t * (n - 1);
        let den = target - 1;
        let i = (num / den).min(n - 1);
        let frac = (num - i * den) as f64 / den as f64;
        lo.push(i);
        w.push(frac);
    }
    (lo, w)
}
