use std::borrow::Cow;

use rand::Rng;

use super::{gemm, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    AddScalar { x: Var },
    Relu { x: Var },
    Tanh { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    MaskFill { x: Var, keep: Vec<bool> },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Stack { xs: Vec<Var>, inner: usize },
    Select { x: Var, outer: usize, n: usize, inner: usize, index: usize },
    Gather { table: Var, rows: Vec<usize> },
    Mse { pred: Var, target: Vec<f64>, keep: Option<Vec<bool>>, denom: f64 },
    Sum { x: Var },
    Mean { x: Var },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Forward-pass record. Parameters are borrowed from a [`ParamStore`] for
/// the lifetime `'p`.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    recording: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'p> Graph<'p> {
    /// Graph that records operations for differentiation.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Graph for inference: values only, nothing kept for backward.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn leaf(&mut self, value: Cow<'p, Tensor>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.recording,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable parameter, borrowed from the store.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        self.leaf(Cow::Borrowed(store.get(id)), true, Some(id))
    }

    /// Differentiable input owned by the graph.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(Cow::Owned(value), true, None)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Cow::Owned(value), false, None)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: impl FnOnce() -> Op) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op() } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a [.., k] x b [k, n] -> [.., n]`; leading axes of `a` are flattened
    /// into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().is_empty() || bv.shape().len() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let k = av.last_dim();
        let n = bv.shape()[1];
        let m = av.numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor { shape, data: out };
        Ok(self.push(t, &[a, b], || Op::MatMul { a, b, m, k, n }))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let t = Tensor { shape: vec![batch, m, n], data: out };
        Ok(self.push(t, &[a, b], || Op::BatchMatMul { a, b, batch, m, k, n, trans_b }))
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor { shape: av.shape().to_vec(), data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, &[a, b], || Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, &[a, b], || Op::Sub { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, &[a, b], || Op::Mul { a, b }))
    }

    /// Adds a `[n]` vector to every row of `x [.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.shape().len() != 1 || xv.shape().is_empty() || xv.last_dim() != bv.numel() {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let n = bv.numel();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            add_into(row, bv.data());
        }
        let t = Tensor { shape: xv.shape().to_vec(), data };
        Ok(self.push(t, &[x, bias], || Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|v| v * factor).collect(),
        };
        self.push(t, &[x], || Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|v| v + c).collect(),
        };
        self.push(t, &[x], || Op::AddScalar { x })
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| if v > 0.0 { v } else { 0.0 });
        self.push(t, &[x], || Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        self.push(t, &[x], || Op::Tanh { x })
    }

    /// Softmax over the last axis. Entries equal to `-inf` receive exactly
    /// zero weight.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_row(row);
        }
        let t = Tensor { shape: xv.shape().to_vec(), data };
        self.push(t, &[x], || Op::Softmax { x })
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.last_dim();
        if xv.shape().is_empty() || gv.shape() != [n] || bv.shape() != [n] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.numel() / n;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor { shape: xv.shape().to_vec(), data: out };
        Ok(self.push(t, &[x, gamma, beta], || Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1 / (1 - p)`. With `p == 0` this is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        Ok(self.push(t, &[x], || Op::Dropout { x, mask }))
    }

    /// Replaces entries whose `keep` flag is false by `-inf`.
    pub fn mask_fill(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.numel() {
            return Err(Error::shape("mask_fill", xv.shape(), &[keep.len()]));
        }
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data: xv
                .data()
                .iter()
                .zip(&keep)
                .map(|(&v, &k)| if k { v } else { f64::NEG_INFINITY })
                .collect(),
        };
        Ok(self.push(t, &[x], || Op::MaskFill { x, keep }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.numel() {
            return Err(Error::shape("reshape", xv.shape(), shape));
        }
        let t = Tensor { shape: shape.to_vec(), data: xv.data().to_vec() };
        Ok(self.push(t, &[x], || Op::Reshape { x }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut seen = vec![false; perm.len()];
        let valid = perm.len() == xv.shape().len()
            && perm.iter().all(|&p| p < perm.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape("permute", xv.shape(), perm));
        }
        let (shape, data) = permute_data(xv.shape(), xv.data(), perm);
        let t = Tensor { shape, data };
        let perm = perm.to_vec();
        Ok(self.push(t, &[x], || Op::Permute { x, perm }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Stacks equally shaped tensors along a new axis inserted at `axis`.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let shape = self.shape(first).to_vec();
        if axis > shape.len() {
            return Err(Error::shape("stack", &shape, &[axis]));
        }
        for &v in xs {
            same_shape("stack", self.value(first), self.value(v))?;
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * inner * xs.len());
        for o in 0..outer {
            for &v in xs {
                data.extend_from_slice(&self.value(v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, xs.len());
        let t = Tensor { shape: out_shape, data };
        let xs = xs.to_vec();
        Ok(self.push(t, &xs.clone(), || Op::Stack { xs, inner }))
    }

    /// Picks `index` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(Error::shape("select", &shape, &[axis, index]));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * n + index) * inner;
            data.extend_from_slice(&xv[base..base + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let t = Tensor { shape: out_shape, data };
        Ok(self.push(t, &[x], || Op::Select { x, outer, n, inner, index }))
    }

    /// Row lookup: `table [V, E]` indexed by `rows` gives `[rows.len(), E]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::shape("gather_rows", tv.shape(), &[]));
        }
        let (v, e) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(Error::shape("gather_rows", tv.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(rows.len() * e);
        for &r in rows {
            data.extend_from_slice(&tv.data()[r * e..(r + 1) * e]);
        }
        let t = Tensor { shape: vec![rows.len(), e], data };
        let rows = rows.to_vec();
        Ok(self.push(t, &[table], || Op::Gather { table, rows }))
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        self.masked_mse_loss(pred, target, None)
    }

    /// Mean squared error over the rows (last-axis vectors) whose flag in
    /// `keep` is set. Masked rows contribute nothing to the value or the
    /// gradient.
    pub fn masked_mse_loss(&mut self, pred: Var, target: &Tensor, keep: Option<&[bool]>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != target.numel() || pv.shape().is_empty() {
            return Err(Error::shape("mse_loss", pv.shape(), target.shape()));
        }
        let cols = pv.last_dim();
        let rows = pv.numel() / cols;
        if let Some(k) = keep {
            if k.len() != rows {
                return Err(Error::shape("mse_loss mask", pv.shape(), &[k.len()]));
            }
        }
        let kept = keep.map_or(rows, |k| k.iter().filter(|&&b| b).count());
        if kept == 0 {
            return Err(Error::InvalidArgument("mse_loss over zero unmasked rows".into()));
        }
        let denom = (kept * cols) as f64;
        let mut sum = 0.0;
        for r in 0..rows {
            if keep.is_some_and(|k| !k[r]) {
                continue;
            }
            for j in r * cols..(r + 1) * cols {
                let d = pv.data()[j] - target.data()[j];
                sum += d * d;
            }
        }
        let t = Tensor::scalar(sum / denom);
        let target = target.data().to_vec();
        let keep = keep.map(<[bool]>::to_vec);
        Ok(self.push(t, &[pred], || Op::Mse { pred, target, keep, denom }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(t, &[x], || Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.numel() as f64);
        self.push(t, &[x], || Op::Mean { x })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 || lv.shape().len() > 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_op(&node.op, &node.value, &g, &mut grads);
        }
        let leaves = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| matches!(self.nodes[i].op, Op::Leaf)).map(|data| Tensor {
                    shape: self.nodes[i].value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { leaves, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn backward_op(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let bv = self.value(b).data();
                if let Some(da) = self.slot(grads, a) {
                    gemm(m, n, k, g, false, bv, true, da, true);
                }
                let av = self.value(a).data();
                if let Some(db) = self.slot(grads, b) {
                    gemm(k, m, n, av, true, g, false, db, true);
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(da) = self.slot(grads, a) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        // trans_b: b_i is [n, k] and da_i = g_i b_i
                        gemm(m, n, k, gi, false, bi, !trans_b, dai, true);
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gi, true, ai, false, dbi, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dbi, true);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, b) {
                    add_into(db, g);
                }
            }
            &Op::Sub { a, b } => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, b) {
                    for (d, s) in db.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            &Op::Mul { a, b } => {
                let bv = self.value(b).data();
                if let Some(da) = self.slot(grads, a) {
                    for ((d, s), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                let av = self.value(a).data();
                if let Some(db) = self.slot(grads, b) {
                    for ((d, s), x) in db.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(dx) = self.slot(grads, x) {
                    add_into(dx, g);
                }
                let n = self.value(bias).numel();
                if let Some(db) = self.slot(grads, bias) {
                    for row in g.chunks_exact(n) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(dx) = self.slot(grads, x) {
                    for (d, s) in dx.iter_mut().zip(g) {
                        *d += factor * s;
                    }
                }
            }
            &Op::AddScalar { x } | &Op::Reshape { x } => {
                if let Some(dx) = self.slot(grads, x) {
                    add_into(dx, g);
                }
            }
            &Op::Relu { x } => {
                let xv = self.value(x).data();
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, s), v) in dx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            &Op::Tanh { x } => {
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, s), y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += s * (1.0 - y * y);
                    }
                }
            }
            &Op::Softmax { x } => {
                let n = out.last_dim();
                if let Some(dx) = self.slot(grads, x) {
                    for ((drow, grow), yrow) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(out.data().chunks_exact(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = out.last_dim();
                let gam = self.value(*gamma).data();
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let grow = &g[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            dxhat[j] = grow[j] * gam[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hrow[j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        let drow = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            drow[j] += rs * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for grow in g.chunks_exact(n) {
                        add_into(db, grow);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, s), m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                }
            }
            Op::MaskFill { x, keep } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, s), &k) in dx.iter_mut().zip(g).zip(keep) {
                        if k {
                            *d += s;
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, back) = permute_data(out.shape(), g, &inv);
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, &back);
                }
            }
            Op::Stack { xs, inner } => {
                let count = xs.len();
                for (i, &v) in xs.iter().enumerate() {
                    if let Some(dx) = self.slot(grads, v) {
                        for (o, chunk) in dx.chunks_exact_mut(*inner).enumerate() {
                            let base = (o * count + i) * inner;
                            add_into(chunk, &g[base..base + inner]);
                        }
                    }
                }
            }
            &Op::Select { x, outer, n, inner, index } => {
                if let Some(dx) = self.slot(grads, x) {
                    for o in 0..outer {
                        let base = (o * n + index) * inner;
                        add_into(&mut dx[base..base + inner], &g[o * inner..(o + 1) * inner]);
                    }
                }
            }
            Op::Gather { table, rows } => {
                let e = self.value(*table).shape()[1];
                if let Some(dt) = self.slot(grads, *table) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut dt[r * e..(r + 1) * e], &g[i * e..(i + 1) * e]);
                    }
                }
            }
            Op::Mse { pred, target, keep, denom } => {
                let pv = self.value(*pred);
                let cols = pv.last_dim();
                let scale = 2.0 * g[0] / denom;
                if let Some(dp) = self.slot(grads, *pred) {
                    for (r, (drow, (prow, trow))) in dp
                        .chunks_exact_mut(cols)
                        .zip(pv.data().chunks_exact(cols).zip(target.chunks_exact(cols)))
                        .enumerate()
                    {
                        if keep.as_ref().is_some_and(|k| !k[r]) {
                            continue;
                        }
                        for j in 0..cols {
                            drow[j] += scale * (prow[j] - trow[j]);
                        }
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(dx) = self.slot(grads, x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::Mean { x } => {
                if let Some(dx) = self.slot(grads, x) {
                    let s = g[0] / dx.len() as f64;
                    for d in dx.iter_mut() {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn permute_data(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a leaf, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// One gradient per parameter of `store`, in store order. Parameters the
    /// loss does not reach get zeros; parameters used several times get the
    /// sum of their contributions.
    pub fn params(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for &(id, node) in &self.params {
            if let Some(g) = &self.leaves[node] {
                add_into(out[id.0].data_mut(), g.data());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn relu_softmax_layer_norm_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.5, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);

        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(z);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::vector(vec![1.0, 3.0]));
        let gamma = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let beta = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        // mean 2, variance 1: (x - 2) / sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!(close(g.value(y).data()[0], -expect, 1e-15));
        assert!(close(g.value(y).data()[1], expect, 1e-15));
        assert!(expect < 1.0 && expect > 0.99999);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
        // d loss / d loss
        let grads = g.backward(x).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn linear_mse_gradient_matches_hand_formula() {
        // loss = mean((W x - y)^2) over 2 outputs; dL/dW = 2/2 (Wx - y) x^T
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let x = [3.0, -1.0];
        let y = [0.5, 2.0];
        let mut store = ParamStore::new();
        let wid = store.add("w", w.clone());
        let mut g = Graph::new();
        let wv = g.param(&store, wid);
        // row vector x^T W^T gives (W x)^T
        let xt = g.constant(Tensor::matrix(1, 2, x.to_vec()).unwrap());
        let wt = g.transpose(wv).unwrap();
        let pred = g.matmul(xt, wt).unwrap();
        let loss = g.mse_loss(pred, &Tensor::matrix(1, 2, y.to_vec()).unwrap()).unwrap();
        let grads = g.backward(loss).unwrap().params(&store);
        let wx = [1.0 * 3.0 + 2.0 * -1.0, -1.0 * 3.0 + 0.5 * -1.0];
        let r = [wx[0] - y[0], wx[1] - y[1]];
        let want = [r[0] * x[0], r[0] * x[1], r[1] * x[0], r[1] * x[1]];
        for (a, b) in grads[0].data().iter().zip(want) {
            assert!(close(*a, b, 1e-14), "{a} vs {b}");
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_report_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn dropout_eval_identity_and_train_expectation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[200_000], 1.0));
        assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);
        let y = g.dropout(x, 0.1, &mut rng).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / 200_000.0;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!(g.dropout(x, 1.0, &mut rng).is_err());
    }

    #[test]
    fn masked_softmax_gives_exact_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::matrix(1, 3, vec![0.3, 5.0, -1.0]).unwrap());
        let m = g.mask_fill(x, vec![true, false, true]).unwrap();
        let s = g.softmax(m);
        assert_eq!(g.value(s).data()[1], 0.0);
        let sum: f64 = g.value(s).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(Tensor::new(vec![2, 3, 4], data.clone()).unwrap());
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // out[k, i, j] = in[i, j, k]
        assert_eq!(g.value(p).data()[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), &data[..]);
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn stack_and_select_are_inverse() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let s = g.stack(&[a, b], 1).unwrap();
        assert_eq!(g.shape(s), &[2, 2, 2]);
        assert_eq!(g.value(s).data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        let back = g.select(s, 1, 1).unwrap();
        assert_eq!(g.value(back).data(), g.value(b).data());
    }

    #[test]
    fn inference_graph_keeps_no_gradients() {
        let store = {
            let mut s = ParamStore::new();
            s.add("w", Tensor::scalar(2.0));
            s
        };
        let mut g = Graph::inference();
        let w = g.param(&store, ParamId(0));
        let y = g.mul(w, w).unwrap();
        assert_eq!(g.value(y).item(), Some(4.0));
        let grads = g.backward(y).unwrap();
        assert!(grads.wrt(w).is_none());
    }
}
