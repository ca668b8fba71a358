use std::sync::Arc;

use super::kernels;
use super::ops;
use super::Tensor;
use crate::error::{contract, dim_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Static description of a grouped multi-head attention call.
///
/// Rows of `q`, `k`, `v` are laid out as `groups` consecutive blocks of
/// `group_len` tokens; attention never crosses a block.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub groups: usize,
    pub group_len: usize,
    pub heads: usize,
    pub scale: f64,
    /// `group_len²` row indices into a `[T × heads]` additive bias table.
    pub rel_index: Option<Vec<u32>>,
    /// `groups × group_len²` keep-mask; `false` pairs are excluded from the softmax.
    pub mask: Option<Vec<bool>>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    DivScalar(Var, Var),
    Lerp(Var, Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    Norm {
        x: Var,
        affine: Option<(Var, Var)>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    RowAffine(Var, Var, Var),
    CosineSim {
        q: Var,
        k: Var,
        eps: f64,
        qn: Vec<f64>,
        kn: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<f64>,
    },
    PixelShuffle(Var, usize),
    PixelUnshuffle(Var, usize),
    Reshape(Var),
    GatherRows(Var, Arc<[usize]>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        layout: Arc<AttnLayout>,
        probs: Vec<f64>,
    },
    L1Loss(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Record of executed differentiable operations, replayed in reverse by
/// [`Tape::backward`]. A tape is built fresh for every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Stores the gradient of `v` (zeros if none flowed) into `t.grad`.
    pub fn write_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        let g = self
            .get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        t.set_grad(Some(g))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        let mut value = t;
        value.zero_grad();
        self.push(value, Op::Leaf, tracked)
    }

    /// Records a leaf that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut value = t.with_requires_grad(false);
        value.zero_grad();
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::MatMul(a, b), tr))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose(self.value(a))?;
        let tr = self.tracked(a);
        Ok(self.push(out, Op::Transpose(a), tr))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Add(a, b), tr))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Sub(a, b), tr))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Mul(a, b), tr))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|v| v * c).collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        let tr = self.tracked(a);
        self.push(out, Op::Scale(a, c), tr)
    }

    /// `x[N×d] + b[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, d) = self.value(x).dims2()?;
        if self.value(b).numel() != d {
            return Err(dim_err("add_row", self.shape(x), self.shape(b)));
        }
        let bias = self.data(b).to_vec();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(d) {
            row.iter_mut().zip(&bias).for_each(|(v, b)| *v += b);
        }
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        let tr = self.tracked(x) || self.tracked(b);
        Ok(self.push(out, Op::AddRow(x, b), tr))
    }

    /// `x / s` for a one-element `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(contract("div_scalar divisor must hold one value"));
        }
        let sv = self.data(s)[0];
        let data = self.data(x).iter().map(|v| v / sv).collect();
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        let tr = self.tracked(x) || self.tracked(s);
        Ok(self.push(out, Op::DivScalar(x, s), tr))
    }

    /// `s·a + (1−s)·b` for a one-element `s`.
    pub fn lerp(&mut self, a: Var, b: Var, s: Var) -> Result<Var> {
        self.same_shape("lerp", a, b)?;
        if self.value(s).numel() != 1 {
            return Err(contract("lerp weight must hold one value"));
        }
        let sv = self.data(s)[0];
        let out = self.zip_with(a, b, |x, y| sv * x + (1.0 - sv) * y);
        let tr = self.tracked(a) || self.tracked(b) || self.tracked(s);
        Ok(self.push(out, Op::Lerp(a, b, s), tr))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| ops::sigmoid(v)).collect();
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        let tr = self.tracked(x);
        self.push(out, Op::Sigmoid(x), tr)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| ops::gelu(v)).collect();
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        let tr = self.tracked(x);
        self.push(out, Op::Gelu(x), tr)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let tr = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tr)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        let tr = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Mean(x), tr)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = ops::softmax(self.value(x));
        let tr = self.tracked(x);
        self.push(out, Op::Softmax(x), tr)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(contract("layer_norm eps must be positive"));
        }
        let (xhat, rstd) = ops::standardize(self.data(x), cols, eps);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut y = xhat.clone();
        for row in y.chunks_mut(cols) {
            for ((v, gv), bv) in row.iter_mut().zip(g).zip(b) {
                *v = *v * gv + bv;
            }
        }
        let out = Tensor::from_parts(self.shape(x).to_vec(), y);
        let tr = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(
            out,
            Op::Norm {
                x,
                affine: Some((gamma, beta)),
                xhat,
                rstd,
            },
            tr,
        ))
    }

    /// Zero-mean, unit-variance rows (no affine).
    pub fn standardize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(contract("standardize eps must be positive"));
        }
        let cols = *self.shape(x).last().unwrap();
        let (xhat, rstd) = ops::standardize(self.data(x), cols, eps);
        let out = Tensor::from_parts(self.shape(x).to_vec(), xhat.clone());
        let tr = self.tracked(x);
        Ok(self.push(
            out,
            Op::Norm {
                x,
                affine: None,
                xhat,
                rstd,
            },
            tr,
        ))
    }

    /// Per-row affine: `y[i, :] = g[i]·x[i, :] + b[i]`.
    pub fn row_affine(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(g).numel() != rows || self.value(b).numel() != rows {
            return Err(dim_err("row_affine", self.shape(x), self.shape(g)));
        }
        let (gv, bv) = (self.data(g), self.data(b));
        let mut y = self.data(x).to_vec();
        for (r, row) in y.chunks_mut(cols).enumerate() {
            row.iter_mut().for_each(|v| *v = *v * gv[r] + bv[r]);
        }
        let out = Tensor::from_parts(vec![rows, cols], y);
        let tr = self.tracked(x) || self.tracked(g) || self.tracked(b);
        Ok(self.push(out, Op::RowAffine(x, g, b), tr))
    }

    pub fn cosine_sim(&mut self, q: Var, k: Var, eps: f64) -> Result<Var> {
        let (out, qn, kn) = ops::cosine_sim_cached(self.value(q), self.value(k), eps)?;
        let tr = self.tracked(q) || self.tracked(k);
        Ok(self.push(out, Op::CosineSim { q, k, eps, qn, kn }, tr))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (out, cols) = ops::conv2d_cached(self.value(x), self.value(w), self.value(b))?;
        let tr = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, cols }, tr))
    }

    pub fn pixel_shuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let out = ops::pixel_shuffle(self.value(x), s)?;
        let tr = self.tracked(x);
        Ok(self.push(out, Op::PixelShuffle(x, s), tr))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let out = ops::pixel_unshuffle(self.value(x), s)?;
        let tr = self.tracked(x);
        Ok(self.push(out, Op::PixelUnshuffle(x, s), tr))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let tr = self.tracked(x);
        Ok(self.push(out, Op::Reshape(x), tr))
    }

    /// `out[r, :] = x[idx[r], :]`. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(contract(format!("gather_rows index {bad} out of range for {n} rows")));
        }
        if idx.is_empty() {
            return Err(contract("gather_rows with no indices"));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_parts(vec![idx.len(), d], out);
        let tr = self.tracked(x);
        Ok(self.push(out, Op::GatherRows(x, idx), tr))
    }

    /// Grouped multi-head softmax attention; see [`AttnLayout`].
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        layout: Arc<AttnLayout>,
    ) -> Result<Var> {
        self.same_shape("attention q/k", q, k)?;
        self.same_shape("attention q/v", q, v)?;
        let (rows, d) = self.value(q).dims2()?;
        let (g, l, h) = (layout.groups, layout.group_len, layout.heads);
        if rows != g * l {
            return Err(dim_err("attention", self.shape(q), &[g, l]));
        }
        if h == 0 || d % h != 0 {
            return Err(contract(format!("{d} channels not divisible by {h} heads")));
        }
        if let Some(m) = &layout.mask {
            if m.len() != g * l * l {
                return Err(contract("attention mask has the wrong length"));
            }
        }
        let bias_data = match (bias, &layout.rel_index) {
            (Some(b), Some(idx)) => {
                let (t, bh) = self.value(b).dims2()?;
                if bh != h || idx.len() != l * l || idx.iter().any(|&i| i as usize >= t) {
                    return Err(dim_err("attention bias", self.shape(b), &[l * l, h]));
                }
                Some(self.data(b))
            }
            (None, _) => None,
            (Some(_), None) => return Err(contract("attention bias without a relative index")),
        };
        let (out, probs) = attention_forward(
            &layout,
            self.data(q),
            self.data(k),
            self.data(v),
            bias_data,
            d,
        );
        let out = Tensor::from_parts(vec![rows, d], out);
        let tr = self.tracked(q) || self.tracked(k) || self.tracked(v) || bias.is_some_and(|b| self.tracked(b));
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                bias,
                layout,
                probs,
            },
            tr,
        ))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(dim_err("l1_loss", self.shape(pred), target.shape()));
        }
        let p = self.data(pred);
        let n = p.len() as f64;
        let loss = p.iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        let tr = self.tracked(pred);
        Ok(self.push(Tensor::scalar(loss), Op::L1Loss(pred, target.data().to_vec()), tr))
    }

    /// Reverse sweep from a scalar `loss`. Every node is visited once, in
    /// reverse execution order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(contract("backward on an empty tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.tracked(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.tracked(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if let Some(da) = self.acc(grads, *a) {
                    kernels::gemm_nt(g, self.data(*b), da, n, m, k);
                }
                if let Some(db) = self.acc(grads, *b) {
                    kernels::gemm_tn(self.data(*a), g, db, k, n, m);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(da) = self.acc(grads, *a) {
                    let gt = kernels::transpose(g, m, n);
                    add_into(da, &gt);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    let bv = self.data(*b);
                    da.iter_mut().zip(g).zip(bv).for_each(|((d, gv), y)| *d += gv * y);
                }
                if let Some(db) = self.acc(grads, *b) {
                    let av = self.data(*a);
                    db.iter_mut().zip(g).zip(av).for_each(|((d, gv), x)| *d += gv * x);
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
                }
            }
            Op::AddRow(x, b) => {
                if let Some(dx) = self.acc(grads, *x) {
                    add_into(dx, g);
                }
                let d = self.shape(*x)[1];
                if let Some(db) = self.acc(grads, *b) {
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                }
            }
            Op::DivScalar(x, s) => {
                let sv = self.data(*s)[0];
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv / sv);
                }
                let xs = self.data(*x);
                if let Some(ds) = self.acc(grads, *s) {
                    ds[0] -= kernels::dot(g, xs) / (sv * sv);
                }
            }
            Op::Lerp(a, b, s) => {
                let sv = self.data(*s)[0];
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += sv * gv);
                }
                if let Some(db) = self.acc(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, gv)| *d += (1.0 - sv) * gv);
                }
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(ds) = self.acc(grads, *s) {
                    ds[0] += g.iter().zip(av).zip(bv).map(|((gv, x), y)| gv * (x - y)).sum::<f64>();
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.data(*x);
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, gv), v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv * ops::gelu_grad(*v);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    let s = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Softmax(x) => {
                let cols = *node.value.shape().last().unwrap();
                if let Some(dx) = self.acc(grads, *x) {
                    kernels::softmax_rows_backward(node.value.data(), g, dx, cols);
                }
            }
            Op::Norm {
                x,
                affine,
                xhat,
                rstd,
            } => {
                let cols = *node.value.shape().last().unwrap();
                let dxhat: Vec<f64> = match affine {
                    Some((gamma, beta)) => {
                        if let Some(dg) = self.acc(grads, *gamma) {
                            for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                                dg.iter_mut().zip(gr).zip(xr).for_each(|((d, a), b)| *d += a * b);
                            }
                        }
                        if let Some(db) = self.acc(grads, *beta) {
                            for gr in g.chunks(cols) {
                                add_into(db, gr);
                            }
                        }
                        let gm = self.data(*gamma);
                        g.chunks(cols)
                            .flat_map(|gr| gr.iter().zip(gm).map(|(a, b)| a * b))
                            .collect()
                    }
                    None => g.to_vec(),
                };
                if let Some(dx) = self.acc(grads, *x) {
                    let inv_n = 1.0 / cols as f64;
                    for (r, ((dxr, dh), xh)) in dx
                        .chunks_mut(cols)
                        .zip(dxhat.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .enumerate()
                    {
                        let m1 = dh.iter().sum::<f64>() * inv_n;
                        let m2 = kernels::dot(dh, xh) * inv_n;
                        for ((d, a), b) in dxr.iter_mut().zip(dh).zip(xh) {
                            *d += rstd[r] * (a - m1 - b * m2);
                        }
                    }
                }
            }
            Op::RowAffine(x, gm, b) => {
                let cols = node.value.shape()[1];
                let gv = self.data(*gm);
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, (dr, gr)) in dx.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        dr.iter_mut().zip(gr).for_each(|(d, v)| *d += gv[r] * v);
                    }
                }
                let xv = self.data(*x);
                if let Some(dg) = self.acc(grads, *gm) {
                    for (r, (gr, xr)) in g.chunks(cols).zip(xv.chunks(cols)).enumerate() {
                        dg[r] += kernels::dot(gr, xr);
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for (r, gr) in g.chunks(cols).enumerate() {
                        db[r] += gr.iter().sum::<f64>();
                    }
                }
            }
            Op::CosineSim { q, k, eps, qn, kn } => {
                let (n, c) = (self.shape(*q)[0], self.shape(*q)[1]);
                let m = self.shape(*k)[0];
                let s = node.value.data();
                let mut w = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        w[i * m + j] = g[i * m + j] / (qn[i] * kn[j]);
                    }
                }
                let (qd, kd) = (self.data(*q), self.data(*k));
                if let Some(dq) = self.acc(grads, *q) {
                    kernels::gemm_nn(&w, kd, dq, n, m, c);
                    for i in 0..n {
                        let qi = &qd[i * c..(i + 1) * c];
                        if kernels::dot(qi, qi).sqrt() <= *eps {
                            continue;
                        }
                        let gs = kernels::dot(&g[i * m..(i + 1) * m], &s[i * m..(i + 1) * m]);
                        let f = gs / (qn[i] * qn[i]);
                        dq[i * c..(i + 1) * c].iter_mut().zip(qi).for_each(|(d, v)| *d -= f * v);
                    }
                }
                if let Some(dk) = self.acc(grads, *k) {
                    kernels::gemm_tn(&w, qd, dk, m, n, c);
                    for j in 0..m {
                        let kj = &kd[j * c..(j + 1) * c];
                        if kernels::dot(kj, kj).sqrt() <= *eps {
                            continue;
                        }
                        let gs: f64 = (0..n).map(|i| g[i * m + j] * s[i * m + j]).sum();
                        let f = gs / (kn[j] * kn[j]);
                        dk[j * c..(j + 1) * c].iter_mut().zip(kj).for_each(|(d, v)| *d -= f * v);
                    }
                }
            }
            Op::Conv2d { x, w, b, cols } => {
                let (c, h, wd) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let o = self.shape(*w)[0];
                let hw = h * wd;
                if let Some(db) = self.acc(grads, *b) {
                    for (oc, plane) in g.chunks(hw).enumerate() {
                        db[oc] += plane.iter().sum::<f64>();
                    }
                }
                if let Some(dw) = self.acc(grads, *w) {
                    kernels::gemm_nt(g, cols, dw, o, hw, c * 9);
                }
                if self.tracked(*x) {
                    let mut dcols = vec![0.0; c * 9 * hw];
                    kernels::gemm_tn(self.data(*w), g, &mut dcols, c * 9, o, hw);
                    let dimg = kernels::col2im3(&dcols, c, h, wd);
                    if let Some(dx) = self.acc(grads, *x) {
                        add_into(dx, &dimg);
                    }
                }
            }
            Op::PixelShuffle(x, s) => {
                if self.tracked(*x) {
                    let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                    let back = ops::pixel_unshuffle(&gt, *s).expect("shape recorded at forward");
                    if let Some(dx) = self.acc(grads, *x) {
                        add_into(dx, back.data());
                    }
                }
            }
            Op::PixelUnshuffle(x, s) => {
                if self.tracked(*x) {
                    let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                    let back = ops::pixel_shuffle(&gt, *s).expect("shape recorded at forward");
                    if let Some(dx) = self.acc(grads, *x) {
                        add_into(dx, back.data());
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::GatherRows(x, idx) => {
                let d = self.shape(*x)[1];
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                layout,
                probs,
            } => {
                let d = self.shape(*q)[1];
                let any_qkv = self.tracked(*q) || self.tracked(*k) || self.tracked(*v);
                let bias_tracked = bias.is_some_and(|b| self.tracked(b));
                if !any_qkv && !bias_tracked {
                    return;
                }
                let bias_len = bias.map_or(0, |b| self.value(b).numel());
                let ag = attention_backward(
                    layout,
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    g,
                    d,
                    bias_len,
                );
                if let Some(dq) = self.acc(grads, *q) {
                    add_into(dq, &ag.dq);
                }
                if let Some(dk) = self.acc(grads, *k) {
                    add_into(dk, &ag.dk);
                }
                if let Some(dv) = self.acc(grads, *v) {
                    add_into(dv, &ag.dv);
                }
                if let Some(b) = bias {
                    if let Some(db) = self.acc(grads, *b) {
                        add_into(db, &ag.dbias);
                    }
                }
            }
            Op::L1Loss(pred, target) => {
                if let Some(dp) = self.acc(grads, *pred) {
                    let s = g[0] / dp.len() as f64;
                    let p = self.data(*pred);
                    for ((d, a), b) in dp.iter_mut().zip(p).zip(target) {
                        let diff = a - b;
                        if diff > 0.0 {
                            *d += s;
                        } else if diff < 0.0 {
                            *d -= s;
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn head_slice(src: &[f64], dst: &mut [f64], row0: usize, rows: usize, d: usize, col0: usize, hd: usize) {
    for r in 0..rows {
        dst[r * hd..(r + 1) * hd].copy_from_slice(&src[(row0 + r) * d + col0..][..hd]);
    }
}

fn head_scatter_add(dst: &mut [f64], src: &[f64], row0: usize, rows: usize, d: usize, col0: usize, hd: usize) {
    for r in 0..rows {
        add_into(&mut dst[(row0 + r) * d + col0..][..hd], &src[r * hd..(r + 1) * hd]);
    }
}

pub(crate) fn attention_forward(
    layout: &AttnLayout,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    bias: Option<&[f64]>,
    d: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (groups, l, heads) = (layout.groups, layout.group_len, layout.heads);
    let hd = d / heads;
    let mut out = vec![0.0; groups * l * d];
    let mut probs = vec![0.0; groups * heads * l * l];
    let mut qh = vec![0.0; l * hd];
    let mut kh = vec![0.0; l * hd];
    let mut vh = vec![0.0; l * hd];
    let mut oh = vec![0.0; l * hd];
    for gi in 0..groups {
        let row0 = gi * l;
        let mask = layout.mask.as_ref().map(|m| &m[gi * l * l..(gi + 1) * l * l]);
        for h in 0..heads {
            head_slice(q, &mut qh, row0, l, d, h * hd, hd);
            head_slice(k, &mut kh, row0, l, d, h * hd, hd);
            head_slice(v, &mut vh, row0, l, d, h * hd, hd);
            let p = &mut probs[(gi * heads + h) * l * l..][..l * l];
            kernels::gemm_nt(&qh, &kh, p, l, hd, l);
            p.iter_mut().for_each(|s| *s *= layout.scale);
            if let (Some(table), Some(idx)) = (bias, &layout.rel_index) {
                for (s, &t) in p.iter_mut().zip(idx) {
                    *s += table[t as usize * heads + h];
                }
            }
            kernels::softmax_rows(p, l, mask);
            oh.fill(0.0);
            kernels::gemm_nn(p, &vh, &mut oh, l, l, hd);
            head_scatter_add(&mut out, &oh, row0, l, d, h * hd, hd);
        }
    }
    (out, probs)
}

struct AttnGrads {
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
    dbias: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    layout: &AttnLayout,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    d: usize,
    bias_len: usize,
) -> AttnGrads {
    let (groups, l, heads) = (layout.groups, layout.group_len, layout.heads);
    let hd = d / heads;
    let mut ag = AttnGrads {
        dq: vec![0.0; q.len()],
        dk: vec![0.0; k.len()],
        dv: vec![0.0; v.len()],
        dbias: vec![0.0; bias_len],
    };
    let mut qh = vec![0.0; l * hd];
    let mut kh = vec![0.0; l * hd];
    let mut vh = vec![0.0; l * hd];
    let mut doh = vec![0.0; l * hd];
    let mut buf = vec![0.0; l * hd];
    let mut dp = vec![0.0; l * l];
    let mut ds = vec![0.0; l * l];
    for gi in 0..groups {
        let row0 = gi * l;
        for h in 0..heads {
            let p = &probs[(gi * heads + h) * l * l..][..l * l];
            head_slice(q, &mut qh, row0, l, d, h * hd, hd);
            head_slice(k, &mut kh, row0, l, d, h * hd, hd);
            head_slice(v, &mut vh, row0, l, d, h * hd, hd);
            head_slice(dout, &mut doh, row0, l, d, h * hd, hd);

            buf.fill(0.0);
            kernels::gemm_tn(p, &doh, &mut buf, l, l, hd);
            head_scatter_add(&mut ag.dv, &buf, row0, l, d, h * hd, hd);

            dp.fill(0.0);
            kernels::gemm_nt(&doh, &vh, &mut dp, l, hd, l);
            ds.fill(0.0);
            kernels::softmax_rows_backward(p, &dp, &mut ds, l);
            if let Some(idx) = &layout.rel_index {
                if bias_len > 0 {
                    for (s, &t) in ds.iter().zip(idx) {
                        ag.dbias[t as usize * heads + h] += s;
                    }
                }
            }
            ds.iter_mut().for_each(|s| *s *= layout.scale);

            buf.fill(0.0);
            kernels::gemm_nn(&ds, &kh, &mut buf, l, l, hd);
            head_scatter_add(&mut ag.dq, &buf, row0, l, d, h * hd, hd);

            buf.fill(0.0);
            kernels::gemm_tn(&ds, &qh, &mut buf, l, l, hd);
            head_scatter_add(&mut ag.dk, &buf, row0, l, d, h * hd, hd);
        }
    }
    ag
}
