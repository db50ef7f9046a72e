//! Tape-based reverse-mode differentiation over coarse tensor operations.
//!
//! Every node holds a dense value whose trailing axis is the feature axis, so
//! most operations view their inputs as `[rows, cols]` matrices.

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::rowmap::RowMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive score for attention pairs that must not interact.
pub const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Grouped multi-head attention layout. Rows of the packed `[q | k | v]` input
/// come in contiguous groups of `group_len` tokens that attend only to each other.
#[derive(Debug, Clone)]
pub struct AttentionSpec<S> {
    pub group_len: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// `[group_len * group_len]` row indices into the `[rows, heads]` bias table.
    pub bias_index: Option<Vec<u32>>,
    /// `[mask_kinds, group_len, group_len]` additive masks; group `g` uses kind `g % mask_kinds`.
    pub mask: Option<Vec<S>>,
}

impl<S: Scalar> AttentionSpec<S> {
    fn mask_kinds(&self) -> usize {
        self.mask
            .as_ref()
            .map(|m| m.len() / (self.group_len * self.group_len))
            .unwrap_or(0)
    }
}

enum Op<S> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    /// Keeps the elementwise derivative when the input needs a gradient.
    Gelu { x: Var, deriv: Vec<S> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Abs(Var),
    RowMix {
        x: Var,
        map: Arc<RowMap<S>>,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    FillRows {
        x: Var,
        token: Var,
        rows: Arc<Vec<bool>>,
    },
    Attention {
        qkv: Var,
        bias: Option<Var>,
        spec: Arc<AttentionSpec<S>>,
        probs: Vec<S>,
    },
    /// Scalar objective whose gradient w.r.t. `x` was computed alongside its value.
    Objective {
        x: Var,
        grad: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Parameters of one [`ParamStore`] bound into a graph as leaves.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient tensors aligned with the store a [`Bound`] came from; unused
    /// parameters get zeros.
    pub fn for_params(&self, bound: &Bound, store: &ParamStore<S>) -> Vec<Tensor<S>> {
        bound
            .vars
            .iter()
            .zip(store.iter())
            .map(|(v, p)| match &self.grads[v.0] {
                Some(g) => Tensor::from_vec(p.value.shape(), g.clone()).expect("grad shape"),
                None => Tensor::zeros(p.value.shape()),
            })
            .collect()
    }
}

#[derive(Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    attention_macs: u64,
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            attention_macs: 0,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count spent in attention score and mixing products.
    pub fn attention_macs(&self) -> u64 {
        self.attention_macs
    }

    /// Post-softmax probabilities `[groups, heads, L, L]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn bind(&mut self, store: &ParamStore<S>, trainable: bool) -> Bound {
        let vars = store
            .iter()
            .map(|p| self.leaf(p.value.clone(), trainable))
            .collect();
        Bound { vars }
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.cols(), din, "linear: input width {} vs weight {:?}", xv.cols(), wv.shape());
        let n = xv.rows();
        let mut out = vec![S::zero(); n * dout];
        S::gemm(n, din, dout, S::one(), xv.data(), false, wv.data(), false, S::zero(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), dout, "linear: bias width");
            for row in out.chunks_exact_mut(dout) {
                add_into(row, bv);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = dout;
        let value = Tensor::from_vec(&shape, out).expect("linear shape");
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::Linear { x, w, b }, &inputs)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), d, "layer_norm: gamma width");
        let rows = xv.rows();
        let mut xhat = vec![S::zero(); rows * d];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * d];
        let eps = S::lit(LAYER_NORM_EPS);
        let inv_d = S::one() / S::of(d);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::from_vec(xv.shape(), out).expect("layer_norm shape");
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (value, deriv) = if self.nodes[x.0].needs_grad {
            let (vals, deriv): (Vec<S>, Vec<S>) = xv.data().iter().map(|&v| gelu_with_grad(v)).unzip();
            (Tensor::from_vec(xv.shape(), vals).expect("gelu shape"), deriv)
        } else {
            (xv.map(gelu), Vec::new())
        };
        self.push(value, Op::Gelu { x, deriv }, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.shape(), data).expect("binary shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push(value, Op::Abs(x), &[x])
    }

    /// Applies a row map; the output has `map.out_rows()` rows of the input width.
    pub fn row_mix(&mut self, x: Var, map: Arc<RowMap<S>>) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        assert_eq!(xv.rows(), map.in_rows(), "row_mix: row count");
        let data = map.apply(xv.data(), cols);
        let value = Tensor::from_vec(&[map.out_rows(), cols], data).expect("row_mix shape");
        self.push(value, Op::RowMix { x, map }, &[x])
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let rows = self.value(xs[0]).rows();
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                assert_eq!(self.value(v).rows(), rows, "concat_cols: row count");
                self.value(v).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::from_vec(&[rows, total], out).expect("concat shape");
        self.push(value, Op::ConcatCols(xs.to_vec()), xs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape element count");
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Replaces the rows flagged in `rows` with the vector `token`.
    pub fn fill_rows(&mut self, x: Var, token: Var, rows: Arc<Vec<bool>>) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        assert_eq!(xv.rows(), rows.len(), "fill_rows: flag count");
        let tv = self.value(token).data();
        assert_eq!(tv.len(), d, "fill_rows: token width");
        let mut out = xv.data().to_vec();
        for (r, &f) in rows.iter().enumerate() {
            if f {
                out[r * d..(r + 1) * d].copy_from_slice(tv);
            }
        }
        let value = Tensor::from_vec(xv.shape(), out).expect("fill shape");
        self.push(value, Op::FillRows { x, token, rows }, &[x, token])
    }

    /// Grouped multi-head self-attention over packed `[q | k | v]` rows.
    pub fn attention(&mut self, qkv: Var, bias: Option<Var>, spec: Arc<AttentionSpec<S>>) -> Var {
        let qv = self.value(qkv);
        let (l, h, hd) = (spec.group_len, spec.heads, spec.head_dim);
        let d = h * hd;
        assert_eq!(qv.cols(), 3 * d, "attention: packed width");
        let n = qv.rows();
        assert_eq!(n % l, 0, "attention: rows not divisible by group length");
        let groups = n / l;
        let table = bias.map(|b| {
            let t = self.value(b);
            assert_eq!(t.cols(), h, "attention: bias table heads");
            t.data()
        });
        let kinds = spec.mask_kinds();
        let scale = S::one() / S::of(hd).sqrt();
        let x = qv.data();
        let mut probs = vec![S::zero(); groups * h * l * l];
        let mut out = vec![S::zero(); n * d];
        for g in 0..groups {
            let base = g * l * 3 * d;
            for head in 0..h {
                let p = &mut probs[(g * h + head) * l * l..(g * h + head + 1) * l * l];
                let q = &x[base + head * hd..];
                let k = &x[base + d + head * hd..];
                S::gemm_strided(l, hd, l, scale, q, (3 * d, 1), k, (1, 3 * d), S::zero(), p, (l, 1));
                if let (Some(t), Some(idx)) = (table, spec.bias_index.as_ref()) {
                    for (s, &i) in p.iter_mut().zip(idx) {
                        *s += t[i as usize * h + head];
                    }
                }
                if let Some(mask) = spec.mask.as_ref() {
                    let kind = g % kinds;
                    add_into(p, &mask[kind * l * l..(kind + 1) * l * l]);
                }
                for row in p.chunks_exact_mut(l) {
                    softmax_in_place(row);
                }
                let v = &x[base + 2 * d + head * hd..];
                let o = &mut out[g * l * d + head * hd..];
                S::gemm_strided(l, l, hd, S::one(), p, (l, 1), v, (3 * d, 1), S::zero(), o, (d, 1));
            }
        }
        self.attention_macs += (groups * h * 2 * l * l * hd) as u64;
        let value = Tensor::from_vec(&[n, d], out).expect("attention shape");
        let inputs: Vec<Var> = [Some(qkv), bias].into_iter().flatten().collect();
        self.push(
            value,
            Op::Attention {
                qkv,
                bias,
                spec,
                probs,
            },
            &inputs,
        )
    }

    /// Registers a scalar objective with a precomputed gradient w.r.t. `x`.
    pub fn objective(&mut self, x: Var, value: S, grad: Vec<S>) -> Var {
        assert_eq!(grad.len(), self.value(x).len(), "objective gradient size");
        self.push(Tensor::scalar(value), Op::Objective { x, grad }, &[x])
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<S> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
        }
        Gradients { grads }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<S>>], v: Var) -> Option<&'a mut Vec<S>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); len]))
    }

    fn backprop_node(&self, node: &Node<S>, dy: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let n = xv.rows();
                if let Some(dx) = self.slot(grads, *x) {
                    S::gemm(n, dout, din, S::one(), dy, false, wv.data(), true, S::one(), dx);
                }
                if let Some(dw) = self.slot(grads, *w) {
                    S::gemm(din, n, dout, S::one(), xv.data(), true, dy, false, S::one(), dw);
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in dy.chunks_exact(dout) {
                            add_into(db, row);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let g = self.value(*gamma).data();
                let d = g.len();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (dyr, hr) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += dyr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for dyr in dy.chunks_exact(d) {
                        add_into(db, dyr);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let inv_d = S::one() / S::of(d);
                    for (r, (dyr, hr)) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..d {
                            let dh = dyr[j] * g[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        let dxr = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxr[j] += rstd[r] * (dyr[j] * g[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu { x, deriv } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &k), &g) in dx.iter_mut().zip(deriv).zip(dy) {
                        *d += g * k;
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, dy);
                }
                if let Some(db) = self.slot(grads, *b) {
                    add_into(db, dy);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, dy);
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (d, &g) in db.iter_mut().zip(dy) {
                        *d -= g;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &g), &o) in da.iter_mut().zip(dy).zip(bv) {
                        *d += g * o;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &g), &o) in db.iter_mut().zip(dy).zip(av) {
                        *d += g * o;
                    }
                }
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &g), &v) in dx.iter_mut().zip(dy).zip(xv) {
                        if v > S::zero() {
                            *d += g;
                        } else if v < S::zero() {
                            *d -= g;
                        }
                    }
                }
            }
            Op::RowMix { x, map } => {
                let cols = node.value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    map.apply_transpose_into(dy, cols, dx);
                }
            }
            Op::ConcatCols(xs) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &v in xs {
                    let w = self.value(v).cols();
                    if let Some(dx) = self.slot(grads, v) {
                        for r in 0..rows {
                            add_into(
                                &mut dx[r * w..(r + 1) * w],
                                &dy[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, dy);
                }
            }
            Op::FillRows { x, token, rows } => {
                let d = node.value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &f) in rows.iter().enumerate() {
                        if !f {
                            add_into(&mut dx[r * d..(r + 1) * d], &dy[r * d..(r + 1) * d]);
                        }
                    }
                }
                if let Some(dt) = self.slot(grads, *token) {
                    for (r, &f) in rows.iter().enumerate() {
                        if f {
                            add_into(dt, &dy[r * d..(r + 1) * d]);
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                bias,
                spec,
                probs,
            } => self.attention_backward(*qkv, *bias, spec, probs, dy, grads),
            Op::Objective { x, grad } => {
                let up = dy[0];
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, &g) in dx.iter_mut().zip(grad) {
                        *d += up * g;
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        qkv: Var,
        bias: Option<Var>,
        spec: &AttentionSpec<S>,
        probs: &[S],
        dy: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let (l, h, hd) = (spec.group_len, spec.heads, spec.head_dim);
        let d = h * hd;
        let x = self.value(qkv).data();
        let n = x.len() / (3 * d);
        let groups = n / l;
        let scale = S::one() / S::of(hd).sqrt();
        let want_x = self.nodes[qkv.0].needs_grad;
        let want_bias = bias.map(|b| self.nodes[b.0].needs_grad).unwrap_or(false);
        let mut dqkv = if want_x { vec![S::zero(); x.len()] } else { Vec::new() };
        let mut dtable = match (bias, want_bias) {
            (Some(b), true) => vec![S::zero(); self.value(b).len()],
            _ => Vec::new(),
        };
        let mut dp = vec![S::zero(); l * l];
        for g in 0..groups {
            let base = g * l * 3 * d;
            for head in 0..h {
                let p = &probs[(g * h + head) * l * l..(g * h + head + 1) * l * l];
                let dout = &dy[g * l * d + head * hd..];
                let v = &x[base + 2 * d + head * hd..];
                // dP = dO · Vᵀ
                S::gemm_strided(l, hd, l, S::one(), dout, (d, 1), v, (1, 3 * d), S::zero(), &mut dp, (l, 1));
                if want_x {
                    // dV += Pᵀ · dO
                    let dv = &mut dqkv[base + 2 * d + head * hd..];
                    S::gemm_strided(l, l, hd, S::one(), p, (1, l), dout, (d, 1), S::one(), dv, (3 * d, 1));
                }
                // dS = P ⊙ (dP − rowsum(P ⊙ dP))
                for (pr, dr) in p.chunks_exact(l).zip(dp.chunks_exact_mut(l)) {
                    let dot: S = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in dr.iter_mut().zip(pr) {
                        *dv = pv * (*dv - dot);
                    }
                }
                if want_bias {
                    if let Some(idx) = spec.bias_index.as_ref() {
                        for (&s, &i) in dp.iter().zip(idx) {
                            dtable[i as usize * h + head] += s;
                        }
                    }
                }
                if want_x {
                    let q = &x[base + head * hd..];
                    let k = &x[base + d + head * hd..];
                    let dq = &mut dqkv[base + head * hd..];
                    S::gemm_strided(l, l, hd, scale, &dp, (l, 1), k, (3 * d, 1), S::one(), dq, (3 * d, 1));
                    let dk = &mut dqkv[base + d + head * hd..];
                    S::gemm_strided(l, l, hd, scale, &dp, (1, l), q, (3 * d, 1), S::one(), dk, (3 * d, 1));
                }
            }
        }
        if want_x {
            if let Some(dst) = self.slot(grads, qkv) {
                add_into(dst, &dqkv);
            }
        }
        if let (Some(b), true) = (bias, want_bias) {
            if let Some(dst) = self.slot(grads, b) {
                add_into(dst, &dtable);
            }
        }
    }
}

pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(0.044715);
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

/// GELU value and derivative sharing one `tanh`.
fn gelu_with_grad<S: Scalar>(x: S) -> (S, S) {
    let c = S::lit(GELU_C);
    let a = S::lit(0.044715);
    let half = S::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    let value = half * x * (S::one() + t);
    let grad = half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x);
    (value, grad)
}
