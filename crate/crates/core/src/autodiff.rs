//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse and accumulates vector-Jacobian products.
//! Leaves created with `constant` never receive gradients, which is how
//! frozen parameters are kept at exactly zero gradient.

use std::cmp::Ordering;

use crate::tensor::{gelu, gelu_grad, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the L1 reconstruction error of one patch is aggregated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Reduction {
    /// ‖p̂ − p‖₁ summed over the samples of a patch, averaged over patches.
    PatchSum,
    /// Mean absolute error over every sample of every patch.
    SampleMean,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<F>,
    },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        offset: Option<Var>,
        normed: Tensor<F>,
        inv_std: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Tensor<F>,
        scale: F,
    },
    GatherRows {
        src: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    RepeatRow {
        src: Var,
    },
    MeanRows(Var),
    L1Loss {
        pred: Var,
        target: Tensor<F>,
        reduction: L1Reduction,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Tensor<F>,
        probs: Tensor<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Order of the key rows used for every reduction over keys in attention.
/// Sorting by content makes the forward pass independent of the order in
/// which tokens arrive, so permuting tokens permutes outputs bit-exactly.
fn canonical_key_order<F: Real>(k: &Tensor<F>, v: &Tensor<F>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..k.rows()).collect();
    order.sort_by(|&a, &b| {
        let ka = k.row(a).iter().chain(v.row(a));
        let kb = k.row(b).iter().chain(v.row(b));
        for (x, y) in ka.zip(kb) {
            match x.partial_cmp(y) {
                Some(Ordering::Equal) | None => continue,
                Some(o) => return o,
            }
        }
        Ordering::Equal
    });
    order
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        let t = self.value(v);
        assert_eq!(t.shape(), [1, 1], "scalar() on non-scalar node");
        t.get(0, 0)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape");
        let mut value = ta.clone();
        value.add_assign(tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a + 1·row` where `row` is 1×m and `a` is n×m.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows(), 1, "add_row expects a single row");
        assert_eq!(ta.cols(), tr.cols(), "add_row width");
        let mut value = ta.clone();
        for r in 0..value.rows() {
            for (x, &b) in value.row_mut(r).iter_mut().zip(tr.row(0)) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Row-wise `x · gain / rms(x)` with `rms = sqrt(mean(x²) + eps)`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: F) -> Var {
        let tx = self.value(x);
        let tg = self.value(gain);
        assert_eq!(tg.shape(), [1, tx.cols()], "rmsnorm gain shape");
        let d = F::of(tx.cols() as f64);
        let mut value = Tensor::zeros(tx.rows(), tx.cols());
        let mut inv_rms = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let ms = row.iter().map(|&v| v * v).sum::<F>() / d;
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &g) in value.row_mut(r).iter_mut().zip(row).zip(tg.row(0)) {
                *o = v * inv * g;
            }
        }
        let ng = self.ng(x) || self.ng(gain);
        self.push(value, Op::RmsNorm { x, gain, inv_rms }, ng)
    }

    /// Row-wise LayerNorm; `gain`/`offset` are optional 1×m affine terms.
    pub fn layernorm(&mut self, x: Var, gain: Option<Var>, offset: Option<Var>, eps: F) -> Var {
        let tx = self.value(x);
        let (n, m) = (tx.rows(), tx.cols());
        let d = F::of(m as f64);
        let mut normed = Tensor::zeros(n, m);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<F>() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / d;
            let inv = F::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (o, &v) in normed.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let mut value = normed.clone();
        if let Some(g) = gain {
            let tg = self.value(g);
            assert_eq!(tg.shape(), [1, m], "layernorm gain shape");
            for r in 0..n {
                for (o, &gv) in value.row_mut(r).iter_mut().zip(tg.row(0)) {
                    *o *= gv;
                }
            }
        }
        if let Some(b) = offset {
            let tb = self.value(b);
            assert_eq!(tb.shape(), [1, m], "layernorm offset shape");
            for r in 0..n {
                for (o, &bv) in value.row_mut(r).iter_mut().zip(tb.row(0)) {
                    *o += bv;
                }
            }
        }
        let ng = self.ng(x) || gain.is_some_and(|g| self.ng(g)) || offset.is_some_and(|b| self.ng(b));
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                offset,
                normed,
                inv_std,
            },
            ng,
        )
    }

    /// Non-causal scaled dot-product attention for one head:
    /// `softmax(q·kᵀ·scale) · v`, softmax over every key.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: F) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(tq.cols(), tk.cols(), "attention q/k width");
        assert_eq!(tk.rows(), tv.rows(), "attention k/v length");
        let (n, dv) = (tq.rows(), tv.cols());
        let order = canonical_key_order(tk, tv);
        let mut probs = tq.matmul_nt(tk);
        probs.scale_inplace(scale);
        for r in 0..n {
            let row = probs.row_mut(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            for x in row.iter_mut() {
                *x = (*x - max).exp();
            }
            let mut denom = F::zero();
            for &j in &order {
                denom += row[j];
            }
            for x in row.iter_mut() {
                *x = *x / denom;
            }
        }
        let mut value = Tensor::zeros(n, dv);
        for r in 0..n {
            let prow = probs.row(r);
            let orow = value.row_mut(r);
            for &j in &order {
                let p = prow[j];
                for (o, &x) in orow.iter_mut().zip(tv.row(j)) {
                    *o += p * x;
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            },
            ng,
        )
    }

    /// Probabilities of the most recent attention node `v` (for inspection).
    pub fn attention_probs(&self, v: Var) -> Option<&Tensor<F>> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Var {
        let value = self.value(src).gather_rows(index);
        let ng = self.ng(src);
        self.push(
            value,
            Op::GatherRows {
                src,
                index: index.to_vec(),
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows width");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let t = self.value(src);
        assert!(start + len <= t.cols(), "slice_cols range");
        let mut value = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            value.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        let ng = self.ng(src);
        self.push(value, Op::SliceCols { src, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols height");
            for r in 0..rows {
                value.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Broadcast a 1×m row to n×m.
    pub fn repeat_row(&mut self, src: Var, n: usize) -> Var {
        let t = self.value(src);
        assert_eq!(t.rows(), 1, "repeat_row expects a single row");
        let mut data = Vec::with_capacity(n * t.cols());
        for _ in 0..n {
            data.extend_from_slice(t.row(0));
        }
        let value = Tensor::from_vec(n, t.cols(), data);
        let ng = self.ng(src);
        self.push(value, Op::RepeatRow { src }, ng)
    }

    pub fn mean_rows(&mut self, src: Var) -> Var {
        let t = self.value(src);
        let n = F::of(t.rows() as f64);
        let mut value = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for (o, &x) in value.row_mut(0).iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        value.scale_inplace(F::one() / n);
        let ng = self.ng(src);
        self.push(value, Op::MeanRows(src), ng)
    }

    /// L1 reconstruction loss against a fixed target, returned as 1×1.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<F>, reduction: L1Reduction) -> Var {
        let tp = self.value(pred);
        assert_eq!(tp.shape(), target.shape(), "l1_loss shape");
        assert!(tp.rows() > 0, "l1_loss over zero patches");
        let total: F = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t).abs())
            .sum();
        let denom = match reduction {
            L1Reduction::PatchSum => tp.rows(),
            L1Reduction::SampleMean => tp.rows() * tp.cols(),
        };
        let value = Tensor::from_vec(1, 1, vec![total / F::of(denom as f64)]);
        let ng = self.ng(pred);
        self.push(
            value,
            Op::L1Loss {
                pred,
                target: target.clone(),
                reduction,
            },
            ng,
        )
    }

    /// Mean over rows of `−Σ_c target·log softmax(logits)`; targets may be soft.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor<F>) -> Var {
        let tl = self.value(logits);
        assert_eq!(tl.shape(), target.shape(), "cross-entropy shape");
        let mut probs = tl.clone();
        let mut loss = F::zero();
        for r in 0..tl.rows() {
            let row = probs.row_mut(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
            for (c, x) in row.iter_mut().enumerate() {
                loss -= target.get(r, c) * (*x - lse);
                *x = (*x - lse).exp();
            }
        }
        let value = Tensor::from_vec(1, 1, vec![loss / F::of(tl.rows() as f64)]);
        let ng = self.ng(logits);
        self.push(
            value,
            Op::SoftCrossEntropy {
                logits,
                target: target.clone(),
                probs,
            },
            ng,
        )
    }

    /// Reverse pass from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).shape(), [1, 1], "backward from non-scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(1, 1, F::one()));

        fn acc<F: Real>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.matmul_nt(self.value(*b)));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, self.value(*a).matmul_tn(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let d = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                        acc(&mut grads, *a, Tensor::from_vec(g.rows(), g.cols(), d));
                    }
                    if self.ng(*b) {
                        let d = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                        acc(&mut grads, *b, Tensor::from_vec(g.rows(), g.cols(), d));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let mut gr = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, &x) in gr.row_mut(0).iter_mut().zip(g.row(r)) {
                                *o += x;
                            }
                        }
                        acc(&mut grads, *row, gr);
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|x| x * s));
                }
                Op::Gelu(a) => {
                    let ta = self.value(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gy, &x)| gy * gelu_grad(x))
                        .collect();
                    acc(&mut grads, *a, Tensor::from_vec(g.rows(), g.cols(), d));
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let tx = self.value(*x);
                    let tg = self.value(*gain);
                    let (n, m) = (tx.rows(), tx.cols());
                    let d = F::of(m as f64);
                    if self.ng(*gain) {
                        let mut gg = Tensor::zeros(1, m);
                        for r in 0..n {
                            let inv = inv_rms[r];
                            for ((o, &gy), &xv) in gg.row_mut(0).iter_mut().zip(g.row(r)).zip(tx.row(r)) {
                                *o += gy * xv * inv;
                            }
                        }
                        acc(&mut grads, *gain, gg);
                    }
                    if self.ng(*x) {
                        let mut gx = Tensor::zeros(n, m);
                        for r in 0..n {
                            let inv = inv_rms[r];
                            let (gy, xr) = (g.row(r), tx.row(r));
                            let dot: F = gy
                                .iter()
                                .zip(xr)
                                .zip(tg.row(0))
                                .map(|((&a, &b), &c)| a * b * c)
                                .sum();
                            let coef = inv * inv * inv * dot / d;
                            for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                                *o = inv * tg.get(0, j) * gy[j] - coef * xr[j];
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    offset,
                    normed,
                    inv_std,
                } => {
                    let (n, m) = (normed.rows(), normed.cols());
                    if let Some(b) = offset {
                        if self.ng(*b) {
                            let mut gb = Tensor::zeros(1, m);
                            for r in 0..n {
                                for (o, &x) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                                    *o += x;
                                }
                            }
                            acc(&mut grads, *b, gb);
                        }
                    }
                    if let Some(gn) = gain {
                        if self.ng(*gn) {
                            let mut gg = Tensor::zeros(1, m);
                            for r in 0..n {
                                for ((o, &gy), &xh) in gg.row_mut(0).iter_mut().zip(g.row(r)).zip(normed.row(r)) {
                                    *o += gy * xh;
                                }
                            }
                            acc(&mut grads, *gn, gg);
                        }
                    }
                    if self.ng(*x) {
                        let d = F::of(m as f64);
                        let mut gx = Tensor::zeros(n, m);
                        for r in 0..n {
                            let dxh: Vec<F> = match gain {
                                Some(gn) => g
                                    .row(r)
                                    .iter()
                                    .zip(self.value(*gn).row(0))
                                    .map(|(&a, &b)| a * b)
                                    .collect(),
                                None => g.row(r).to_vec(),
                            };
                            let xh = normed.row(r);
                            let mean_d = dxh.iter().copied().sum::<F>() / d;
                            let mean_dx = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / d;
                            for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                                *o = inv_std[r] * (dxh[j] - mean_d - xh[j] * mean_dx);
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    probs,
                    scale,
                } => {
                    let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                    if self.ng(*v) {
                        acc(&mut grads, *v, probs.matmul_tn(&g));
                    }
                    if self.ng(*q) || self.ng(*k) {
                        let dp = g.matmul_nt(tv);
                        let mut ds = Tensor::zeros(probs.rows(), probs.cols());
                        for r in 0..probs.rows() {
                            let pr = probs.row(r);
                            let dr = dp.row(r);
                            let dot: F = pr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                            for (j, o) in ds.row_mut(r).iter_mut().enumerate() {
                                *o = pr[j] * (dr[j] - dot) * *scale;
                            }
                        }
                        if self.ng(*q) {
                            acc(&mut grads, *q, ds.matmul(tk));
                        }
                        if self.ng(*k) {
                            acc(&mut grads, *k, ds.matmul_tn(tq));
                        }
                    }
                }
                Op::GatherRows { src, index } => {
                    let ts = self.value(*src);
                    let mut gs = Tensor::zeros(ts.rows(), ts.cols());
                    for (r, &s) in index.iter().enumerate() {
                        for (o, &x) in gs.row_mut(s).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.ng(p) {
                            let idx: Vec<usize> = (off..off + rows).collect();
                            acc(&mut grads, p, g.gather_rows(&idx));
                        }
                        off += rows;
                    }
                }
                Op::SliceCols { src, start } => {
                    let ts = self.value(*src);
                    let mut gs = Tensor::zeros(ts.rows(), ts.cols());
                    for r in 0..g.rows() {
                        gs.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        if self.ng(p) {
                            let mut gp = Tensor::zeros(g.rows(), cols);
                            for r in 0..g.rows() {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                            }
                            acc(&mut grads, p, gp);
                        }
                        off += cols;
                    }
                }
                Op::RepeatRow { src } => {
                    let mut gs = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in gs.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::MeanRows(src) => {
                    let ts = self.value(*src);
                    let inv = F::one() / F::of(ts.rows() as f64);
                    let mut gs = Tensor::zeros(ts.rows(), ts.cols());
                    for r in 0..ts.rows() {
                        for (o, &x) in gs.row_mut(r).iter_mut().zip(g.row(0)) {
                            *o = x * inv;
                        }
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::L1Loss {
                    pred,
                    target,
                    reduction,
                } => {
                    let tp = self.value(*pred);
                    let denom = match reduction {
                        L1Reduction::PatchSum => tp.rows(),
                        L1Reduction::SampleMean => tp.rows() * tp.cols(),
                    };
                    let s = g.get(0, 0) / F::of(denom as f64);
                    let d = tp
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| {
                            let diff = p - t;
                            if diff > F::zero() {
                                s
                            } else if diff < F::zero() {
                                -s
                            } else {
                                F::zero()
                            }
                        })
                        .collect();
                    acc(&mut grads, *pred, Tensor::from_vec(tp.rows(), tp.cols(), d));
                }
                Op::SoftCrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let s = g.get(0, 0) / F::of(probs.rows() as f64);
                    let d = probs
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| (p - t) * s)
                        .collect();
                    acc(&mut grads, *logits, Tensor::from_vec(probs.rows(), probs.cols(), d));
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(build)/d(leaf) for every leaf element.
    fn check(leaves: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).expect("leaf gradient");
            for e in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut perturbed = leaves.clone();
                    perturbed[li].data_mut()[e] += delta;
                    let mut g2 = Graph::new();
                    let v2: Vec<Var> = perturbed.into_iter().map(|t| g2.param(t)).collect();
                    let o = build(&mut g2, &v2);
                    g2.scalar(o)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[e];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-5, "leaf {li} elem {e}: analytic {a} fd {fd}");
            }
        }
    }

    fn reduce(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
        // Weighted sum against a fixed random matrix gives a generic scalar.
        let t = g.value(x).clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, t.cols(), 1);
        let wv = g.constant(w);
        let y = g.matmul(x, wv);
        let ones = g.constant(Tensor::full(1, t.rows(), 1.0));
        g.matmul(ones, y)
    }

    #[test]
    fn grad_matmul_mul_gelu_addrow() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![
            rand_tensor(&mut rng, 3, 4),
            rand_tensor(&mut rng, 4, 5),
            rand_tensor(&mut rng, 3, 5),
            rand_tensor(&mut rng, 1, 5),
        ];
        check(leaves, |g, v| {
            let y = g.matmul(v[0], v[1]);
            let z = g.gelu(y);
            let w = g.mul(z, v[2]);
            let u = g.add_row(w, v[3]);
            let s = g.scale(u, 0.7);
            reduce(g, s, 9)
        });
    }

    #[test]
    fn grad_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![
            rand_tensor(&mut rng, 4, 6),
            rand_tensor(&mut rng, 1, 6),
            rand_tensor(&mut rng, 1, 6),
        ];
        check(leaves, |g, v| {
            let a = g.rmsnorm(v[0], v[1], 1e-6);
            let b = g.layernorm(v[0], Some(v[1]), Some(v[2]), 1e-5);
            let c = g.add(a, b);
            reduce(g, c, 3)
        });
    }

    #[test]
    fn grad_attention_and_reshapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![
            rand_tensor(&mut rng, 3, 4),
            rand_tensor(&mut rng, 5, 4),
            rand_tensor(&mut rng, 5, 4),
            rand_tensor(&mut rng, 1, 2),
        ];
        check(leaves, |g, v| {
            let a = g.attention(v[0], v[1], v[2], 0.5);
            let left = g.slice_cols(a, 0, 2);
            let right = g.slice_cols(a, 2, 2);
            let rep = g.repeat_row(v[3], 3);
            let both = g.concat_cols(&[left, rep, right]);
            let stacked = g.concat_rows(&[both, both]);
            let picked = g.gather_rows(stacked, &[5, 0, 0, 2]);
            let m = g.mean_rows(picked);
            reduce(g, m, 4)
        });
    }

    #[test]
    fn grad_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = rand_tensor(&mut rng, 3, 4);
        let probs = Tensor::from_vec(2, 3, vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0]);
        let leaves = vec![rand_tensor(&mut rng, 3, 4), rand_tensor(&mut rng, 2, 3)];
        check(leaves, move |g, v| {
            let a = g.l1_loss(v[0], &target, L1Reduction::PatchSum);
            let b = g.l1_loss(v[0], &target, L1Reduction::SampleMean);
            let c = g.soft_cross_entropy(v[1], &probs);
            let ab = g.add(a, b);
            g.add(ab, c)
        });
    }

    #[test]
    fn attention_rows_are_stochastic_and_order_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_tensor(&mut rng, 4, 3);
        let k = rand_tensor(&mut rng, 6, 3);
        let v = rand_tensor(&mut rng, 6, 2);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = g.attention(qv, kv, vv, 0.3);
        let probs = g.attention_probs(out).unwrap();
        for r in 0..4 {
            assert!((probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let perm = [3, 0, 5, 1, 4, 2];
        let mut g2 = Graph::new();
        let (q2, k2, v2) = (
            g2.constant(q),
            g2.constant(k.gather_rows(&perm)),
            g2.constant(v.gather_rows(&perm)),
        );
        let out2 = g2.attention(q2, k2, v2, 0.3);
        assert_eq!(g.value(out), g2.value(out2));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(2, 2, 1.0));
        let b = g.param(Tensor::full(2, 1, 2.0));
        let y = g.matmul(a, b);
        let l = reduce(&mut g, y, 1);
        let grads = g.backward(l);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }
}
