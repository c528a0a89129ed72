//! Reverse-mode gradient tape specialised to the operations the network and
//! its losses need. Nodes are appended in evaluation order; `backward`
//! walks them in reverse.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{axpy, dot, Tensor};
use crate::error::{invalid, shape, Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op {
    Leaf,
    /// `x[B,A,R]`, `w[O,A]` → `[B,O,R]`
    Mix { x: usize, w: usize },
    /// `x[B,S,P]`, `k[O,S,K]`, `b[O]` → `[B,O,T]`
    Conv1d { x: usize, k: usize, b: usize, stride: usize },
    Relu(usize),
    MulConst { x: usize, factor: Vec<f64> },
    Reshape(usize),
    /// `x[B,F]`, `w[O,F]`, `b[O]` → `[B,O]`
    Linear { x: usize, w: usize, b: usize },
    Grl { x: usize, lambda: f64 },
    /// Row-wise unit normalisation; keeps the row norms.
    L2Rows { x: usize, norms: Vec<f64> },
    ConcatRows(Vec<usize>),
    Add(usize, usize),
    Scale(usize, f64),
    /// Keeps softmax rows and per-row target mass.
    CrossEntropy { logits: usize, targets: Vec<f64>, probs: Vec<f64> },
    DomainBce { src: usize, tgt: usize },
    SupCon { z: usize, assign: Vec<usize>, tau: f64 },
    SumSqHalf(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by tape variable.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "variable belongs to another tape");
        let shape = self.shapes[v.idx].clone();
        match &self.grads[v.idx] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a `rows × k` buffer.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (o, row) in out.chunks_mut(k).zip(logits.chunks(k)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - m).exp();
            s += *oi;
        }
        o.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Per-anchor supervised contrastive terms over unit rows `z` (`a × d`).
/// Returns `(loss, similarity-gradient)` where the gradient is with respect
/// to the scaled similarities `zᵢᵀzⱼ/τ`, already divided by the number of
/// anchors that have at least one positive.
fn supcon_parts(z: &[f64], d: usize, assign: &[usize], tau: f64) -> (f64, Vec<f64>) {
    let a = assign.len();
    let mut sim = vec![0.0; a * a];
    for i in 0..a {
        for j in 0..a {
            sim[i * a + j] = dot(&z[i * d..(i + 1) * d], &z[j * d..(j + 1) * d]) / tau;
        }
    }
    let mut dsim = vec![0.0; a * a];
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..a {
        let npos = (0..a).filter(|&p| p != i && assign[p] == assign[i]).count();
        if npos == 0 {
            continue;
        }
        anchors += 1;
        let row = &sim[i * a..(i + 1) * a];
        let m = (0..a)
            .filter(|&j| j != i)
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..a).filter(|&j| j != i).map(|j| (row[j] - m).exp()).sum();
        let lse = m + denom.ln();
        let mut li = 0.0;
        for p in (0..a).filter(|&p| p != i && assign[p] == assign[i]) {
            li -= row[p] - lse;
        }
        total += li / npos as f64;
        for j in (0..a).filter(|&j| j != i) {
            let soft = (row[j] - m).exp() / denom;
            let pos = if assign[j] == assign[i] { 1.0 / npos as f64 } else { 0.0 };
            dsim[i * a + j] = soft - pos;
        }
    }
    if anchors == 0 {
        return (0.0, dsim);
    }
    let scale = 1.0 / anchors as f64;
    dsim.iter_mut().for_each(|v| *v *= scale);
    (total * scale, dsim)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::DetachedLoss);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Record an input (`requires_grad = false`) or a parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.idx].value
    }

    fn shape_of(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    pub fn mix(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let (xs, ws) = (self.shape_of(xi), self.shape_of(wi));
        if xs.len() != 3 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(shape(format!("mix of {xs:?} with weights {ws:?}")));
        }
        let (b, a, r, o) = (xs[0], xs[1], xs[2], ws[0]);
        let xv = self.nodes[xi].value.data();
        let wv = self.nodes[wi].value.data();
        let mut y = vec![0.0; b * o * r];
        for bi in 0..b {
            for oi in 0..o {
                let dst = &mut y[(bi * o + oi) * r..(bi * o + oi + 1) * r];
                for ai in 0..a {
                    axpy(wv[oi * a + ai], &xv[(bi * a + ai) * r..(bi * a + ai + 1) * r], dst);
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![b, o, r], y), Op::Mix { x: xi, w: wi }, &[xi, wi]))
    }

    pub fn conv1d(&mut self, x: Var, k: Var, bias: Var, stride: usize) -> Result<Var> {
        let (xi, ki, bi_) = (self.check(x)?, self.check(k)?, self.check(bias)?);
        let (xs, ks, bs) = (self.shape_of(xi), self.shape_of(ki), self.shape_of(bi_));
        if xs.len() != 3 || ks.len() != 3 || ks[1] != xs[1] || bs != [ks[0]] || stride == 0 || ks[2] > xs[2] {
            return Err(shape(format!("conv1d of {xs:?} with kernel {ks:?}, bias {bs:?}")));
        }
        let (nb, s, p) = (xs[0], xs[1], xs[2]);
        let (o, kl) = (ks[0], ks[2]);
        let t = (p - kl) / stride + 1;
        let xv = self.nodes[xi].value.data();
        let kv = self.nodes[ki].value.data();
        let bv = self.nodes[bi_].value.data();
        let sk = s * kl;
        let mut col = vec![0.0; t * sk];
        let mut y = vec![0.0; nb * o * t];
        for b in 0..nb {
            im2col(&xv[b * s * p..(b + 1) * s * p], s, p, kl, stride, t, &mut col);
            for oi in 0..o {
                let kr = &kv[oi * sk..(oi + 1) * sk];
                let dst = &mut y[(b * o + oi) * t..(b * o + oi + 1) * t];
                for (ti, d) in dst.iter_mut().enumerate() {
                    *d = bv[oi] + dot(kr, &col[ti * sk..(ti + 1) * sk]);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![nb, o, t], y),
            Op::Conv1d { x: xi, k: ki, b: bi_, stride },
            &[xi, ki, bi_],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let v = &self.nodes[xi].value;
        let y = v.data().iter().map(|&e| e.max(0.0)).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), y);
        Ok(self.push(t, Op::Relu(xi), &[xi]))
    }

    /// Elementwise product with a constant (used for dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let xi = self.check(x)?;
        let v = &self.nodes[xi].value;
        if factor.len() != v.len() {
            return Err(shape("constant factor length differs from input"));
        }
        let y = v.data().iter().zip(&factor).map(|(a, b)| a * b).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), y);
        Ok(self.push(t, Op::MulConst { x: xi, factor }, &[xi]))
    }

    pub fn reshape(&mut self, x: Var, new_shape: Vec<usize>) -> Result<Var> {
        let xi = self.check(x)?;
        let v = &self.nodes[xi].value;
        if new_shape.iter().product::<usize>() != v.len() {
            return Err(shape(format!("cannot reshape {:?} to {new_shape:?}", v.shape())));
        }
        let t = Tensor::from_parts(new_shape, v.data().to_vec());
        Ok(self.push(t, Op::Reshape(xi), &[xi]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi_) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (xs, ws, bs) = (self.shape_of(xi), self.shape_of(wi), self.shape_of(bi_));
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(shape(format!("linear of {xs:?} with weights {ws:?}, bias {bs:?}")));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let xv = self.nodes[xi].value.data();
        let wv = self.nodes[wi].value.data();
        let bv = self.nodes[bi_].value.data();
        let mut y = vec![0.0; n * o];
        for r in 0..n {
            let xr = &xv[r * f..(r + 1) * f];
            for c in 0..o {
                y[r * o + c] = bv[c] + dot(&wv[c * f..(c + 1) * f], xr);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, o], y), Op::Linear { x: xi, w: wi, b: bi_ }, &[xi, wi, bi_]))
    }

    /// Gradient reversal: identity forward, `-lambda · grad` backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let t = self.nodes[xi].value.clone();
        Ok(self.push(t, Op::Grl { x: xi, lambda }, &[xi]))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let v = &self.nodes[xi].value;
        if v.shape().len() != 2 {
            return Err(shape("row normalisation needs a matrix"));
        }
        let d = v.shape()[1];
        let mut y = v.data().to_vec();
        let mut norms = Vec::with_capacity(v.shape()[0]);
        for row in y.chunks_mut(d) {
            let n = dot(row, row).sqrt().max(1e-12);
            row.iter_mut().for_each(|e| *e /= n);
            norms.push(n);
        }
        let t = Tensor::from_parts(v.shape().to_vec(), y);
        Ok(self.push(t, Op::L2Rows { x: xi, norms }, &[xi]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let first = idx.first().ok_or_else(|| invalid("concat of nothing"))?;
        let d = self.shape_of(*first).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let s = self.shape_of(i);
            if s.len() != 2 || s[1] != d {
                return Err(shape(format!("concat_rows of {s:?} with width {d}")));
            }
            rows += s[0];
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let t = Tensor::from_parts(vec![rows, d], data);
        let inputs = idx.clone();
        Ok(self.push(t, Op::ConcatRows(idx), &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi_) = (self.check(a)?, self.check(b)?);
        if self.shape_of(ai) != self.shape_of(bi_) {
            return Err(shape("add of differently shaped tensors"));
        }
        let y = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi_].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_parts(self.shape_of(ai).to_vec(), y);
        Ok(self.push(t, Op::Add(ai, bi_), &[ai, bi_]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let v = &self.nodes[xi].value;
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|e| e * c).collect());
        Ok(self.push(t, Op::Scale(xi, c), &[xi]))
    }

    /// Mean over rows of `-Σₖ tₖ log softmax(logits)ₖ`; `targets` is a
    /// `rows × k` probability buffer.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        let li = self.check(logits)?;
        let v = &self.nodes[li].value;
        if v.shape().len() != 2 || targets.len() != v.len() || v.shape()[0] == 0 {
            return Err(shape("cross-entropy targets must match non-empty logits"));
        }
        if !v.is_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        let (n, k) = (v.shape()[0], v.shape()[1]);
        let probs = softmax_rows(v.data(), k);
        let mut loss = 0.0;
        for r in 0..n {
            let row = &v.data()[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for c in 0..k {
                let t = targets[r * k + c];
                if t != 0.0 {
                    loss -= t * (row[c] - lse);
                }
            }
        }
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.push(out, Op::CrossEntropy { logits: li, targets, probs }, &[li]))
    }

    /// `-mean log σ(src) - mean log(1 - σ(tgt))` over `[B,1]` domain logits.
    pub fn domain_bce(&mut self, src: Var, tgt: Var) -> Result<Var> {
        let (si, ti) = (self.check(src)?, self.check(tgt)?);
        let (sv, tv) = (&self.nodes[si].value, &self.nodes[ti].value);
        if sv.is_empty() || tv.is_empty() {
            return Err(shape("domain loss needs both source and target logits"));
        }
        let ls = sv.data().iter().map(|&x| softplus(-x)).sum::<f64>() / sv.len() as f64;
        let lt = tv.data().iter().map(|&x| softplus(x)).sum::<f64>() / tv.len() as f64;
        Ok(self.push(Tensor::scalar(ls + lt), Op::DomainBce { src: si, tgt: ti }, &[si, ti]))
    }

    /// Supervised contrastive loss over row-normalised embeddings.
    pub fn supcon(&mut self, z: Var, assign: Vec<usize>, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        let zi = self.check(z)?;
        let v = &self.nodes[zi].value;
        if v.shape().len() != 2 || v.shape()[0] != assign.len() {
            return Err(shape("one class assignment per embedding row is required"));
        }
        let (loss, _) = supcon_parts(v.data(), v.shape()[1], &assign, tau);
        Ok(self.push(Tensor::scalar(loss), Op::SupCon { z: zi, assign, tau }, &[zi]))
    }

    pub fn sum_sq_half(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let v = self.nodes[xi].value.data();
        Ok(self.push(Tensor::scalar(0.5 * dot(v, v)), Op::SumSqHalf(xi), &[xi]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |j: usize| self.nodes[j].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Mix { x, w } => {
                let xs = self.shape_of(x);
                let (b, a, r) = (xs[0], xs[1], xs[2]);
                let o = self.shape_of(w)[0];
                let (xv, wv) = (val(x), val(w));
                if self.wants(w) {
                    let dw = acc(grads, w, o * a);
                    for bi in 0..b {
                        for oi in 0..o {
                            let gy = &g[(bi * o + oi) * r..(bi * o + oi + 1) * r];
                            for ai in 0..a {
                                dw[oi * a + ai] += dot(gy, &xv[(bi * a + ai) * r..(bi * a + ai + 1) * r]);
                            }
                        }
                    }
                }
                if self.wants(x) {
                    let dx = acc(grads, x, b * a * r);
                    for bi in 0..b {
                        for oi in 0..o {
                            let gy = &g[(bi * o + oi) * r..(bi * o + oi + 1) * r];
                            for ai in 0..a {
                                axpy(wv[oi * a + ai], gy, &mut dx[(bi * a + ai) * r..(bi * a + ai + 1) * r]);
                            }
                        }
                    }
                }
            }
            &Op::Conv1d { x, k, b: bias, stride } => {
                let xs = self.shape_of(x);
                let (nb, s, p) = (xs[0], xs[1], xs[2]);
                let ks = self.shape_of(k);
                let (o, kl) = (ks[0], ks[2]);
                let t = (p - kl) / stride + 1;
                let sk = s * kl;
                let (xv, kv) = (val(x), val(k));
                if self.wants(bias) {
                    let db = acc(grads, bias, o);
                    for b in 0..nb {
                        for oi in 0..o {
                            db[oi] += g[(b * o + oi) * t..(b * o + oi + 1) * t].iter().sum::<f64>();
                        }
                    }
                }
                let want_k = self.wants(k);
                let want_x = self.wants(x);
                let mut col = vec![0.0; t * sk];
                let mut dcol = vec![0.0; t * sk];
                let mut dk_local = vec![0.0; if want_k { o * sk } else { 0 }];
                let mut dx_local = vec![0.0; if want_x { nb * s * p } else { 0 }];
                for b in 0..nb {
                    if want_k {
                        im2col(&xv[b * s * p..(b + 1) * s * p], s, p, kl, stride, t, &mut col);
                    }
                    if want_x {
                        dcol.iter_mut().for_each(|v| *v = 0.0);
                    }
                    for oi in 0..o {
                        let gy = &g[(b * o + oi) * t..(b * o + oi + 1) * t];
                        for (ti, &gv) in gy.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            if want_k {
                                axpy(gv, &col[ti * sk..(ti + 1) * sk], &mut dk_local[oi * sk..(oi + 1) * sk]);
                            }
                            if want_x {
                                axpy(gv, &kv[oi * sk..(oi + 1) * sk], &mut dcol[ti * sk..(ti + 1) * sk]);
                            }
                        }
                    }
                    if want_x {
                        col2im(&dcol, s, p, kl, stride, t, &mut dx_local[b * s * p..(b + 1) * s * p]);
                    }
                }
                if want_k {
                    axpy(1.0, &dk_local, acc(grads, k, o * sk));
                }
                if want_x {
                    axpy(1.0, &dx_local, acc(grads, x, nb * s * p));
                }
            }
            &Op::Relu(x) => {
                if self.wants(x) {
                    let xv = val(x);
                    let dx = acc(grads, x, g.len());
                    for ((d, &gv), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MulConst { x, factor } => {
                if self.wants(*x) {
                    let dx = acc(grads, *x, g.len());
                    for ((d, &gv), &f) in dx.iter_mut().zip(g).zip(factor) {
                        *d += gv * f;
                    }
                }
            }
            &Op::Reshape(x) => {
                if self.wants(x) {
                    axpy(1.0, g, acc(grads, x, g.len()));
                }
            }
            &Op::Linear { x, w, b } => {
                let xs = self.shape_of(x);
                let (n, f) = (xs[0], xs[1]);
                let o = self.shape_of(w)[0];
                let (xv, wv) = (val(x), val(w));
                if self.wants(b) {
                    let db = acc(grads, b, o);
                    for r in 0..n {
                        axpy(1.0, &g[r * o..(r + 1) * o], db);
                    }
                }
                if self.wants(w) {
                    let dw = acc(grads, w, o * f);
                    for r in 0..n {
                        let xr = &xv[r * f..(r + 1) * f];
                        for c in 0..o {
                            axpy(g[r * o + c], xr, &mut dw[c * f..(c + 1) * f]);
                        }
                    }
                }
                if self.wants(x) {
                    let dx = acc(grads, x, n * f);
                    for r in 0..n {
                        let dst = &mut dx[r * f..(r + 1) * f];
                        for c in 0..o {
                            axpy(g[r * o + c], &wv[c * f..(c + 1) * f], dst);
                        }
                    }
                }
            }
            &Op::Grl { x, lambda } => {
                if self.wants(x) {
                    let dx = acc(grads, x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += -lambda * gv;
                    }
                }
            }
            Op::L2Rows { x, norms } => {
                if self.wants(*x) {
                    let y = self.nodes[i].value.data();
                    let d = self.nodes[i].value.shape()[1];
                    let dx = acc(grads, *x, g.len());
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let proj = dot(yr, gr);
                        for c in 0..d {
                            dx[r * d + c] += (gr[c] - yr[c] * proj) / n;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if self.wants(p) {
                        axpy(1.0, &g[off..off + len], acc(grads, p, len));
                    }
                    off += len;
                }
            }
            &Op::Add(a, b) => {
                for j in [a, b] {
                    if self.wants(j) {
                        axpy(1.0, g, acc(grads, j, g.len()));
                    }
                }
            }
            &Op::Scale(x, c) => {
                if self.wants(x) {
                    axpy(c, g, acc(grads, x, g.len()));
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let s = self.shape_of(*logits);
                    let (n, k) = (s[0], s[1]);
                    let scale = g[0] / n as f64;
                    let dl = acc(grads, *logits, n * k);
                    for r in 0..n {
                        let mass: f64 = targets[r * k..(r + 1) * k].iter().sum();
                        for c in 0..k {
                            dl[r * k + c] += scale * (mass * probs[r * k + c] - targets[r * k + c]);
                        }
                    }
                }
            }
            &Op::DomainBce { src, tgt } => {
                if self.wants(src) {
                    let sv = val(src);
                    let n = sv.len() as f64;
                    let ds = acc(grads, src, sv.len());
                    for (d, &x) in ds.iter_mut().zip(sv) {
                        *d += g[0] * (sigmoid(x) - 1.0) / n;
                    }
                }
                if self.wants(tgt) {
                    let tv = val(tgt);
                    let n = tv.len() as f64;
                    let dt = acc(grads, tgt, tv.len());
                    for (d, &x) in dt.iter_mut().zip(tv) {
                        *d += g[0] * sigmoid(x) / n;
                    }
                }
            }
            Op::SupCon { z, assign, tau } => {
                if self.wants(*z) {
                    let zv = val(*z);
                    let d = self.shape_of(*z)[1];
                    let a = assign.len();
                    let (_, dsim) = supcon_parts(zv, d, assign, *tau);
                    let dz = acc(grads, *z, a * d);
                    for i_ in 0..a {
                        for j in 0..a {
                            let c = g[0] * dsim[i_ * a + j] / tau;
                            if c == 0.0 {
                                continue;
                            }
                            axpy(c, &zv[j * d..(j + 1) * d], &mut dz[i_ * d..(i_ + 1) * d]);
                            axpy(c, &zv[i_ * d..(i_ + 1) * d], &mut dz[j * d..(j + 1) * d]);
                        }
                    }
                }
            }
            &Op::SumSqHalf(x) => {
                if self.wants(x) {
                    let xv = val(x);
                    axpy(g[0], xv, acc(grads, x, xv.len()));
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], j: usize, len: usize) -> &mut Vec<f64> {
    grads[j].get_or_insert_with(|| vec![0.0; len])
}

fn im2col(x: &[f64], s: usize, p: usize, kl: usize, stride: usize, t: usize, col: &mut [f64]) {
    let sk = s * kl;
    for ti in 0..t {
        let start = ti * stride;
        for si in 0..s {
            col[ti * sk + si * kl..ti * sk + (si + 1) * kl]
                .copy_from_slice(&x[si * p + start..si * p + start + kl]);
        }
    }
}

fn col2im(dcol: &[f64], s: usize, p: usize, kl: usize, stride: usize, t: usize, dx: &mut [f64]) {
    let sk = s * kl;
    for ti in 0..t {
        let start = ti * stride;
        for si in 0..s {
            axpy(
                1.0,
                &dcol[ti * sk + si * kl..ti * sk + (si + 1) * kl],
                &mut dx[si * p + start..si * p + start + kl],
            );
        }
    }
}

/// Direct evaluation of the supervised contrastive loss (no gradient).
pub fn supcon_value(z: &[f64], d: usize, assign: &[usize], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    if z.len() != d * assign.len() {
        return Err(shape("embedding buffer does not match assignments"));
    }
    Ok(supcon_parts(z, d, assign, tau).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(vec![3], vec![1.5, -2.0, 0.25]), true);
        let l = tape.sum_sq_half(p).unwrap();
        assert_eq!(tape.value(l).item(), 0.5 * (2.25 + 4.0 + 0.0625));
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(vec![2], vec![1.0, 2.0]), true);
        let q = tape.leaf(t(vec![2], vec![3.0, 4.0]), true);
        let l = tape.sum_sq_half(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(q).data(), &[0.0, 0.0]);
    }

    #[test]
    fn detached_loss_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let p = b.leaf(t(vec![1], vec![1.0]), true);
        let l = b.sum_sq_half(p).unwrap();
        a.leaf(t(vec![1], vec![1.0]), true);
        assert!(matches!(a.backward(l), Err(Error::DetachedLoss)));
        let v = b.leaf(t(vec![2], vec![1.0, 1.0]), true);
        assert!(b.backward(v).is_err());
    }

    #[test]
    fn grl_forward_identity_backward_reversed() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2, 2], vec![0.3, -1.2, 2.0, 0.7]), true);
        let y = tape.grl(x, 0.75).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let l = tape.sum_sq_half(y).unwrap();
        let g = tape.backward(l).unwrap();
        for (gv, xv) in g.get(x).data().iter().zip(tape.value(x).data()) {
            assert_eq!(*gv, -0.75 * xv);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![2, 8]), true);
        let mut targets = vec![0.0; 16];
        targets[3] = 1.0;
        targets[8 + 5] = 1.0;
        let l = tape.cross_entropy(logits, targets).unwrap();
        assert!((tape.value(l).item() - 8f64.ln()).abs() < 1e-12);
        assert!((8f64.ln() - 2.0794).abs() < 1e-4);

        let mut big = vec![0.0; 4];
        big[1] = 50.0;
        let lg = tape.leaf(t(vec![1, 4], big), false);
        let l = tape.cross_entropy(lg, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(tape.value(l).item() <= 1e-6);
    }

    #[test]
    fn domain_bce_confusion_point() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::zeros(vec![3, 1]), true);
        let tg = tape.leaf(Tensor::zeros(vec![2, 1]), true);
        let l = tape.domain_bce(s, tg).unwrap();
        assert!((tape.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        let s = tape.leaf(t(vec![1, 1], vec![40.0]), true);
        let tg = tape.leaf(t(vec![1, 1], vec![-40.0]), true);
        let l = tape.domain_bce(s, tg).unwrap();
        assert!(tape.value(l).item() < 1e-15);
    }

    #[test]
    fn supcon_simple_cases() {
        let z = vec![0.6, 0.8, 0.6, 0.8];
        assert!(supcon_value(&z, 2, &[1, 1], 0.5).unwrap().abs() < 1e-15);
        assert_eq!(supcon_value(&z, 2, &[0, 1], 0.5).unwrap(), 0.0);
        assert!(supcon_value(&z, 2, &[0, 1], 0.0).is_err());
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (nb, s, p, o, kl, st) = (2, 3, 11, 2, 4, 2);
        let xs: Vec<f64> = (0..nb * s * p).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
        let ks: Vec<f64> = (0..o * s * kl).map(|i| ((i * 5 % 11) as f64 - 5.0) / 7.0).collect();
        let bs = vec![0.1, -0.2];
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![nb, s, p], xs.clone()), false);
        let k = tape.leaf(t(vec![o, s, kl], ks.clone()), true);
        let b = tape.leaf(t(vec![o], bs.clone()), true);
        let y = tape.conv1d(x, k, b, st).unwrap();
        let tl = (p - kl) / st + 1;
        assert_eq!(tape.value(y).shape(), &[nb, o, tl]);
        for bi in 0..nb {
            for oi in 0..o {
                for ti in 0..tl {
                    let mut v = bs[oi];
                    for si in 0..s {
                        for j in 0..kl {
                            v += ks[(oi * s + si) * kl + j] * xs[(bi * s + si) * p + ti * st + j];
                        }
                    }
                    let got = tape.value(y).data()[(bi * o + oi) * tl + ti];
                    assert!((got - v).abs() < 1e-12);
                }
            }
        }
    }
}
