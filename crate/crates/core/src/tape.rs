//! Recorded computation graph with exact reverse-mode differentiation.
//!
//! Nodes hold dense matrices; ops are fused at the granularity this model
//! needs (linear, rms-norm, rotary rotation, causal attention, the two
//! losses). Attention recomputes its softmax rows in the backward pass
//! instead of storing the full probability matrix, keeping memory linear
//! in sequence length.

use crate::scalar::Scalar;
use crate::tensor::{
    self, axpy, causal_attention, dot, gelu, gelu_grad, matmul_nt_acc, matmul_tn_acc, sigmoid,
    softmax_in_place, softplus, Mat,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

enum Op<T> {
    /// Constant input; no gradient flows out.
    Input,
    /// Leaf bound to a parameter slot.
    Param(usize),
    GatherRows { src: NodeId, idx: Vec<usize> },
    ConcatRows { parts: Vec<NodeId> },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Add { x: NodeId, y: NodeId },
    RmsNorm { x: NodeId, scale: NodeId, eps: T },
    Gelu { x: NodeId },
    Rotate { x: NodeId, angles: Mat<T>, n_heads: usize },
    CausalAttention { q: NodeId, k: NodeId, v: NodeId, n_heads: usize },
    AggregateLayers { states: Vec<NodeId>, alpha: NodeId },
    LmLossSum { logits: NodeId, targets: Vec<usize> },
    BceWithLogits { logits: NodeId, labels: Vec<u8>, pos_weight: T },
    ScalarCombine { terms: Vec<(NodeId, T)> },
    SumAll { x: NodeId },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        let v = self.value(id);
        debug_assert_eq!((v.rows, v.cols), (1, 1));
        v.data[0]
    }

    pub fn input(&mut self, m: Mat<T>) -> NodeId {
        self.push(m, Op::Input)
    }

    pub fn param(&mut self, slot: usize, m: Mat<T>) -> NodeId {
        self.push(m, Op::Param(slot))
    }

    pub fn gather_rows(&mut self, src: NodeId, idx: Vec<usize>) -> NodeId {
        let s = self.value(src);
        let mut out = Mat::zeros(idx.len(), s.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(s.row(r));
        }
        self.push(out, Op::GatherRows { src, idx })
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut cursor = 0;
        for &p in &parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            out.data[cursor * cols..(cursor + v.rows) * cols].copy_from_slice(&v.data);
            cursor += v.rows;
        }
        self.push(out, Op::ConcatRows { parts })
    }

    /// y = x · w + b with b a [1 x out] row broadcast.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            assert_eq!(bv.rows, 1);
            tensor::linear(xv, wv, &bv.data)
        };
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, x: NodeId, y: NodeId) -> NodeId {
        let out = {
            let xv = self.value(x);
            let yv = self.value(y);
            assert_eq!((xv.rows, xv.cols), (yv.rows, yv.cols));
            let mut out = xv.clone();
            for (o, &b) in out.data.iter_mut().zip(&yv.data) {
                *o += b;
            }
            out
        };
        self.push(out, Op::Add { x, y })
    }

    pub fn rms_norm(&mut self, x: NodeId, scale: NodeId, eps: T) -> NodeId {
        let out = {
            let xv = self.value(x);
            let sv = self.value(scale);
            assert_eq!(sv.rows, 1);
            assert_eq!(sv.cols, xv.cols);
            let mut out = Mat::zeros(xv.rows, xv.cols);
            for i in 0..xv.rows {
                tensor::rms_norm_row(xv.row(i), &sv.data, eps, out.row_mut(i));
            }
            out
        };
        self.push(out, Op::RmsNorm { x, scale, eps })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = {
            let xv = self.value(x);
            let mut out = xv.clone();
            for v in out.data.iter_mut() {
                *v = gelu(*v);
            }
            out
        };
        self.push(out, Op::Gelu { x })
    }

    pub fn rotate(&mut self, x: NodeId, angles: Mat<T>, n_heads: usize) -> NodeId {
        let out = {
            let mut out = self.value(x).clone();
            tensor::rotate_rows(&mut out, &angles, n_heads);
            out
        };
        self.push(out, Op::Rotate { x, angles, n_heads })
    }

    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, n_heads: usize) -> NodeId {
        let out = causal_attention(self.value(q), self.value(k), self.value(v), n_heads, 0);
        self.push(out, Op::CausalAttention { q, k, v, n_heads })
    }

    /// Convex mixture of same-shape states with softmax(alpha) weights.
    pub fn aggregate_layers(&mut self, states: Vec<NodeId>, alpha: NodeId) -> NodeId {
        let out = {
            let av = self.value(alpha);
            assert_eq!(av.rows, 1);
            assert_eq!(av.cols, states.len(), "alpha length != number of states");
            let mut weights = av.data.clone();
            softmax_in_place(&mut weights);
            let first = self.value(states[0]);
            let mut out = Mat::zeros(first.rows, first.cols);
            for (&sid, &wk) in states.iter().zip(&weights) {
                let sv = self.value(sid);
                assert_eq!((sv.rows, sv.cols), (out.rows, out.cols));
                axpy(wk, &sv.data, &mut out.data);
            }
            out
        };
        self.push(out, Op::AggregateLayers { states, alpha })
    }

    /// Sum over rows of the cross-entropy -log softmax(row)[target].
    pub fn lm_loss_sum(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let v = self.value(logits);
        assert_eq!(v.rows, targets.len(), "one target per logit row");
        assert!(!targets.is_empty(), "lm loss needs at least one target");
        let mut total = T::zero();
        let mut probs = vec![T::zero(); v.cols];
        for (i, &t) in targets.iter().enumerate() {
            probs.copy_from_slice(v.row(i));
            softmax_in_place(&mut probs);
            total -= probs[t].ln();
        }
        self.push(Mat::from_vec(1, 1, vec![total]), Op::LmLossSum { logits, targets })
    }

    /// Mean over rows of the positive-weighted binary cross-entropy on
    /// logits: (1/n) sum of w·z·softplus(-x) + (1-z)·softplus(x).
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: Vec<u8>, pos_weight: T) -> NodeId {
        let v = self.value(logits);
        assert_eq!(v.cols, 1);
        assert_eq!(v.rows, labels.len());
        assert!(!labels.is_empty());
        let n = T::of_usize(labels.len());
        let mut total = T::zero();
        for (i, &z) in labels.iter().enumerate() {
            let x = v.data[i];
            if z == 1 {
                total += pos_weight * softplus(-x);
            } else {
                total += softplus(x);
            }
        }
        self.push(
            Mat::from_vec(1, 1, vec![total / n]),
            Op::BceWithLogits { logits, labels, pos_weight },
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn scalar_combine(&mut self, terms: Vec<(NodeId, T)>) -> NodeId {
        let mut total = T::zero();
        for &(id, c) in &terms {
            total += self.scalar(id) * c;
        }
        self.push(Mat::from_vec(1, 1, vec![total]), Op::ScalarCombine { terms })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: T = self.value(x).data.iter().copied().sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll { x })
    }

    /// Reverse-mode gradients of a scalar node with respect to every
    /// parameter slot (slots without a path to the loss stay `None`).
    pub fn backward(&self, loss: NodeId, n_param_slots: usize) -> Vec<Option<Mat<T>>> {
        let lv = self.value(loss);
        assert_eq!((lv.rows, lv.cols), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![T::one()]));

        let mut param_grads: Vec<Option<Mat<T>>> = (0..n_param_slots).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(slot) => {
                    accumulate(&mut param_grads[*slot], &g);
                }
                Op::GatherRows { src, idx } => {
                    let (rows, cols) = self.shape(*src);
                    let gsrc = grad_slot(&mut grads, *src, rows, cols);
                    for (i_out, &r) in idx.iter().enumerate() {
                        axpy(T::one(), g.row(i_out), gsrc.row_mut(r));
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut cursor = 0usize;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let gp = grad_slot(&mut grads, p, rows, cols);
                        for r in 0..rows {
                            axpy(T::one(), g.row(cursor + r), gp.row_mut(r));
                        }
                        cursor += rows;
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x).clone();
                    let wv = self.value(*w).clone();
                    {
                        let gx = grad_slot(&mut grads, *x, xv.rows, xv.cols);
                        matmul_nt_acc(&g, &wv, gx);
                    }
                    {
                        let gw = grad_slot(&mut grads, *w, wv.rows, wv.cols);
                        matmul_tn_acc(&xv, &g, gw);
                    }
                    {
                        let gb = grad_slot(&mut grads, *b, 1, wv.cols);
                        for r in 0..g.rows {
                            axpy(T::one(), g.row(r), gb.row_mut(0));
                        }
                    }
                }
                Op::Add { x, y } => {
                    let (rows, cols) = (g.rows, g.cols);
                    axpy(T::one(), &g.data, &mut grad_slot(&mut grads, *x, rows, cols).data);
                    axpy(T::one(), &g.data, &mut grad_slot(&mut grads, *y, rows, cols).data);
                }
                Op::RmsNorm { x, scale, eps } => {
                    let xv = self.value(*x).clone();
                    let sv = self.value(*scale).clone();
                    let d = xv.cols;
                    let dn = T::of_usize(d);
                    let eps = *eps;
                    {
                        let gx = grad_slot(&mut grads, *x, xv.rows, xv.cols);
                        for r in 0..xv.rows {
                            let xr = xv.row(r);
                            let gr = g.row(r);
                            let inv = row_inv_rms(xr, dn, eps);
                            let inv3 = inv * inv * inv;
                            let mut inner = T::zero();
                            for j in 0..d {
                                inner += gr[j] * sv.data[j] * xr[j];
                            }
                            let gxr = gx.row_mut(r);
                            for j in 0..d {
                                gxr[j] += inv * sv.data[j] * gr[j] - xr[j] * inv3 / dn * inner;
                            }
                        }
                    }
                    {
                        let gs = grad_slot(&mut grads, *scale, 1, d);
                        for r in 0..xv.rows {
                            let xr = xv.row(r);
                            let gr = g.row(r);
                            let inv = row_inv_rms(xr, dn, eps);
                            let gsr = gs.row_mut(0);
                            for j in 0..d {
                                gsr[j] += gr[j] * xr[j] * inv;
                            }
                        }
                    }
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x).clone();
                    let gx = grad_slot(&mut grads, *x, xv.rows, xv.cols);
                    for (j, (&gv, &xval)) in g.data.iter().zip(&xv.data).enumerate() {
                        gx.data[j] += gv * gelu_grad(xval);
                    }
                }
                Op::Rotate { x, angles, n_heads } => {
                    // The rotation is orthogonal; its adjoint rotates by the
                    // negated angles.
                    let mut gx_new = g.clone();
                    let mut neg = angles.clone();
                    for a in neg.data.iter_mut() {
                        *a = -*a;
                    }
                    tensor::rotate_rows(&mut gx_new, &neg, *n_heads);
                    let gx = grad_slot(&mut grads, *x, g.rows, g.cols);
                    axpy(T::one(), &gx_new.data, &mut gx.data);
                }
                Op::CausalAttention { q, k, v, n_heads } => {
                    let qv = self.value(*q).clone();
                    let kv = self.value(*k).clone();
                    let vv = self.value(*v).clone();
                    let (gq, gk, gv) = attention_backward(&g, &qv, &kv, &vv, *n_heads);
                    axpy(T::one(), &gq.data, &mut grad_slot(&mut grads, *q, qv.rows, qv.cols).data);
                    axpy(T::one(), &gk.data, &mut grad_slot(&mut grads, *k, kv.rows, kv.cols).data);
                    axpy(T::one(), &gv.data, &mut grad_slot(&mut grads, *v, vv.rows, vv.cols).data);
                }
                Op::AggregateLayers { states, alpha } => {
                    let av = self.value(*alpha).clone();
                    let mut weights = av.data.clone();
                    softmax_in_place(&mut weights);
                    let mut contractions = vec![T::zero(); states.len()];
                    for (kidx, &sid) in states.iter().enumerate() {
                        contractions[kidx] = dot(&g.data, &self.value(sid).data);
                    }
                    for (kidx, &sid) in states.iter().enumerate() {
                        let gs = grad_slot(&mut grads, sid, g.rows, g.cols);
                        axpy(weights[kidx], &g.data, &mut gs.data);
                    }
                    let mixed: T = weights.iter().zip(&contractions).map(|(&w, &c)| w * c).sum();
                    let ga = grad_slot(&mut grads, *alpha, 1, states.len());
                    for kidx in 0..states.len() {
                        ga.data[kidx] += weights[kidx] * (contractions[kidx] - mixed);
                    }
                }
                Op::LmLossSum { logits, targets } => {
                    let lv = self.value(*logits).clone();
                    let gl = grad_slot(&mut grads, *logits, lv.rows, lv.cols);
                    let gscalar = g.data[0];
                    let mut probs = vec![T::zero(); lv.cols];
                    for (r, &t) in targets.iter().enumerate() {
                        probs.copy_from_slice(lv.row(r));
                        softmax_in_place(&mut probs);
                        let gr = gl.row_mut(r);
                        for (j, &p) in probs.iter().enumerate() {
                            let indicator = if j == t { T::one() } else { T::zero() };
                            gr[j] += gscalar * (p - indicator);
                        }
                    }
                }
                Op::BceWithLogits { logits, labels, pos_weight } => {
                    let lv = self.value(*logits).clone();
                    let gl = grad_slot(&mut grads, *logits, lv.rows, lv.cols);
                    let n = T::of_usize(labels.len());
                    let gscalar = g.data[0] / n;
                    for (r, &z) in labels.iter().enumerate() {
                        let s = sigmoid(lv.data[r]);
                        let d = if z == 1 { *pos_weight * (s - T::one()) } else { s };
                        gl.data[r] += gscalar * d;
                    }
                }
                Op::ScalarCombine { terms } => {
                    for &(id, c) in terms {
                        let gt = grad_slot(&mut grads, id, 1, 1);
                        gt.data[0] += g.data[0] * c;
                    }
                }
                Op::SumAll { x } => {
                    let (rows, cols) = self.shape(*x);
                    let gx = grad_slot(&mut grads, *x, rows, cols);
                    for v in gx.data.iter_mut() {
                        *v += g.data[0];
                    }
                }
            }
        }
        param_grads
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = self.value(id);
        (v.rows, v.cols)
    }
}

fn row_inv_rms<T: Scalar>(row: &[T], dn: T, eps: T) -> T {
    let mut ms = T::zero();
    for &v in row {
        ms += v * v;
    }
    ((ms / dn) + eps).sqrt().recip()
}

fn grad_slot<'a, T: Scalar>(
    grads: &'a mut [Option<Mat<T>>],
    id: NodeId,
    rows: usize,
    cols: usize,
) -> &'a mut Mat<T> {
    grads[id.0].get_or_insert_with(|| Mat::zeros(rows, cols))
}

fn accumulate<T: Scalar>(slot: &mut Option<Mat<T>>, g: &Mat<T>) {
    match slot {
        Some(existing) => axpy(T::one(), &g.data, &mut existing.data),
        None => *slot = Some(g.clone()),
    }
}

fn attention_backward<T: Scalar>(
    g: &Mat<T>,
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    n_heads: usize,
) -> (Mat<T>, Mat<T>, Mat<T>) {
    let n = q.rows;
    let d = q.cols;
    let head_dim = d / n_heads;
    let scale = T::of_usize(head_dim).sqrt().recip();
    let mut gq = Mat::zeros(n, d);
    let mut gk = Mat::zeros(n, d);
    let mut gv = Mat::zeros(n, d);
    let mut probs = vec![T::zero(); n];
    let mut dprobs = vec![T::zero(); n];
    for i in 0..n {
        let visible = i + 1;
        for h in 0..n_heads {
            let hb = h * head_dim;
            {
                let q_h = &q.row(i)[hb..hb + head_dim];
                for j in 0..visible {
                    probs[j] = dot(q_h, &k.row(j)[hb..hb + head_dim]) * scale;
                }
            }
            softmax_in_place(&mut probs[..visible]);
            let g_h = &g.row(i)[hb..hb + head_dim];
            let mut inner = T::zero();
            for j in 0..visible {
                let dp = dot(g_h, &v.row(j)[hb..hb + head_dim]);
                dprobs[j] = dp;
                inner += probs[j] * dp;
            }
            for j in 0..visible {
                let ds = probs[j] * (dprobs[j] - inner) * scale;
                axpy(probs[j], g_h, &mut gv.row_mut(j)[hb..hb + head_dim]);
                axpy(ds, &k.row(j)[hb..hb + head_dim], &mut gq.row_mut(i)[hb..hb + head_dim]);
                axpy(ds, &q.row(i)[hb..hb + head_dim], &mut gk.row_mut(j)[hb..hb + head_dim]);
            }
        }
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Finite-difference check for a scalar-valued graph over one matrix
    // bound to param slot 0.
    fn check_grad(build: impl Fn(&mut Tape<f64>, NodeId) -> NodeId, x0: Mat<f64>, tol: f64) {
        let mut tape = Tape::new();
        let x = tape.param(0, x0.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss, 1);
        let g = grads[0].as_ref().expect("param got a gradient");

        let eps = 1e-6;
        for j in 0..x0.data.len() {
            let mut plus = x0.clone();
            plus.data[j] += eps;
            let mut tp = Tape::new();
            let xp = tp.param(0, plus);
            let lid = build(&mut tp, xp);
            let lp = tp.scalar(lid);

            let mut minus = x0.clone();
            minus.data[j] -= eps;
            let mut tm = Tape::new();
            let xm = tm.param(0, minus);
            let lid = build(&mut tm, xm);
            let lm = tm.scalar(lid);

            let fd = (lp - lm) / (2.0 * eps);
            assert!(
                (g.data[j] - fd).abs() <= tol * (1.0 + fd.abs()),
                "entry {j}: ad {} vs fd {fd}",
                g.data[j]
            );
        }
    }

    fn seq_mat(rows: usize, cols: usize, scale: f64) -> Mat<f64> {
        let data = (0..rows * cols).map(|i| ((i as f64 * 0.37).sin() + 0.1) * scale).collect();
        Mat::from_vec(rows, cols, data)
    }

    #[test]
    fn linear_gradients() {
        let w = seq_mat(3, 2, 0.8);
        let b = seq_mat(1, 2, 0.3);
        check_grad(
            |tape, x| {
                let wn = tape.input(w.clone());
                let bn = tape.input(b.clone());
                let y = tape.linear(x, wn, bn);
                tape.sum_all(y)
            },
            seq_mat(4, 3, 1.0),
            1e-6,
        );
        let x = seq_mat(4, 3, 1.0);
        check_grad(
            |tape, w| {
                let xn = tape.input(x.clone());
                let bn = tape.input(seq_mat(1, 2, 0.3));
                let y = tape.linear(xn, w, bn);
                tape.sum_all(y)
            },
            seq_mat(3, 2, 0.8),
            1e-6,
        );
    }

    #[test]
    fn rms_norm_gradients() {
        let scale = seq_mat(1, 5, 1.2);
        check_grad(
            |tape, x| {
                let s = tape.input(scale.clone());
                let y = tape.rms_norm(x, s, 1e-6);
                let g = tape.gelu(y);
                tape.sum_all(g)
            },
            seq_mat(3, 5, 1.5),
            1e-5,
        );
        let x = seq_mat(3, 5, 1.5);
        check_grad(
            |tape, s| {
                let xn = tape.input(x.clone());
                let y = tape.rms_norm(xn, s, 1e-6);
                tape.sum_all(y)
            },
            seq_mat(1, 5, 1.2),
            1e-6,
        );
    }

    #[test]
    fn attention_gradients() {
        let k = seq_mat(4, 4, 0.9);
        let v = seq_mat(4, 4, 1.1);
        check_grad(
            |tape, q| {
                let kn = tape.input(k.clone());
                let vn = tape.input(v.clone());
                let o = tape.causal_attention(q, kn, vn, 2);
                tape.sum_all(o)
            },
            seq_mat(4, 4, 1.0),
            1e-5,
        );
        let q = seq_mat(4, 4, 1.0);
        check_grad(
            |tape, k| {
                let qn = tape.input(q.clone());
                let vn = tape.input(seq_mat(4, 4, 1.1));
                let o = tape.causal_attention(qn, k, vn, 2);
                tape.sum_all(o)
            },
            seq_mat(4, 4, 0.9),
            1e-5,
        );
        check_grad(
            |tape, v| {
                let qn = tape.input(q.clone());
                let kn = tape.input(seq_mat(4, 4, 0.9));
                let o = tape.causal_attention(qn, kn, v, 2);
                tape.sum_all(o)
            },
            seq_mat(4, 4, 1.1),
            1e-6,
        );
    }

    #[test]
    fn rotate_gradients() {
        let angles = seq_mat(3, 1, 0.7);
        check_grad(
            |tape, x| {
                let r = tape.rotate(x, angles.clone(), 2);
                let g = tape.gelu(r);
                tape.sum_all(g)
            },
            seq_mat(3, 4, 1.0),
            1e-6,
        );
    }

    #[test]
    fn aggregate_gradients() {
        let s1 = seq_mat(2, 3, 1.0);
        let s2 = seq_mat(2, 3, -0.5);
        let s3 = seq_mat(2, 3, 0.25);
        check_grad(
            |tape, alpha| {
                let a = tape.input(s1.clone());
                let b = tape.input(s2.clone());
                let c = tape.input(s3.clone());
                let mixed = tape.aggregate_layers(vec![a, b, c], alpha);
                let g = tape.gelu(mixed);
                tape.sum_all(g)
            },
            seq_mat(1, 3, 0.4),
            1e-6,
        );
        let alpha = seq_mat(1, 3, 0.4);
        check_grad(
            |tape, s| {
                let a = tape.input(s1.clone());
                let c = tape.input(s3.clone());
                let an = tape.input(alpha.clone());
                let mixed = tape.aggregate_layers(vec![a, s, c], an);
                tape.sum_all(mixed)
            },
            s2.clone(),
            1e-6,
        );
    }

    #[test]
    fn lm_loss_gradient_matches_closed_form() {
        let mut tape = Tape::new();
        let logits = tape.param(0, seq_mat(1, 5, 1.3));
        let loss = tape.lm_loss_sum(logits, vec![2]);
        let grads = tape.backward(loss, 1);
        let g = grads[0].as_ref().unwrap();
        let mut probs = seq_mat(1, 5, 1.3).data;
        softmax_in_place(&mut probs);
        for (j, &p) in probs.iter().enumerate() {
            let expect = p - if j == 2 { 1.0 } else { 0.0 };
            assert!((g.data[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_gradients() {
        check_grad(
            |tape, x| tape.bce_with_logits(x, vec![1, 0, 1, 0], 3.0),
            seq_mat(4, 1, 0.9),
            1e-7,
        );
    }

    #[test]
    fn gather_and_concat_gradients() {
        check_grad(
            |tape, x| {
                let g1 = tape.gather_rows(x, vec![0, 2, 2]);
                let g2 = tape.gather_rows(x, vec![3]);
                let cat = tape.concat_rows(vec![g1, g2]);
                let act = tape.gelu(cat);
                tape.sum_all(act)
            },
            seq_mat(4, 3, 1.0),
            1e-6,
        );
    }

    #[test]
    fn zero_coefficient_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(0, seq_mat(2, 2, 1.0));
        let s = tape.sum_all(x);
        let loss = tape.scalar_combine(vec![(s, 0.0)]);
        let grads = tape.backward(loss, 1);
        let g = grads[0].as_ref().unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }
}
