//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation as it executes. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients for every node that (transitively) depends on a
//! parameter.

use std::sync::Arc;

use crate::conv::Rulebook;
use crate::mat::{gemm_nn, gemm_nt, gemm_tn};
use crate::params::{ParamId, ParamStore};
use crate::sparse::SparseMap;
use crate::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Softplus { x: Var, shift: f64 },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Sparse { x: Var, map: Arc<SparseMap> },
    Conv { x: Var, w: Var, b: Option<Var>, rb: Arc<Rulebook> },
    Attention { q: Var, k: Var, v: Var, group: usize, probs: Vec<f64> },
    SoftmaxRows(Var),
    BlendColors { w: Var, c: Var },
    Composite { sigma: Var, color: Var, deltas: Arc<Vec<f64>>, group: usize },
    RowL2Mean { x: Var, target: Arc<Mat> },
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<(ParamId, Mat)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients, summed over every binding of the same parameter.
    pub fn params(&self) -> &[(ParamId, Mat)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf that receives a gradient but is not a stored parameter; used by
    /// gradient checks on intermediate quantities.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// `x * w + b` with `w: in x out`, `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        assert_eq!(xv.cols(), wv.rows(), "linear: input has {} cols, weight expects {}", xv.cols(), wv.rows());
        let mut out = Mat::zeros(xv.rows(), wv.cols());
        gemm_nn(xv, wv, &mut out, 0.0);
        if let Some(b) = b {
            let bv = self.nodes[b.0].value.row(0).to_vec();
            for r in 0..out.rows() {
                for (o, bb) in out.row_mut(r).iter_mut().zip(&bv) {
                    *o += bb;
                }
            }
        }
        let ng = self.ng(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].needs_grad);
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| v.max(0.0));
        let ng = self.ng(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(sigmoid);
        let ng = self.ng(&[x]);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// `ln(1 + exp(x + shift))`.
    pub fn softplus(&mut self, x: Var, shift: f64) -> Var {
        let out = self.nodes[x.0].value.map(|v| softplus(v + shift));
        let ng = self.ng(&[x]);
        self.push(out, Op::Softplus { x, shift }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.add_assign(&self.nodes[b.0].value);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(av.rows(), av.cols(), data);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.nodes[a.0].value.map(|v| v * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows();
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            let pc = pv.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + pc].copy_from_slice(pv.row(r));
            }
            off += pc;
        }
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let mut out = Mat::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let out = self.nodes[x.0].value.clone().reshaped(rows, cols);
        let ng = self.ng(&[x]);
        self.push(out, Op::Reshape(x), ng)
    }

    pub fn sparse(&mut self, x: Var, map: Arc<SparseMap>) -> Var {
        let out = map.apply(&self.nodes[x.0].value);
        let ng = self.ng(&[x]);
        self.push(out, Op::Sparse { x, map }, ng)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, rb: Arc<Rulebook>) -> Var {
        let out = rb.forward(&self.nodes[x.0].value, &self.nodes[w.0].value, b.map(|b| &self.nodes[b.0].value));
        let ng = self.ng(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].needs_grad);
        self.push(out, Op::Conv { x, w, b, rb }, ng)
    }

    /// Scaled dot-product attention within consecutive groups of `group` rows:
    /// row `i` of a group attends over all rows `j` of the same group with
    /// weights `softmax_j(q_i . k_j / sqrt(d))`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, group: usize) -> Var {
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        assert_eq!(qv.shape(), kv.shape(), "attention q/k shape mismatch");
        assert_eq!(qv.rows(), vv.rows(), "attention value rows");
        assert_eq!(qv.rows() % group, 0, "attention rows not divisible by group");
        let d = qv.cols();
        let scale = 1.0 / (d as f64).sqrt();
        let groups = qv.rows() / group;
        let mut probs = vec![0.0; groups * group * group];
        let mut out = Mat::zeros(qv.rows(), vv.cols());
        for g in 0..groups {
            for i in 0..group {
                let qi = qv.row(g * group + i);
                let p = &mut probs[(g * group + i) * group..(g * group + i + 1) * group];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(qi, kv.row(g * group + j)) * scale;
                }
                softmax_in_place(p);
                let orow = out.row_mut(g * group + i);
                for (j, &pj) in p.iter().enumerate() {
                    for (o, vvj) in orow.iter_mut().zip(vv.row(g * group + j)) {
                        *o += pj * vvj;
                    }
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, group, probs }, ng)
    }

    /// Attention probabilities of an attention node, `group x group` per group.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    /// `out[p, ch] = sum_n w[p, n] * c[p, 3n + ch]`.
    pub fn blend_colors(&mut self, w: Var, c: Var) -> Var {
        let (wv, cv) = (&self.nodes[w.0].value, &self.nodes[c.0].value);
        assert_eq!(wv.rows(), cv.rows());
        assert_eq!(cv.cols(), 3 * wv.cols(), "blend_colors expects 3 color columns per weight");
        let mut out = Mat::zeros(wv.rows(), 3);
        for p in 0..wv.rows() {
            let (wr, cr) = (wv.row(p), cv.row(p));
            let o = out.row_mut(p);
            for (n, &wn) in wr.iter().enumerate() {
                for ch in 0..3 {
                    o[ch] += wn * cr[3 * n + ch];
                }
            }
        }
        let ng = self.ng(&[w, c]);
        self.push(out, Op::BlendColors { w, c }, ng)
    }

    /// Emission-absorption compositing of consecutive groups of `group`
    /// samples. Output row per ray: `[r, g, b, accumulated alpha]`.
    pub fn composite(&mut self, sigma: Var, color: Var, deltas: Arc<Vec<f64>>, group: usize) -> Var {
        let (sv, cv) = (&self.nodes[sigma.0].value, &self.nodes[color.0].value);
        assert_eq!(sv.cols(), 1);
        assert_eq!(cv.cols(), 3);
        assert_eq!(sv.rows(), cv.rows());
        assert_eq!(deltas.len(), sv.rows());
        assert_eq!(sv.rows() % group, 0);
        let rays = sv.rows() / group;
        let mut out = Mat::zeros(rays, 4);
        for r in 0..rays {
            let range = r * group..(r + 1) * group;
            let (rgb, acc) = composite_kernel(
                &sv.data()[range.clone()],
                &cv.data()[range.start * 3..range.end * 3],
                &deltas[range],
            );
            out.row_mut(r).copy_from_slice(&[rgb[0], rgb[1], rgb[2], acc]);
        }
        let ng = self.ng(&[sigma, color]);
        self.push(out, Op::Composite { sigma, color, deltas, group }, ng)
    }

    /// Mean over rows of the Euclidean norm of `x - target`.
    pub fn row_l2_mean(&mut self, x: Var, target: Arc<Mat>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.shape(), target.shape(), "row_l2_mean shape mismatch");
        let rows = xv.rows().max(1);
        let total: f64 = (0..xv.rows())
            .map(|r| xv.row(r).iter().zip(target.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .sum();
        let ng = self.ng(&[x]);
        self.push(Mat::scalar(total / rows as f64), Op::RowL2Mean { x, target }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let ng = self.ng(&[x]);
        self.push(Mat::scalar(s), Op::Sum(x), ng)
    }

    /// Backpropagates from a `1 x 1` node, keeping gradients of every node.
    pub fn backward(&self, root: Var) -> Gradients {
        self.backward_impl(root, true)
    }

    /// Like [`Graph::backward`] but frees intermediate gradients as soon as
    /// they are consumed; only parameter gradients are returned.
    pub fn backward_params(&self, root: Var) -> Gradients {
        self.backward_impl(root, false)
    }

    fn backward_impl(&self, root: Var, keep: bool) -> Gradients {
        assert_eq!(self.nodes[root.0].value.shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::scalar(1.0));
        let mut params: Vec<(ParamId, Mat)> = Vec::new();
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &mut params);
            if keep {
                grads[idx] = Some(g);
            }
        }
        Gradients { nodes: grads, params }
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>], params: &mut Vec<(ParamId, Mat)>) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => match params.iter_mut().find(|(p, _)| p == id) {
                Some((_, acc)) => acc.add_assign(g),
                None => params.push((*id, g.clone())),
            },
            Op::Linear { x, w, b } => {
                if wants(*x) {
                    let mut gx = Mat::zeros(val(*x).rows(), val(*x).cols());
                    gemm_nt(g, val(*w), &mut gx, 0.0);
                    accumulate(grads, *x, gx);
                }
                if wants(*w) {
                    let mut gw = Mat::zeros(val(*w).rows(), val(*w).cols());
                    gemm_tn(val(*x), g, &mut gw, 0.0);
                    accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        accumulate(grads, *b, Mat::row_vector(&g.column_sums()));
                    }
                }
            }
            Op::Relu(x) => {
                let y = &node.value;
                let data = g.data().iter().zip(y.data()).map(|(gv, yv)| if *yv > 0.0 { *gv } else { 0.0 }).collect();
                accumulate(grads, *x, Mat::from_vec(g.rows(), g.cols(), data));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let data = g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                accumulate(grads, *x, Mat::from_vec(g.rows(), g.cols(), data));
            }
            Op::Softplus { x, shift } => {
                let xv = val(*x);
                let data = g.data().iter().zip(xv.data()).map(|(gv, xi)| gv * sigmoid(xi + shift)).collect();
                accumulate(grads, *x, Mat::from_vec(g.rows(), g.cols(), data));
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if wants(this) {
                        let o = val(other);
                        let data = g.data().iter().zip(o.data()).map(|(gv, ov)| gv * ov).collect();
                        accumulate(grads, this, Mat::from_vec(g.rows(), g.cols(), data));
                    }
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|v| v * s)),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pc = val(*p).cols();
                    if wants(*p) {
                        let mut gp = Mat::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        accumulate(grads, *p, gp);
                    }
                    off += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                let len = g.cols();
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let xv = val(*x);
                accumulate(grads, *x, g.clone().reshaped(xv.rows(), xv.cols()));
            }
            Op::Sparse { x, map } => {
                if wants(*x) {
                    let slot = slot(grads, *x, val(*x));
                    map.apply_transpose_into(g, slot);
                }
            }
            Op::Conv { x, w, b, rb } => {
                let (gx, gw, gb) = rb.backward(val(*x), val(*w), g, wants(*x));
                if let Some(gx) = gx {
                    accumulate(grads, *x, gx);
                }
                if wants(*w) {
                    accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        accumulate(grads, *b, gb);
                    }
                }
            }
            Op::Attention { q, k, v, group, probs } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let group = *group;
                let d = qv.cols();
                let scale = 1.0 / (d as f64).sqrt();
                let mut gq = Mat::zeros(qv.rows(), d);
                let mut gk = Mat::zeros(kv.rows(), d);
                let mut gv = Mat::zeros(vv.rows(), vv.cols());
                let mut gp = vec![0.0; group];
                for gi in 0..qv.rows() / group {
                    for i in 0..group {
                        let row = gi * group + i;
                        let p = &probs[row * group..(row + 1) * group];
                        let go = g.row(row);
                        for j in 0..group {
                            gp[j] = dot(go, vv.row(gi * group + j));
                            for (d_, gov) in gv.row_mut(gi * group + j).iter_mut().zip(go) {
                                *d_ += p[j] * gov;
                            }
                        }
                        let inner: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
                        for j in 0..group {
                            let gs = p[j] * (gp[j] - inner) * scale;
                            if gs == 0.0 {
                                continue;
                            }
                            let kj = kv.row(gi * group + j).to_vec();
                            for (d_, kk) in gq.row_mut(row).iter_mut().zip(&kj) {
                                *d_ += gs * kk;
                            }
                            let qi = qv.row(row).to_vec();
                            for (d_, qq) in gk.row_mut(gi * group + j).iter_mut().zip(&qi) {
                                *d_ += gs * qq;
                            }
                        }
                    }
                }
                if wants(*q) {
                    accumulate(grads, *q, gq);
                }
                if wants(*k) {
                    accumulate(grads, *k, gk);
                }
                if wants(*v) {
                    accumulate(grads, *v, gv);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in gx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *d = yv * (gv - inner);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::BlendColors { w, c } => {
                let (wv, cv) = (val(*w), val(*c));
                if wants(*w) {
                    let mut gw = Mat::zeros(wv.rows(), wv.cols());
                    for p in 0..wv.rows() {
                        let (gr, cr) = (g.row(p), cv.row(p));
                        for (n, d) in gw.row_mut(p).iter_mut().enumerate() {
                            *d = (0..3).map(|ch| gr[ch] * cr[3 * n + ch]).sum();
                        }
                    }
                    accumulate(grads, *w, gw);
                }
                if wants(*c) {
                    let mut gc = Mat::zeros(cv.rows(), cv.cols());
                    for p in 0..wv.rows() {
                        let (gr, wr) = (g.row(p).to_vec(), wv.row(p));
                        let d = gc.row_mut(p);
                        for (n, &wn) in wr.iter().enumerate() {
                            for ch in 0..3 {
                                d[3 * n + ch] = wn * gr[ch];
                            }
                        }
                    }
                    accumulate(grads, *c, gc);
                }
            }
            Op::Composite { sigma, color, deltas, group } => {
                let (sv, cv) = (val(*sigma), val(*color));
                let group = *group;
                let mut gs = Mat::zeros(sv.rows(), 1);
                let mut gc = Mat::zeros(cv.rows(), 3);
                for r in 0..sv.rows() / group {
                    let base = r * group;
                    composite_backward_kernel(
                        &sv.data()[base..base + group],
                        &cv.data()[base * 3..(base + group) * 3],
                        &deltas[base..base + group],
                        g.row(r),
                        &mut gs.data_mut()[base..base + group],
                        &mut gc.data_mut()[base * 3..(base + group) * 3],
                    );
                }
                if wants(*sigma) {
                    accumulate(grads, *sigma, gs);
                }
                if wants(*color) {
                    accumulate(grads, *color, gc);
                }
            }
            Op::RowL2Mean { x, target } => {
                let xv = val(*x);
                let rows = xv.rows().max(1) as f64;
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                let g0 = g.get(0, 0);
                for r in 0..xv.rows() {
                    let norm = xv.row(r).iter().zip(target.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        let t = target.row(r).to_vec();
                        for ((d, a), b) in gx.row_mut(r).iter_mut().zip(xv.row(r)).zip(&t) {
                            *d = g0 * (a - b) / (norm * rows);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let xv = val(*x);
                accumulate(grads, *x, Mat::full(xv.rows(), xv.cols(), g.get(0, 0)));
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Mat>], v: Var, like: &Mat) -> &'a mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(like.rows(), like.cols()))
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Discrete emission-absorption quadrature over one ray on a black
/// background: `alpha_i = 1 - exp(-sigma_i delta_i)`,
/// `w_i = alpha_i prod_{j<i} (1 - alpha_j)`. Returns `(rgb, sum_i w_i)`.
pub fn composite_kernel(sigma: &[f64], rgb: &[f64], delta: &[f64]) -> ([f64; 3], f64) {
    let mut trans = 1.0;
    let mut out = [0.0; 3];
    let mut acc = 0.0;
    for i in 0..sigma.len() {
        let alpha = 1.0 - (-sigma[i] * delta[i]).exp();
        let w = trans * alpha;
        for ch in 0..3 {
            out[ch] += w * rgb[3 * i + ch];
        }
        acc += w;
        trans *= 1.0 - alpha;
    }
    (out, acc)
}

/// Per-sample compositing weights `w_i` of one ray.
pub fn composite_weights(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    let mut trans = 1.0;
    sigma
        .iter()
        .zip(delta)
        .map(|(s, d)| {
            let alpha = 1.0 - (-s * d).exp();
            let w = trans * alpha;
            trans *= 1.0 - alpha;
            w
        })
        .collect()
}

fn composite_backward_kernel(
    sigma: &[f64],
    rgb: &[f64],
    delta: &[f64],
    gout: &[f64],
    gsigma: &mut [f64],
    grgb: &mut [f64],
) {
    let n = sigma.len();
    let w = composite_weights(sigma, delta);
    // trans_after[i] = prod_{j<=i} (1 - alpha_j) = exp(-sum_{j<=i} sigma_j delta_j)
    let mut trans_after = vec![0.0; n];
    let mut t = 1.0;
    for i in 0..n {
        t *= (-sigma[i] * delta[i]).exp();
        trans_after[i] = t;
    }
    // e_i = gC . c_i + gA
    let e: Vec<f64> = (0..n).map(|i| (0..3).map(|ch| gout[ch] * rgb[3 * i + ch]).sum::<f64>() + gout[3]).collect();
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        gsigma[i] = delta[i] * (trans_after[i] * e[i] - suffix);
        suffix += w[i] * e[i];
        for ch in 0..3 {
            grgb[3 * i + ch] = w[i] * gout[ch];
        }
    }
}
