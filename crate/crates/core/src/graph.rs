//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, so parents always
//! have smaller ids than their children and backward is a single reverse
//! sweep. Shape violations inside the tape are programming errors and panic;
//! the public model operations validate their arguments before recording.

use alloc::vec;
use alloc::vec::Vec;

use crate::float::Float;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Gelu(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<F>, rstd: Vec<F> },
    Softmax(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    GatherRows { x: NodeId, index: Vec<Option<usize>> },
    MeanRows(NodeId),
    GroupedRowDot { p: NodeId, e: NodeId, group: usize },
    Reshape(NodeId),
    BceLogits { x: NodeId, target: Vec<F> },
    Dice { x: NodeId, target: Vec<F>, eps: F },
    WeightedSum(Vec<(NodeId, F)>),
    SumAll(NodeId),
}

#[derive(Debug, Clone, Default)]
pub struct Graph<F> {
    values: Vec<Tensor<F>>,
    ops: Vec<Op<F>>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Tensor<F>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `max(x, 0) - x * y + ln(1 + exp(-|x|))`: binary cross-entropy on a logit
/// without ever evaluating `ln(0)`.
#[inline]
pub(crate) fn bce_with_logit<F: Float>(x: F, y: F) -> F {
    x.max(F::zero()) - x * y + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid_of<F: Float>(x: F) -> F {
    sigmoid(x)
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { values: Vec::new(), ops: Vec::new(), requires_grad: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        self.grads.push(None);
        NodeId(self.values.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.requires_grad[id.0])
    }

    /// Leaf that gradients flow into.
    pub fn input(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.values[id.0].shape()
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.requires_grad[id.0]
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a.0].matmul(&self.values[b.0]).expect("matmul shape");
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(av.cols(), bv.cols(), "matmul_t inner dims");
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = Tensor::zeros(m, n);
        F::gemm(
            m,
            k,
            n,
            F::one(),
            av.data(),
            (k as isize, 1),
            bv.data(),
            (1, k as isize),
            F::zero(),
            out.data_mut(),
            (n as isize, 1),
        );
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let mut v = self.values[a.0].clone();
        v.add_assign(&self.values[b.0]);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shapes");
        let mut v = self.values[a.0].clone();
        let b = self.values[row.0].data().to_vec();
        for i in 0..r {
            for (x, &y) in v.row_mut(i).iter_mut().zip(&b) {
                *x = *x + y;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::from_vec(av.rows(), av.cols(), data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: F) -> NodeId {
        let v = self.values[a.0].map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let c = F::lit(GELU_C);
        let k = F::lit(GELU_A);
        let half = F::lit(0.5);
        let v = self.values[a.0].map(|x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Per-row layer normalization with a `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c), "layer_norm gain");
        assert_eq!(self.shape(bias), (1, c), "layer_norm bias");
        let eps = F::lit(1e-5);
        let n = F::lit(c as f64);
        let xv = &self.values[x.0];
        let g = self.values[gain.0].data();
        let b = self.values[bias.0].data();
        let mut out = Tensor::zeros(r, c);
        let mut xhat = vec![F::zero(); r * c];
        let mut rstd = vec![F::zero(); r];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[i] = rs;
            let o = out.row_mut(i);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// Row-wise softmax of `x + mask`.
    ///
    /// Mask entries equal to `-inf` yield a weight of exactly zero; a row
    /// whose every entry is masked yields an all-zero row.
    pub fn softmax_rows(&mut self, x: NodeId, mask: Option<&Tensor<F>>) -> NodeId {
        let xv = &self.values[x.0];
        let (r, c) = xv.shape();
        if let Some(m) = mask {
            assert_eq!(m.shape(), (r, c), "softmax mask shape");
        }
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let mrow = mask.map(|m| m.row(i));
            let logit = |j: usize| -> Option<F> {
                match mrow {
                    Some(m) if m[j] == F::neg_infinity() => None,
                    Some(m) => Some(row[j] + m[j]),
                    None => Some(row[j]),
                }
            };
            let mut max = F::neg_infinity();
            for j in 0..c {
                if let Some(v) = logit(j) {
                    max = max.max(v);
                }
            }
            if max == F::neg_infinity() {
                continue;
            }
            let o = out.row_mut(i);
            let mut sum = F::zero();
            for j in 0..c {
                if let Some(v) = logit(j) {
                    let e = (v - max).exp();
                    o[j] = e;
                    sum = sum + e;
                }
            }
            for v in o.iter_mut() {
                *v = *v / sum;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = &self.values[p.0];
            assert_eq!(v.cols(), c, "concat_rows widths");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        self.push(Tensor::from_vec(rows, c, data).unwrap(), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Tensor::zeros(r, total);
        let mut off = 0;
        for p in parts {
            let v = &self.values[p.0];
            assert_eq!(v.rows(), r, "concat_cols heights");
            for i in 0..r {
                out.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
            }
            off += v.cols();
        }
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = &self.values[x.0];
        assert!(start + len <= v.rows(), "slice_rows range");
        let c = v.cols();
        let data = v.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(len, c, data).unwrap(), Op::SliceRows { x, start }, rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = &self.values[x.0];
        assert!(start + len <= v.cols(), "slice_cols range");
        let out = Tensor::from_fn(v.rows(), len, |i, j| v.get(i, start + j));
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    /// Row `i` of the output is row `index[i]` of `x`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: NodeId, index: Vec<Option<usize>>) -> NodeId {
        let v = &self.values[x.0];
        let c = v.cols();
        let mut out = Tensor::zeros(index.len(), c);
        for (i, src) in index.iter().enumerate() {
            if let Some(s) = *src {
                assert!(s < v.rows(), "gather_rows index");
                out.row_mut(i).copy_from_slice(v.row(s));
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::GatherRows { x, index }, rg)
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let v = &self.values[x.0];
        let (r, c) = v.shape();
        assert!(r > 0, "mean_rows of empty");
        let inv = F::one() / F::lit(r as f64);
        let mut out = Tensor::zeros(1, c);
        for i in 0..r {
            for (o, &a) in out.data_mut().iter_mut().zip(v.row(i)) {
                *o = *o + a;
            }
        }
        out.scale_assign(inv);
        let rg = self.rg(&[x]);
        self.push(out, Op::MeanRows(x), rg)
    }

    /// `out[g * group + j] = <p[g * group + j], e[g]>`, an `(G * group) x 1`
    /// column. Row `g` of `e` only ever touches its own block of `p`.
    pub fn grouped_row_dot(&mut self, p: NodeId, e: NodeId, group: usize) -> NodeId {
        let (pv, ev) = (&self.values[p.0], &self.values[e.0]);
        assert_eq!(pv.cols(), ev.cols(), "grouped_row_dot widths");
        assert_eq!(pv.rows(), ev.rows() * group, "grouped_row_dot groups");
        let mut out = Tensor::zeros(pv.rows(), 1);
        for g in 0..ev.rows() {
            let er = ev.row(g);
            for j in 0..group {
                let i = g * group + j;
                let d = pv.row(i).iter().zip(er).map(|(&a, &b)| a * b).sum();
                out.set(i, 0, d);
            }
        }
        let rg = self.rg(&[p, e]);
        self.push(out, Op::GroupedRowDot { p, e, group }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.values[x.0].clone().reshaped(rows, cols).expect("reshape size");
        let rg = self.rg(&[x]);
        self.push(v, Op::Reshape(x), rg)
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against `target`.
    pub fn bce_logits_mean(&mut self, x: NodeId, target: &[F]) -> NodeId {
        let xv = &self.values[x.0];
        assert_eq!(xv.len(), target.len(), "bce target length");
        assert!(!target.is_empty(), "bce of empty map");
        let n = F::lit(target.len() as f64);
        let total: F = xv.data().iter().zip(target).map(|(&a, &y)| bce_with_logit(a, y)).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total / n), Op::BceLogits { x, target: target.to_vec() }, rg)
    }

    /// `1 - (2 * sum(y * p) + eps) / (sum(y) + sum(p) + eps)` with `p = sigmoid(x)`.
    pub fn dice_logits(&mut self, x: NodeId, target: &[F], eps: F) -> NodeId {
        let xv = &self.values[x.0];
        assert_eq!(xv.len(), target.len(), "dice target length");
        let mut inter = F::zero();
        let mut mass = F::zero();
        for (&a, &y) in xv.data().iter().zip(target) {
            let p = sigmoid(a);
            inter = inter + y * p;
            mass = mass + y + p;
        }
        let v = F::one() - (F::lit(2.0) * inter + eps) / (mass + eps);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Dice { x, target: target.to_vec(), eps }, rg)
    }

    /// `sum_i w_i * x_i` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, F)]) -> NodeId {
        assert!(!terms.is_empty());
        let (r, c) = self.shape(terms[0].0);
        let mut out = Tensor::zeros(r, c);
        for &(id, w) in terms {
            let v = &self.values[id.0];
            assert_eq!(v.shape(), (r, c), "weighted_sum shapes");
            for (o, &a) in out.data_mut().iter_mut().zip(v.data()) {
                *o = *o + w * a;
            }
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&ids);
        self.push(out, Op::WeightedSum(terms.to_vec()), rg)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.values[x.0].sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Clears all gradients, then back-propagates from the scalar `root`.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[root.0] = Some(Tensor::scalar(F::one()));
        for i in (0..=root.0).rev() {
            let Some(grad) = self.grads[i].take() else { continue };
            if !self.requires_grad[i] {
                continue;
            }
            self.propagate(i, &grad);
            self.grads[i] = Some(grad);
        }
    }


    fn propagate(&mut self, i: usize, g: &Tensor<F>) {
        let values = &self.values;
        let grads = &mut self.grads;
        let rgs = &self.requires_grad;
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let av = &values[a.0];
                let bv = &values[b.0];
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = acc(grads, values, rgs, a) {
                    // dA = dC * B^T
                    F::gemm(m, n, k, F::one(), g.data(), (n as isize, 1), bv.data(), (1, n as isize), F::one(), ga.data_mut(), (k as isize, 1));
                }
                if let Some(gb) = acc(grads, values, rgs, b) {
                    // dB = A^T * dC
                    F::gemm(k, m, n, F::one(), av.data(), (1, k as isize), g.data(), (n as isize, 1), F::one(), gb.data_mut(), (n as isize, 1));
                }
            }
            Op::MatMulT(a, b) => {
                let (a, b) = (*a, *b);
                let av = &values[a.0];
                let bv = &values[b.0];
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if let Some(ga) = acc(grads, values, rgs, a) {
                    // dA = dC * B
                    F::gemm(m, n, k, F::one(), g.data(), (n as isize, 1), bv.data(), (k as isize, 1), F::one(), ga.data_mut(), (k as isize, 1));
                }
                if let Some(gb) = acc(grads, values, rgs, b) {
                    // dB = dC^T * A
                    F::gemm(n, m, k, F::one(), g.data(), (1, n as isize), av.data(), (k as isize, 1), F::one(), gb.data_mut(), (k as isize, 1));
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if let Some(gp) = acc(grads, values, rgs, p) {
                        gp.add_assign(g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = acc(grads, values, rgs, *a) {
                    ga.add_assign(g);
                }
                if let Some(gr) = acc(grads, values, rgs, *row) {
                    for r in 0..g.rows() {
                        for (o, &v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = &values[a.0];
                let bv = &values[b.0];
                if let Some(ga) = acc(grads, values, rgs, a) {
                    for ((o, &d), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o = *o + d * y;
                    }
                }
                if let Some(gb) = acc(grads, values, rgs, b) {
                    for ((o, &d), &x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o = *o + d * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                if let Some(ga) = acc(grads, values, rgs, *a) {
                    for (o, &d) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o = *o + d * s;
                    }
                }
            }
            Op::Gelu(a) => {
                let a = *a;
                let xv = &values[a.0];
                let c = F::lit(GELU_C);
                let k = F::lit(GELU_A);
                let half = F::lit(0.5);
                let three = F::lit(3.0);
                if let Some(ga) = acc(grads, values, rgs, a) {
                    for ((o, &d), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = (F::one() - t * t) * c * (F::one() + three * k * x * x);
                        *o = *o + d * (half * (F::one() + t) + half * x * dt);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (r, c) = values[x.0].shape();
                let gv = values[gain.0].data().to_vec();
                let n = F::lit(c as f64);
                if let Some(gg) = acc(grads, values, rgs, *gain) {
                    for i in 0..r {
                        for j in 0..c {
                            let o = &mut gg.data_mut()[j];
                            *o = *o + g.get(i, j) * xhat[i * c + j];
                        }
                    }
                }
                if let Some(gb) = acc(grads, values, rgs, *bias) {
                    for i in 0..r {
                        for (o, &d) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *o = *o + d;
                        }
                    }
                }
                if let Some(gx) = acc(grads, values, rgs, *x) {
                    let mut dxhat = vec![F::zero(); c];
                    for i in 0..r {
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for j in 0..c {
                            let d = g.get(i, j) * gv[j];
                            dxhat[j] = d;
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xhat[i * c + j];
                        }
                        mean_d = mean_d / n;
                        mean_dx = mean_dx / n;
                        let row = gx.row_mut(i);
                        for j in 0..c {
                            row[j] = row[j] + rstd[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &values[i];
                if let Some(gx) = acc(grads, values, rgs, *x) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yy), &d) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = *o + yy * (d - dot);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (pr, pc) = values[p.0].shape();
                    if let Some(gp) = acc(grads, values, rgs, *p) {
                        let src = &g.data()[off * pc..(off + pr) * pc];
                        for (o, &d) in gp.data_mut().iter_mut().zip(src) {
                            *o = *o + d;
                        }
                    }
                    off += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (pr, pc) = values[p.0].shape();
                    if let Some(gp) = acc(grads, values, rgs, *p) {
                        for r in 0..pr {
                            for (o, &d) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + pc]) {
                                *o = *o + d;
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let start = *start;
                let c = g.cols();
                if let Some(gx) = acc(grads, values, rgs, *x) {
                    let dst = &mut gx.data_mut()[start * c..start * c + g.len()];
                    for (o, &d) in dst.iter_mut().zip(g.data()) {
                        *o = *o + d;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let start = *start;
                if let Some(gx) = acc(grads, values, rgs, *x) {
                    for r in 0..g.rows() {
                        for (o, &d) in gx.row_mut(r)[start..start + g.cols()].iter_mut().zip(g.row(r)) {
                            *o = *o + d;
                        }
                    }
                }
            }
            Op::GatherRows { x, index } => {
                if let Some(gx) = acc(grads, values, rgs, *x) {
                    for (r, src) in index.iter().enumerate() {
                        if let Some(s) = *src {
                            for (o, &d) in gx.row_mut(s).iter_mut().zip(g.row(r)) {
                                *o = *o + d;
                            }
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                let r = values[x.0].rows();
                let inv = F::one() / F::lit(r as f64);
                if let Some(gx) = acc(grads, values, rgs, *x) {
                    for i in 0..r {
                        for (o, &d) in gx.row_mut(i).iter_mut().zip(g.data()) {
                            *o = *o + d * inv;
                        }
                    }
                }
            }
            Op::GroupedRowDot { p, e, group } => {
                let (p, e, group) = (*p, *e, *group);
                let pv = &values[p.0];
                let ev = &values[e.0];
                if let Some(gp) = acc(grads, values, rgs, p) {
                    for gi in 0..ev.rows() {
                        for j in 0..group {
                            let r = gi * group + j;
                            let d = g.get(r, 0);
                            for (o, &w) in gp.row_mut(r).iter_mut().zip(ev.row(gi)) {
                                *o = *o + d * w;
                            }
                        }
                    }
                }
                if let Some(ge) = acc(grads, values, rgs, e) {
                    for gi in 0..ev.rows() {
                        for j in 0..group {
                            let r = gi * group + j;
                            let d = g.get(r, 0);
                            for (o, &w) in ge.row_mut(gi).iter_mut().zip(pv.row(r)) {
                                *o = *o + d * w;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc(grads, values, rgs, *x) {
                    for (o, &d) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o = *o + d;
                    }
                }
            }
            Op::BceLogits { x, target } => {
                let xv = &values[x.0];
                let scale = g.item() / F::lit(target.len() as f64);
                if let Some(gx) = acc(grads, values, rgs, *x) {
                    for ((o, &a), &y) in gx.data_mut().iter_mut().zip(xv.data()).zip(target) {
                        *o = *o + scale * (sigmoid(a) - y);
                    }
                }
            }
            Op::Dice { x, target, eps } => {
                let xv = &values[x.0];
                let eps = *eps;
                let two = F::lit(2.0);
                let mut inter = F::zero();
                let mut mass = F::zero();
                for (&a, &y) in xv.data().iter().zip(target) {
                    let p = sigmoid(a);
                    inter = inter + y * p;
                    mass = mass + y + p;
                }
                let num = two * inter + eps;
                let den = mass + eps;
                let up = g.item();
                if let Some(gx) = acc(grads, values, rgs, *x) {
                    for ((o, &a), &y) in gx.data_mut().iter_mut().zip(xv.data()).zip(target) {
                        let p = sigmoid(a);
                        let dp = -(two * y * den - num) / (den * den);
                        *o = *o + up * dp * p * (F::one() - p);
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(id, w) in terms {
                    if let Some(gx) = acc(grads, values, rgs, id) {
                        for (o, &d) in gx.data_mut().iter_mut().zip(g.data()) {
                            *o = *o + w * d;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let d = g.item();
                if let Some(gx) = acc(grads, values, rgs, *x) {
                    for o in gx.data_mut() {
                        *o = *o + d;
                    }
                }
            }
        }
    }
}

fn acc<'a, F: Float>(
    grads: &'a mut [Option<Tensor<F>>],
    values: &[Tensor<F>],
    rgs: &[bool],
    id: NodeId,
) -> Option<&'a mut Tensor<F>> {
    if !rgs[id.0] {
        return None;
    }
    let (r, c) = values[id.0].shape();
    Some(grads[id.0].get_or_insert_with(|| Tensor::zeros(r, c)))
}
