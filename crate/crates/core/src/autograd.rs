//! A small eager reverse-mode tape over [`Tensor`]s.
//!
//! Values are computed when an op is recorded; [`Graph::backward`] walks the
//! tape once in reverse. The op set is exactly what the encoders, the
//! prototype heads, the CLUB estimator and the intervention pooling need, with
//! a few fused ops (pairwise distances, pairwise Gaussian log-densities) that
//! would otherwise materialize large broadcast intermediates.
//!
//! Summation orders are fixed, so repeated evaluation is bitwise stable.

use std::collections::BTreeMap;

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    MulCols(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    StandardizeCols(Var, Vec<f64>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    PairConcat(Var, Var),
    GroupWeightedSum(Var, Vec<f64>),
    PairSqDist(Var, Var),
    RowMin(Var, Vec<usize>),
    GroupLogSumExp(Var, Vec<usize>, usize),
    NllRows(Var, Vec<usize>),
    GaussPairLogDensity(Var, Var, Var),
    GaussRowLogDensity(Var, Var, Var),
    ClubContrast(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Named leaf handles produced by [`Graph::bind`].
pub type Bound = BTreeMap<String, Var>;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers every tensor of `params` as a leaf.
    pub fn bind(&mut self, params: &crate::nn::ParamSet, trainable: bool) -> Bound {
        params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    self.param(t.clone())
                } else {
                    self.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for bound leaves; leaves the loss does not reach get zeros.
    pub fn grads_of(&self, bound: &Bound) -> BTreeMap<String, Tensor> {
        bound
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    // ----- ops ---------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), false, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    /// `x [n, m] + b [m]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let m = xv.cols();
        assert_eq!(bv.len(), m, "bias length");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += *bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddBias(x, b), ng)
    }

    /// `x [n, m] * w [m]` broadcast over rows.
    pub fn mul_cols(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let m = xv.cols();
        assert_eq!(wv.len(), m, "column scale length");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, s) in row.iter_mut().zip(wv.data()) {
                *o *= *s;
            }
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(out, Op::MulCols(x, w), ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// Square root with a zero subgradient at the origin.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0).sqrt(), Op::Sqrt(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng)
    }

    /// Column means of `x [n, m]` as a `[1, m]` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; m];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += *v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![1, m], out), Op::MeanRows(x), ng)
    }

    /// Per-column z-score over the rows of `x [n, m]`:
    /// `(x - mean) / sqrt(var + eps)` with the biased batch variance.
    pub fn standardize_cols(&mut self, x: Var, eps: f64) -> Var {
        let (out, inv) = standardize_columns(self.value(x), eps);
        let ng = self.ng(x);
        self.push(out, Op::StandardizeCols(x, inv), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(m) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(m) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::LogSoftmaxRows(x), ng)
    }

    /// All pairs `[a_b ; c_m]` for `a [B, D]`, `c [M, E]`, row `b * M + m`.
    pub fn pair_concat(&mut self, a: Var, c: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(c));
        let (bn, d) = (av.rows(), av.cols());
        let (mn, e) = (cv.rows(), cv.cols());
        let mut out = Vec::with_capacity(bn * mn * (d + e));
        for b in 0..bn {
            for m in 0..mn {
                out.extend_from_slice(av.row(b));
                out.extend_from_slice(cv.row(m));
            }
        }
        let ng = self.ng(a) || self.ng(c);
        self.push(
            Tensor::new(vec![bn * mn, d + e], out),
            Op::PairConcat(a, c),
            ng,
        )
    }

    /// Collapses consecutive groups of `weights.len()` rows into their
    /// weighted sum. Each output entry sums its weighted terms in ascending
    /// order, so the result does not depend on the order of rows within a
    /// group.
    pub fn group_weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let xv = self.value(x);
        let g = weights.len();
        let (rows, m) = (xv.rows(), xv.cols());
        assert!(g > 0 && rows % g == 0, "group size {g} does not divide {rows} rows");
        let bn = rows / g;
        let mut out = vec![0.0; bn * m];
        let mut terms = vec![0.0; g];
        for b in 0..bn {
            for j in 0..m {
                for (r, t) in terms.iter_mut().enumerate() {
                    *t = weights[r] * xv.at(b * g + r, j);
                }
                terms.sort_by(f64::total_cmp);
                out[b * m + j] = terms.iter().sum();
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![bn, m], out),
            Op::GroupWeightedSum(x, weights),
            ng,
        )
    }

    /// Squared Euclidean distances between rows: `[n, D] x [m, D] -> [n, m]`.
    pub fn pair_sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "distance dimension mismatch");
        let (n, m) = (av.rows(), bv.rows());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ai = av.row(i);
            for j in 0..m {
                out[i * m + j] = ai
                    .iter()
                    .zip(bv.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![n, m], out), Op::PairSqDist(a, b), ng)
    }

    /// Row-wise minimum over the entries allowed by `mask` (`[n, m]`, all
    /// allowed when `None`). Ties resolve to the lowest column. Every row must
    /// allow at least one column.
    pub fn row_min(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        let mut arg = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut best: Option<(usize, f64)> = None;
            for (j, &v) in xv.row(i).iter().enumerate() {
                if mask.is_some_and(|mk| !mk[i * m + j]) {
                    continue;
                }
                if best.is_none_or(|(_, bv)| v < bv) {
                    best = Some((j, v));
                }
            }
            let (j, v) = best.expect("row_min: row with no admissible entry");
            arg.push(j);
            out.push(v);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, 1], out), Op::RowMin(x, arg), ng)
    }

    /// Per-group log-sum-exp over columns: `[n, K] -> [n, C]` where column
    /// `k` belongs to group `group_of[k]`.
    pub fn group_log_sum_exp(&mut self, x: Var, group_of: &[usize], groups: usize) -> Var {
        let xv = self.value(x);
        let (n, k) = (xv.rows(), xv.cols());
        assert_eq!(group_of.len(), k);
        let mut out = vec![0.0; n * groups];
        for i in 0..n {
            let row = xv.row(i);
            for g in 0..groups {
                let mx = (0..k)
                    .filter(|&j| group_of[j] == g)
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..k)
                    .filter(|&j| group_of[j] == g)
                    .map(|j| (row[j] - mx).exp())
                    .sum();
                out[i * groups + g] = mx + s.ln();
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![n, groups], out),
            Op::GroupLogSumExp(x, group_of.to_vec(), groups),
            ng,
        )
    }

    /// Mean negative log-likelihood `-(1/n) sum_i logp[i, labels[i]]`.
    pub fn nll_rows(&mut self, logp: Var, labels: &[usize]) -> Var {
        let lv = self.value(logp);
        assert_eq!(lv.rows(), labels.len());
        let n = labels.len() as f64;
        let s: f64 = labels.iter().enumerate().map(|(i, &y)| -lv.at(i, y)).sum::<f64>() / n;
        let ng = self.ng(logp);
        self.push(Tensor::scalar(s), Op::NllRows(logp, labels.to_vec()), ng)
    }

    /// `L[i, j] = log N(zc_j ; mu_i, exp(logvar_i))` for diagonal Gaussians.
    pub fn gauss_pair_log_density(&mut self, zc: Var, mu: Var, logvar: Var) -> Var {
        let (z, m, lv) = (self.value(zc), self.value(mu), self.value(logvar));
        let (n, d) = (z.rows(), z.cols());
        assert_eq!(m.shape(), lv.shape());
        assert_eq!(m.cols(), d);
        let nm = m.rows();
        let mut out = vec![0.0; nm * n];
        for i in 0..nm {
            let (mi, li) = (m.row(i), lv.row(i));
            let base: f64 = li.iter().map(|l| -0.5 * (LN_2PI + l)).sum();
            let inv: Vec<f64> = li.iter().map(|l| (-l).exp()).collect();
            for j in 0..n {
                let zj = z.row(j);
                let mut q = 0.0;
                for dd in 0..d {
                    let r = zj[dd] - mi[dd];
                    q += r * r * inv[dd];
                }
                out[i * n + j] = base - 0.5 * q;
            }
        }
        let ng = self.ng(zc) || self.ng(mu) || self.ng(logvar);
        self.push(
            Tensor::new(vec![nm, n], out),
            Op::GaussPairLogDensity(zc, mu, logvar),
            ng,
        )
    }

    /// Row-paired log-density `[n, 1]`, `out[i] = log N(zc_i ; mu_i, exp(logvar_i))`.
    pub fn gauss_row_log_density(&mut self, zc: Var, mu: Var, logvar: Var) -> Var {
        let (z, m, lv) = (self.value(zc), self.value(mu), self.value(logvar));
        assert_eq!(z.shape(), m.shape());
        assert_eq!(m.shape(), lv.shape());
        let n = z.rows();
        let out: Vec<f64> = (0..n)
            .map(|i| gauss_log_density(z.row(i), m.row(i), lv.row(i)))
            .collect();
        let ng = self.ng(zc) || self.ng(mu) || self.ng(logvar);
        self.push(
            Tensor::new(vec![n, 1], out),
            Op::GaussRowLogDensity(zc, mu, logvar),
            ng,
        )
    }

    /// Contrastive log-ratio of a square log-density matrix:
    /// `(1/N) sum_i [L_ii - (1/N) sum_j L_ij]`.
    ///
    /// Accumulated pairwise as `(L_ii - L_ij) + (L_jj - L_ji)`, which makes
    /// the value exactly zero whenever every row is identical.
    pub fn club_contrast(&mut self, l: Var) -> Var {
        let lv = self.value(l);
        let n = lv.rows();
        assert_eq!(lv.cols(), n, "club_contrast needs a square matrix");
        let mut acc = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += (lv.at(i, i) - lv.at(i, j)) + (lv.at(j, j) - lv.at(j, i));
            }
        }
        let v = acc / (n * n) as f64;
        let ng = self.ng(l);
        self.push(Tensor::scalar(v), Op::ClubContrast(l), ng)
    }

    /// 2-D convolution, NCHW input, square kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let (iv, wv) = (self.value(input), self.value(weight));
        let (batch, cin, h, w) = dims4(iv.shape());
        let (cout, cin2, k, k2) = dims4(wv.shape());
        assert_eq!(cin, cin2, "conv channel mismatch");
        assert_eq!(k, k2, "square kernels only");
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = im2col(iv.data(), &geom);
        let ckk = cin * k * k;
        let npix = batch * ho * wo;
        let mut om = vec![0.0; cout * npix];
        gemm(cout, ckk, npix, 1.0, wv.data(), false, &cols, false, 0.0, &mut om);
        let bv = self.value(bias).data();
        let mut out = vec![0.0; batch * cout * ho * wo];
        let hw = ho * wo;
        for co in 0..cout {
            let src = &om[co * npix..(co + 1) * npix];
            for b in 0..batch {
                let dst = &mut out[(b * cout + co) * hw..(b * cout + co + 1) * hw];
                for (d, s) in dst.iter_mut().zip(&src[b * hw..(b + 1) * hw]) {
                    *d = *s + bv[co];
                }
            }
        }
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        self.push(
            Tensor::new(vec![batch, cout, ho, wo], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            ng,
        )
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = dims4(xv.shape());
        let hw = (h * w) as f64;
        let out: Vec<f64> = xv
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().sum::<f64>() / hw)
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::new(vec![b, c], out), Op::GlobalAvgPool(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    // ----- backward ------------------------------------------------------

    /// Reverse pass from a scalar root.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), false, bv.data(), true, 0.0, &mut da);
                    self.acc(grads, *a, Tensor::new(av.shape().to_vec(), da));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, av.data(), true, g.data(), false, 0.0, &mut db);
                    self.acc(grads, *b, Tensor::new(bv.shape().to_vec(), db));
                }
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.ng(*b) {
                    let bv = self.value(*b);
                    let m = bv.len();
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += *r;
                        }
                    }
                    self.acc(grads, *b, Tensor::new(bv.shape().to_vec(), db));
                }
            }
            Op::MulCols(x, w) => {
                let wv = self.value(*w);
                let m = wv.len();
                if self.ng(*x) {
                    let mut dx = g.clone();
                    for row in dx.data_mut().chunks_mut(m) {
                        for (d, s) in row.iter_mut().zip(wv.data()) {
                            *d *= *s;
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; m];
                    for (gr, xr) in g.data().chunks(m).zip(self.value(*x).data().chunks(m)) {
                        for ((d, a), b) in dw.iter_mut().zip(gr).zip(xr) {
                            *d += a * b;
                        }
                    }
                    self.acc(grads, *w, Tensor::new(wv.shape().to_vec(), dw));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, Tensor::new(av.shape().to_vec(), d));
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, Tensor::new(bv.shape().to_vec(), d));
                }
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.map(|v| v * s)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, g.clone().reshape(shape));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gg, v)| if *v > 0.0 { *gg } else { 0.0 })
                    .collect();
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::Exp(x) => {
                let d = g.data().iter().zip(out.data()).map(|(a, b)| a * b).collect();
                self.acc(grads, *x, Tensor::new(out.shape().to_vec(), d));
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let d = g.data().iter().zip(xv.data()).map(|(a, b)| a / b).collect();
                self.acc(grads, *x, Tensor::new(out.shape().to_vec(), d));
            }
            Op::Sqrt(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(a, s)| if *s > 0.0 { a * 0.5 / s } else { 0.0 })
                    .collect();
                self.acc(grads, *x, Tensor::new(out.shape().to_vec(), d));
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(a, v)| if *v >= *lo && *v <= *hi { *a } else { 0.0 })
                    .collect();
                self.acc(grads, *x, Tensor::new(out.shape().to_vec(), d));
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, Tensor::full(xv.shape(), g.item()));
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, Tensor::full(xv.shape(), g.item() / xv.len() as f64));
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (n, m) = (xv.rows(), xv.cols());
                let mut d = Vec::with_capacity(n * m);
                for _ in 0..n {
                    d.extend(g.data().iter().map(|v| v / n as f64));
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::StandardizeCols(x, inv) => {
                let (n, m) = (out.rows(), out.cols());
                let mut mg = vec![0.0; m];
                let mut mgy = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        mg[j] += g.at(i, j);
                        mgy[j] += g.at(i, j) * out.at(i, j);
                    }
                }
                let mut d = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        let y = out.at(i, j);
                        d[i * m + j] = inv[j] * (g.at(i, j) - mg[j] / n as f64 - y * mgy[j] / n as f64);
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![n, m], d));
            }
            Op::SoftmaxRows(x) => {
                let m = out.cols();
                let mut d = vec![0.0; out.len()];
                for ((dr, yr), gr) in d.chunks_mut(m).zip(out.data().chunks(m)).zip(g.data().chunks(m)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                    for ((dd, y), gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *dd = y * (gg - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(out.shape().to_vec(), d));
            }
            Op::LogSoftmaxRows(x) => {
                let m = out.cols();
                let mut d = vec![0.0; out.len()];
                for ((dr, lr), gr) in d.chunks_mut(m).zip(out.data().chunks(m)).zip(g.data().chunks(m)) {
                    let gs: f64 = gr.iter().sum();
                    for ((dd, l), gg) in dr.iter_mut().zip(lr).zip(gr) {
                        *dd = gg - l.exp() * gs;
                    }
                }
                self.acc(grads, *x, Tensor::new(out.shape().to_vec(), d));
            }
            Op::PairConcat(a, c) => {
                let (av, cv) = (self.value(*a), self.value(*c));
                let (bn, d) = (av.rows(), av.cols());
                let (mn, e) = (cv.rows(), cv.cols());
                let w = d + e;
                let mut da = vec![0.0; bn * d];
                let mut dc = vec![0.0; mn * e];
                for b in 0..bn {
                    for m in 0..mn {
                        let row = &g.data()[(b * mn + m) * w..(b * mn + m + 1) * w];
                        for (x, y) in da[b * d..(b + 1) * d].iter_mut().zip(&row[..d]) {
                            *x += *y;
                        }
                        for (x, y) in dc[m * e..(m + 1) * e].iter_mut().zip(&row[d..]) {
                            *x += *y;
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(av.shape().to_vec(), da));
                self.acc(grads, *c, Tensor::new(cv.shape().to_vec(), dc));
            }
            Op::GroupWeightedSum(x, weights) => {
                let xv = self.value(*x);
                let gs = weights.len();
                let m = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    let (b, k) = (r / gs, r % gs);
                    for j in 0..m {
                        d[r * m + j] = weights[k] * g.data()[b * m + j];
                    }
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::PairSqDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, m, dim) = (av.rows(), bv.rows(), av.cols());
                let mut da = vec![0.0; n * dim];
                let mut db = vec![0.0; m * dim];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g.data()[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..dim {
                            let diff = 2.0 * gij * (av.at(i, k) - bv.at(j, k));
                            da[i * dim + k] += diff;
                            db[j * dim + k] -= diff;
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(av.shape().to_vec(), da));
                self.acc(grads, *b, Tensor::new(bv.shape().to_vec(), db));
            }
            Op::RowMin(x, arg) => {
                let xv = self.value(*x);
                let m = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (i, &j) in arg.iter().enumerate() {
                    d[i * m + j] = g.data()[i];
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::GroupLogSumExp(x, group_of, groups) => {
                let xv = self.value(*x);
                let k = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for i in 0..xv.rows() {
                    for (j, &grp) in group_of.iter().enumerate() {
                        let lse = out.at(i, grp);
                        d[i * k + j] = g.data()[i * groups + grp] * (xv.at(i, j) - lse).exp();
                    }
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::NllRows(x, labels) => {
                let xv = self.value(*x);
                let m = xv.cols();
                let n = labels.len() as f64;
                let mut d = vec![0.0; xv.len()];
                for (i, &y) in labels.iter().enumerate() {
                    d[i * m + y] = -g.item() / n;
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::GaussPairLogDensity(zc, mu, lv) => {
                let (z, m, l) = (self.value(*zc), self.value(*mu), self.value(*lv));
                let (n, d) = (z.rows(), z.cols());
                let nm = m.rows();
                let mut dz = vec![0.0; n * d];
                let mut dm = vec![0.0; nm * d];
                let mut dl = vec![0.0; nm * d];
                for i in 0..nm {
                    let (mi, li) = (m.row(i), l.row(i));
                    let inv: Vec<f64> = li.iter().map(|v| (-v).exp()).collect();
                    for j in 0..n {
                        let gij = g.data()[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let zj = z.row(j);
                        for k in 0..d {
                            let r = zj[k] - mi[k];
                            let t = r * inv[k];
                            dz[j * d + k] -= gij * t;
                            dm[i * d + k] += gij * t;
                            dl[i * d + k] += gij * (-0.5 + 0.5 * r * t);
                        }
                    }
                }
                self.acc(grads, *zc, Tensor::new(z.shape().to_vec(), dz));
                self.acc(grads, *mu, Tensor::new(m.shape().to_vec(), dm));
                self.acc(grads, *lv, Tensor::new(l.shape().to_vec(), dl));
            }
            Op::GaussRowLogDensity(zc, mu, lv) => {
                let (z, m, l) = (self.value(*zc), self.value(*mu), self.value(*lv));
                let d = z.cols();
                let mut dz = vec![0.0; z.len()];
                let mut dm = vec![0.0; z.len()];
                let mut dl = vec![0.0; z.len()];
                for i in 0..z.rows() {
                    let gi = g.data()[i];
                    for k in 0..d {
                        let idx = i * d + k;
                        let r = z.data()[idx] - m.data()[idx];
                        let t = r * (-l.data()[idx]).exp();
                        dz[idx] = -gi * t;
                        dm[idx] = gi * t;
                        dl[idx] = gi * (-0.5 + 0.5 * r * t);
                    }
                }
                self.acc(grads, *zc, Tensor::new(z.shape().to_vec(), dz));
                self.acc(grads, *mu, Tensor::new(m.shape().to_vec(), dm));
                self.acc(grads, *lv, Tensor::new(l.shape().to_vec(), dl));
            }
            Op::ClubContrast(l) => {
                let lv = self.value(*l);
                let n = lv.rows();
                let nn = (n * n) as f64;
                let gi = g.item();
                let mut d = vec![-gi / nn; n * n];
                for i in 0..n {
                    d[i * n + i] += gi / n as f64;
                }
                self.acc(grads, *l, Tensor::new(vec![n, n], d));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let ConvGeom {
                    batch,
                    cin,
                    cout,
                    k,
                    ho,
                    wo,
                    ..
                } = *geom;
                let hw = ho * wo;
                let npix = batch * hw;
                let ckk = cin * k * k;
                let mut gm = vec![0.0; cout * npix];
                for b in 0..batch {
                    for co in 0..cout {
                        let src = &g.data()[(b * cout + co) * hw..(b * cout + co + 1) * hw];
                        gm[co * npix + b * hw..co * npix + (b + 1) * hw].copy_from_slice(src);
                    }
                }
                if self.ng(*weight) {
                    let mut dw = vec![0.0; cout * ckk];
                    gemm(cout, npix, ckk, 1.0, &gm, false, cols, true, 0.0, &mut dw);
                    self.acc(grads, *weight, Tensor::new(self.value(*weight).shape().to_vec(), dw));
                }
                if self.ng(*bias) {
                    let db: Vec<f64> = gm.chunks(npix).map(|r| r.iter().sum()).collect();
                    self.acc(grads, *bias, Tensor::new(self.value(*bias).shape().to_vec(), db));
                }
                if self.ng(*input) {
                    let mut dcols = vec![0.0; ckk * npix];
                    let wv = self.value(*weight);
                    gemm(ckk, cout, npix, 1.0, wv.data(), true, &gm, false, 0.0, &mut dcols);
                    let di = col2im(&dcols, geom);
                    self.acc(grads, *input, Tensor::new(self.value(*input).shape().to_vec(), di));
                }
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let (_, _, h, w) = dims4(xv.shape());
                let hw = h * w;
                let mut d = vec![0.0; xv.len()];
                for (ch, gv) in d.chunks_mut(hw).zip(g.data()) {
                    ch.fill(gv / hw as f64);
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
        }
    }
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected a 4-d tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npix = g.batch * g.ho * g.wo;
    let mut cols = vec![0.0; g.cin * g.k * g.k * npix];
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let row = &mut cols[r * npix..(r + 1) * npix];
                for b in 0..g.batch {
                    let plane = &x[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (b * g.ho + oy) * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                row[base + ox] = plane[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npix = g.batch * g.ho * g.wo;
    let mut x = vec![0.0; g.batch * g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let row = &cols[r * npix..(r + 1) * npix];
                for b in 0..g.batch {
                    let off = (b * g.cin + c) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (b * g.ho + oy) * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                x[off + iy as usize * g.w + ix as usize] += row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Per-column mean and `1 / sqrt(var + eps)` of `x [n, m]`.
pub fn column_stats(x: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = (x.rows(), x.cols());
    let mut mean = vec![0.0; m];
    for i in 0..n {
        for (a, v) in mean.iter_mut().zip(x.row(i)) {
            *a += *v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= n as f64);
    let mut var = vec![0.0; m];
    for i in 0..n {
        for ((a, v), mu) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *a += (v - mu) * (v - mu);
        }
    }
    let inv = var.iter().map(|v| 1.0 / (v / n as f64 + eps).sqrt()).collect();
    (mean, inv)
}

/// `(x - mean) * inv` column by column.
pub fn apply_column_stats(x: &Tensor, mean: &[f64], inv: &[f64]) -> Tensor {
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(x.cols().max(1)) {
        for ((o, mu), s) in row.iter_mut().zip(mean).zip(inv) {
            *o = (*o - mu) * s;
        }
    }
    out
}

/// Column z-scores of `x` and the per-column `1 / sqrt(var + eps)`.
pub fn standardize_columns(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (mean, inv) = column_stats(x, eps);
    (apply_column_stats(x, &mean, &inv), inv)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Diagonal Gaussian log-density of `z` under `(mu, exp(logvar))`.
pub(crate) fn gauss_log_density(z: &[f64], mu: &[f64], logvar: &[f64]) -> f64 {
    z.iter()
        .zip(mu)
        .zip(logvar)
        .map(|((z, m), l)| -0.5 * (LN_2PI + l) - (z - m) * (z - m) / (2.0 * l.exp()))
        .sum()
}
