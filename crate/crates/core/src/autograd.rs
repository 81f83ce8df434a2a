//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for every node that depends on a
//! trainable leaf. Parameters are bound by name so a single graph can reuse
//! one leaf across many samples of a batch.

use std::collections::{BTreeMap, BTreeSet};

use crate::tensor::Mat;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// Gaussian-error linear unit, tanh approximation.
    #[default]
    Gelu,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gelu" => Some(Activation::Gelu),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Mat),
    Scale(Var, f64),
    MulCol(Var, Var),
    Act(Var, Activation),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Mat,
        count: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    SumAll(Var),
    MeanRows(Var),
    BlockRowSum(Var, usize),
    GaussianBasis {
        dist: Vec<f64>,
        mu: Var,
        sigma: Var,
    },
    L2Normalize(Var, Vec<f64>),
    TopKSoftmax(Var),
    Mse(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of every trainable named parameter that was reached.
    pub fn params(&self) -> BTreeMap<String, Mat> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    pub fn into_params(mut self) -> BTreeMap<String, Mat> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter_map(|(name, v)| self.grads[v.0].take().map(|g| (name, g)))
            .collect()
    }
}

/// Operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
    frozen_prefixes: Vec<String>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters whose name starts with `prefix` are bound as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen_prefixes.push(prefix.into());
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

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Unnamed trainable leaf.
    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Binds a named parameter, reusing the existing leaf on repeat calls.
    pub fn param(&mut self, name: &str, value: &Mat) -> Var {
        if let Some(v) = self.params.get(name) {
            return *v;
        }
        let frozen = self.frozen.contains(name)
            || self.frozen_prefixes.iter().any(|p| name.starts_with(p));
        let v = self.push(value.clone(), Op::Leaf, !frozen);
        if frozen {
            self.frozen.insert(name.to_string());
        }
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Sum of a list of same-shape nodes, left to right.
    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n of nothing");
        vars[1..].iter().fold(vars[0], |acc, &v| self.add(acc, v))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, c), "add_row shape mismatch");
        let mut v = self.value(a).clone();
        let rv = self.value(row).row(0).to_vec();
        for i in 0..r {
            for (x, b) in v.row_mut(i).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, m: Mat) -> Var {
        let v = self.value(a).zip_map(&m, |x, y| x * y);
        let rg = self.rg(&[a]);
        self.push(v, Op::MulConst(a, m), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Multiplies row `i` of `a` by `w[i]`, where `w` is `rows x 1`.
    pub fn mul_col(&mut self, a: Var, w: Var) -> Var {
        let (r, _) = self.value(a).shape();
        assert_eq!(self.value(w).shape(), (r, 1), "mul_col shape mismatch");
        let mut v = self.value(a).clone();
        for i in 0..r {
            let s = self.value(w).get(i, 0);
            for x in v.row_mut(i) {
                *x *= s;
            }
        }
        let rg = self.rg(&[a, w]);
        self.push(v, Op::MulCol(a, w), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let v = self.value(a).map(|x| act.apply(x));
        let rg = self.rg(&[a]);
        self.push(v, Op::Act(a, act), rg)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked
    /// out (probability exactly zero).
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut out = Mat::zeros(r, c);
        for i in 0..r {
            let lim = if causal { (i + 1).min(c) } else { c };
            softmax_into(&x.row(i)[..lim], &mut out.row_mut(i)[..lim]);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Mean cross-entropy of `logits` rows against `targets`; rows whose
    /// target is `None` are skipped. Returns a `1 x 1` node.
    ///
    /// Panics if no row carries a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let x = self.value(logits);
        let (r, c) = x.shape();
        assert_eq!(targets.len(), r, "cross_entropy target count mismatch");
        let count = targets.iter().filter(|t| t.is_some()).count();
        assert!(count > 0, "cross_entropy with no targets");
        let mut probs = Mat::zeros(r, c);
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            assert!(t < c, "target id out of range");
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total -= (row[t] - m) - lse;
            softmax_into(row, probs.row_mut(i));
        }
        let loss = Mat::scalar(total / count as f64);
        let rg = self.rg(&[logits]);
        self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
            rg,
        )
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut xhat = Mat::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (h, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut out = xhat.clone();
        for i in 0..r {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = *o * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut out = Mat::zeros(x.rows(), len);
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows(), "slice_rows out of range");
        let c = x.cols();
        let out = Mat::from_vec(len, c, x.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Mat::zeros(r, total);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), r, "concat_cols row mismatch");
            for i in 0..r {
                out.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), c, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let rg = self.rg(parts);
        self.push(Mat::from_vec(rows, c, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Output row `o` is row `idx[o]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select_rows(idx);
        let rg = self.rg(&[a]);
        self.push(out, Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Inverse of [`Graph::gather_rows`]: row `o` of `a` is added into row
    /// `idx[o]` of a zero `total_rows x c` matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], total_rows: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), idx.len(), "scatter_rows index count mismatch");
        let mut out = Mat::zeros(total_rows, x.cols());
        for (o, &i) in idx.iter().enumerate() {
            for (d, s) in out.row_mut(i).iter_mut().zip(x.row(o)) {
                *d += s;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::ScatterRows(a, idx.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Mat::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::SumAll(a), rg)
    }

    /// Column means, `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut out = Mat::zeros(1, c);
        for i in 0..r {
            for (o, v) in out.row_mut(0).iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let out = out.scale(1.0 / r as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Sums consecutive groups of `group` rows: input `(n*group) x k`,
    /// output `n x k`.
    pub fn block_row_sum(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        assert!(group > 0 && r % group == 0, "block_row_sum group mismatch");
        let n = r / group;
        let mut out = Mat::zeros(n, c);
        for i in 0..n {
            for j in 0..group {
                let src = x.row(i * group + j);
                for (o, v) in out.row_mut(i).iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::BlockRowSum(a, group), rg)
    }

    /// Gaussian basis expansion of the distances `dist` into a
    /// `dist.len() x K` matrix, with centers `mu` and scales `sigma` (`1 x K`):
    /// `sign / (sqrt(2 pi) |sigma|) * exp(-((d - mu) / |sigma|)^2 / 2)`.
    pub fn gaussian_basis(&mut self, dist: &[f64], mu: Var, sigma: Var, sign: f64) -> Var {
        let mu_v = self.value(mu);
        let sig_v = self.value(sigma);
        let k = mu_v.cols();
        assert_eq!(sig_v.shape(), (1, k), "gaussian_basis sigma shape");
        let mut out = Mat::zeros(dist.len(), k);
        for (r, &d) in dist.iter().enumerate() {
            let row = out.row_mut(r);
            for (j, o) in row.iter_mut().enumerate() {
                let a = sig_v.get(0, j).abs();
                let z = (d - mu_v.get(0, j)) / a;
                *o = sign * INV_SQRT_2PI / a * (-0.5 * z * z).exp();
            }
        }
        let rg = self.rg(&[mu, sigma]);
        self.push(
            out,
            Op::GaussianBasis {
                dist: dist.to_vec(),
                mu,
                sigma,
            },
            rg,
        )
    }

    /// Scales every row to unit Euclidean norm (norm floored at `eps`).
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for v in out.row_mut(i) {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::L2Normalize(a, norms), rg)
    }

    /// Per row: keep the `k` largest entries (ties to the lowest column),
    /// softmax over them, zero elsewhere.
    pub fn topk_softmax(&mut self, a: Var, k: usize) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        assert!(k >= 1 && k <= c, "top-k out of range");
        let mut out = Mat::zeros(r, c);
        for i in 0..r {
            let row = x.row(i);
            let keep = topk_indices(row, k);
            let vals: Vec<f64> = keep.iter().map(|&j| row[j]).collect();
            let mut sm = vec![0.0; k];
            softmax_into(&vals, &mut sm);
            for (&j, p) in keep.iter().zip(sm) {
                out.set(i, j, p);
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::TopKSoftmax(a), rg)
    }

    /// Mean squared difference against a constant target, `1 x 1`.
    pub fn mse(&mut self, a: Var, target: Mat) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), target.shape(), "mse shape mismatch");
        let n = x.len() as f64;
        let s = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(Mat::scalar(s / n), Op::Mse(a, target), rg)
    }

    /// Runs reverse accumulation from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Mat::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, delta: Mat| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let need = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(*a) {
                    acc(*a, g.matmul_nt(self.value(*b)));
                }
                if need(*b) {
                    acc(*b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if need(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if need(*b) {
                    acc(*b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if need(*row) {
                    acc(*row, column_sums(g));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if need(*b) {
                    acc(*b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if need(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::MulConst(a, m) => acc(*a, g.zip_map(m, |x, y| x * y)),
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::MulCol(a, w) => {
                let av = self.value(*a);
                let wv = self.value(*w);
                if need(*a) {
                    let mut d = g.clone();
                    for i in 0..d.rows() {
                        let s = wv.get(i, 0);
                        for x in d.row_mut(i) {
                            *x *= s;
                        }
                    }
                    acc(*a, d);
                }
                if need(*w) {
                    let mut d = Mat::zeros(wv.rows(), 1);
                    for i in 0..d.rows() {
                        d.set(i, 0, crate::tensor::dot(g.row(i), av.row(i)));
                    }
                    acc(*w, d);
                }
            }
            Op::Act(a, act) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, |gv, xv| gv * act.derivative(xv)));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let s = crate::tensor::dot(yr, gr);
                    for ((o, &yv), &gv) in d.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - s);
                    }
                }
                acc(*a, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let scale = g.get(0, 0) / *count as f64;
                let mut d = Mat::zeros(probs.rows(), probs.cols());
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for (o, &p) in d.row_mut(i).iter_mut().zip(probs.row(i)) {
                        *o = p * scale;
                    }
                    let cur = d.get(i, t);
                    d.set(i, t, cur - scale);
                }
                acc(*logits, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).row(0).to_vec();
                let (r, c) = xhat.shape();
                if need(*beta) {
                    acc(*beta, column_sums(g));
                }
                if need(*gamma) {
                    acc(*gamma, column_sums(&g.zip_map(xhat, |a, b| a * b)));
                }
                if need(*x) {
                    let mut d = Mat::zeros(r, c);
                    for (i, &istd) in inv_std.iter().enumerate().take(r) {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        let gh: Vec<f64> = gr.iter().zip(&gam).map(|(a, b)| a * b).collect();
                        let mean_gh = gh.iter().sum::<f64>() / c as f64;
                        let mean_ghh =
                            gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for ((o, &ghv), &h) in d.row_mut(i).iter_mut().zip(&gh).zip(hr) {
                            *o = istd * (ghv - mean_gh - h * mean_ghh);
                        }
                    }
                    acc(*x, d);
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Mat::zeros(r, c);
                let len = g.cols();
                for i in 0..r {
                    d.row_mut(i)[*start..*start + len].copy_from_slice(g.row(i));
                }
                acc(*a, d);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Mat::zeros(r, c);
                d.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if need(*p) {
                        let mut d = Mat::zeros(g.rows(), pc);
                        for i in 0..g.rows() {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + pc]);
                        }
                        acc(*p, d);
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for p in parts {
                    let pr = self.value(*p).rows();
                    if need(*p) {
                        let d = Mat::from_vec(pr, c, g.data()[off * c..(off + pr) * c].to_vec());
                        acc(*p, d);
                    }
                    off += pr;
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Mat::zeros(r, c);
                for (o, &i) in idx.iter().enumerate() {
                    for (x, v) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                        *x += v;
                    }
                }
                acc(*a, d);
            }
            Op::ScatterRows(a, idx) => acc(*a, g.select_rows(idx)),
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, g.clone().reshaped(r, c));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Mat::filled(r, c, g.get(0, 0)));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Mat::zeros(r, c);
                for i in 0..r {
                    for (x, v) in d.row_mut(i).iter_mut().zip(g.row(0)) {
                        *x = v / r as f64;
                    }
                }
                acc(*a, d);
            }
            Op::BlockRowSum(a, group) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Mat::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i).copy_from_slice(g.row(i / group));
                }
                acc(*a, d);
            }
            Op::GaussianBasis { dist, mu, sigma } => {
                let psi = &node.value;
                let mu_v = self.value(*mu);
                let sig_v = self.value(*sigma);
                let k = mu_v.cols();
                let mut gmu = Mat::zeros(1, k);
                let mut gsig = Mat::zeros(1, k);
                for (r, &d) in dist.iter().enumerate() {
                    for j in 0..k {
                        let s = sig_v.get(0, j);
                        let a = s.abs();
                        let z = (d - mu_v.get(0, j)) / a;
                        let gp = g.get(r, j) * psi.get(r, j);
                        gmu.data_mut()[j] += gp * z / a;
                        gsig.data_mut()[j] += gp * (z * z - 1.0) / a * s.signum();
                    }
                }
                if need(*mu) {
                    acc(*mu, gmu);
                }
                if need(*sigma) {
                    acc(*sigma, gsig);
                }
            }
            Op::L2Normalize(a, norms) => {
                let y = &node.value;
                let mut d = Mat::zeros(y.rows(), y.cols());
                for (i, &norm) in norms.iter().enumerate().take(y.rows()) {
                    let s = crate::tensor::dot(g.row(i), y.row(i));
                    for ((o, &gv), &yv) in d.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = (gv - yv * s) / norm;
                    }
                }
                acc(*a, d);
            }
            Op::TopKSoftmax(a) => {
                let y = &node.value;
                let mut d = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let s = crate::tensor::dot(y.row(i), g.row(i));
                    for ((o, &yv), &gv) in d.row_mut(i).iter_mut().zip(y.row(i)).zip(g.row(i)) {
                        if yv != 0.0 {
                            *o = yv * (gv - s);
                        }
                    }
                }
                acc(*a, d);
            }
            Op::Mse(a, target) => {
                let x = self.value(*a);
                let s = 2.0 * g.get(0, 0) / x.len() as f64;
                acc(*a, x.zip_map(target, |p, t| s * (p - t)));
            }
        }
    }
}

fn column_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

/// Numerically stable softmax of `x` into `out`.
pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Indices of the `k` largest values; equal values rank by lower index.
pub(crate) fn topk_indices(x: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of one scalar function of a single leaf.
    fn check(x0: Mat, f: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = f(&mut g, x);
        let grad = g.backward(y).get(x).cloned().unwrap();
        let eps = 1e-6;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= eps;
            let eval = |m: Mat| {
                let mut g = Graph::new();
                let x = g.leaf(m);
                let y = f(&mut g, x);
                g.scalar(y)
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * eps);
            let an = grad.data()[i];
            let denom = an.abs().max(fd.abs()).max(1e-7);
            assert!(
                (an - fd).abs() / denom < 1e-5,
                "entry {i}: analytic {an} vs numeric {fd}"
            );
        }
    }

    fn rand_mat(r: usize, c: usize, seed: u64) -> Mat {
        Mat::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_and_softmax_gradients() {
        let w = rand_mat(4, 3, 1);
        check(rand_mat(3, 4, 2), |g, x| {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv);
            let s = g.softmax_rows(y, false);
            let t = g.matmul(s, x);
            let t = g.matmul_nt(t, x);
            let t = g.activation(t, Activation::Gelu);
            g.sum_all(t)
        });
    }

    #[test]
    fn causal_softmax_gradient() {
        check(rand_mat(4, 4, 3), |g, x| {
            let s = g.softmax_rows(x, true);
            let sq = g.mul(s, x);
            g.sum_all(sq)
        });
    }

    #[test]
    fn layer_norm_gradient() {
        let gamma = rand_mat(1, 5, 4);
        check(rand_mat(3, 5, 5), |g, x| {
            let ga = g.constant(gamma.clone());
            let be = g.constant(Mat::zeros(1, 5));
            let y = g.layer_norm(x, ga, be, 1e-5);
            let w = g.constant(rand_mat(5, 1, 6));
            let z = g.matmul(y, w);
            let z = g.activation(z, Activation::Tanh);
            g.sum_all(z)
        });
    }

    #[test]
    fn cross_entropy_and_topk_gradients() {
        check(rand_mat(3, 4, 7), |g, x| {
            g.cross_entropy(x, vec![Some(1), None, Some(3)])
        });
        check(rand_mat(3, 4, 8), |g, x| {
            let t = g.topk_softmax(x, 2);
            let w = g.constant(rand_mat(3, 4, 9));
            let p = g.mul(t, w);
            g.sum_all(p)
        });
    }

    #[test]
    fn gaussian_basis_gradient() {
        let dist = vec![0.0, 1.3, 2.7, 4.0];
        let mu = Mat::row_vector(&[0.5, 2.0, 3.5]);
        check(Mat::row_vector(&[0.8, -1.1, 1.7]), |g, s| {
            let m = g.constant(mu.clone());
            let p = g.gaussian_basis(&dist, m, s, -1.0);
            let q = g.mul(p, p);
            g.sum_all(q)
        });
        check(mu.clone(), |g, m| {
            let s = g.constant(Mat::row_vector(&[0.8, 1.1, 1.7]));
            let p = g.gaussian_basis(&dist, m, s, -1.0);
            let q = g.mul(p, p);
            g.sum_all(q)
        });
    }

    #[test]
    fn structural_ops_gradients() {
        check(rand_mat(6, 2, 10), |g, x| {
            let b = g.block_row_sum(x, 3);
            let r = g.reshape(x, 2, 6);
            let t = g.transpose(r);
            let n = g.l2_normalize_rows(t, 1e-12);
            let m = g.mean_rows(n);
            let c = g.concat_cols(&[b, b]);
            let s1 = g.sum_all(m);
            let c2 = g.mul(c, c);
            let s2 = g.sum_all(c2);
            g.add(s1, s2)
        });
        check(rand_mat(4, 3, 11), |g, x| {
            let a = g.gather_rows(x, &[2, 0, 2]);
            let w = g.constant(Mat::from_vec(3, 1, vec![0.5, -1.0, 2.0]));
            let a = g.mul_col(a, w);
            let s = g.scatter_rows(a, &[1, 3, 0], 5);
            let top = g.slice_rows(s, 1, 3);
            let sl = g.slice_cols(top, 1, 2);
            let sq = g.mul(sl, sl);
            let mse = g.mse(x, Mat::filled(4, 3, 0.3));
            let t = g.sum_all(sq);
            g.add(t, mse)
        });
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        assert_eq!(topk_indices(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
        assert_eq!(topk_indices(&[0.0, 0.0, 0.0], 1), vec![0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut g = Graph::new();
        g.freeze_prefix("enc.");
        let a = g.param("enc.w", &Mat::scalar(2.0));
        let b = g.param("lm.w", &Mat::scalar(3.0));
        let again = g.param("lm.w", &Mat::scalar(9.0));
        assert_eq!(b, again);
        let y = g.mul(a, b);
        let grads = g.backward(y).into_params();
        assert!(!grads.contains_key("enc.w"));
        assert_eq!(grads["lm.w"].get(0, 0), 2.0);
    }
}
