//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value plus whatever it needs for the backward pass. Parameters live in a
//! [`ParamStore`] and enter a graph as leaves; [`Graph::backward`] returns one
//! gradient per trainable parameter that was used.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, shaped parameter tensors plus a per-tensor freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
    frozen: Vec<bool>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            frozen: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix<T>)> {
        self.values
            .iter()
            .enumerate()
            .map(move |(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }
}

/// Gradients indexed by [`ParamId`]; `None` for unused or frozen parameters.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Row ranges describing how a stacked matrix splits into independent groups.
///
/// `offsets` has one more entry than there are groups; group `g` spans rows
/// `offsets[g]..offsets[g + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Groups {
    offsets: Vec<usize>,
}

impl Groups {
    /// `count` groups of `size` rows each.
    pub fn uniform(count: usize, size: usize) -> Self {
        Self {
            offsets: (0..=count).map(|g| g * size).collect(),
        }
    }

    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        for len in lengths {
            offsets.push(offsets.last().copied().unwrap_or(0) + len);
        }
        Self { offsets }
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_rows(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    #[inline]
    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    /// Index of the last row of every group.
    pub fn last_rows(&self) -> Vec<usize> {
        (0..self.count()).map(|g| self.offsets[g + 1] - 1).collect()
    }
}

/// Multi-head scaled dot-product attention between grouped query and
/// key/value row blocks: rows of query group `g` attend only to rows of
/// key/value group `g`.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub query_groups: Groups,
    pub kv_groups: Groups,
    pub heads: usize,
    /// Query row `i` of a group may only attend to key rows `j <= i`.
    pub causal: bool,
}

#[derive(Debug)]
struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    spec: AttentionSpec,
    probs: Vec<T>,
    /// Start of each (group, head) probability block inside `probs`.
    prob_offsets: Vec<usize>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Mask {
        x: Var,
        mask: Vec<T>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    GroupMean {
        x: Var,
        groups: Groups,
    },
    Attention(Box<AttentionCache<T>>),
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix<T>,
    },
    WeightedSum(Vec<(Var, T)>),
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

const LAYER_NORM_EPS: f64 = 1e-12;

/// Recording tape.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// The value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Brings a parameter onto the tape. Frozen parameters behave as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let trainable = !store.is_frozen(id);
        self.push(store.get(id).clone(), Op::Param(id), trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1×cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a single row");
        let mut value = self.value(x).clone();
        assert_eq!(value.cols(), b.cols(), "bias width mismatch");
        let b = b.as_slice().to_vec();
        for r in 0..value.rows() {
            for (o, &bv) in value.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(value, Op::AddRow(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// `Σ wᵢ·xᵢ` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        assert!(!terms.is_empty(), "empty weighted sum");
        let shape = self.value(terms[0].0).shape();
        let mut value = Matrix::zeros(shape.0, shape.1);
        for &(v, w) in terms {
            let x = self.value(v);
            assert_eq!(x.shape(), shape, "weighted sum shape mismatch");
            for (o, &xv) in value.as_mut_slice().iter_mut().zip(x.as_slice()) {
                *o += w * xv;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.requires_grad(v));
        self.push(value, Op::WeightedSum(terms.to_vec()), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| gelu_fwd(v).0);
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Row-wise layer normalisation with `1×cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        assert_eq!(g.len(), cols, "layer norm gain width");
        let n = T::of(cols as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut value = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            let out = value.row_mut(r);
            for j in 0..cols {
                out[j] = xhat.get(r, j) * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            value,
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

    /// Inverted dropout with drop probability `p`; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.mask(x, mask)
    }

    /// Element-wise product with a fixed mask.
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.len(), "mask length");
        let data = xv
            .as_slice()
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        let value = Matrix::from_vec(xv.rows(), xv.cols(), data);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mask { x, mask }, rg)
    }

    /// Row gather; backward scatters gradients back (embedding lookup).
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let value = self.value(x).select_rows(&idx);
        let rg = self.rg(&[x]);
        self.push(value, Op::Gather { x, idx }, rg)
    }

    /// Mean of the rows of each group, one output row per group.
    pub fn group_mean(&mut self, x: Var, groups: Groups) -> Var {
        let xv = self.value(x);
        assert_eq!(groups.total_rows(), xv.rows(), "group rows mismatch");
        let cols = xv.cols();
        let mut value = Matrix::zeros(groups.count(), cols);
        for g in 0..groups.count() {
            let range = groups.range(g);
            assert!(!range.is_empty(), "empty group in group_mean");
            let inv = T::one() / T::of(range.len() as f64);
            let out = value.row_mut(g);
            for r in range {
                for (o, &v) in out.iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::GroupMean { x, groups }, rg)
    }

    /// Scales every row to unit L2 norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = crate::tensor::l2_norm(xv.row(r));
            norms.push(n);
            if n > T::zero() {
                for v in value.row_mut(r) {
                    *v /= n;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::NormalizeRows { x, norms }, rg)
    }

    /// Sum over rows of `-log softmax(logits[r])[targets[r]]`, as a `1×1` node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per logit row");
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            assert!(t < row.len(), "target out of range");
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            let p = probs.row_mut(r);
            for (o, &v) in p.iter_mut().zip(row) {
                *o = (v - max).exp();
                z += *o;
            }
            for o in p.iter_mut() {
                *o /= z;
            }
            total += max + z.ln() - row[t];
        }
        let rg = self.rg(&[logits]);
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            },
            rg,
        )
    }

    /// Grouped multi-head attention over already-projected `q`, `k`, `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(kv.cols(), d, "key width");
        assert_eq!(vv.cols(), d, "value width");
        assert_eq!(kv.rows(), vv.rows(), "key/value rows");
        assert_eq!(spec.query_groups.count(), spec.kv_groups.count(), "group count");
        assert_eq!(spec.query_groups.total_rows(), qv.rows(), "query rows");
        assert_eq!(spec.kv_groups.total_rows(), kv.rows(), "key rows");
        assert!(spec.heads > 0 && d % spec.heads == 0, "heads must divide width");
        let dh = d / spec.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();

        let mut prob_offsets = Vec::new();
        let mut total = 0;
        for g in 0..spec.query_groups.count() {
            let nq = spec.query_groups.range(g).len();
            let nk = spec.kv_groups.range(g).len();
            if spec.causal {
                assert_eq!(nq, nk, "causal attention needs square groups");
            }
            for _ in 0..spec.heads {
                prob_offsets.push(total);
                total += nq * nk;
            }
        }
        let mut probs = vec![T::zero(); total];
        let mut out = Matrix::zeros(qv.rows(), d);
        let mut scores = Vec::new();
        for g in 0..spec.query_groups.count() {
            let qr = spec.query_groups.range(g);
            let kr = spec.kv_groups.range(g);
            let nk = kr.len();
            for h in 0..spec.heads {
                let cs = h * dh;
                let base = prob_offsets[g * spec.heads + h];
                for (i, qi) in qr.clone().enumerate() {
                    let qrow = &qv.row(qi)[cs..cs + dh];
                    let allowed = if spec.causal { i + 1 } else { nk };
                    scores.clear();
                    let mut max = T::neg_infinity();
                    for kj in kr.start..kr.start + allowed {
                        let s = crate::tensor::dot(qrow, &kv.row(kj)[cs..cs + dh]) * scale;
                        max = max.max(s);
                        scores.push(s);
                    }
                    let mut z = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let prow = &mut probs[base + i * nk..base + (i + 1) * nk];
                    let orow = &mut out.row_mut(qi)[cs..cs + dh];
                    for (j, &s) in scores.iter().enumerate() {
                        let p = s / z;
                        prow[j] = p;
                        let vrow = &vv.row(kr.start + j)[cs..cs + dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            out,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                spec,
                probs,
                prob_offsets,
            })),
            rg,
        )
    }

    /// Back-propagates from `root` (seeded with ones) and collects parameter
    /// gradients.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = self.value(root).shape();
        grads[root.0] = Some(Matrix::filled(r, c, T::one()));
        let mut param_grads: Vec<Option<Matrix<T>>> = Vec::new();

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if param_grads.len() <= id.0 {
                        param_grads.resize_with(id.0 + 1, || None);
                    }
                    match &mut param_grads[id.0] {
                        Some(acc) => acc.add_assign(&dy),
                        slot => *slot = Some(dy),
                    }
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let g = self.grad_slot(&mut grads, *a);
                        gemm_nt(&dy, self.value(*b), g);
                    }
                    if self.requires_grad(*b) {
                        let g = self.grad_slot(&mut grads, *b);
                        gemm_tn(self.value(*a), &dy, g);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.requires_grad(*a) {
                        let g = self.grad_slot(&mut grads, *a);
                        gemm_nn(&dy, self.value(*b), g);
                    }
                    if self.requires_grad(*b) {
                        let g = self.grad_slot(&mut grads, *b);
                        gemm_tn(&dy, self.value(*a), g);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.requires_grad(v) {
                            self.grad_slot(&mut grads, v).add_assign(&dy);
                        }
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.requires_grad(*bias) {
                        let g = self.grad_slot(&mut grads, *bias);
                        for r in 0..dy.rows() {
                            for (o, &d) in g.as_mut_slice().iter_mut().zip(dy.row(r)) {
                                *o += d;
                            }
                        }
                    }
                    if self.requires_grad(*x) {
                        self.grad_slot(&mut grads, *x).add_assign(&dy);
                    }
                }
                Op::Scale(x, s) => {
                    if self.requires_grad(*x) {
                        let g = self.grad_slot(&mut grads, *x);
                        for (o, &d) in g.as_mut_slice().iter_mut().zip(dy.as_slice()) {
                            *o += d * *s;
                        }
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        if self.requires_grad(v) {
                            let g = self.grad_slot(&mut grads, v);
                            for (o, &d) in g.as_mut_slice().iter_mut().zip(dy.as_slice()) {
                                *o += d * w;
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).as_slice().to_vec();
                    let g = self.grad_slot(&mut grads, *x);
                    for ((o, &d), &xi) in g.as_mut_slice().iter_mut().zip(dy.as_slice()).zip(&xv) {
                        *o += d * gelu_fwd(xi).1;
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let cols = xhat.cols();
                    if self.requires_grad(*gamma) {
                        let g = self.grad_slot(&mut grads, *gamma);
                        for r in 0..dy.rows() {
                            for j in 0..cols {
                                g.as_mut_slice()[j] += dy.get(r, j) * xhat.get(r, j);
                            }
                        }
                    }
                    if self.requires_grad(*beta) {
                        let g = self.grad_slot(&mut grads, *beta);
                        for r in 0..dy.rows() {
                            for (o, &d) in g.as_mut_slice().iter_mut().zip(dy.row(r)) {
                                *o += d;
                            }
                        }
                    }
                    if self.requires_grad(*x) {
                        let gamma_v = self.value(*gamma).as_slice().to_vec();
                        let n = T::of(cols as f64);
                        let g = self.grad_slot(&mut grads, *x);
                        let mut dxhat = vec![T::zero(); cols];
                        for r in 0..dy.rows() {
                            let mut mean_d = T::zero();
                            let mut mean_dx = T::zero();
                            for j in 0..cols {
                                dxhat[j] = dy.get(r, j) * gamma_v[j];
                                mean_d += dxhat[j];
                                mean_dx += dxhat[j] * xhat.get(r, j);
                            }
                            mean_d /= n;
                            mean_dx /= n;
                            let out = g.row_mut(r);
                            for j in 0..cols {
                                out[j] +=
                                    inv_std[r] * (dxhat[j] - mean_d - xhat.get(r, j) * mean_dx);
                            }
                        }
                    }
                }
                Op::Mask { x, mask } => {
                    let g = self.grad_slot(&mut grads, *x);
                    for ((o, &d), &m) in g.as_mut_slice().iter_mut().zip(dy.as_slice()).zip(mask) {
                        *o += d * m;
                    }
                }
                Op::Gather { x, idx } => {
                    let g = self.grad_slot(&mut grads, *x);
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, &d) in g.row_mut(src).iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                }
                Op::GroupMean { x, groups } => {
                    let g = self.grad_slot(&mut grads, *x);
                    for gi in 0..groups.count() {
                        let range = groups.range(gi);
                        let inv = T::one() / T::of(range.len() as f64);
                        for r in range {
                            for (o, &d) in g.row_mut(r).iter_mut().zip(dy.row(gi)) {
                                *o += d * inv;
                            }
                        }
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let g = self.grad_slot(&mut grads, *x);
                    for r in 0..dy.rows() {
                        let n = norms[r];
                        if n == T::zero() {
                            continue;
                        }
                        let proj = crate::tensor::dot(y.row(r), dy.row(r));
                        let yr = y.row(r);
                        for (j, o) in g.row_mut(r).iter_mut().enumerate() {
                            *o += (dy.get(r, j) - yr[j] * proj) / n;
                        }
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    targets,
                    probs,
                } => {
                    let up = dy.get(0, 0);
                    let g = self.grad_slot(&mut grads, *logits);
                    for (r, &t) in targets.iter().enumerate() {
                        let out = g.row_mut(r);
                        for (o, &p) in out.iter_mut().zip(probs.row(r)) {
                            *o += up * p;
                        }
                        out[t] -= up;
                    }
                }
                Op::Attention(cache) => self.attention_backward(cache, &dy, &mut grads),
            }
        }
        Gradients { grads: param_grads }
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Matrix<T>>], v: Var) -> &'a mut Matrix<T> {
        let (r, c) = self.value(v).shape();
        grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c))
    }

    fn attention_backward(
        &self,
        cache: &AttentionCache<T>,
        dy: &Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
    ) {
        let spec = &cache.spec;
        let (qv, kv, vv) = (
            self.value(cache.q),
            self.value(cache.k),
            self.value(cache.v),
        );
        let d = qv.cols();
        let dh = d / spec.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = Matrix::zeros(qv.rows(), d);
        let mut dk = Matrix::zeros(kv.rows(), d);
        let mut dv = Matrix::zeros(vv.rows(), d);
        let mut dp = Vec::new();
        for g in 0..spec.query_groups.count() {
            let qr = spec.query_groups.range(g);
            let kr = spec.kv_groups.range(g);
            let nk = kr.len();
            for h in 0..spec.heads {
                let cs = h * dh;
                let base = cache.prob_offsets[g * spec.heads + h];
                for (i, qi) in qr.clone().enumerate() {
                    let allowed = if spec.causal { i + 1 } else { nk };
                    let prow = &cache.probs[base + i * nk..base + i * nk + allowed];
                    let dorow = &dy.row(qi)[cs..cs + dh];
                    dp.clear();
                    let mut weighted = T::zero();
                    for (j, &p) in prow.iter().enumerate() {
                        let kj = kr.start + j;
                        let dpj = crate::tensor::dot(dorow, &vv.row(kj)[cs..cs + dh]);
                        weighted += p * dpj;
                        dp.push(dpj);
                        for (o, &x) in dv.row_mut(kj)[cs..cs + dh].iter_mut().zip(dorow) {
                            *o += p * x;
                        }
                    }
                    let qrow = &qv.row(qi)[cs..cs + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let kj = kr.start + j;
                        let ds = p * (dp[j] - weighted) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let krow = &kv.row(kj)[cs..cs + dh];
                        for (o, &x) in dq.row_mut(qi)[cs..cs + dh].iter_mut().zip(krow) {
                            *o += ds * x;
                        }
                        for (o, &x) in dk.row_mut(kj)[cs..cs + dh].iter_mut().zip(qrow) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        for (var, g) in [(cache.q, dq), (cache.k, dk), (cache.v, dv)] {
            if self.requires_grad(var) {
                self.grad_slot(grads, var).add_assign(&g);
            }
        }
    }
}

/// GELU value and derivative.
#[inline]
fn gelu_fwd<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    /// Central-difference check of every entry of every parameter.
    fn check<F>(store: &mut ParamStore<f64>, f: F)
    where
        F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
    {
        let mut g = Graph::new();
        let root = f(&mut g, store);
        let grads = g.backward(root);
        let h = 1e-5;
        for id in store.ids().collect::<Vec<_>>() {
            let analytic = grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(store.get(id).rows(), store.get(id).cols()));
            for e in 0..store.get(id).len() {
                let orig = store.get(id).as_slice()[e];
                store.get_mut(id).as_mut_slice()[e] = orig + h;
                let mut gp = Graph::new();
                let rp = f(&mut gp, store);
                let plus = gp.scalar(rp);
                store.get_mut(id).as_mut_slice()[e] = orig - h;
                let mut gm = Graph::new();
                let rm = f(&mut gm, store);
                let minus = gm.scalar(rm);
                store.get_mut(id).as_mut_slice()[e] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic.as_slice()[e];
                let denom = a.abs().max(numeric.abs()).max(1e-7);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "{} [{e}]: analytic {a} vs numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn dense_ops_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let x = store.add("x", randn(5, 4, &mut rng));
        let w = store.add("w", randn(4, 4, &mut rng));
        let b = store.add("b", randn(1, 4, &mut rng));
        let gamma = store.add("gamma", randn(1, 4, &mut rng));
        let beta = store.add("beta", randn(1, 4, &mut rng));
        let table = store.add("table", randn(6, 4, &mut rng));
        let mask: Vec<f64> = (0..20).map(|i| if i % 3 == 0 { 0.0 } else { 1.25 }).collect();
        check(&mut store, |g, s| {
            let x = g.param(s, x);
            let w = g.param(s, w);
            let b = g.param(s, b);
            let h = g.matmul(x, w);
            let h = g.add_row(h, b);
            let h = g.gelu(h);
            let gm = g.param(s, gamma);
            let bt = g.param(s, beta);
            let h = g.layer_norm(h, gm, bt);
            let h = g.mask(h, mask.clone());
            let t = g.param(s, table);
            let looked = g.gather(t, vec![1, 1, 4, 0, 5]);
            let h = g.add(h, looked);
            let pooled = g.group_mean(h, Groups::from_lengths([2, 3]));
            let n = g.normalize_rows(pooled);
            let tn = g.normalize_rows(t);
            let logits = g.matmul_t(n, tn);
            let logits = g.scale(logits, 3.0);
            let ce = g.softmax_cross_entropy(logits, vec![2, 4]);
            g.weighted_sum(&[(ce, 0.7)])
        });
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let q = store.add("q", randn(7, 4, &mut rng));
        let k = store.add("k", randn(5, 4, &mut rng));
        let v = store.add("v", randn(5, 4, &mut rng));
        let proj = store.add("proj", randn(4, 3, &mut rng));
        for causal in [false, true] {
            check(&mut store, |g, s| {
                let (qv, kv, vv) = (g.param(s, q), g.param(s, k), g.param(s, v));
                let spec = if causal {
                    let groups = Groups::from_lengths([3, 2]);
                    AttentionSpec {
                        query_groups: groups.clone(),
                        kv_groups: groups,
                        heads: 2,
                        causal: true,
                    }
                } else {
                    AttentionSpec {
                        query_groups: Groups::from_lengths([4, 3]),
                        kv_groups: Groups::from_lengths([2, 3]),
                        heads: 2,
                        causal: false,
                    }
                };
                let (qv, kv) = if causal {
                    (g.gather(qv, vec![0, 1, 2, 3, 4]), kv)
                } else {
                    (qv, kv)
                };
                let o = g.attention(qv, kv, vv, spec);
                let p = g.param(s, proj);
                let o = g.matmul(o, p);
                let o = g.gelu(o);
                let logits = g.matmul_t(o, p);
                let rows = g.value(logits).rows();
                g.softmax_cross_entropy(logits, (0..rows).map(|r| r % 4).collect())
            });
        }
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(4, 4, &mut rng);
        let mut y = x.clone();
        for j in 0..4 {
            y.set(3, j, 100.0);
        }
        let run = |m: &Matrix<f64>| {
            let mut g = Graph::new();
            let v = g.constant(m.clone());
            let groups = Groups::uniform(1, 4);
            let o = g.attention(
                v,
                v,
                v,
                AttentionSpec {
                    query_groups: groups.clone(),
                    kv_groups: groups,
                    heads: 2,
                    causal: true,
                },
            );
            g.value(o).clone()
        };
        let (a, b) = (run(&x), run(&y));
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::filled(1, 2, 1.0f64));
        let b = store.add("b", Matrix::filled(1, 2, 2.0f64));
        store.set_frozen(a, true);
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let bv = g.param(&store, b);
        let s = g.add(av, bv);
        let s = g.matmul_t(s, s);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().as_slice(), &[6.0, 6.0]);
    }
}
