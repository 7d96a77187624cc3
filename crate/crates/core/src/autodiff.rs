//! Matrix-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value. [`Tape::backward`] walks the nodes in reverse and accumulates
//! adjoints, returning one gradient matrix per entry of the bound
//! [`ParamStore`]. Nodes that depend only on constants are never visited.

use std::collections::HashMap;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a named parameter matrix inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), lookup: HashMap::new() }
    }

    /// Registers a parameter. Panics on a duplicate name since that is always a
    /// construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
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
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Scalar entry by flat position across all matrices (in registration order).
    pub fn flat_locate(&self, mut k: usize) -> (ParamId, usize) {
        for (i, v) in self.values.iter().enumerate() {
            if k < v.len() {
                return (ParamId(i), k);
            }
            k -= v.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Matrix::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::all_finite)
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Matrix<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self { grads: store.values.iter().map(|v| Matrix::zeros(v.rows(), v.cols())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.grads.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Matrix::all_finite)
    }

    pub fn global_norm(&self) -> T {
        self.grads.iter().map(|g| g.as_slice().iter().map(|&v| v * v).sum::<T>()).sum::<T>().sqrt()
    }
}

/// Node-to-segment assignment used for per-molecule reductions in a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    seg_of: Vec<usize>,
    counts: Vec<usize>,
}

impl Segments {
    /// Contiguous segments with the given sizes.
    pub fn from_sizes(sizes: &[usize]) -> Self {
        let mut seg_of = Vec::with_capacity(sizes.iter().sum());
        for (s, &n) in sizes.iter().enumerate() {
            seg_of.extend(std::iter::repeat_n(s, n));
        }
        Self { seg_of, counts: sizes.to_vec() }
    }

    pub fn n_items(&self) -> usize {
        self.seg_of.len()
    }

    pub fn n_segments(&self) -> usize {
        self.counts.len()
    }

    pub fn segment_of(&self, i: usize) -> usize {
        self.seg_of[i]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }
}

#[derive(Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Concat(Vec<Var>),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    RowSum(Var),
    Sum(Var),
    SegmentMean(Var, Rc<Segments>),
    SegmentBroadcast(Var, Rc<Segments>),
    RepeatCols(Var),
    CrossEntropy(Var, Rc<[usize]>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording context for one forward/backward pass.
///
/// A tape may be bound to one [`ParamStore`]; [`Tape::param`] then lifts that
/// store's matrices onto the tape as differentiable leaves.
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    bound: Vec<Option<Var>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// A tape with no parameters; every leaf is a constant.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: None, bound: Vec::new() }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self { nodes: Vec::new(), params: Some(params), bound: vec![None; params.len()] }
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf for a parameter of the bound store. Repeated calls
    /// with the same id return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let store = self.params.expect("tape has no bound parameter store");
        self.nodes.push(Node { value: store.get(id).clone(), op: Op::Leaf, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `1×m` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.rows(), 1, "bias must be a row vector");
        assert_eq!(av.cols(), bv.cols(), "bias width mismatch");
        let mut out = av.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(bv.as_slice()) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).hadamard(self.value(b));
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Scales row `i` of `a` by `s[i]`, where `s` is `n×1`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.value(a), self.value(s));
        assert_eq!(sv.cols(), 1, "column scale must be n×1");
        assert_eq!(av.rows(), sv.rows(), "column scale row mismatch");
        let mut out = av.clone();
        for i in 0..out.rows() {
            let c = sv.get(i, 0);
            for o in out.row_mut(i) {
                *o *= c;
            }
        }
        self.push(out, Op::MulCol(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push(value, Op::Softplus(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::ln);
        self.push(value, Op::Ln(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::sqrt);
        self.push(value, Op::Sqrt(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a), &[a])
    }

    /// Horizontal concatenation. Zero-width parts are allowed.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::hstack(&mats);
        self.push(value, Op::Concat(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let value = self.value(a).gather_rows(&idx);
        self.push(value, Op::Gather(a, idx), &[a])
    }

    /// Sums row `e` of `a` into output row `idx[e]`; the output has `n_out` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<[usize]>, n_out: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), idx.len(), "scatter index length mismatch");
        let mut out = Matrix::zeros(n_out, av.cols());
        for (e, &i) in idx.iter().enumerate() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(av.row(e)) {
                *o += v;
            }
        }
        self.push(out, Op::ScatterAdd(a, idx), &[a])
    }

    /// `n×m → n×1`
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Matrix::from_fn(av.rows(), 1, |i, _| av.row(i).iter().copied().sum());
        self.push(value, Op::RowSum(a), &[a])
    }

    /// Sum of all entries as `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Mean of all entries as `1×1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::of_usize(n.max(1)))
    }

    /// Per-segment row means, `n×m → S×m`.
    pub fn segment_mean(&mut self, a: Var, seg: Rc<Segments>) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), seg.n_items(), "segment length mismatch");
        let mut out = Matrix::zeros(seg.n_segments(), av.cols());
        for i in 0..av.rows() {
            let s = seg.segment_of(i);
            for (o, &v) in out.row_mut(s).iter_mut().zip(av.row(i)) {
                *o += v;
            }
        }
        for s in 0..seg.n_segments() {
            let c = T::one() / T::of_usize(seg.counts()[s].max(1));
            for o in out.row_mut(s) {
                *o *= c;
            }
        }
        self.push(out, Op::SegmentMean(a, seg), &[a])
    }

    /// Copies segment row `s` to each of its items, `S×m → n×m`.
    pub fn segment_broadcast(&mut self, a: Var, seg: Rc<Segments>) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), seg.n_segments(), "segment count mismatch");
        let mut out = Matrix::zeros(seg.n_items(), av.cols());
        for i in 0..seg.n_items() {
            out.row_mut(i).copy_from_slice(av.row(seg.segment_of(i)));
        }
        self.push(out, Op::SegmentBroadcast(a, seg), &[a])
    }

    /// Subtracts each segment's row mean from its rows.
    pub fn center_segments(&mut self, a: Var, seg: Rc<Segments>) -> Var {
        let mean = self.segment_mean(a, seg.clone());
        let wide = self.segment_broadcast(mean, seg);
        self.sub(a, wide)
    }

    /// `n×1 → n×c` by repeating the single column.
    pub fn repeat_cols(&mut self, a: Var, c: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols(), 1, "repeat_cols expects a single column");
        let value = Matrix::from_fn(av.rows(), c, |i, _| av.get(i, 0));
        self.push(value, Op::RepeatCols(a), &[a])
    }

    /// Row-wise categorical negative log-likelihood, `n×V → n×1`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<[usize]>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "target count mismatch");
        let value = Matrix::from_fn(lv.rows(), 1, |i, _| {
            let row = lv.row(i);
            log_sum_exp(row) - row[targets[i]]
        });
        self.push(value, Op::CrossEntropy(logits, targets), &[logits])
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.shape(output), (1, 1), "backward requires a scalar output");
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let mut out = match self.params {
            Some(store) => Gradients::zeros_like(store),
            None => Gradients { grads: Vec::new() },
        };
        for (p, bound) in self.bound.iter().enumerate() {
            if let Some(v) = bound {
                if let Some(g) = grads[v.0].take() {
                    out.grads[p] = g;
                }
            }
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(val(*b)));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, val(*a).matmul_tn(g));
                }
            }
            Op::AddBias(a, b) => {
                if wants(*b) {
                    self.accumulate(grads, *b, g.col_sums());
                }
                self.accumulate(grads, *a, g.clone());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if wants(*b) {
                    self.accumulate(grads, *b, g.scale(-T::one()));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.hadamard(val(*b)));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, g.hadamard(val(*a)));
                }
            }
            Op::MulCol(a, s) => {
                let (av, sv) = (val(*a), val(*s));
                if wants(*a) {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        let c = sv.get(i, 0);
                        for o in da.row_mut(i) {
                            *o *= c;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if wants(*s) {
                    let ds = Matrix::from_fn(av.rows(), 1, |i, _| {
                        g.row(i).iter().zip(av.row(i)).map(|(&x, &y)| x * y).sum()
                    });
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Silu(a) => {
                let d = g.zip_map(val(*a), |gi, x| {
                    let s = sigmoid(x);
                    gi * s * (T::one() + x * (T::one() - s))
                });
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gi, y| gi * y * (T::one() - y));
                self.accumulate(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = g.zip_map(val(*a), |gi, x| gi * sigmoid(x));
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.hadamard(&node.value)),
            Op::Ln(a) => self.accumulate(grads, *a, g.zip_map(val(*a), |gi, x| gi / x)),
            Op::Sqrt(a) => {
                let two = T::of(2.0);
                self.accumulate(grads, *a, g.zip_map(&node.value, |gi, y| gi / (two * y)));
            }
            Op::Square(a) => {
                let two = T::of(2.0);
                self.accumulate(grads, *a, g.zip_map(val(*a), |gi, x| two * gi * x));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        self.accumulate(grads, p, g.cols_range(start, start + w));
                    }
                    start += w;
                }
            }
            Op::Gather(a, idx) => {
                let av = val(*a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for (e, &i) in idx.iter().enumerate() {
                    for (o, &v) in da.row_mut(i).iter_mut().zip(g.row(e)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::ScatterAdd(a, idx) => self.accumulate(grads, *a, g.gather_rows(idx)),
            Op::RowSum(a) => {
                let av = val(*a);
                let da = Matrix::from_fn(av.rows(), av.cols(), |i, _| g.get(i, 0));
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let av = val(*a);
                self.accumulate(grads, *a, Matrix::filled(av.rows(), av.cols(), g.get(0, 0)));
            }
            Op::SegmentMean(a, seg) => {
                let da = Matrix::from_fn(seg.n_items(), g.cols(), |i, j| {
                    let s = seg.segment_of(i);
                    g.get(s, j) / T::of_usize(seg.counts()[s].max(1))
                });
                self.accumulate(grads, *a, da);
            }
            Op::SegmentBroadcast(a, seg) => {
                let mut da = Matrix::zeros(seg.n_segments(), g.cols());
                for i in 0..seg.n_items() {
                    let s = seg.segment_of(i);
                    for (o, &v) in da.row_mut(s).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::RepeatCols(a) => {
                let da = Matrix::from_fn(g.rows(), 1, |i, _| g.row(i).iter().copied().sum());
                self.accumulate(grads, *a, da);
            }
            Op::CrossEntropy(logits, targets) => {
                let lv = val(*logits);
                let mut d = Matrix::zeros(lv.rows(), lv.cols());
                for i in 0..lv.rows() {
                    let row = lv.row(i);
                    let lse = log_sum_exp(row);
                    let gi = g.get(i, 0);
                    for (j, o) in d.row_mut(i).iter_mut().enumerate() {
                        let p = (row[j] - lse).exp();
                        let y = if j == targets[i] { T::one() } else { T::zero() };
                        *o = gi * (p - y);
                    }
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}
