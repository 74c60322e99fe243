//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for the backward sweep. [`Tape::backward`] walks the nodes in exact
//! reverse order. Leaf gradients persist and accumulate across calls, so a
//! leaf that feeds several paths (the shared Siamese weights) receives the
//! sum of all path gradients.

mod kernels;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

pub(crate) use kernels::pool_extent;
use kernels::{conv2d_backward, conv2d_forward, maxpool_forward, ConvGeom};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geo: ConvGeom },
    MaxPool { input: Var, argmax: Vec<u32> },
    Linear { input: Var, weight: Var, bias: Var },
    Relu { input: Var },
    UnitNorm { input: Var, eps: S, norms: Vec<S> },
    Concat { a: Var, b: Var },
    Reshape { input: Var },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: S },
    GatherRows { input: Var, rows: Vec<usize> },
    PairDistance { a: Var, b: Var },
    Hinge { dist: Var, matched: Vec<bool>, margin: S },
    SoftmaxCe { logits: Var, matched: Vec<bool> },
    Sum { input: Var },
    Mean { input: Var },
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Added under the square root of pairwise distances so the gradient stays
/// finite for identical descriptors.
pub const DISTANCE_EPS: f64 = 1e-12;

/// Recorded computation with values, saved intermediates and leaf gradients.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    leaf_grads: Vec<Option<Vec<S>>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), leaf_grads: Vec::new(), grad_enabled: true }
    }

    /// A tape that evaluates values only; [`Tape::backward`] is rejected.
    pub fn inference() -> Self {
        Tape { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a node out as a tensor without gradient.
    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad: requires_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant input.
    pub fn constant(&mut self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("constant", format!("shape {shape:?} needs {numel} elements, got {}", data.len())));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Records a leaf from a tensor, tracking its gradient when the tensor
    /// requires one.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf whose gradient is always tracked.
    pub fn variable(&mut self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        let v = self.constant(shape, data)?;
        self.nodes[v.0].requires_grad = self.grad_enabled;
        Ok(v)
    }

    /// 2-D cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,kh,kw]` plus bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if is.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {is:?} and weight {ws:?} must be 4-D")));
        }
        if is[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but weight expects {} ({is:?} vs {ws:?})", is[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("conv2d", format!("bias {bs:?} does not match {} output channels", ws[0])));
        }
        if stride == 0 {
            return Err(Error::invalid("stride", "must be at least 1"));
        }
        let (kh, kw) = (ws[2], ws[3]);
        if is[2] + 2 * pad < kh || is[3] + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", is[2] + 2 * pad, is[3] + 2 * pad),
            ));
        }
        let geo = ConvGeom {
            n: is[0],
            cin: is[1],
            h: is[2],
            w: is[3],
            cout: ws[0],
            kh,
            kw,
            stride,
            pad,
            ho: (is[2] + 2 * pad - kh) / stride + 1,
            wo: (is[3] + 2 * pad - kw) / stride + 1,
        };
        let out = conv2d_forward(self.value(input), self.value(weight), self.value(bias), &geo);
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(vec![geo.n, geo.cout, geo.ho, geo.wo], out, Op::Conv2d { input, weight, bias, geo }, rg))
    }

    /// Max pooling with a square `k x k` window. In ceil mode the last window
    /// may overhang the input and is clamped to it. Ties go to the first
    /// element in scan order.
    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize, ceil_mode: bool) -> Result<Var> {
        if k == 0 || stride == 0 {
            return Err(Error::invalid("pooling", format!("kernel {k} and stride {stride} must be at least 1")));
        }
        let is = self.shape(input).to_vec();
        if is.len() != 4 {
            return Err(Error::shape("maxpool2d", format!("input {is:?} must be 4-D")));
        }
        let (h, w) = (is[2], is[3]);
        if !ceil_mode && (k > h || k > w) {
            return Err(Error::shape("maxpool2d", format!("window {k} exceeds input {h}x{w}")));
        }
        let ho = pool_extent(h, k, stride, ceil_mode);
        let wo = pool_extent(w, k, stride, ceil_mode);
        let (out, argmax) = maxpool_forward(self.value(input), is[0] * is[1], h, w, k, stride, ho, wo);
        let rg = self.rg(&[input]);
        let argmax = if rg { argmax } else { Vec::new() };
        Ok(self.push(vec![is[0], is[1], ho, wo], out, Op::MaxPool { input, argmax }, rg))
    }

    /// `input · weightᵀ + bias` for `[N,D]` input and `[K,D]` weight.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if is.len() != 2 || ws.len() != 2 || is[1] != ws[1] {
            return Err(Error::shape("linear", format!("input {is:?} incompatible with weight {ws:?}")));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("linear", format!("bias {bs:?} does not match {} outputs", ws[0])));
        }
        let (n, d, k) = (is[0], is[1], ws[0]);
        let mut out = vec![S::zero(); n * k];
        gemm(
            S::one(),
            MatRef::row_major(self.value(input), n, d),
            MatRef::transposed(self.value(weight), d, k),
            S::zero(),
            &mut out,
        );
        let b = self.value(bias);
        for row in out.chunks_exact_mut(k.max(1)) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(vec![n, k], out, Op::Linear { input, weight, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        self.push(shape, out, Op::Relu { input }, rg)
    }

    /// Divides every row of a `[N,D]` input by `max(‖row‖₂, eps)`.
    pub fn unit_normalize(&mut self, input: Var, eps: S) -> Result<Var> {
        let is = self.shape(input).to_vec();
        if is.len() != 2 {
            return Err(Error::shape("unit_normalize", format!("input {is:?} must be 2-D")));
        }
        let d = is[1];
        let x = self.value(input);
        let mut out = Vec::with_capacity(x.len());
        let mut norms = Vec::with_capacity(is[0]);
        for row in x.chunks_exact(d.max(1)).take(is[0]) {
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            let denom = if norm > eps { norm } else { eps };
            out.extend(row.iter().map(|&v| v / denom));
            norms.push(norm);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(is, out, Op::UnitNorm { input, eps, norms }, rg))
    }

    /// Row-wise concatenation of `[N,D1]` and `[N,D2]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape("concat", format!("cannot concatenate {sa:?} and {sb:?}")));
        }
        let (n, d1, d2) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(n * (d1 + d2));
        for i in 0..n {
            out.extend_from_slice(&self.value(a)[i * d1..(i + 1) * d1]);
            out.extend_from_slice(&self.value(b)[i * d2..(i + 1) * d2]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![n, d1 + d2], out, Op::Concat { a, b }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(input).len() {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape(input))));
        }
        let out = self.value(input).to_vec();
        let rg = self.rg(&[input]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { input }, rg))
    }

    /// Collapses `[N, ...]` into `[N, rest]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let n = s.first().copied().unwrap_or(1);
        let rest = s.iter().skip(1).product();
        self.reshape(input, &[n, rest])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: S) -> Var {
        let out = self.value(input).iter().map(|&v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        self.push(shape, out, Op::Scale { input, factor }, rg)
    }

    /// Selects rows of a 2-D node; indices may repeat.
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", format!("input {s:?} must be 2-D")));
        }
        let d = s[1];
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range for {s:?}")));
        }
        let x = self.value(input);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&x[r * d..(r + 1) * d]);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(vec![rows.len(), d], out, Op::GatherRows { input, rows: rows.to_vec() }, rg))
    }

    /// Row-wise `sqrt(‖a_i − b_i‖² + 1e-12)`, output `[N]`.
    pub fn pair_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa != self.shape(b) {
            return Err(Error::shape("pair_distance", format!("{sa:?} vs {:?}", self.shape(b))));
        }
        let d = sa[1];
        let eps = S::from_f64_lossy(DISTANCE_EPS);
        let out = self
            .value(a)
            .chunks_exact(d.max(1))
            .zip(self.value(b).chunks_exact(d.max(1)))
            .take(sa[0])
            .map(|(ra, rb)| {
                let s: S = ra.iter().zip(rb).map(|(&x, &y)| (x - y) * (x - y)).sum();
                (s + eps).sqrt()
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![sa[0]], out, Op::PairDistance { a, b }, rg))
    }

    /// Per-pair hinge on distances: `d` for matches, `max(0, margin − d)`
    /// otherwise. The subgradient at the kink is zero.
    pub fn hinge(&mut self, dist: Var, matched: &[bool], margin: S) -> Result<Var> {
        let n = self.value(dist).len();
        if self.shape(dist).len() != 1 || matched.len() != n {
            return Err(Error::shape("hinge", format!("{} labels for distances {:?}", matched.len(), self.shape(dist))));
        }
        let out = self.value(dist).iter().zip(matched).map(|(&d, &m)| if m { d } else { (margin - d).max(S::zero()) }).collect();
        let rg = self.rg(&[dist]);
        Ok(self.push(vec![n], out, Op::Hinge { dist, matched: matched.to_vec(), margin }, rg))
    }

    /// Per-pair two-class cross entropy on `[N,2]` logits; class 1 is "match".
    pub fn softmax_ce(&mut self, logits: Var, matched: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[1] != 2 || matched.len() != s[0] {
            return Err(Error::shape("softmax_ce", format!("{} labels for logits {s:?}", matched.len())));
        }
        let out = self.value(logits).chunks_exact(2).zip(matched).map(|(l, &m)| two_class_nll(l[0], l[1], m)).collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(vec![s[0]], out, Op::SoftmaxCe { logits, matched: matched.to_vec() }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().copied().sum();
        let rg = self.rg(&[input]);
        self.push(Vec::new(), vec![s], Op::Sum { input }, rg)
    }

    /// Arithmetic mean of all elements; zero for an empty input.
    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let m = if x.is_empty() { S::zero() } else { x.iter().copied().sum::<S>() / S::from_usize(x.len()).unwrap() };
        let rg = self.rg(&[input]);
        self.push(Vec::new(), vec![m], Op::Mean { input }, rg)
    }

    /// Back-propagates from a one-element node. Leaf gradients are added to
    /// whatever earlier passes left there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Tape("backward on an inference tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be a scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![S::one()]);
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let buf = self.leaf_grads[i].get_or_insert_with(|| vec![S::zero(); g.len()]);
                    for (b, v) in buf.iter_mut().zip(&g) {
                        *b += *v;
                    }
                }
                Op::Conv2d { input, weight, bias, geo } => {
                    let mut dx = self.wants(*input).then(|| vec![S::zero(); self.value(*input).len()]);
                    let mut dw = self.wants(*weight).then(|| vec![S::zero(); self.value(*weight).len()]);
                    let mut db = self.wants(*bias).then(|| vec![S::zero(); self.value(*bias).len()]);
                    conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        geo,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    add_into(&mut grads, *input, dx);
                    add_into(&mut grads, *weight, dw);
                    add_into(&mut grads, *bias, db);
                }
                Op::MaxPool { input, argmax } => {
                    let mut dx = vec![S::zero(); self.value(*input).len()];
                    for (&a, &v) in argmax.iter().zip(&g) {
                        dx[a as usize] += v;
                    }
                    add_into(&mut grads, *input, Some(dx));
                }
                Op::Linear { input, weight, bias } => {
                    let is = self.shape(*input);
                    let (n, d) = (is[0], is[1]);
                    let k = self.shape(*weight)[0];
                    let gm = MatRef::row_major(&g, n, k);
                    if self.wants(*input) {
                        let mut dx = vec![S::zero(); n * d];
                        gemm(S::one(), gm, MatRef::row_major(self.value(*weight), k, d), S::zero(), &mut dx);
                        add_into(&mut grads, *input, Some(dx));
                    }
                    if self.wants(*weight) {
                        let mut dw = vec![S::zero(); k * d];
                        gemm(
                            S::one(),
                            MatRef::transposed(&g, k, n),
                            MatRef::row_major(self.value(*input), n, d),
                            S::zero(),
                            &mut dw,
                        );
                        add_into(&mut grads, *weight, Some(dw));
                    }
                    if self.wants(*bias) {
                        let mut db = vec![S::zero(); k];
                        for row in g.chunks_exact(k.max(1)) {
                            for (b, &v) in db.iter_mut().zip(row) {
                                *b += v;
                            }
                        }
                        add_into(&mut grads, *bias, Some(db));
                    }
                }
                Op::Relu { input } => {
                    let dx =
                        self.value(*input).iter().zip(&g).map(|(&x, &gv)| if x > S::zero() { gv } else { S::zero() }).collect();
                    add_into(&mut grads, *input, Some(dx));
                }
                Op::UnitNorm { input, eps, norms } => {
                    let d = self.shape(*input)[1];
                    let y = &node.value;
                    let mut dx = vec![S::zero(); y.len()];
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let out = &mut dx[r * d..(r + 1) * d];
                        if norm > *eps {
                            let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                                *o = (gv - yv * dot) / norm;
                            }
                        } else {
                            for (o, &gv) in out.iter_mut().zip(gr) {
                                *o = gv / *eps;
                            }
                        }
                    }
                    add_into(&mut grads, *input, Some(dx));
                }
                Op::Concat { a, b } => {
                    let d1 = self.shape(*a)[1];
                    let d2 = self.shape(*b)[1];
                    let n = self.shape(*a)[0];
                    let mut ga = Vec::with_capacity(n * d1);
                    let mut gb = Vec::with_capacity(n * d2);
                    for row in g.chunks_exact((d1 + d2).max(1)).take(n) {
                        ga.extend_from_slice(&row[..d1]);
                        gb.extend_from_slice(&row[d1..]);
                    }
                    add_into(&mut grads, *a, Some(ga));
                    add_into(&mut grads, *b, Some(gb));
                }
                Op::Reshape { input } => add_into(&mut grads, *input, Some(g)),
                Op::Add { a, b } => {
                    add_into(&mut grads, *a, Some(g.clone()));
                    add_into(&mut grads, *b, Some(g));
                }
                Op::Scale { input, factor } => {
                    let dx = g.iter().map(|&v| v * *factor).collect();
                    add_into(&mut grads, *input, Some(dx));
                }
                Op::GatherRows { input, rows } => {
                    let s = self.shape(*input);
                    let d = s[1];
                    let mut dx = vec![S::zero(); s[0] * d];
                    for (k, &r) in rows.iter().enumerate() {
                        for (o, &v) in dx[r * d..(r + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]) {
                            *o += v;
                        }
                    }
                    add_into(&mut grads, *input, Some(dx));
                }
                Op::PairDistance { a, b } => {
                    let d = self.shape(*a)[1];
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut da = vec![S::zero(); av.len()];
                    for (r, (&dist, &gv)) in node.value.iter().zip(&g).enumerate() {
                        let c = gv / dist;
                        for j in r * d..(r + 1) * d {
                            da[j] = c * (av[j] - bv[j]);
                        }
                    }
                    let db = da.iter().map(|&v| -v).collect();
                    add_into(&mut grads, *a, Some(da));
                    add_into(&mut grads, *b, Some(db));
                }
                Op::Hinge { dist, matched, margin } => {
                    let dx = self
                        .value(*dist)
                        .iter()
                        .zip(matched)
                        .zip(&g)
                        .map(|((&d, &m), &gv)| {
                            if m {
                                gv
                            } else if *margin - d > S::zero() {
                                -gv
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    add_into(&mut grads, *dist, Some(dx));
                }
                Op::SoftmaxCe { logits, matched } => {
                    let lv = self.value(*logits);
                    let mut dl = Vec::with_capacity(lv.len());
                    for ((l, &m), &gv) in lv.chunks_exact(2).zip(matched).zip(&g) {
                        let p1 = sigmoid(l[1] - l[0]);
                        let p0 = S::one() - p1;
                        let (t0, t1) = if m { (S::zero(), S::one()) } else { (S::one(), S::zero()) };
                        dl.push(gv * (p0 - t0));
                        dl.push(gv * (p1 - t1));
                    }
                    add_into(&mut grads, *logits, Some(dl));
                }
                Op::Sum { input } => {
                    let n = self.value(*input).len();
                    add_into(&mut grads, *input, Some(vec![g[0]; n]));
                }
                Op::Mean { input } => {
                    let n = self.value(*input).len();
                    if n > 0 {
                        let v = g[0] / S::from_usize(n).unwrap();
                        add_into(&mut grads, *input, Some(vec![v; n]));
                    }
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }
}

fn add_into<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, g: Option<Vec<S>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(buf) => {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Logistic function evaluated without overflow for either sign.
pub(crate) fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// `−log softmax(l)[target]` for two logits via max-subtracted log-sum-exp.
pub(crate) fn two_class_nll<S: Scalar>(l0: S, l1: S, matched: bool) -> S {
    let m = l0.max(l1);
    let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
    lse - if matched { l1 } else { l0 }
}
