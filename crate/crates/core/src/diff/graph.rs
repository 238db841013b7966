//! Define-by-run expression graph with reverse-mode gradients.
//!
//! Every node is evaluated eagerly when it is pushed, so the forward value of
//! any expression is available immediately through [`Graph::value`]. The
//! graph borrows its [`ParamStore`]; building a fresh graph after the store
//! changes is the cache invalidation rule.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::tensor::{gemm, Tensor};
use super::{DiffError, ParamStore};

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Parameter,
    Detach,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Gelu(Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    RmsNormRows(Var, f64),
    LayerNormRows(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    BroadcastRows(Var),
    Sum(Var),
    Mean(Var),
    SmoothL1(Var, Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Parameter => "parameter",
            Op::Detach => "detach",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Silu(..) => "silu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::SoftmaxRows(..) => "softmax-rows",
            Op::RmsNormRows(..) => "rms-norm",
            Op::LayerNormRows(..) => "layer-norm",
            Op::ConcatCols(..) => "concat-cols",
            Op::ConcatRows(..) => "concat-rows",
            Op::SliceCols(..) => "slice-cols",
            Op::SliceRows(..) => "slice-rows",
            Op::BroadcastRows(..) => "broadcast-rows",
            Op::Sum(..) => "reduce-sum",
            Op::Mean(..) => "reduce-mean",
            Op::SmoothL1(..) => "smooth-l1",
        }
    }
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    needs_grad: bool,
}

/// `tanh` approximation constants for GELU: `0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³)))`.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Expression graph bound to a parameter store.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    params: HashMap<String, Var>,
    frozen: Option<Box<dyn Fn(&str) -> bool + 'a>>,
}

/// Result of a backward pass, keyed by parameter name.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
    /// Requested parameters that the expression never touched; their entry in
    /// `grads` is an all-zero tensor.
    pub unreached: Vec<String>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.grads
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Accumulates `other * weight` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, weight: f64) {
        for (k, g) in &other.grads {
            match self.grads.get_mut(k) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += weight * b;
                    }
                }
                None => {
                    self.grads.insert(k.clone(), g.scale(weight));
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn insert(&mut self, name: String, g: Tensor) {
        self.grads.insert(name, g);
    }
}

fn bcast_kind(a: &[usize], b: &[usize]) -> Option<Bcast> {
    if a == b {
        return Some(Bcast::Same);
    }
    if a.len() != 2 || b.len() != 2 {
        return None;
    }
    match (b[0], b[1]) {
        (1, 1) => Some(Bcast::Scalar),
        (1, c) if c == a[1] => Some(Bcast::Row),
        (r, 1) if r == a[0] => Some(Bcast::Col),
        _ => None,
    }
}

fn bcast_apply(a: &Tensor, b: &Tensor, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let cols = a.cols();
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &x)| {
            let y = match kind {
                Bcast::Same => bd[idx],
                Bcast::Row => bd[idx % cols],
                Bcast::Col => bd[idx / cols],
                Bcast::Scalar => bd[0],
            };
            f(x, y)
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("broadcast shape")
}

/// Reduces a full-shape gradient back onto the broadcast operand's shape.
fn bcast_reduce(g: &Tensor, kind: Bcast, b_shape: &[usize]) -> Tensor {
    let cols = g.cols();
    match kind {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Tensor::new(b_shape.to_vec(), vec![g.sum()]).unwrap(),
        Bcast::Row => {
            let mut out = vec![0.0; cols];
            for (idx, v) in g.data().iter().enumerate() {
                out[idx % cols] += v;
            }
            Tensor::new(b_shape.to_vec(), out).unwrap()
        }
        Bcast::Col => {
            let out = g.data().chunks(cols).map(|r| r.iter().sum()).collect();
            Tensor::new(b_shape.to_vec(), out).unwrap()
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, nodes: Vec::with_capacity(256), params: HashMap::new(), frozen: None }
    }

    /// Like [`Graph::new`], but parameters matching `frozen` enter the graph
    /// as constants: they receive no gradient and are reported unreached.
    pub fn with_frozen(store: &'a ParamStore, frozen: impl Fn(&str) -> bool + 'a) -> Self {
        Self { frozen: Some(Box::new(frozen)), ..Self::new(store) }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { op, value: Cow::Owned(value), needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> DiffError {
        DiffError::ShapeMismatch { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Constant, value: Cow::Owned(t), needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter. Repeated lookups return the same node so
    /// gradients from every use accumulate.
    pub fn param(&mut self, name: &str) -> Result<Var, DiffError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name).ok_or_else(|| DiffError::UnresolvedParameter(name.to_string()))?;
        let trainable = !self.frozen.as_ref().is_some_and(|f| f(name));
        self.nodes.push(Node {
            op: Op::Parameter,
            value: Cow::Borrowed(t),
            needs_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Stop-gradient: same value, no gradient flows to `a`'s ancestors.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.nodes.push(Node { op: Op::Detach, value: Cow::Owned(t), needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        mk: fn(Var, Var, Bcast) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var, DiffError> {
        let kind = bcast_kind(self.shape(a), self.shape(b)).ok_or_else(|| self.mismatch(name, a, b))?;
        let out = bcast_apply(self.value(a), self.value(b), kind, f);
        Ok(self.push(mk(a, b, kind), out, &[a, b]))
    }

    /// `a + b`; `b` may broadcast as a row `[1, c]`, column `[r, 1]` or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push(Op::Scale(a, k), out, &[a])
    }

    /// `a + c` for a constant scalar `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(Op::Offset(a), out, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = self.value(a).matmul(self.value(b));
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), out, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(Op::Gelu(a), out, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * sigmoid(v));
        self.push(Op::Silu(a), out, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out, &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Log(a), out, &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(Op::Square(a), out, &[a])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), out, &[a])
    }

    /// Row-wise softmax. Entries equal to `-inf` receive exactly zero weight.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - m).exp() };
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out).unwrap();
        self.push(Op::SoftmaxRows(a), t, &[a])
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)`, without gain.
    pub fn rms_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(cols) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let r = (ms + eps).sqrt();
            for v in row.iter_mut() {
                *v /= r;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out).unwrap();
        self.push(Op::RmsNormRows(a, eps), t, &[a])
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)`, without affine.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(cols) {
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let r = (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) / r;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out).unwrap();
        self.push(Op::LayerNormRows(a, eps), t, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows || self.shape(p).len() != 2 {
                return Err(self.mismatch("concat-cols", parts[0], p));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::from_vec(rows, total, out), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let cols = self.value(parts[0]).cols();
        for &p in parts {
            if self.value(p).cols() != cols || self.shape(p).len() != 2 {
                return Err(self.mismatch("concat-rows", parts[0], p));
            }
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / cols;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor::from_vec(rows, cols, out), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(DiffError::SliceOutOfRange { op: "slice-cols", shape: x.shape().to_vec(), start, end });
        }
        let out: Vec<f64> = (0..x.rows()).flat_map(|r| x.row_slice(r)[start..end].to_vec()).collect();
        let t = Tensor::from_vec(x.rows(), end - start, out);
        Ok(self.push(Op::SliceCols(a, start, end), t, &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let x = self.value(a);
        if start > end || end > x.rows() {
            return Err(DiffError::SliceOutOfRange { op: "slice-rows", shape: x.shape().to_vec(), start, end });
        }
        let c = x.cols();
        let t = Tensor::from_vec(end - start, c, x.data()[start * c..end * c].to_vec());
        Ok(self.push(Op::SliceRows(a, start, end), t, &[a]))
    }

    /// Repeats a `[1, c]` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var, DiffError> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(DiffError::ShapeMismatch { op: "broadcast-rows", lhs: x.shape().to_vec(), rhs: vec![1, x.cols()] });
        }
        let mut out = Vec::with_capacity(n * x.cols());
        for _ in 0..n {
            out.extend_from_slice(x.data());
        }
        let t = Tensor::from_vec(n, x.cols(), out);
        Ok(self.push(Op::BroadcastRows(a), t, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        self.push(Op::Mean(a), Tensor::scalar(s), &[a])
    }

    /// Mean Huber-style loss with transition point `beta`:
    /// `0.5 d² / beta` for `|d| < beta`, `|d| - 0.5 beta` otherwise.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: f64) -> Result<Var, DiffError> {
        if self.shape(pred) != self.shape(target) {
            return Err(self.mismatch("smooth-l1", pred, target));
        }
        let (p, t) = (self.value(pred), self.value(target));
        let n = p.len() as f64;
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| smooth_l1_elem(a - b, beta)).sum();
        Ok(self.push(Op::SmoothL1(pred, target, beta), Tensor::scalar(s / n), &[pred, target]))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mse", a, b));
        }
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse-mode gradients of scalar `root` with respect to every
    /// trainable parameter bound in this graph.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        let names: Vec<String> =
            self.params.iter().filter(|(_, v)| self.nodes[v.0].needs_grad).map(|(k, _)| k.clone()).collect();
        self.gradient(root, &names)
    }

    /// Reverse-mode gradients with respect to the named parameters. Names not
    /// reachable from `root` map to zero tensors and are listed in
    /// [`Gradients::unreached`].
    pub fn gradient<S: AsRef<str>>(&self, root: Var, wrt: &[S]) -> Result<Gradients, DiffError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(DiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Parameter = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        let mut out = Gradients::default();
        for name in wrt {
            let name = name.as_ref();
            match self.params.get(name).and_then(|v| grads.get(v.0).and_then(|g| g.clone())) {
                Some(g) => out.grads.insert(name.to_string(), g),
                None => {
                    let shape = self
                        .store
                        .get(name)
                        .map(|t| t.shape().to_vec())
                        .ok_or_else(|| DiffError::UnresolvedParameter(name.to_string()))?;
                    out.unreached.push(name.to_string());
                    out.grads.insert(name.to_string(), Tensor::zeros(&shape))
                }
            };
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &*node.value;
        match &node.op {
            Op::Constant | Op::Parameter | Op::Detach => {}
            Op::Add(a, b, k) => {
                self.accum(grads, *a, g.clone());
                let gb = bcast_reduce(g, *k, self.shape(*b));
                self.accum(grads, *b, gb);
            }
            Op::Sub(a, b, k) => {
                self.accum(grads, *a, g.clone());
                let gb = bcast_reduce(&g.scale(-1.0), *k, self.shape(*b));
                self.accum(grads, *b, gb);
            }
            Op::Mul(a, b, k) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    let ga = bcast_apply(g, vb, *k, |x, y| x * y);
                    self.accum(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let full = g.zip_map(va, |x, y| x * y);
                    self.accum(grads, *b, bcast_reduce(&full, *k, vb.shape()));
                }
            }
            Op::Scale(a, k) => self.accum(grads, *a, g.scale(*k)),
            Op::Offset(a) => self.accum(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                if self.nodes[a.0].needs_grad {
                    let mut out = vec![0.0; n * k];
                    gemm(n, m, k, 1.0, g.data(), false, vb.data(), true, 0.0, &mut out);
                    self.accum(grads, *a, Tensor::from_vec(n, k, out));
                }
                if self.nodes[b.0].needs_grad {
                    let mut out = vec![0.0; k * m];
                    gemm(k, n, m, 1.0, va.data(), true, g.data(), false, 0.0, &mut out);
                    self.accum(grads, *b, Tensor::from_vec(k, m, out));
                }
            }
            Op::Transpose(a) => self.accum(grads, *a, g.transpose()),
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                self.accum(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |g, x| g * gelu_grad(x));
                self.accum(grads, *a, ga);
            }
            Op::Silu(a) => {
                let ga = g.zip_map(self.value(*a), |g, x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                });
                self.accum(grads, *a, ga);
            }
            Op::Tanh(a) => self.accum(grads, *a, g.zip_map(y, |g, t| g * (1.0 - t * t))),
            Op::Exp(a) => self.accum(grads, *a, g.zip_map(y, |g, e| g * e)),
            Op::Log(a) => {
                let ga = g.zip_map(self.value(*a), |g, x| g / x);
                self.accum(grads, *a, ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |g, x| 2.0 * g * x);
                self.accum(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let ga = g.zip_map(self.value(*a), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 });
                self.accum(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let cols = y.cols();
                let mut out = vec![0.0; y.len()];
                for ((o, yr), gr) in out.chunks_mut(cols).zip(y.data().chunks(cols)).zip(g.data().chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accum(grads, *a, Tensor::new(y.shape().to_vec(), out).unwrap());
            }
            Op::RmsNormRows(a, eps) => {
                let x = self.value(*a);
                let cols = x.cols();
                let mut out = vec![0.0; x.len()];
                for (((o, xr), yr), gr) in out
                    .chunks_mut(cols)
                    .zip(x.data().chunks(cols))
                    .zip(y.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let r = (xr.iter().map(|v| v * v).sum::<f64>() / cols as f64 + eps).sqrt();
                    let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * gy) / r;
                    }
                }
                self.accum(grads, *a, Tensor::new(x.shape().to_vec(), out).unwrap());
            }
            Op::LayerNormRows(a, eps) => {
                let x = self.value(*a);
                let cols = x.cols();
                let n = cols as f64;
                let mut out = vec![0.0; x.len()];
                for (((o, xr), yr), gr) in out
                    .chunks_mut(cols)
                    .zip(x.data().chunks(cols))
                    .zip(y.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let mu = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let r = (var + eps).sqrt();
                    let gm = gr.iter().sum::<f64>() / n;
                    let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *o = (gv - gm - yv * gy) / r;
                    }
                }
                self.accum(grads, *a, Tensor::new(x.shape().to_vec(), out).unwrap());
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let out: Vec<f64> = (0..rows).flat_map(|r| g.row_slice(r)[off..off + c].to_vec()).collect();
                        self.accum(grads, p, Tensor::from_vec(rows, c, out));
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.nodes[p.0].needs_grad {
                        let out = g.data()[off * cols..(off + r) * cols].to_vec();
                        self.accum(grads, p, Tensor::from_vec(r, cols, out));
                    }
                    off += r;
                }
            }
            Op::SliceCols(a, start, end) => {
                let x = self.value(*a);
                let (rows, cols) = (x.rows(), x.cols());
                let mut out = vec![0.0; rows * cols];
                let w = end - start;
                for r in 0..rows {
                    out[r * cols + start..r * cols + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.accum(grads, *a, Tensor::from_vec(rows, cols, out));
            }
            Op::SliceRows(a, start, end) => {
                let x = self.value(*a);
                let cols = x.cols();
                let mut out = vec![0.0; x.len()];
                out[start * cols..end * cols].copy_from_slice(g.data());
                self.accum(grads, *a, Tensor::from_vec(x.rows(), cols, out));
            }
            Op::BroadcastRows(a) => {
                let cols = g.cols();
                let mut out = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.accum(grads, *a, Tensor::from_vec(1, cols, out));
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accum(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let s = g.item() / n;
                self.accum(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::SmoothL1(p, t, beta) => {
                let (vp, vt) = (self.value(*p), self.value(*t));
                let s = g.item() / vp.len() as f64;
                let dp = vp.zip_map(vt, |a, b| s * smooth_l1_grad(a - b, *beta));
                if self.nodes[t.0].needs_grad {
                    self.accum(grads, *t, dp.scale(-1.0));
                }
                self.accum(grads, *p, dp);
            }
        }
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

pub(crate) fn smooth_l1_elem(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}
