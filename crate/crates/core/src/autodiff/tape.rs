//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s in execution
//! order, which is a valid topological order. [`Tape::backward`] walks the
//! record once in reverse and returns gradients for every leaf created with
//! [`Tape::leaf`]. A tape can be differentiated exactly once; build a fresh
//! tape for every evaluation that needs gradients.
//!
//! ```
//! use hoi_refine::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).item().unwrap(), 6.0);
//! ```
//!
//! Broadcasting is deliberately narrow: binary ops accept equal shapes, a
//! one-element operand on either side, or a `[m]` row vector on the right of
//! an `[n, m]` matrix. Anything else must be expanded explicitly with
//! [`Var::expand_rows`] / [`Var::expand_cols`].

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Local gradient rule: maps the upstream gradient of a node to one optional
/// gradient per parent, in parent order.
pub type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape: ops touching a leaf keep their gradient rules.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            consumed: Cell::new(false),
        }
    }

    /// A tape that only evaluates values; no gradient rules are kept.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let requires_grad = self.grad_enabled;
        self.insert(Arc::new(value), Vec::new(), None, requires_grad)
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(Arc::new(value), Vec::new(), None, false)
    }

    /// Constant backed by shared storage, without copying.
    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.insert(value, Vec::new(), None, false)
    }

    /// Leaf backed by shared storage, without copying.
    pub fn leaf_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        let requires_grad = self.grad_enabled;
        self.insert(value, Vec::new(), None, requires_grad)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn insert(
        &self,
        value: Arc<Tensor>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records a primitive with a caller-supplied gradient rule.
    ///
    /// `backward` receives the upstream gradient (shaped like `value`) and
    /// must return one entry per input.
    pub fn custom<F>(&self, op: &str, inputs: &[Var<'_>], value: Tensor, backward: F) -> Result<Var<'_>>
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.requires_grad(v.id));
        if requires_grad {
            let parents = inputs.iter().map(|v| v.id).collect();
            Ok(self.insert(Arc::new(value), parents, Some(Box::new(backward)), true))
        } else {
            Ok(self.insert(Arc::new(value), Vec::new(), None, false))
        }
    }

    /// Propagates gradients from a scalar `root` back to every leaf.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if !root_value.is_scalar() {
            self.consumed.set(false);
            return Err(Error::NotScalar(root_value.shape().to_vec()));
        }
        let mut pending: Vec<Option<Tensor>> = vec![None; root.id + 1];
        let mut leaves: Vec<Option<Tensor>> = vec![None; nodes.len()];
        pending[root.id] = Some(Tensor::full(root_value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.backward {
                Some(rule) => {
                    for (&parent, g) in node.parents.iter().zip(rule(&grad)) {
                        let Some(g) = g else { continue };
                        if !nodes[parent].requires_grad {
                            continue;
                        }
                        match &mut pending[parent] {
                            Some(acc) => acc.add_assign(&g),
                            slot => *slot = Some(g),
                        }
                    }
                }
                None if node.requires_grad => leaves[id] = Some(grad),
                None => {}
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `leaf`; zeros when the leaf did not reach the root.
    pub fn get(&self, leaf: Var<'_>) -> Tensor {
        match self.grads.get(leaf.id).and_then(|g| g.clone()) {
            Some(g) => g,
            None => Tensor::zeros(leaf.value().shape()),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
    RhsRow(usize),
}

impl Bcast {
    #[inline]
    fn index(self, i: usize) -> (usize, usize) {
        match self {
            Bcast::Same => (i, i),
            Bcast::LhsScalar => (0, i),
            Bcast::RhsScalar => (i, 0),
            Bcast::RhsRow(m) => (i, i % m),
        }
    }
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Bcast, Vec<usize>)> {
    let mismatch = || Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.shape() == b.shape() {
        return Ok((Bcast::Same, a.shape().to_vec()));
    }
    let scalar_like = |t: &Tensor| t.numel() == 1 && t.rank() <= 1;
    if scalar_like(b) {
        return Ok((Bcast::RhsScalar, a.shape().to_vec()));
    }
    if scalar_like(a) {
        return Ok((Bcast::LhsScalar, b.shape().to_vec()));
    }
    if let [_, m] = a.shape() {
        let row = match b.shape() {
            [k] => *k == *m,
            [1, k] => *k == *m,
            _ => false,
        };
        if row {
            return Ok((Bcast::RhsRow(*m), a.shape().to_vec()));
        }
    }
    Err(mismatch())
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn check_same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    fn binary(
        self,
        rhs: Var<'t>,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        dfa: fn(f64, f64, f64) -> f64,
        dfb: fn(f64, f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.check_same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        let (bc, shape) = broadcast(op, &a, &b)?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let (ia, ib) = bc.index(i);
                f(ad[ia], bd[ib])
            })
            .collect();
        let out = Arc::new(Tensor::from_parts(shape, out));
        let out_c = out.clone();
        let need_a = self.requires_grad();
        let need_b = rhs.requires_grad();
        self.tape.custom(op, &[self, rhs], (*out).clone(), move |g| {
            let (ad, bd, od) = (a.data(), b.data(), out_c.data());
            let mut ga = need_a.then(|| Tensor::zeros(a.shape()));
            let mut gb = need_b.then(|| Tensor::zeros(b.shape()));
            for (i, &gi) in g.data().iter().enumerate() {
                let (ia, ib) = bc.index(i);
                if let Some(ga) = ga.as_mut() {
                    ga.data_mut()[ia] += gi * dfa(ad[ia], bd[ib], od[i]);
                }
                if let Some(gb) = gb.as_mut() {
                    gb.data_mut()[ib] += gi * dfb(ad[ia], bd[ib], od[i]);
                }
            }
            vec![ga, gb]
        })
    }

    fn unary<F, D>(self, op: &'static str, f: F, df: D) -> Result<Var<'t>>
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let x = self.value();
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect());
        let y = Arc::new(out.clone());
        self.tape.custom(op, &[self], out, move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", |a, b| a + b, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |a, b| a - b, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "div", |a, b| a / b, |_, b, _| 1.0 / b, |_, b, o| -o / b)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary("sqrt", f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary("gelu", gelu, |x, _| gelu_grad(x))
    }

    /// Elementwise `max(x, c)`.
    pub fn max_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("max_scalar", move |x| x.max(c), move |x, _| if x > c { 1.0 } else { 0.0 })
    }

    /// Elementwise `min(x, c)`.
    pub fn min_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("min_scalar", move |x| x.min(c), move |x, _| if x < c { 1.0 } else { 0.0 })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshaped(shape.to_vec())?;
        self.tape.custom("reshape", &[self], out, move |g| {
            vec![Some(Tensor::from_parts(old.clone(), g.data().to_vec()))]
        })
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        let (m, k, k2, n) = match (a.shape(), b.shape()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => (0, 0, 1, 0),
        };
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = Tensor::from_parts(vec![m, n], gemm(a.data(), m, k, false, b.data(), k, n, false));
        let need_a = self.requires_grad();
        let need_b = rhs.requires_grad();
        self.tape.custom("matmul", &[self, rhs], out, move |g| {
            let ga = need_a.then(|| {
                Tensor::from_parts(vec![m, k], gemm(g.data(), m, n, false, b.data(), k, n, true))
            });
            let gb = need_b.then(|| {
                Tensor::from_parts(vec![k, n], gemm(a.data(), m, k, true, g.data(), m, n, false))
            });
            vec![ga, gb]
        })
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        let [r, c] = *x.shape() else {
            return Err(Error::invalid("transpose", format!("expected rank 2, got {:?}", x.shape())));
        };
        let out = transpose_data(x.data(), r, c);
        self.tape.custom("transpose", &[self], Tensor::from_parts(vec![c, r], out), move |g| {
            vec![Some(Tensor::from_parts(vec![r, c], transpose_data(g.data(), c, r)))]
        })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let s: f64 = x.data().iter().sum();
        self.tape.custom("sum", &[self], Tensor::scalar(s), move |g| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel();
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum over `axis` of a rank-2 tensor.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let [r, c] = *x.shape() else {
            return Err(Error::invalid("sum_axis", format!("expected rank 2, got {:?}", x.shape())));
        };
        let d = x.data();
        let out = match axis {
            0 => {
                let mut s = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        s[j] += d[i * c + j];
                    }
                }
                Tensor::from_parts(vec![c], s)
            }
            1 => Tensor::from_parts(vec![r], (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect()),
            _ => return Err(Error::invalid("sum_axis", format!("axis {axis} out of range"))),
        };
        self.tape.custom("sum_axis", &[self], out, move |g| {
            let gd = g.data();
            let data = (0..r * c)
                .map(|k| if axis == 0 { gd[k % c] } else { gd[k / c] })
                .collect();
            vec![Some(Tensor::from_parts(vec![r, c], data))]
        })
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize, bool)> {
        let shape = self.shape();
        match shape.as_slice() {
            [n] => Ok((1, *n, true)),
            [r, c] => Ok((*r, *c, false)),
            _ => Err(Error::invalid(op, format!("expected rank 1 or 2, got {shape:?}"))),
        }
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let (r, c, _) = self.rows_cols("softmax")?;
        let x = self.value();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x.data()[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= z;
            }
        }
        let y = Arc::new(Tensor::from_parts(x.shape().to_vec(), out));
        let yc = y.clone();
        self.tape.custom("softmax", &[self], (*y).clone(), move |g| {
            let (yd, gd) = (yc.data(), g.data());
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let s = (0..c).map(|j| gd[i * c + j] * yd[i * c + j]).sum::<f64>();
                for j in 0..c {
                    gx[i * c + j] = yd[i * c + j] * (gd[i * c + j] - s);
                }
            }
            vec![Some(Tensor::from_parts(yc.shape().to_vec(), gx))]
        })
    }

    fn extreme_last(self, op: &'static str, take_max: bool) -> Result<Var<'t>> {
        let (r, c, vec_in) = self.rows_cols(op)?;
        if c == 0 {
            return Err(Error::invalid(op, "empty reduction axis"));
        }
        let x = self.value();
        let mut arg = vec![0usize; r];
        let mut vals = vec![0.0; r];
        for i in 0..r {
            let row = &x.data()[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                let better = if take_max { row[j] > row[best] } else { row[j] < row[best] };
                if better {
                    best = j;
                }
            }
            arg[i] = best;
            vals[i] = row[best];
        }
        let shape = x.shape().to_vec();
        let out_shape = if vec_in { vec![] } else { vec![r] };
        self.tape.custom(op, &[self], Tensor::from_parts(out_shape, vals), move |g| {
            let mut gx = Tensor::zeros(&shape);
            for (i, &j) in arg.iter().enumerate() {
                gx.data_mut()[i * c + j] += g.data()[i];
            }
            vec![Some(gx)]
        })
    }

    /// Maximum along the last axis (`[n, m] → [n]`, `[m] → []`).
    pub fn max_last(self) -> Result<Var<'t>> {
        self.extreme_last("max_last", true)
    }

    /// Minimum along the last axis (`[n, m] → [n]`, `[m] → []`).
    pub fn min_last(self) -> Result<Var<'t>> {
        self.extreme_last("min_last", false)
    }

    /// Selects rows of a rank-2 tensor (or elements of a rank-1 tensor).
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>> {
        let (r, c, vec_in) = self.rows_cols("gather")?;
        let rows = if vec_in { c } else { r };
        let width = if vec_in { 1 } else { c };
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("gather", format!("index {bad} out of range for {rows} rows")));
        }
        let x = self.value();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
        }
        let shape = x.shape().to_vec();
        let out_shape = if vec_in { vec![indices.len()] } else { vec![indices.len(), c] };
        let idx = indices.to_vec();
        self.tape.custom("gather", &[self], Tensor::from_parts(out_shape, out), move |g| {
            let mut gx = Tensor::zeros(&shape);
            for (k, &i) in idx.iter().enumerate() {
                for w in 0..width {
                    gx.data_mut()[i * width + w] += g.data()[k * width + w];
                }
            }
            vec![Some(gx)]
        })
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (r, c) = match (shape.as_slice(), axis) {
            ([n], 0) => (1, *n),
            ([r, c], 0 | 1) => (*r, *c),
            _ => return Err(Error::invalid("narrow", format!("axis {axis} invalid for {shape:?}"))),
        };
        let extent = if shape.len() == 1 || axis == 1 { c } else { r };
        if start + len > extent {
            return Err(Error::invalid("narrow", format!("range {start}..{} exceeds {extent}", start + len)));
        }
        let (out, out_shape) = if shape.len() == 1 {
            (x.data()[start..start + len].to_vec(), vec![len])
        } else if axis == 0 {
            (x.data()[start * c..(start + len) * c].to_vec(), vec![len, c])
        } else {
            let mut o = Vec::with_capacity(r * len);
            for i in 0..r {
                o.extend_from_slice(&x.data()[i * c + start..i * c + start + len]);
            }
            (o, vec![r, len])
        };
        self.tape.custom("narrow", &[self], Tensor::from_parts(out_shape, out), move |g| {
            let mut gx = Tensor::zeros(&shape);
            let gd = g.data();
            if shape.len() == 1 {
                gx.data_mut()[start..start + len].copy_from_slice(gd);
            } else if axis == 0 {
                gx.data_mut()[start * c..(start + len) * c].copy_from_slice(gd);
            } else {
                for i in 0..r {
                    gx.data_mut()[i * c + start..i * c + start + len]
                        .copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Concatenates rank-1 tensors, or rank-2 tensors along `axis`.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("concat", "no inputs"));
        };
        let tape = first.tape;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let s0 = values[0].shape().to_vec();
        for v in &values[1..] {
            let ok = match (s0.as_slice(), v.shape(), axis) {
                ([_], [_], 0) => true,
                ([_, c0], [_, c], 0) => c0 == c,
                ([r0, _], [r, _], 1) => r0 == r,
                _ => false,
            };
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let rank2_cols = s0.len() == 2 && axis == 1;
        let (out, out_shape, widths) = if rank2_cols {
            let r = s0[0];
            let widths: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
            let total: usize = widths.iter().sum();
            let mut o = Vec::with_capacity(r * total);
            for i in 0..r {
                for (v, &w) in values.iter().zip(&widths) {
                    o.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
                }
            }
            (o, vec![r, total], widths)
        } else {
            let sizes: Vec<usize> = values.iter().map(|v| v.numel()).collect();
            let o: Vec<f64> = values.iter().flat_map(|v| v.data().iter().copied()).collect();
            let shape = if s0.len() == 1 {
                vec![o.len()]
            } else {
                vec![values.iter().map(|v| v.shape()[0]).sum(), s0[1]]
            };
            (o, shape, sizes)
        };
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        tape.custom("concat", parts, Tensor::from_parts(out_shape, out), move |g| {
            let gd = g.data();
            if rank2_cols {
                let total: usize = widths.iter().sum();
                let r = shapes[0][0];
                let mut offset = 0;
                widths
                    .iter()
                    .zip(&shapes)
                    .map(|(&w, s)| {
                        let mut o = Vec::with_capacity(r * w);
                        for i in 0..r {
                            o.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        Some(Tensor::from_parts(s.clone(), o))
                    })
                    .collect()
            } else {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(&shapes)
                    .map(|(&n, s)| {
                        let o = gd[offset..offset + n].to_vec();
                        offset += n;
                        Some(Tensor::from_parts(s.clone(), o))
                    })
                    .collect()
            }
        })
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let (r, c, _) = self.rows_cols("layer_norm")?;
        let x = self.value();
        let mut y = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &x.data()[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..c {
                y[i * c + j] = (row[j] - mu) * s;
            }
        }
        let y = Arc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let yc = y.clone();
        self.tape.custom("layer_norm", &[self], (*y).clone(), move |g| {
            let (yd, gd) = (yc.data(), g.data());
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let gr = &gd[i * c..(i + 1) * c];
                let yr = &yd[i * c..(i + 1) * c];
                let mg = gr.iter().sum::<f64>() / c as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for j in 0..c {
                    gx[i * c + j] = inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                }
            }
            vec![Some(Tensor::from_parts(yc.shape().to_vec(), gx))]
        })
    }

    /// Repeats a `[m]` (or `[1, m]`) row `n` times into `[n, m]`.
    pub fn expand_rows(self, n: usize) -> Result<Var<'t>> {
        let x = self.value();
        let m = match x.shape() {
            [m] | [1, m] => *m,
            s => return Err(Error::invalid("expand_rows", format!("expected a row vector, got {s:?}"))),
        };
        let shape = x.shape().to_vec();
        let out: Vec<f64> = (0..n).flat_map(|_| x.data().iter().copied()).collect();
        self.tape.custom("expand_rows", &[self], Tensor::from_parts(vec![n, m], out), move |g| {
            let mut s = vec![0.0; m];
            for (k, v) in g.data().iter().enumerate() {
                s[k % m] += v;
            }
            vec![Some(Tensor::from_parts(shape.clone(), s))]
        })
    }

    /// Repeats a `[n]` (or `[n, 1]`) column `m` times into `[n, m]`.
    pub fn expand_cols(self, m: usize) -> Result<Var<'t>> {
        let x = self.value();
        let n = match x.shape() {
            [n] | [n, 1] => *n,
            s => return Err(Error::invalid("expand_cols", format!("expected a column vector, got {s:?}"))),
        };
        let shape = x.shape().to_vec();
        let out: Vec<f64> = x.data().iter().flat_map(|&v| std::iter::repeat(v).take(m)).collect();
        self.tape.custom("expand_cols", &[self], Tensor::from_parts(vec![n, m], out), move |g| {
            let s = (0..n).map(|i| g.data()[i * m..(i + 1) * m].iter().sum()).collect();
            vec![Some(Tensor::from_parts(shape.clone(), s))]
        })
    }

    /// Squared Euclidean distances between the rows of `self` (`[n, d]`) and
    /// the rows of `other` (`[m, d]`), as `[n, m]`.
    pub fn pairwise_sqdist(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let a = self.value();
        let b = other.value();
        let (n, m, d) = match (a.shape(), b.shape()) {
            ([n, d], [m, d2]) if d == d2 => (*n, *m, *d),
            _ => {
                return Err(Error::Shape {
                    op: "pairwise_sqdist",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })
            }
        };
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ai = &a.data()[i * d..(i + 1) * d];
            for j in 0..m {
                let bj = &b.data()[j * d..(j + 1) * d];
                out[i * m + j] = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        let need_a = self.requires_grad();
        let need_b = other.requires_grad();
        self.tape.custom("pairwise_sqdist", &[self, other], Tensor::from_parts(vec![n, m], out), move |g| {
            let mut ga = need_a.then(|| Tensor::zeros(&[n, d]));
            let mut gb = need_b.then(|| Tensor::zeros(&[m, d]));
            for i in 0..n {
                for j in 0..m {
                    let gij = g.data()[i * m + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        let diff = 2.0 * gij * (a.data()[i * d + k] - b.data()[j * d + k]);
                        if let Some(ga) = ga.as_mut() {
                            ga.data_mut()[i * d + k] += diff;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb.data_mut()[j * d + k] -= diff;
                        }
                    }
                }
            }
            vec![ga, gb]
        })
    }
}

fn transpose_data(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}
