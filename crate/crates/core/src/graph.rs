//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every minibatch. Nodes are appended in
//! evaluation order, so walking the node list backwards is a valid reverse
//! topological order for [`Graph::backward`].

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_kernel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Binary(BinaryOp, Var, Var),
    /// `m×n` plus a length-`n` row broadcast over every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(UnaryOp, Var),
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    GradReverse(Var, f64),
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    bind_order: Vec<ParamId>,
    trainable: Option<HashSet<ParamId>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph in which only `ids` (and only if not frozen) receive gradient.
    pub fn with_trainable(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Self {
            trainable: Some(ids.into_iter().collect()),
            ..Self::default()
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// A leaf that receives gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Binds a stored parameter as a leaf. Repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let trainable = !store.is_frozen(id) && self.trainable.as_ref().is_none_or(|set| set.contains(&id));
        let v = self.push(Op::Leaf, store.get(id).clone(), trainable);
        self.bound.insert(id, v);
        self.bind_order.push(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, zeros when nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    /// Gradients of every bound trainable parameter, in bind order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bind_order
            .iter()
            .filter_map(|&id| {
                let v = self.bound[&id];
                self.rg(v).then(|| (id, self.grad_or_zeros(v)))
            })
            .collect()
    }

    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    /// `a · bᵀ` with `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(Error::shape("matmul_bt", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        matmul_a_bt(ta.values(), tb.values(), &mut out, m, n, k);
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMulBt(a, b), value, rg))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            let name = match op {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
            };
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let value = match op {
            BinaryOp::Add => ta.zip_map(tb, |x, y| x + y),
            BinaryOp::Sub => ta.zip_map(tb, |x, y| x - y),
            BinaryOp::Mul => ta.zip_map(tb, |x, y| x * y),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Binary(op, a, b), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if ta.shape().len() != 2 || tr.len() != ta.shape()[1] {
            return Err(Error::shape("add_row", ta.shape(), tr.shape()));
        }
        let n = tr.len();
        let mut value = ta.clone();
        for (i, v) in value.values_mut().iter_mut().enumerate() {
            *v += tr.values()[i % n];
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Op::AddRow(a, row), value, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), value, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(Op::AddScalar(a), value, rg)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = match op {
            UnaryOp::Relu => t.map(|x| x.max(0.0)),
            UnaryOp::Sigmoid => t.map(sigmoid),
            UnaryOp::Tanh => t.map(f64::tanh),
            UnaryOp::Exp => t.map(f64::exp),
            UnaryOp::Log => {
                if let Some(bad) = t.values().iter().find(|&&x| x.is_nan() || x <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                t.map(f64::ln)
            }
        };
        let rg = self.rg(a);
        Ok(self.push(Op::Unary(op, a), value, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a).expect("relu is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a).expect("tanh is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape("concat", sa, sb));
        }
        let inner: usize = sa[axis + 1..].iter().product();
        let outer: usize = sa[..axis].iter().product();
        let (ca, cb) = (sa[axis] * inner, sb[axis] * inner);
        let mut values = Vec::with_capacity(ta.len() + tb.len());
        for o in 0..outer {
            values.extend_from_slice(&ta.values()[o * ca..(o + 1) * ca]);
            values.extend_from_slice(&tb.values()[o * cb..(o + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let value = Tensor::new(shape, values)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Concat { a, b, axis }, value, rg))
    }

    /// The slice `start..start + len` of `a` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape("narrow", s, &[axis, start, len]));
        }
        let inner: usize = s[axis + 1..].iter().product();
        let outer: usize = s[..axis].iter().product();
        let full = s[axis] * inner;
        let mut values = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            values.extend_from_slice(&ta.values()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, values)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Narrow { a, axis, start }, value, rg))
    }

    /// Identity on the forward pass; multiplies the upstream gradient by
    /// `-strength` on the backward pass.
    pub fn grad_reverse(&mut self, a: Var, strength: f64) -> Var {
        debug_assert!(strength >= 0.0, "gradient reversal strength must be >= 0");
        let value = self.value(a).clone();
        let rg = self.rg(a);
        self.push(Op::GradReverse(a, strength), value, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).values().iter().sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), value, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.values().iter().sum::<f64>() / t.len() as f64);
        let rg = self.rg(a);
        self.push(Op::Mean(a), value, rg)
    }

    /// Mean over rows of `-log softmax(logits)[target]`, computed with
    /// max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.shape()[0] != targets.len() {
            return Err(Error::shape("softmax_cross_entropy", t.shape(), &[targets.len()]));
        }
        let classes = t.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&y| y >= classes) {
            return Err(Error::Index {
                what: "softmax_cross_entropy classes",
                index: bad,
                bound: classes,
            });
        }
        let mut probs = t.clone();
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = &mut probs.values_mut()[i * classes..(i + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // Taken before exponentiation: exp(target - max) may underflow.
            let shifted_target = row[y] - max;
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
            loss += z.ln() - shifted_target;
        }
        let value = Tensor::scalar(loss / targets.len().max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            value,
            rg,
        ))
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&delta),
            None => node.grad = Some(delta),
        }
    }

    /// Reverse pass from a scalar `loss`. Clears every accumulator first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        self.nodes[loss.0].grad = Some(seed);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &Tensor) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_a_bt(g.values(), tb.values(), &mut da, m, k, n);
                    self.accumulate(a, Tensor::matrix(m, k, da).expect("shape"));
                }
                if self.rg(b) {
                    let ta = self.value(a);
                    let mut db = vec![0.0; k * n];
                    matmul_at_b(ta.values(), g.values(), &mut db, m, k, n);
                    self.accumulate(b, Tensor::matrix(k, n, db).expect("shape"));
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_kernel(g.values(), tb.values(), &mut da, m, n, k);
                    self.accumulate(a, Tensor::matrix(m, k, da).expect("shape"));
                }
                if self.rg(b) {
                    let ta = self.value(a);
                    let mut db = vec![0.0; n * k];
                    matmul_at_b(g.values(), ta.values(), &mut db, m, n, k);
                    self.accumulate(b, Tensor::matrix(n, k, db).expect("shape"));
                }
            }
            Op::Binary(kind, a, b) => match kind {
                BinaryOp::Add => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.clone());
                }
                BinaryOp::Sub => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.map(|x| -x));
                }
                BinaryOp::Mul => {
                    if self.rg(a) {
                        let d = g.zip_map(self.value(b), |x, y| x * y);
                        self.accumulate(a, d);
                    }
                    if self.rg(b) {
                        let d = g.zip_map(self.value(a), |x, y| x * y);
                        self.accumulate(b, d);
                    }
                }
            },
            Op::AddRow(a, row) => {
                self.accumulate(a, g.clone());
                if self.rg(row) {
                    let shape = self.value(row).shape().to_vec();
                    let n = g.cols();
                    let mut d = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (acc, &x) in d.iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    self.accumulate(row, Tensor::new(shape, d).expect("shape"));
                }
            }
            Op::Scale(a, c) => self.accumulate(a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(a, g.clone()),
            Op::Unary(kind, a) => {
                let y = &self.nodes[i].value;
                let d = match kind {
                    UnaryOp::Relu => g.zip_map(self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
                    UnaryOp::Sigmoid => g.zip_map(y, |gv, s| gv * s * (1.0 - s)),
                    UnaryOp::Tanh => g.zip_map(y, |gv, t| gv * (1.0 - t * t)),
                    UnaryOp::Exp => g.zip_map(y, |gv, e| gv * e),
                    UnaryOp::Log => g.zip_map(self.value(a), |gv, x| gv / x),
                };
                self.accumulate(a, d);
            }
            Op::Concat { a, b, axis } => {
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let inner: usize = sa[axis + 1..].iter().product();
                let outer: usize = sa[..axis].iter().product();
                let (ca, cb) = (sa[axis] * inner, sb[axis] * inner);
                let mut da = Vec::with_capacity(outer * ca);
                let mut db = Vec::with_capacity(outer * cb);
                for o in 0..outer {
                    let base = o * (ca + cb);
                    da.extend_from_slice(&g.values()[base..base + ca]);
                    db.extend_from_slice(&g.values()[base + ca..base + ca + cb]);
                }
                self.accumulate(a, Tensor::new(sa, da).expect("shape"));
                self.accumulate(b, Tensor::new(sb, db).expect("shape"));
            }
            Op::Narrow { a, axis, start } => {
                let s = self.value(a).shape().to_vec();
                let len = g.shape()[axis];
                let inner: usize = s[axis + 1..].iter().product();
                let outer: usize = s[..axis].iter().product();
                let full = s[axis] * inner;
                let mut d = Tensor::zeros(&s);
                for o in 0..outer {
                    let dst = o * full + start * inner;
                    let src = o * len * inner;
                    d.values_mut()[dst..dst + len * inner].copy_from_slice(&g.values()[src..src + len * inner]);
                }
                self.accumulate(a, d);
            }
            Op::GradReverse(a, strength) => self.accumulate(a, g.map(|x| -strength * x)),
            Op::Sum(a) => {
                let shape = self.value(a).shape().to_vec();
                self.accumulate(a, Tensor::full(&shape, g.item()));
            }
            Op::Mean(a) => {
                let t = self.value(a);
                let shape = t.shape().to_vec();
                let n = t.len() as f64;
                self.accumulate(a, Tensor::full(&shape, g.item() / n));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                ref targets,
                ref probs,
            } => {
                let classes = probs.cols();
                let scale = g.item() / targets.len().max(1) as f64;
                let mut d = probs.clone();
                for (r, &y) in targets.iter().enumerate() {
                    d.values_mut()[r * classes + y] -= 1.0;
                }
                for v in d.values_mut() {
                    *v *= scale;
                }
                self.accumulate(logits, d);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
