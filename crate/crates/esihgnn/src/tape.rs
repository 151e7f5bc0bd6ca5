//! Reverse-mode automatic differentiation over a dynamically built
//! computation record.
//!
//! A [`Tape`] records primitive operations during a forward pass. Calling
//! [`Tape::backward`] on a scalar node replays the record in exact reverse
//! order, computing vector-Jacobian products and accumulating gradients
//! into the [`ParamStore`] for every parameter the tape touched.
//!
//! One tape per conversation forward/backward; tapes are never shared
//! across threads while in progress.
//!
//! ```
//! use esihgnn::tape::{ParamStore, Tape};
//! use esihgnn::tensor::Tensor;
//!
//! let mut store = ParamStore::<f64>::new();
//! let x = store.register("x", Tensor::vector(vec![1.0, 2.0]));
//!
//! let mut tape = Tape::new();
//! let xn = tape.param(&store, x);
//! let loss = tape.dot(xn, xn).unwrap(); // loss = x·x
//! tape.backward(loss, &mut store).unwrap();
//!
//! assert_eq!(store.grad(x).data(), &[2.0, 4.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a named trainable parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Handle to a value node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

struct ParamEntry<T> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
}

/// Owns all trainable parameters and their gradient buffers. Parameters
/// are registered once at model construction; tapes reference them by id.
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(ParamEntry { name: name.into(), value, grad });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad = Tensor::zeros(e.value.shape().to_vec());
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: Tensor::zeros(e.value.shape().to_vec()),
                })
                .collect(),
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

enum Op<T> {
    /// Constant input; receives no gradient.
    Leaf,
    Param(ParamId),
    /// `w [m,n] · x [n] -> [m]`
    MatVec { w: NodeId, x: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Sigmoid(NodeId),
    Tanh(NodeId),
    LeakyRelu(NodeId, T),
    Softmax(NodeId),
    Concat(Vec<NodeId>),
    /// `Σ_k weights[k] · items[k]`, with `weights` a length-K vector node.
    WeightedSum { weights: NodeId, items: Vec<NodeId> },
    Sum(NodeId),
    Dot(NodeId, NodeId),
    /// `-log softmax(logits)[label]` as a scalar node.
    NllLoss { logits: NodeId, label: usize },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Ordered record of primitive operations. Replaying it backward visits
/// operations in exact reverse creation order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Record a constant input. Constants receive no gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Bring a trainable parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        self.nodes.push(Node { op: Op::Param(id), value: store.value(id).clone() });
        NodeId(self.nodes.len() - 1)
    }

    /// `y = Wx`, the matrix-vector product behind every linear map.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (wt, xt) = (self.value(w), self.value(x));
        if wt.shape().len() != 2 || wt.cols() != xt.len() {
            return Err(Error::Shape {
                op: "matvec",
                detail: format!("W {:?} vs x {:?}", wt.shape(), xt.shape()),
            });
        }
        let (m, n) = (wt.rows(), wt.cols());
        let mut out = vec![T::zero(); m];
        for r in 0..m {
            let mut acc = T::zero();
            for c in 0..n {
                acc = acc + wt.at2(r, c) * xt.at(c);
            }
            out[r] = acc;
        }
        self.push(Op::MatVec { w, x }, Tensor::vector(out), "matvec")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", at.shape(), bt.shape()),
            });
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| x + y).collect();
        let shape = at.shape().to_vec();
        self.push(Op::Add(a, b), Tensor::new(shape, data)?, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::Shape {
                op: "sub",
                detail: format!("{:?} vs {:?}", at.shape(), bt.shape()),
            });
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| x - y).collect();
        let shape = at.shape().to_vec();
        self.push(Op::Sub(a, b), Tensor::new(shape, data)?, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", at.shape(), bt.shape()),
            });
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| x * y).collect();
        let shape = at.shape().to_vec();
        self.push(Op::Mul(a, b), Tensor::new(shape, data)?, "mul")
    }

    pub fn scale(&mut self, a: NodeId, alpha: T) -> Result<NodeId> {
        let value = self.value(a).map(|v| v * alpha);
        self.push(Op::Scale(a, alpha), value, "scale")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(Op::Sigmoid(a), value, "sigmoid")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|v| v.tanh());
        self.push(Op::Tanh(a), value, "tanh")
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> Result<NodeId> {
        let value = self.value(a).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(Op::LeakyRelu(a, slope), value, "leaky_relu")
    }

    /// Numerically stable softmax with max-subtraction. Empty input is a
    /// domain error.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let at = self.value(a);
        if at.is_empty() {
            return Err(Error::Domain { op: "softmax", detail: "empty input".into() });
        }
        let value = softmax_value(at);
        self.push(Op::Softmax(a), value, "softmax")
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Domain { op: "concat", detail: "no parts".into() });
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::vector(data), "concat")
    }

    /// `Σ_k weights[k] · items[k]` with per-item gradients for both sides.
    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> Result<NodeId> {
        let wt = self.value(weights);
        if wt.len() != items.len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                detail: format!("{} weights vs {} items", wt.len(), items.len()),
            });
        }
        if items.is_empty() {
            return Err(Error::Domain { op: "weighted_sum", detail: "no items".into() });
        }
        let dim = self.value(items[0]).len();
        let mut out = vec![T::zero(); dim];
        for (k, &item) in items.iter().enumerate() {
            let w = self.value(weights).at(k);
            let it = self.value(item);
            for (o, &v) in out.iter_mut().zip(it.data()) {
                *o = *o + w * v;
            }
        }
        self.push(
            Op::WeightedSum { weights, items: items.to_vec() },
            Tensor::vector(out),
            "weighted_sum",
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Op::Sum(a), Tensor::scalar(total), "sum")
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.len() != bt.len() {
            return Err(Error::Shape {
                op: "dot",
                detail: format!("{} vs {}", at.len(), bt.len()),
            });
        }
        let v = at.dot(bt);
        self.push(Op::Dot(a, b), Tensor::scalar(v), "dot")
    }

    /// `-log softmax(logits)[label]`, computed via log-sum-exp.
    pub fn nll_loss(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let lt = self.value(logits);
        if label >= lt.len() {
            return Err(Error::Domain {
                op: "nll_loss",
                detail: format!("label {} out of range for {} classes", label, lt.len()),
            });
        }
        let max = lt.data().iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max
            + lt.data()
                .iter()
                .map(|&v| (v - max).exp())
                .sum::<T>()
                .ln();
        let loss = lse - lt.at(label);
        self.push(Op::NllLoss { logits, label }, Tensor::scalar(loss), "nll_loss")
    }

    /// Propagate gradients from the scalar node `loss` back to every
    /// parameter this tape touched. Parameter values are untouched;
    /// gradients accumulate into the store.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Domain { op: "backward", detail: "loss not on this tape".into() });
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Domain { op: "backward", detail: "loss is not scalar".into() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    store.grad_mut(*pid).axpy(T::one(), &g);
                }
                Op::MatVec { w, x } => {
                    let wt = self.value(*w).clone();
                    let xt = self.value(*x).clone();
                    let (m, n) = (wt.rows(), wt.cols());
                    {
                        let gw = Self::slot(&mut grads, *w, &[m, n]);
                        for r in 0..m {
                            for c in 0..n {
                                let cur = gw.at2(r, c);
                                gw.data_mut()[r * n + c] = cur + g.at(r) * xt.at(c);
                            }
                        }
                    }
                    {
                        let gx = Self::slot(&mut grads, *x, &[n]);
                        for c in 0..n {
                            let mut acc = gx.at(c);
                            for r in 0..m {
                                acc = acc + wt.at2(r, c) * g.at(r);
                            }
                            gx.data_mut()[c] = acc;
                        }
                    }
                }
                Op::Add(a, b) => {
                    let shape = g.shape().to_vec();
                    Self::slot(&mut grads, *a, &shape).axpy(T::one(), &g);
                    Self::slot(&mut grads, *b, &shape).axpy(T::one(), &g);
                }
                Op::Sub(a, b) => {
                    let shape = g.shape().to_vec();
                    Self::slot(&mut grads, *a, &shape).axpy(T::one(), &g);
                    Self::slot(&mut grads, *b, &shape).axpy(-T::one(), &g);
                }
                Op::Mul(a, b) => {
                    let at = self.value(*a).clone();
                    let bt = self.value(*b).clone();
                    let shape = g.shape().to_vec();
                    {
                        let ga = Self::slot(&mut grads, *a, &shape);
                        for i in 0..ga.len() {
                            ga.data_mut()[i] = ga.at(i) + bt.at(i) * g.at(i);
                        }
                    }
                    {
                        let gb = Self::slot(&mut grads, *b, &shape);
                        for i in 0..gb.len() {
                            gb.data_mut()[i] = gb.at(i) + at.at(i) * g.at(i);
                        }
                    }
                }
                Op::Scale(a, alpha) => {
                    let shape = g.shape().to_vec();
                    Self::slot(&mut grads, *a, &shape).axpy(*alpha, &g);
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[idx].value.clone();
                    let shape = g.shape().to_vec();
                    let ga = Self::slot(&mut grads, *a, &shape);
                    for i in 0..ga.len() {
                        let yi = y.at(i);
                        ga.data_mut()[i] = ga.at(i) + yi * (T::one() - yi) * g.at(i);
                    }
                }
                Op::Tanh(a) => {
                    let y = self.nodes[idx].value.clone();
                    let shape = g.shape().to_vec();
                    let ga = Self::slot(&mut grads, *a, &shape);
                    for i in 0..ga.len() {
                        let yi = y.at(i);
                        ga.data_mut()[i] = ga.at(i) + (T::one() - yi * yi) * g.at(i);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a).clone();
                    let shape = g.shape().to_vec();
                    let ga = Self::slot(&mut grads, *a, &shape);
                    for i in 0..ga.len() {
                        let d = if x.at(i) > T::zero() { T::one() } else { *slope };
                        ga.data_mut()[i] = ga.at(i) + d * g.at(i);
                    }
                }
                Op::Softmax(a) => {
                    let y = self.nodes[idx].value.clone();
                    let mut gy_dot = T::zero();
                    for i in 0..y.len() {
                        gy_dot = gy_dot + g.at(i) * y.at(i);
                    }
                    let shape = g.shape().to_vec();
                    let ga = Self::slot(&mut grads, *a, &shape);
                    for i in 0..ga.len() {
                        ga.data_mut()[i] = ga.at(i) + y.at(i) * (g.at(i) - gy_dot);
                    }
                }
                Op::Concat(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(p).len();
                        let shape = self.value(p).shape().to_vec();
                        let gp = Self::slot(&mut grads, p, &shape);
                        for i in 0..len {
                            gp.data_mut()[i] = gp.at(i) + g.at(offset + i);
                        }
                        offset += len;
                    }
                }
                Op::WeightedSum { weights, items } => {
                    let items = items.clone();
                    let weights = *weights;
                    let k_count = items.len();
                    let wt = self.value(weights).clone();
                    for (k, &item) in items.iter().enumerate() {
                        let shape = self.value(item).shape().to_vec();
                        Self::slot(&mut grads, item, &shape).axpy(wt.at(k), &g);
                    }
                    let mut wgrad = Tensor::zeros(vec![k_count]);
                    for (k, &item) in items.iter().enumerate() {
                        wgrad.data_mut()[k] = self.value(item).dot_with_slice(g.data());
                    }
                    Self::slot(&mut grads, weights, &[k_count]).axpy(T::one(), &wgrad);
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    let ga = Self::slot(&mut grads, *a, &shape);
                    for i in 0..ga.len() {
                        ga.data_mut()[i] = ga.at(i) + g.at(0);
                    }
                }
                Op::Dot(a, b) => {
                    let at = self.value(*a).clone();
                    let bt = self.value(*b).clone();
                    let shape = at.shape().to_vec();
                    Self::slot(&mut grads, *a, &shape).axpy(g.at(0), &bt);
                    let shape = bt.shape().to_vec();
                    Self::slot(&mut grads, *b, &shape).axpy(g.at(0), &at);
                }
                Op::NllLoss { logits, label } => {
                    let lt = self.value(*logits);
                    let probs = softmax_value(lt);
                    let shape = lt.shape().to_vec();
                    let label = *label;
                    let logits = *logits;
                    let gl = Self::slot(&mut grads, logits, &shape);
                    for i in 0..gl.len() {
                        let ind = if i == label { T::one() } else { T::zero() };
                        gl.data_mut()[i] = gl.at(i) + (probs.at(i) - ind) * g.at(0);
                    }
                }
            }
        }
        Ok(())
    }

    fn slot<'g>(
        grads: &'g mut [Option<Tensor<T>>],
        id: NodeId,
        shape: &[usize],
    ) -> &'g mut Tensor<T> {
        grads[id.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tensor<T> {
    fn dot_with_slice(&self, other: &[T]) -> T {
        self.data().iter().zip(other).map(|(&a, &b)| a * b).sum()
    }
}

fn softmax_value<T: Real>(v: &Tensor<T>) -> Tensor<T> {
    let max = v.data().iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = v.data().iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Tensor::vector(exps.into_iter().map(|e| e / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::<f64>::new();
        let x = store.register("x", Tensor::vector(vec![1.0, 2.0, 3.0]));
        let mut tape = Tape::new();
        let xn = tape.param(&store, x);
        let loss = tape.sum(xn).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn dot_self_gradient_is_2x() {
        let mut store = ParamStore::<f64>::new();
        let x = store.register("x", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let xn = tape.param(&store, x);
        let loss = tape.dot(xn, xn).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_foreign_node() {
        let mut t1 = Tape::<f64>::new();
        let a = t1.leaf(Tensor::scalar(1.0));
        let _ = a;
        let t2 = Tape::<f64>::new();
        let mut store = ParamStore::new();
        assert!(t2.backward(NodeId(5), &mut store).is_err());
    }

    #[test]
    fn non_finite_detected_and_named() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(1e308));
        let b = tape.leaf(Tensor::scalar(1e308));
        let doubled = tape.add(a, b);
        match doubled {
            Err(Error::NonFinite { op }) => assert_eq!(op, "add"),
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn softmax_matches_direct_evaluation_large_inputs() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::vector(vec![1000.0, 1000.0, 999.0]));
        let s = tape.softmax(a).unwrap();
        let y = tape.value(s);
        assert!(y.all_finite());
        // direct high-precision evaluation oracle
        let e0 = 1.0f64;
        let e2 = (-1.0f64).exp();
        let z = 2.0 * e0 + e2;
        assert!((y.at(0) - e0 / z).abs() < 1e-12);
        assert!((y.at(2) - e2 / z).abs() < 1e-12);
    }
}
