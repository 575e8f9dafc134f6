//! Reverse-mode differentiation over a recorded computation tape.
//!
//! The op inventory is closed and small; a model change must extend it
//! explicitly. Nodes reference strictly earlier nodes, so the tape is a
//! topologically ordered DAG by construction and the backward pass is a
//! single reverse sweep.
//!
//! A tape is confined to one thread at a time; distinct tapes may run in
//! parallel and tensors are immutable values safe to share.

use std::collections::BTreeMap;

use thiserror::Error;

use super::tensor::Tensor;

/// Probabilities are floored at this value before `ln`, which bounds the
/// per-token loss at about 27.6.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AdError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced at tape node {node}")]
    NonFinite { node: usize },
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `[n] x [n,k] -> [k]`
    MatMul,
    Add,
    Mul,
    /// 1-D inputs chained into one vector.
    Concat,
    /// k vectors of length d stacked into `[k,d]`.
    StackRows,
    Sigmoid,
    Tanh,
    /// Numerically stable softmax over a 1-D vector.
    Softmax,
    /// Elementwise `ln(max(x, LOG_FLOOR))`.
    Log,
    /// `[2m] -> [m]`: first half gated by sigmoid of the second half.
    Glu,
    /// Row of a matrix, or a single element of a vector, as selected index.
    GatherRow(usize),
    /// Sum of all elements, producing a scalar.
    Sum,
    /// Multiplication by an f64 constant.
    Scale(f64),
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Gradients keyed by registered parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Append-only record of a forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Result<ValueId, AdError> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(AdError::NonFinite { node: id });
        }
        self.nodes.push(Node { op, inputs, value });
        Ok(ValueId(id))
    }

    /// Records a constant input. Gradients reaching it are discarded.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
        });
        ValueId(id)
    }

    /// Records a trainable leaf under `name`; `backward` returns one
    /// gradient tensor per registered name.
    pub fn param(&mut self, name: &str, value: Tensor) -> ValueId {
        let id = self.leaf(value);
        self.params.push((name.to_owned(), id.0));
        id
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AdError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 1 || bv.shape().len() != 2 || av.len() != bv.rows() {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", av.shape(), bv.shape()),
            });
        }
        let (n, k) = (bv.rows(), bv.cols());
        let mut out = vec![0.0; k];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..n {
            let ai = ad[i];
            if ai == 0.0 {
                continue;
            }
            let row = &bd[i * k..(i + 1) * k];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += ai * w;
            }
        }
        self.push(Op::MatMul, vec![a.0, b.0], Tensor::vector(out))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AdError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(AdError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
            });
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push(Op::Add, vec![a.0, b.0], Tensor::new(shape, out))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AdError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(AdError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
            });
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        self.push(Op::Mul, vec![a.0, b.0], Tensor::new(shape, out))
    }

    pub fn concat(&mut self, parts: &[ValueId]) -> Result<ValueId, AdError> {
        let mut out = Vec::new();
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape().len() != 1 {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    detail: format!("rank-{} input", v.shape().len()),
                });
            }
            out.extend_from_slice(v.data());
        }
        self.push(
            Op::Concat,
            parts.iter().map(|p| p.0).collect(),
            Tensor::vector(out),
        )
    }

    /// Concatenation along a new leading axis: k equal-length vectors
    /// become the rows of a `[k,d]` matrix.
    pub fn stack_rows(&mut self, parts: &[ValueId]) -> Result<ValueId, AdError> {
        assert!(!parts.is_empty(), "stack_rows needs at least one row");
        let d = self.nodes[parts[0].0].value.len();
        let mut out = Vec::with_capacity(parts.len() * d);
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape().len() != 1 || v.len() != d {
                return Err(AdError::ShapeMismatch {
                    op: "stack_rows",
                    detail: format!("expected [{d}], got {:?}", v.shape()),
                });
            }
            out.extend_from_slice(v.data());
        }
        self.push(
            Op::StackRows,
            parts.iter().map(|p| p.0).collect(),
            Tensor::matrix(parts.len(), d, out),
        )
    }

    pub fn sigmoid(&mut self, a: ValueId) -> Result<ValueId, AdError> {
        let v = &self.nodes[a.0].value;
        let out: Vec<f64> = v.data().iter().map(|&x| sigmoid(x)).collect();
        let shape = v.shape().to_vec();
        self.push(Op::Sigmoid, vec![a.0], Tensor::new(shape, out))
    }

    pub fn tanh(&mut self, a: ValueId) -> Result<ValueId, AdError> {
        let v = &self.nodes[a.0].value;
        let out: Vec<f64> = v.data().iter().map(|x| x.tanh()).collect();
        let shape = v.shape().to_vec();
        self.push(Op::Tanh, vec![a.0], Tensor::new(shape, out))
    }

    pub fn softmax(&mut self, a: ValueId) -> Result<ValueId, AdError> {
        let v = &self.nodes[a.0].value;
        if v.shape().len() != 1 || v.is_empty() {
            return Err(AdError::ShapeMismatch {
                op: "softmax",
                detail: format!("{:?}", v.shape()),
            });
        }
        let max = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.data().iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        self.push(Op::Softmax, vec![a.0], Tensor::vector(out))
    }

    pub fn log(&mut self, a: ValueId) -> Result<ValueId, AdError> {
        let v = &self.nodes[a.0].value;
        let out: Vec<f64> = v.data().iter().map(|&x| x.max(LOG_FLOOR).ln()).collect();
        let shape = v.shape().to_vec();
        self.push(Op::Log, vec![a.0], Tensor::new(shape, out))
    }

    pub fn glu(&mut self, a: ValueId) -> Result<ValueId, AdError> {
        let v = &self.nodes[a.0].value;
        if v.shape().len() != 1 || v.len() % 2 != 0 {
            return Err(AdError::ShapeMismatch {
                op: "glu",
                detail: format!("{:?}", v.shape()),
            });
        }
        let m = v.len() / 2;
        let d = v.data();
        let out: Vec<f64> = (0..m).map(|i| d[i] * sigmoid(d[m + i])).collect();
        self.push(Op::Glu, vec![a.0], Tensor::vector(out))
    }

    /// Selects row `idx` of a matrix, or element `idx` of a vector as a
    /// scalar. The gradient scatters back into the selected slot.
    pub fn gather_row(&mut self, a: ValueId, idx: usize) -> Result<ValueId, AdError> {
        let v = &self.nodes[a.0].value;
        let out = match v.shape().len() {
            2 if idx < v.rows() => Tensor::vector(v.row(idx).to_vec()),
            1 if idx < v.len() => Tensor::scalar(v.data()[idx]),
            _ => {
                return Err(AdError::ShapeMismatch {
                    op: "gather_row",
                    detail: format!("index {idx} into {:?}", v.shape()),
                })
            }
        };
        self.push(Op::GatherRow(idx), vec![a.0], out)
    }

    pub fn sum(&mut self, a: ValueId) -> Result<ValueId, AdError> {
        let total: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::Sum, vec![a.0], Tensor::scalar(total))
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> Result<ValueId, AdError> {
        let v = &self.nodes[a.0].value;
        let out: Vec<f64> = v.data().iter().map(|x| x * factor).collect();
        let shape = v.shape().to_vec();
        self.push(Op::Scale(factor), vec![a.0], Tensor::new(shape, out))
    }

    /// Reverse sweep from a scalar loss node. Every registered parameter
    /// receives a gradient tensor; parameters not reachable from the loss
    /// get zeros.
    pub fn backward(&self, loss: ValueId) -> Result<GradMap, AdError> {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss node"
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(AdError::NonFinite { node: i });
            }
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let av = &self.nodes[a].value;
                    let bv = &self.nodes[b].value;
                    let (n, k) = (bv.rows(), bv.cols());
                    {
                        let ga = acc(&mut grads, a, n);
                        let bd = bv.data();
                        for (r, slot) in ga.iter_mut().enumerate() {
                            let row = &bd[r * k..(r + 1) * k];
                            *slot += row.iter().zip(&g).map(|(w, gk)| w * gk).sum::<f64>();
                        }
                    }
                    {
                        let gb = acc(&mut grads, b, n * k);
                        let ad = av.data();
                        for r in 0..n {
                            let ar = ad[r];
                            if ar == 0.0 {
                                continue;
                            }
                            let row = &mut gb[r * k..(r + 1) * k];
                            for (slot, gk) in row.iter_mut().zip(&g) {
                                *slot += ar * gk;
                            }
                        }
                    }
                }
                Op::Add => {
                    for &inp in &node.inputs {
                        let gi = acc(&mut grads, inp, g.len());
                        for (slot, gk) in gi.iter_mut().zip(&g) {
                            *slot += gk;
                        }
                    }
                }
                Op::Mul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let bval = self.nodes[b].value.data().to_vec();
                    let aval = self.nodes[a].value.data().to_vec();
                    let ga = acc(&mut grads, a, g.len());
                    for ((slot, gk), y) in ga.iter_mut().zip(&g).zip(&bval) {
                        *slot += gk * y;
                    }
                    let gb = acc(&mut grads, b, g.len());
                    for ((slot, gk), x) in gb.iter_mut().zip(&g).zip(&aval) {
                        *slot += gk * x;
                    }
                }
                Op::Concat | Op::StackRows => {
                    let mut offset = 0;
                    for &inp in &node.inputs {
                        let len = self.nodes[inp].value.len();
                        let gi = acc(&mut grads, inp, len);
                        for (slot, gk) in gi.iter_mut().zip(&g[offset..offset + len]) {
                            *slot += gk;
                        }
                        offset += len;
                    }
                }
                Op::Sigmoid => {
                    let y = node.value.data();
                    let gi = acc(&mut grads, node.inputs[0], g.len());
                    for ((slot, gk), yk) in gi.iter_mut().zip(&g).zip(y) {
                        *slot += gk * yk * (1.0 - yk);
                    }
                }
                Op::Tanh => {
                    let y = node.value.data();
                    let gi = acc(&mut grads, node.inputs[0], g.len());
                    for ((slot, gk), yk) in gi.iter_mut().zip(&g).zip(y) {
                        *slot += gk * (1.0 - yk * yk);
                    }
                }
                Op::Softmax => {
                    let y = node.value.data();
                    let dot: f64 = g.iter().zip(y).map(|(gk, yk)| gk * yk).sum();
                    let gi = acc(&mut grads, node.inputs[0], g.len());
                    for ((slot, gk), yk) in gi.iter_mut().zip(&g).zip(y) {
                        *slot += yk * (gk - dot);
                    }
                }
                Op::Log => {
                    let x = self.nodes[node.inputs[0]].value.data().to_vec();
                    let gi = acc(&mut grads, node.inputs[0], g.len());
                    for ((slot, gk), xk) in gi.iter_mut().zip(&g).zip(&x) {
                        // Below the floor the forward value is constant.
                        if *xk > LOG_FLOOR {
                            *slot += gk / xk;
                        }
                    }
                }
                Op::Glu => {
                    let x = self.nodes[node.inputs[0]].value.data().to_vec();
                    let m = x.len() / 2;
                    let gi = acc(&mut grads, node.inputs[0], x.len());
                    for k in 0..m {
                        let s = sigmoid(x[m + k]);
                        gi[k] += g[k] * s;
                        gi[m + k] += g[k] * x[k] * s * (1.0 - s);
                    }
                }
                Op::GatherRow(idx) => {
                    let src = &self.nodes[node.inputs[0]].value;
                    let (len, offset) = if src.shape().len() == 2 {
                        (src.len(), idx * src.cols())
                    } else {
                        (src.len(), idx)
                    };
                    let gi = acc(&mut grads, node.inputs[0], len);
                    for (slot, gk) in gi[offset..offset + g.len()].iter_mut().zip(&g) {
                        *slot += gk;
                    }
                }
                Op::Sum => {
                    let len = self.nodes[node.inputs[0]].value.len();
                    let gi = acc(&mut grads, node.inputs[0], len);
                    for slot in gi.iter_mut() {
                        *slot += g[0];
                    }
                }
                Op::Scale(factor) => {
                    let gi = acc(&mut grads, node.inputs[0], g.len());
                    for (slot, gk) in gi.iter_mut().zip(&g) {
                        *slot += gk * factor;
                    }
                }
            }
        }

        let mut out = GradMap::new();
        for (name, id) in &self.params {
            let shape = self.nodes[*id].value.shape().to_vec();
            let tensor = match grads[*id].take() {
                Some(g) => {
                    if g.iter().any(|x| !x.is_finite()) {
                        return Err(AdError::NonFinite { node: *id });
                    }
                    Tensor::new(shape, g)
                }
                None => Tensor::zeros(shape),
            };
            out.insert(name.clone(), tensor);
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
