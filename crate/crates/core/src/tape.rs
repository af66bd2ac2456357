//! Tape-based reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node holding its value
//! and the handles of its inputs. [`Tape::backward`] walks the nodes in
//! exact reverse order of recording and returns one gradient per
//! registered parameter.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

/// Probabilities below this are clamped before taking the log in
/// [`Tape::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRowBroadcast,
    ScaleRows,
    Sigmoid,
    Tanh,
    Softmax,
    GatherRows,
    ConcatCols,
    ConcatRows,
    SliceCols,
    SumRowGroups,
    Reshape,
    Sum,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRowBroadcast,
        OpKind::ScaleRows,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Softmax,
        OpKind::GatherRows,
        OpKind::ConcatCols,
        OpKind::ConcatRows,
        OpKind::SliceCols,
        OpKind::SumRowGroups,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRowBroadcast => "add_row_broadcast",
            OpKind::ScaleRows => "scale_rows",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Softmax => "softmax",
            OpKind::GatherRows => "gather_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::SumRowGroups => "sum_row_groups",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBroadcast(Var, Var),
    ScaleRows(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SumRowGroups(Var, usize),
    Reshape(Var),
    Sum(Var),
    CrossEntropy(Var, usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRowBroadcast(..) => OpKind::AddRowBroadcast,
            Op::ScaleRows(..) => OpKind::ScaleRows,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Softmax(_) => OpKind::Softmax,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::SumRowGroups(..) => OpKind::SumRowGroups,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
            Op::CrossEntropy(..) => OpKind::CrossEntropy,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Multiplier applied to the input gradients of a faulted op kind.
const FAULT_SCALE: f64 = 1.01;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    fault: Option<OpKind>,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds `other` into `self`, inserting entries missing from `self`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.by_name {
            match self.by_name.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.by_name.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.by_name.values_mut() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.by_name.insert(name.into(), grad);
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Test-harness hook: every backward rule of `kind` is scaled by a
    /// wrong factor, so gradient checks must fail.
    pub fn with_fault(fault: Option<OpKind>) -> Self {
        Tape {
            fault,
            ..Tape::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a named trainable leaf. Names must be unique per tape.
    pub fn param(&mut self, name: impl Into<String>, value: &Tensor) -> Var {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|(n, _)| *n != name),
            "duplicate parameter {name}"
        );
        let v = self.push(value.clone(), Op::Leaf);
        self.params.push((name, v));
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let ones = self.constant(Tensor::ones(self.value(x).shape()));
        self.sub(ones, x)
    }

    /// `x[r×c] + bias[c]` with the bias repeated over rows.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row_broadcast(self.value(bias))?;
        Ok(self.push(out, Op::AddRowBroadcast(x, bias)))
    }

    /// Row `i` of `x` scaled by `scales[i mod len(scales)]`.
    pub fn scale_rows(&mut self, x: Var, scales: Var) -> Result<Var> {
        let out = self.value(x).scale_rows(self.value(scales))?;
        Ok(self.push(out, Op::ScaleRows(x, scales)))
    }

    /// `x · w + b`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_broadcast(xw, b)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).sigmoid();
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).tanh();
        self.push(out, Op::Tanh(x))
    }

    /// Softmax over every element of `x`.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax();
        self.push(out, Op::Softmax(x))
    }

    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = src.dims2();
        if indices.is_empty() || indices.iter().any(|&i| i >= r) {
            return Err(Error::dim("gather_rows", src.shape(), &[indices.len()]));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::new(vec![indices.len(), c], data)?;
        Ok(self.push(out, Op::GatherRows(x, indices)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.dims2().0 != rows {
                return Err(Error::dim(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    t.shape(),
                ));
            }
            widths.push(t.dims2().1);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.dims2().1 != cols {
                return Err(Error::dim(
                    "concat_rows",
                    self.value(parts[0]).shape(),
                    t.shape(),
                ));
            }
            rows += t.dims2().0;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = src.dims2();
        if src.shape().len() != 2 || start >= end || end > c {
            return Err(Error::dim("slice_cols", src.shape(), &[start, end]));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..end]);
        }
        let out = Tensor::new(vec![r, end - start], data)?;
        Ok(self.push(out, Op::SliceCols(x, start)))
    }

    /// Sums consecutive blocks of `group` rows: `[n·group × c] → [n × c]`.
    pub fn sum_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = src.dims2();
        if src.shape().len() != 2 || group == 0 || r % group != 0 {
            return Err(Error::dim("sum_row_groups", src.shape(), &[group]));
        }
        let mut data = vec![0.0; (r / group) * c];
        for i in 0..r {
            let q = i / group;
            for (o, &v) in data[q * c..(q + 1) * c].iter_mut().zip(src.row(i)) {
                *o += v;
            }
        }
        let out = Tensor::new(vec![r / group, c], data)?;
        Ok(self.push(out, Op::SumRowGroups(x, group)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// `-ln(max(p[label], PROB_FLOOR))` for a probability vector `p`.
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Result<Var> {
        let p = self.value(probs);
        if label >= p.numel() {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} classes",
                p.numel()
            )));
        }
        let out = Tensor::scalar(-p.data()[label].max(PROB_FLOOR).ln());
        Ok(self.push(out, Op::CrossEntropy(probs, label)))
    }

    /// Gradient of the scalar at `loss` with respect to every parameter
    /// registered through [`Tape::param`]. Parameters the loss does not
    /// depend on get an all-zero entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut contribs = self.input_grads(node, &g);
            if self.fault == Some(node.op.kind()) {
                for (_, t) in &mut contribs {
                    for x in t.data_mut() {
                        *x *= FAULT_SCALE;
                    }
                }
            }
            for (v, t) in contribs {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
            // Leaves keep their gradient for collection below.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let mut out = Gradients::default();
        for (name, v) in &self.params {
            let g = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (r, k) = val(*a).dims2();
                let c = val(*b).dims2().1;
                let mut ga = Tensor::zeros(val(*a).shape());
                matmul_nt_into(g.data(), val(*b).data(), ga.data_mut(), r, k, c);
                let mut gb = Tensor::zeros(val(*b).shape());
                matmul_tn_into(val(*a).data(), g.data(), gb.data_mut(), r, k, c);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => {
                let ga = g.mul(val(*b)).expect("shape checked in forward");
                let gb = g.mul(val(*a)).expect("shape checked in forward");
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddRowBroadcast(x, b) => {
                let (r, c) = g.dims2();
                let mut gb = Tensor::zeros(&[c]);
                for i in 0..r {
                    for (o, &v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                vec![(*x, g.clone()), (*b, gb)]
            }
            Op::ScaleRows(x, s) => {
                let xs = val(*x);
                let sv = val(*s);
                let gx = g.scale_rows(sv).expect("shape checked in forward");
                let (r, _) = g.dims2();
                let period = sv.numel();
                let mut gs = Tensor::zeros(sv.shape());
                for i in 0..r {
                    let dot: f64 = g.row(i).iter().zip(xs.row(i)).map(|(a, b)| a * b).sum();
                    gs.data_mut()[i % period] += dot;
                }
                vec![(*x, gx), (*s, gs)]
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let gx = g
                    .zip_map(y, "sigmoid", |gv, yv| gv * yv * (1.0 - yv))
                    .unwrap();
                vec![(*x, gx)]
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let gx = g.zip_map(y, "tanh", |gv, yv| gv * (1.0 - yv * yv)).unwrap();
                vec![(*x, gx)]
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let dot: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                let gx = g.zip_map(y, "softmax", |gv, yv| yv * (gv - dot)).unwrap();
                vec![(*x, gx)]
            }
            Op::GatherRows(x, indices) => {
                let mut gx = Tensor::zeros(val(*x).shape());
                let c = g.dims2().1;
                for (r, &src) in indices.iter().enumerate() {
                    let dst = &mut gx.data_mut()[src * c..(src + 1) * c];
                    for (o, &v) in dst.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                vec![(*x, gx)]
            }
            Op::ConcatCols(parts) => {
                let (rows, _) = g.dims2();
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = val(p).dims2().1;
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        (p, Tensor::new(val(p).shape().to_vec(), data).unwrap())
                    })
                    .collect()
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = val(p).numel();
                        let part = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        (p, Tensor::new(val(p).shape().to_vec(), part).unwrap())
                    })
                    .collect()
            }
            Op::SliceCols(x, start) => {
                let mut gx = Tensor::zeros(val(*x).shape());
                let (r, w) = g.dims2();
                let c = gx.dims2().1;
                for i in 0..r {
                    let dst = &mut gx.data_mut()[i * c + start..i * c + start + w];
                    dst.copy_from_slice(g.row(i));
                }
                vec![(*x, gx)]
            }
            Op::SumRowGroups(x, group) => {
                let mut gx = Tensor::zeros(val(*x).shape());
                let (r, c) = gx.dims2();
                for i in 0..r {
                    gx.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.row(i / group));
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape()).unwrap())],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
            Op::CrossEntropy(p, label) => {
                let pv = val(*p);
                let mut gp = Tensor::zeros(pv.shape());
                let y = pv.data()[*label];
                if y > PROB_FLOOR {
                    gp.data_mut()[*label] = -g.data()[0] / y;
                }
                vec![(*p, gp)]
            }
        }
    }
}
