use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, sigmoid, softplus};
use super::Tensor;
use crate::error::TensorError;

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Broadcast(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Sin(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Time2VecAct(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MeanRows(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SelectRow(NodeId, usize),
    Softmax(NodeId),
    GroupSoftmax {
        x: NodeId,
        groups: Rc<[usize]>,
        n_groups: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CausalConv {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    BceLogits {
        logits: NodeId,
        targets: Vec<f64>,
        pos_weight: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward pass so gradients can be pulled back from a scalar.
///
/// A tape is built fresh for every forward pass and is confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<usize, NodeId>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input (data).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf shared by `key`: the first call creates it, later calls return
    /// the same node so gradients from every use accumulate in one place.
    pub fn bound_leaf(&self, key: usize, value: impl FnOnce() -> Tensor) -> Var<'_> {
        if let Some(&id) = self.bound.borrow().get(&key) {
            return Var { tape: self, id };
        }
        let v = self.leaf(value());
        self.bound.borrow_mut().insert(key, v.id);
        v
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow the value. Do not hold the guard across new ops on the tape.
    pub fn value_ref(&self) -> Ref<'_, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Tensor {
        self.value_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value_ref().rows()
    }

    pub fn cols(&self) -> usize {
        self.value_ref().cols()
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.value_ref());
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, op, needs)
    }

    fn zip_same(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, TensorError> {
        let value = {
            let a = self.value_ref();
            let b = other.value_ref();
            if a.shape() != b.shape() {
                return Err(shape_err(name, &a, &b));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, op, needs))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.zip_same(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.zip_same(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.zip_same(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// `x[r, c] + bias[c]` for every row.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>, TensorError> {
        let value = {
            let x = self.value_ref();
            let b = bias.value_ref();
            if b.len() != x.cols() {
                return Err(shape_err("add_bias", &x, &b));
            }
            let mut out = x.clone();
            let c = x.cols();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % c];
            }
            out
        };
        let needs = self.tape.needs(&[self.id, bias.id]);
        Ok(self.tape.push(value, Op::AddBias(self.id, bias.id), needs))
    }

    /// Replicates a `1×1`, `r×1` or `1×c` matrix up to `rows × cols`.
    pub fn broadcast_to(self, rows: usize, cols: usize) -> Result<Var<'t>, TensorError> {
        let value = {
            let x = self.value_ref();
            let (xr, xc) = (x.rows(), x.cols());
            if !(xr == 1 || xr == rows) || !(xc == 1 || xc == cols) {
                return Err(TensorError::Shape {
                    op: "broadcast_to",
                    lhs: x.shape().to_vec(),
                    rhs: vec![rows, cols],
                });
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    data.push(x.get(if xr == 1 { 0 } else { r }, if xc == 1 { 0 } else { c }));
                }
            }
            Tensor::matrix(rows, cols, data)?
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::Broadcast(self.id), needs))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), |x| x.map(|v| v * k))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x.map(|v| v + k))
    }

    /// `1 - x`, exact at 0 and 1.
    pub fn one_minus(self) -> Var<'t> {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let value = {
            let a = self.value_ref();
            let b = other.value_ref();
            if a.shape().len() > 2 || b.shape().len() > 2 {
                return Err(shape_err("matmul", &a, &b));
            }
            a.matmul(&b)?
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), needs))
    }

    pub fn transpose(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), Tensor::transpose)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin(self.id), |x| x.map(f64::sin))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |x| x.map(sigmoid))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.map(|v| v.max(0.0)))
    }

    /// Column 0 passes through (the linear time term); every other column
    /// goes through `sin`.
    pub fn time2vec_activation(self) -> Var<'t> {
        self.unary(Op::Time2VecAct(self.id), |x| {
            let c = x.cols();
            let mut out = x.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                if i % c != 0 {
                    *v = v.sin();
                }
            }
            out
        })
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |x| Tensor::scalar(x.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |x| Tensor::scalar(x.sum() / x.len() as f64))
    }

    /// Mean over rows: `r × c → 1 × c`.
    pub fn mean_rows(self) -> Var<'t> {
        self.unary(Op::MeanRows(self.id), |x| {
            let (r, c) = (x.rows(), x.cols());
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(x.row(i)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|v| *v /= r as f64);
            Tensor::matrix(1, c, out).expect("c >= 1")
        })
    }

    /// Concatenate along the last axis. All parts must share the row count.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let tape = first.tape;
        let value = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value_ref()).collect();
            let rows = vals[0].rows();
            if let Some(bad) = vals.iter().find(|v| v.rows() != rows) {
                return Err(shape_err("concat_cols", &vals[0], bad));
            }
            let total: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::matrix(rows, total, data)?
        };
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let needs = tape.needs(&ids);
        Ok(tape.push(value, Op::ConcatCols(ids), needs))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        let value = {
            let x = self.value_ref();
            if len == 0 || start + len > x.cols() {
                return Err(TensorError::Shape {
                    op: "slice_cols",
                    lhs: x.shape().to_vec(),
                    rhs: vec![start, len],
                });
            }
            let mut data = Vec::with_capacity(x.rows() * len);
            for r in 0..x.rows() {
                data.extend_from_slice(&x.row(r)[start..start + len]);
            }
            Tensor::matrix(x.rows(), len, data)?
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::SliceCols(self.id, start), needs))
    }

    /// Row `r` as a `1 × c` matrix.
    pub fn select_row(self, r: usize) -> Result<Var<'t>, TensorError> {
        let value = {
            let x = self.value_ref();
            if r >= x.rows() {
                return Err(TensorError::Shape {
                    op: "select_row",
                    lhs: x.shape().to_vec(),
                    rhs: vec![r],
                });
            }
            Tensor::matrix(1, x.cols(), x.row(r).to_vec())?
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::SelectRow(self.id, r), needs))
    }

    /// Row-wise softmax over the last axis restricted to `mask` columns.
    /// Returns the weights and one degenerate flag per row (all columns
    /// masked); degenerate rows get all-zero weights.
    pub fn masked_softmax(self, mask: Option<&[bool]>) -> Result<(Var<'t>, Vec<bool>), TensorError> {
        let (value, flags) = {
            let x = self.value_ref();
            if let Some(m) = mask {
                if m.len() != x.cols() {
                    return Err(TensorError::Shape {
                        op: "masked_softmax",
                        lhs: x.shape().to_vec(),
                        rhs: vec![m.len()],
                    });
                }
            }
            let (w, flags) = kernels::masked_softmax_rows(x.data(), x.cols(), mask);
            (Tensor::new(x.shape().to_vec(), w)?, flags)
        };
        let needs = self.tape.needs(&[self.id]);
        Ok((self.tape.push(value, Op::Softmax(self.id), needs), flags))
    }

    pub fn softmax(self) -> Var<'t> {
        self.masked_softmax(None).expect("unmasked softmax").0
    }

    /// Row-wise softmax normalised separately within each column group.
    pub fn group_softmax(self, groups: Rc<[usize]>, n_groups: usize) -> Result<Var<'t>, TensorError> {
        let value = {
            let x = self.value_ref();
            if groups.len() != x.cols() || groups.iter().any(|&g| g >= n_groups) {
                return Err(TensorError::Shape {
                    op: "group_softmax",
                    lhs: x.shape().to_vec(),
                    rhs: vec![groups.len(), n_groups],
                });
            }
            let w = kernels::group_softmax_rows(x.data(), x.cols(), &groups, n_groups);
            Tensor::new(x.shape().to_vec(), w)?
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(
            value,
            Op::GroupSoftmax {
                x: self.id,
                groups,
                n_groups,
            },
            needs,
        ))
    }

    /// Row-wise layer normalisation followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (value, xhat, inv_std) = {
            let x = self.value_ref();
            let g = gain.value_ref();
            let b = bias.value_ref();
            let c = x.cols();
            if g.len() != c || b.len() != c {
                return Err(shape_err("layer_norm", &x, &g));
            }
            let (xhat, inv_std) = kernels::normalize_rows(x.data(), c);
            let data = xhat
                .iter()
                .enumerate()
                .map(|(i, v)| v * g.data()[i % c] + b.data()[i % c])
                .collect();
            (Tensor::new(x.shape().to_vec(), data)?, xhat, inv_std)
        };
        let needs = self.tape.needs(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Causal convolution over rows; `kernel` has shape `[k, c_in, c_out]`.
    pub fn causal_conv(self, kernel: Var<'t>, bias: Var<'t>) -> Result<Var<'t>, TensorError> {
        let value = {
            let x = self.value_ref();
            let w = kernel.value_ref();
            let b = bias.value_ref();
            let ws = w.shape();
            if ws.len() != 3 || ws[1] != x.cols() || b.len() != ws[2] {
                return Err(shape_err("causal_conv", &x, &w));
            }
            let (k, c_in, c_out) = (ws[0], ws[1], ws[2]);
            let out = kernels::causal_conv(x.data(), w.data(), b.data(), x.rows(), c_in, c_out, k);
            Tensor::matrix(x.rows(), c_out, out)?
        };
        let needs = self.tape.needs(&[self.id, kernel.id, bias.id]);
        Ok(self.tape.push(
            value,
            Op::CausalConv {
                x: self.id,
                kernel: kernel.id,
                bias: bias.id,
            },
            needs,
        ))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against `targets`,
    /// positives weighted by `pos_weight`.
    pub fn bce_with_logits(self, targets: &[f64], pos_weight: f64) -> Result<Var<'t>, TensorError> {
        let value = {
            let z = self.value_ref();
            if z.len() != targets.len() {
                return Err(TensorError::Shape {
                    op: "bce_with_logits",
                    lhs: z.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            let total: f64 = z
                .data()
                .iter()
                .zip(targets)
                .map(|(&z, &y)| pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z))
                .sum();
            Tensor::scalar(total / targets.len() as f64)
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(
            value,
            Op::BceLogits {
                logits: self.id,
                targets: targets.to_vec(),
                pos_weight,
            },
            needs,
        ))
    }

    /// Reverse sweep from this scalar node.
    pub fn backward(&self) -> Result<Gradients, TensorError> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id].value;
        if root.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=self.id).map(|_| None).collect();
        grads[self.id] = Some(Tensor::new(root.shape().to_vec(), vec![1.0]).expect("scalar"));
        for id in (0..=self.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            bound: self.tape.bound.borrow().clone(),
        })
    }
}

/// Gradients of one scalar with respect to every node that reached it.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bound: HashMap<usize, NodeId>,
}

impl Gradients {
    pub fn get(&self, v: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of the leaf created by [`Tape::bound_leaf`] under `key`.
    pub fn bound(&self, key: usize) -> Option<&Tensor> {
        self.bound
            .get(&key)
            .and_then(|&id| self.grads.get(id))
            .and_then(Option::as_ref)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn with_data(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("same length as template")
}

fn propagate(nodes: &[Node], id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let out = &node.value;
    let val = |i: NodeId| &nodes[i].value;
    let mut acc = |i: NodeId, d: Tensor| accumulate(nodes, grads, i, d);
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(*a, g.clone());
            acc(*b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(*a, g.clone());
            acc(*b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = g.data().iter().zip(bv.data()).map(|(g, b)| g * b).collect();
            let gb = g.data().iter().zip(av.data()).map(|(g, a)| g * a).collect();
            acc(*a, with_data(av, ga));
            acc(*b, with_data(bv, gb));
        }
        Op::AddBias(x, b) => {
            acc(*x, g.clone());
            let bv = val(*b);
            let c = g.cols();
            let mut gb = vec![0.0; c];
            for (i, v) in g.data().iter().enumerate() {
                gb[i % c] += v;
            }
            acc(*b, with_data(bv, gb));
        }
        Op::Broadcast(x) => {
            let xv = val(*x);
            let (xr, xc) = (xv.rows(), xv.cols());
            let (r, c) = (g.rows(), g.cols());
            let mut gx = vec![0.0; xv.len()];
            for i in 0..r {
                for j in 0..c {
                    let ti = if xr == 1 { 0 } else { i };
                    let tj = if xc == 1 { 0 } else { j };
                    gx[ti * xc + tj] += g.get(i, j);
                }
            }
            acc(*x, with_data(xv, gx));
        }
        Op::Scale(x, k) => acc(*x, g.map(|v| v * k)),
        Op::AddScalar(x) => acc(*x, g.clone()),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if nodes[*a].needs_grad {
                let mut ga = vec![0.0; m * k];
                kernels::matmul_nt_acc(g.data(), bv.data(), &mut ga, m, n, k);
                acc(*a, with_data(av, ga));
            }
            if nodes[*b].needs_grad {
                let mut gb = vec![0.0; k * n];
                kernels::matmul_tn_acc(av.data(), g.data(), &mut gb, m, k, n);
                acc(*b, with_data(bv, gb));
            }
        }
        Op::Transpose(x) => acc(*x, g.transpose()),
        Op::Sin(x) => {
            let xv = val(*x);
            let d = g.data().iter().zip(xv.data()).map(|(g, x)| g * x.cos()).collect();
            acc(*x, with_data(xv, d));
        }
        Op::Sigmoid(x) => {
            let d = g
                .data()
                .iter()
                .zip(out.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            acc(*x, with_data(val(*x), d));
        }
        Op::Relu(x) => {
            let xv = val(*x);
            let d = g
                .data()
                .iter()
                .zip(xv.data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            acc(*x, with_data(xv, d));
        }
        Op::Time2VecAct(x) => {
            let xv = val(*x);
            let c = xv.cols();
            let d = g
                .data()
                .iter()
                .zip(xv.data())
                .enumerate()
                .map(|(i, (g, x))| if i % c == 0 { *g } else { g * x.cos() })
                .collect();
            acc(*x, with_data(xv, d));
        }
        Op::Sum(x) => {
            let xv = val(*x);
            acc(*x, Tensor::full(xv.shape(), g.data()[0]));
        }
        Op::Mean(x) => {
            let xv = val(*x);
            acc(*x, Tensor::full(xv.shape(), g.data()[0] / xv.len() as f64));
        }
        Op::MeanRows(x) => {
            let xv = val(*x);
            let (r, c) = (xv.rows(), xv.cols());
            let mut d = Vec::with_capacity(r * c);
            for _ in 0..r {
                d.extend(g.data().iter().map(|v| v / r as f64));
            }
            acc(*x, with_data(xv, d));
        }
        Op::ConcatCols(ids) => {
            let rows = g.rows();
            let mut offset = 0;
            for &p in ids {
                let pv = val(p);
                let c = pv.cols();
                if nodes[p].needs_grad {
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g.row(r)[offset..offset + c]);
                    }
                    acc(p, with_data(pv, d));
                }
                offset += c;
            }
        }
        Op::SliceCols(x, start) => {
            let xv = val(*x);
            let mut d = Tensor::zeros_like(xv);
            let len = g.cols();
            for r in 0..g.rows() {
                for j in 0..len {
                    d.set(r, start + j, g.get(r, j));
                }
            }
            acc(*x, d);
        }
        Op::SelectRow(x, row) => {
            let xv = val(*x);
            let mut d = Tensor::zeros_like(xv);
            for j in 0..g.cols() {
                d.set(*row, j, g.get(0, j));
            }
            acc(*x, d);
        }
        Op::Softmax(x) => {
            let c = out.cols();
            let mut d = vec![0.0; out.len()];
            for r in 0..out.rows() {
                let y = out.row(r);
                let gr = g.row(r);
                let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..c {
                    d[r * c + j] = y[j] * (gr[j] - dot);
                }
            }
            acc(*x, with_data(val(*x), d));
        }
        Op::GroupSoftmax { x, groups, n_groups } => {
            let c = out.cols();
            let mut d = vec![0.0; out.len()];
            let mut dots = vec![0.0; *n_groups];
            for r in 0..out.rows() {
                let y = out.row(r);
                let gr = g.row(r);
                dots.iter_mut().for_each(|v| *v = 0.0);
                for (j, &grp) in groups.iter().enumerate() {
                    dots[grp] += y[j] * gr[j];
                }
                for (j, &grp) in groups.iter().enumerate() {
                    d[r * c + j] = y[j] * (gr[j] - dots[grp]);
                }
            }
            acc(*x, with_data(val(*x), d));
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = val(*gain);
            let c = out.cols();
            let rows = out.rows();
            let mut dgain = vec![0.0; c];
            let mut dbias = vec![0.0; c];
            let mut dx = vec![0.0; out.len()];
            let mut dxhat = vec![0.0; c];
            for r in 0..rows {
                let gr = g.row(r);
                let xh = &xhat[r * c..(r + 1) * c];
                for j in 0..c {
                    dgain[j] += gr[j] * xh[j];
                    dbias[j] += gr[j];
                    dxhat[j] = gr[j] * gv.data()[j];
                }
                let s1: f64 = dxhat.iter().sum();
                let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                let k = inv_std[r] / c as f64;
                for j in 0..c {
                    dx[r * c + j] = k * (c as f64 * dxhat[j] - s1 - xh[j] * s2);
                }
            }
            acc(*x, with_data(val(*x), dx));
            acc(*gain, with_data(gv, dgain));
            acc(*bias, with_data(val(*bias), dbias));
        }
        Op::CausalConv { x, kernel, bias } => {
            let (xv, wv) = (val(*x), val(*kernel));
            let ws = wv.shape();
            let (k, c_in, c_out) = (ws[0], ws[1], ws[2]);
            let t = xv.rows();
            let mut dx = vec![0.0; xv.len()];
            let mut dw = vec![0.0; wv.len()];
            let mut db = vec![0.0; c_out];
            for s in 0..t {
                let gr = g.row(s);
                for (o, v) in db.iter_mut().zip(gr) {
                    *o += v;
                }
                for tap in 0..k {
                    let Some(src) = (s + tap).checked_sub(k - 1) else {
                        continue;
                    };
                    let xrow = xv.row(src);
                    let base = tap * c_in * c_out;
                    for ci in 0..c_in {
                        let w = &wv.data()[base + ci * c_out..base + (ci + 1) * c_out];
                        let dwrow = &mut dw[base + ci * c_out..base + (ci + 1) * c_out];
                        let mut sx = 0.0;
                        for o in 0..c_out {
                            dwrow[o] += xrow[ci] * gr[o];
                            sx += gr[o] * w[o];
                        }
                        dx[src * c_in + ci] += sx;
                    }
                }
            }
            acc(*x, with_data(xv, dx));
            acc(*kernel, with_data(wv, dw));
            acc(*bias, with_data(val(*bias), db));
        }
        Op::BceLogits {
            logits,
            targets,
            pos_weight,
        } => {
            let zv = val(*logits);
            let n = targets.len() as f64;
            let g0 = g.data()[0];
            let d = zv
                .data()
                .iter()
                .zip(targets)
                .map(|(&z, &y)| {
                    let s = sigmoid(z);
                    g0 * (s * (pos_weight * y + 1.0 - y) - pos_weight * y) / n
                })
                .collect();
            acc(*logits, with_data(zv, d));
        }
    }
}
