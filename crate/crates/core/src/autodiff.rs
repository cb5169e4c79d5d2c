//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation as a node holding its forward value and
//! the ids of its inputs. Nodes are appended in evaluation order, so the node
//! list is already topologically sorted and [`Tape::backward`] is a single
//! reverse sweep that visits each node once.
//!
//! Detaching is an explicit node: [`Tape::stop_gradient`] copies the value
//! and never propagates anything upstream.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gelu_grad, sigmoid, softplus, Tensor};

pub type NodeId = usize;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(NodeId);

impl Var {
    pub fn id(self) -> NodeId {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    DivByScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Sqrt(Var),
    Atan2(Var, Var),
    Sum(Var),
    RowSum(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Gather(Var, Rc<[usize]>),
    StopGradient,
    Normalize { x: Var, norm: f64 },
    Norm(Var),
    QuatToRot(Var),
    BceWithLogits { logits: Var, target: Rc<Tensor> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder. Single owner; not `Sync`.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    /// Gradient of a leaf. Panics if `v` was not a `requires_grad` leaf.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.grads.get(&v.0).expect("no gradient recorded for this node")
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
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

    fn push(&self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, requires_grad });
        Var(nodes.len() - 1)
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(&self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(&self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(&self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = self.value(a).add_row(&self.value(row))?;
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = self.value(a).mul_row(&self.value(row))?;
        Ok(self.push(out, Op::MulRow(a, row), &[a, row]))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// `a / s` where `s` is a scalar node.
    pub fn div_by_scalar(&self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(Error::dim("div_by_scalar", format!("divisor shape {:?}", sv.shape())));
        }
        let d = sv.item();
        let out = self.value(a).map(|v| v / d);
        Ok(self.push(out, Op::DivByScalar(a, s), &[a, s]))
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn softplus(&self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn gelu(&self, a: Var) -> Var {
        let out = self.value(a).gelu();
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a), &[a])
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&self, y: Var, x: Var) -> Result<Var> {
        let (yv, xv) = (self.value(y), self.value(x));
        if yv.shape() != xv.shape() {
            return Err(Error::dim("atan2", format!("{:?} vs {:?}", yv.shape(), xv.shape())));
        }
        let data = yv.data().iter().zip(xv.data()).map(|(a, b)| a.atan2(*b)).collect();
        let out = Tensor::new(yv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Atan2(y, x), &[y, x]))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums each row of an `m×n` matrix into a length-`m` vector.
    pub fn row_sum(&self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 2 {
            return Err(Error::dim("row_sum", format!("shape {:?}", v.shape())));
        }
        let out = Tensor::vector((0..v.rows()).map(|i| v.row(i).iter().sum()).collect());
        Ok(self.push(out, Op::RowSum(a), &[a]))
    }

    /// Row softmax; masked entries are exactly zero and receive zero gradient.
    pub fn softmax_rows(&self, a: Var, visible: Option<&[bool]>) -> Result<Var> {
        let out = self.value(a).softmax_rows(visible)?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    pub fn layer_norm(&self, a: Var, eps: f64) -> Result<Var> {
        let (out, inv_std) = self.value(a).layer_norm(eps)?;
        Ok(self.push(out, Op::LayerNorm { x: a, inv_std }, &[a]))
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, end)?;
        Ok(self.push(out, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, end)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_rows(&refs)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_cols(&refs)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Picks elements by flat index into a 1-D result.
    pub fn gather(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            data.push(*v.data().get(i).ok_or_else(|| {
                Error::dim("gather", format!("index {i} out of {} elements", v.numel()))
            })?);
        }
        Ok(self.push(Tensor::vector(data), Op::Gather(a, indices.into()), &[a]))
    }

    /// Value-identical copy through which no gradient flows.
    pub fn stop_gradient(&self, a: Var) -> Var {
        let value = self.value(a);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::StopGradient, requires_grad: false });
        Var(nodes.len() - 1)
    }

    /// Scales a tensor to unit L2 norm (over all elements).
    pub fn normalize(&self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::contract("cannot normalize a zero vector"));
        }
        let out = v.scale(1.0 / norm);
        Ok(self.push(out, Op::Normalize { x: a, norm }, &[a]))
    }

    /// L2 norm over all elements. The subgradient at zero is zero.
    pub fn norm(&self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.data().iter().map(|x| x * x).sum::<f64>().sqrt());
        self.push(out, Op::Norm(a), &[a])
    }

    /// Rotation matrix of a unit quaternion `[w, x, y, z]`.
    pub fn quat_to_rot(&self, q: Var) -> Result<Var> {
        let v = self.value(q);
        if v.numel() != 4 {
            return Err(Error::dim("quat_to_rot", format!("shape {:?}", v.shape())));
        }
        let out = quat_rotation(v.data());
        Ok(self.push(out, Op::QuatToRot(q), &[q]))
    }

    /// Mean binary cross-entropy from logits against a constant {0,1} target.
    pub fn bce_with_logits(&self, logits: Var, target: &Tensor) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != target.shape() {
            return Err(Error::dim("bce_with_logits", format!("{:?} vs {:?}", x.shape(), target.shape())));
        }
        let n = x.numel() as f64;
        let total: f64 = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let op = Op::BceWithLogits { logits, target: Rc::new(target.clone()) };
        Ok(self.push(Tensor::scalar(total / n), op, &[logits]))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| Error::contract("loss node is not on this tape"))?;
        if !root.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                out.grads.insert(id, g);
                continue;
            }
            propagate(&nodes, node, &g, &mut grads)?;
        }

        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out.grads.entry(id).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }
}

fn quat_rotation(q: &[f64]) -> Tensor {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let data = vec![
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ];
    Tensor::new(vec![3, 3], data).expect("3x3")
}

fn quat_rotation_partials(q: &[f64]) -> [[f64; 9]; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0],
        [0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x],
        [-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y],
        [-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0],
    ]
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.accumulate(&g),
        slot @ None => *slot = Some(g),
    }
}

fn with_shape(data: Vec<f64>, like: &Tensor) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient shape")
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let out = &node.value;
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        Op::MatMul(a, b) => {
            if nodes[a.0].requires_grad {
                accumulate(nodes, grads, *a, g.matmul(&val(*b).transpose()?)?);
            }
            if nodes[b.0].requires_grad {
                accumulate(nodes, grads, *b, val(*a).transpose()?.matmul(g)?);
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()?),
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, g.mul(val(*b))?);
            accumulate(nodes, grads, *b, g.mul(val(*a))?);
        }
        Op::AddRow(a, r) => {
            accumulate(nodes, grads, *a, g.clone());
            if nodes[r.0].requires_grad {
                accumulate(nodes, grads, *r, with_shape(column_sums(g), val(*r)));
            }
        }
        Op::MulRow(a, r) => {
            accumulate(nodes, grads, *a, g.mul_row(val(*r))?);
            if nodes[r.0].requires_grad {
                accumulate(nodes, grads, *r, with_shape(column_sums(&g.mul(val(*a))?), val(*r)));
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.scale(*c)),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::DivByScalar(a, s) => {
            let d = val(*s).item();
            accumulate(nodes, grads, *a, g.scale(1.0 / d));
            if nodes[s.0].requires_grad {
                let dot: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                accumulate(nodes, grads, *s, with_shape(vec![-dot / (d * d)], val(*s)));
            }
        }
        Op::Exp(a) => accumulate(nodes, grads, *a, g.mul(out)?),
        Op::Log(a) => {
            let d = g.data().iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
            accumulate(nodes, grads, *a, with_shape(d, g));
        }
        Op::Softplus(a) => {
            let d = g.data().iter().zip(val(*a).data()).map(|(g, x)| g * sigmoid(*x)).collect();
            accumulate(nodes, grads, *a, with_shape(d, g));
        }
        Op::Sigmoid(a) => {
            let d = g.data().iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
            accumulate(nodes, grads, *a, with_shape(d, g));
        }
        Op::Gelu(a) => {
            let d = g.data().iter().zip(val(*a).data()).map(|(g, x)| g * gelu_grad(*x)).collect();
            accumulate(nodes, grads, *a, with_shape(d, g));
        }
        Op::Relu(a) => {
            let d = g
                .data()
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *a, with_shape(d, g));
        }
        Op::Sqrt(a) => {
            let d = g.data().iter().zip(out.data()).map(|(g, s)| g / (2.0 * s)).collect();
            accumulate(nodes, grads, *a, with_shape(d, g));
        }
        Op::Atan2(y, x) => {
            let (yv, xv) = (val(*y).data(), val(*x).data());
            let mut dy = Vec::with_capacity(yv.len());
            let mut dx = Vec::with_capacity(yv.len());
            for ((gi, a), b) in g.data().iter().zip(yv).zip(xv) {
                let r2 = a * a + b * b;
                if r2 == 0.0 {
                    dy.push(0.0);
                    dx.push(0.0);
                } else {
                    dy.push(gi * b / r2);
                    dx.push(-gi * a / r2);
                }
            }
            accumulate(nodes, grads, *y, with_shape(dy, g));
            accumulate(nodes, grads, *x, with_shape(dx, g));
        }
        Op::Sum(a) => {
            let like = val(*a);
            accumulate(nodes, grads, *a, Tensor::full(like.shape(), g.item()));
        }
        Op::RowSum(a) => {
            let like = val(*a);
            let n = like.cols();
            let mut d = Vec::with_capacity(like.numel());
            for &gi in g.data() {
                d.extend(std::iter::repeat_n(gi, n));
            }
            accumulate(nodes, grads, *a, with_shape(d, like));
        }
        Op::Softmax(a) => {
            let (m, n) = (out.rows(), out.cols());
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                let y = out.row(i);
                let gr = g.row(i);
                let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..n {
                    d[i * n + j] = y[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, grads, *a, with_shape(d, out));
        }
        Op::LayerNorm { x, inv_std } => {
            let (m, n) = (out.rows(), out.cols());
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                let y = out.row(i);
                let gr = g.row(i);
                let mean_g = gr.iter().sum::<f64>() / n as f64;
                let mean_gy = gr.iter().zip(y).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                for j in 0..n {
                    d[i * n + j] = inv_std[i] * (gr[j] - mean_g - y[j] * mean_gy);
                }
            }
            accumulate(nodes, grads, *x, with_shape(d, out));
        }
        Op::SliceRows(a, start) => {
            let like = val(*a);
            let n = like.cols();
            let mut d = vec![0.0; like.numel()];
            d[start * n..start * n + g.numel()].copy_from_slice(g.data());
            accumulate(nodes, grads, *a, with_shape(d, like));
        }
        Op::SliceCols(a, start) => {
            let like = val(*a);
            let (m, n, w) = (like.rows(), like.cols(), g.cols());
            let mut d = vec![0.0; like.numel()];
            for i in 0..m {
                d[i * n + start..i * n + start + w].copy_from_slice(g.row(i));
            }
            accumulate(nodes, grads, *a, with_shape(d, like));
        }
        Op::ConcatRows(parts) => {
            let mut row = 0;
            for p in parts {
                let m = val(*p).rows();
                accumulate(nodes, grads, *p, g.slice_rows(row, row + m)?);
                row += m;
            }
        }
        Op::ConcatCols(parts) => {
            let mut col = 0;
            for p in parts {
                let w = val(*p).cols();
                accumulate(nodes, grads, *p, g.slice_cols(col, col + w)?);
                col += w;
            }
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.reshape(val(*a).shape())?),
        Op::Gather(a, idx) => {
            let like = val(*a);
            let mut d = vec![0.0; like.numel()];
            for (k, &i) in idx.iter().enumerate() {
                d[i] += g.data()[k];
            }
            accumulate(nodes, grads, *a, with_shape(d, like));
        }
        Op::Normalize { x, norm } => {
            let dot: f64 = g.data().iter().zip(out.data()).map(|(g, y)| g * y).sum();
            let d = g.data().iter().zip(out.data()).map(|(g, y)| (g - y * dot) / norm).collect();
            accumulate(nodes, grads, *x, with_shape(d, out));
        }
        Op::Norm(a) => {
            let n = out.item();
            let like = val(*a);
            let d = if n == 0.0 {
                vec![0.0; like.numel()]
            } else {
                like.data().iter().map(|x| g.item() * x / n).collect()
            };
            accumulate(nodes, grads, *a, with_shape(d, like));
        }
        Op::QuatToRot(q) => {
            let qv = val(*q);
            let partials = quat_rotation_partials(qv.data());
            let d = partials
                .iter()
                .map(|p| p.iter().zip(g.data()).map(|(p, g)| p * g).sum())
                .collect();
            accumulate(nodes, grads, *q, with_shape(d, qv));
        }
        Op::BceWithLogits { logits, target } => {
            let x = val(*logits);
            let n = x.numel() as f64;
            let gi = g.item();
            let d = x
                .data()
                .iter()
                .zip(target.data())
                .map(|(z, y)| gi * (sigmoid(*z) - y) / n)
                .collect();
            accumulate(nodes, grads, *logits, with_shape(d, x));
        }
    }
    Ok(())
}

fn column_sums(g: &Tensor) -> Vec<f64> {
    let (m, n) = (g.rows(), g.cols());
    let mut s = vec![0.0; n];
    for i in 0..m {
        for (acc, v) in s.iter_mut().zip(g.row(i)) {
            *acc += v;
        }
    }
    s
}

/// Smallest magnitude used as the denominator of the relative gradient error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central-difference gradient of a scalar function of one tensor.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t);
        let out = f(&tape, v)?;
        Ok(tape.scalar_value(out))
    };
    let mut grad = vec![0.0; x.numel()];
    for (i, gi) in grad.iter_mut().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        *gi = (eval(plus)? - eval(minus)?) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Analytic gradient of a scalar function of one tensor.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&tape, v)?;
    let grads = tape.backward(out)?;
    Ok(grads.wrt(v).clone())
}

/// Largest relative error between analytic and central-difference gradients,
/// using `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)` per coordinate.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, x)?;
    let numeric = numeric_gradient(&f, x, eps)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        Tensor::random_uniform(shape, -2.0, 2.0, &mut seeded(seed))
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let b = rand_tensor(&[4, 2], 11);
        let a = rand_tensor(&[3, 4], 12);
        let err = finite_diff_check(
            |t, x| {
                let bv = t.constant(b.clone());
                Ok(t.sum(t.matmul(x, bv)?))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let y = tape.stop_gradient(x);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 0.0));
        assert_eq!(*tape.value(y), *tape.value(x));
    }

    #[test]
    fn stop_gradient_product_rule() {
        // z = x * sg(x) at x = 3 has dz/dx = 3, not 6.
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let z = tape.mul(x, tape.stop_gradient(x)).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.wrt(x).item(), 3.0);
    }

    #[test]
    fn stop_gradient_is_idempotent() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.3, 0.7]));
        let once = tape.stop_gradient(x);
        let twice = tape.stop_gradient(tape.stop_gradient(x));
        assert_eq!(*tape.value(once), *tape.value(twice));
        let loss = tape.sum(tape.add(once, twice).unwrap());
        assert!(tape.backward(loss).unwrap().wrt(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn replay_is_bit_identical() {
        let tape = Tape::new();
        let x = tape.param(rand_tensor(&[3, 5], 3));
        let w = tape.param(rand_tensor(&[5, 5], 4));
        let h = tape.matmul(x, w).unwrap();
        let s = tape.softmax_rows(h, None).unwrap();
        let loss = tape.sum(tape.gelu(s));
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        for ((i1, a), (i2, b)) in g1.iter().zip(g2.iter()) {
            assert_eq!(i1, i2);
            assert_eq!(a.data(), b.data());
        }
    }

    type UnaryCase = (&'static str, Box<dyn Fn(&Tape, Var) -> Result<Var>>);

    #[test]
    fn elementwise_and_structural_ops_match_finite_differences() {
        let mask: Vec<bool> = (0..12).map(|i| i % 4 != 3 || i == 3).collect();
        let cases: Vec<UnaryCase> = vec![
            ("exp", Box::new(|t, x| Ok(t.sum(t.exp(x))))),
            ("softplus", Box::new(|t, x| Ok(t.sum(t.softplus(x))))),
            ("sigmoid", Box::new(|t, x| Ok(t.sum(t.sigmoid(x))))),
            ("gelu", Box::new(|t, x| Ok(t.sum(t.gelu(x))))),
            ("transpose", Box::new(|t, x| {
                Ok(t.sum(t.matmul(t.transpose(x)?, t.exp(x))?))
            })),
            ("softmax", Box::new(|t, x| {
                let s = t.softmax_rows(x, None)?;
                Ok(t.sum(t.mul(s, t.exp(x))?))
            })),
            ("masked_softmax", Box::new(move |t, x| {
                let s = t.softmax_rows(x, Some(&mask))?;
                Ok(t.sum(t.mul(s, x)?))
            })),
            ("layer_norm", Box::new(|t, x| {
                let y = t.layer_norm(x, 1e-5)?;
                Ok(t.sum(t.mul(y, t.exp(x))?))
            })),
            ("slice_concat", Box::new(|t, x| {
                let a = t.slice_cols(x, 0, 1)?;
                let b = t.slice_cols(x, 1, 3)?;
                let c = t.concat_cols(&[b, a])?;
                let r = t.concat_rows(&[c, t.exp(c)])?;
                Ok(t.sum(t.mul(r, r)?))
            })),
            ("row_sum_gather", Box::new(|t, x| {
                let r = t.row_sum(x)?;
                let g = t.gather(x, &[0, 5, 5, 7])?;
                Ok(t.add(t.sum(t.mul(r, r)?), t.sum(t.exp(g)))?)
            })),
            ("norm_normalize", Box::new(|t, x| {
                let n = t.normalize(x)?;
                let w = t.constant(Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.1).collect())?);
                Ok(t.add(t.sum(t.mul(n, w)?), t.norm(x))?)
            })),
            ("div_by_scalar", Box::new(|t, x| {
                let e = t.exp(x);
                let s = t.sum(e);
                let p = t.div_by_scalar(e, s)?;
                Ok(t.sum(t.mul(p, x)?))
            })),
        ];
        let x = rand_tensor(&[4, 3], 21);
        for (name, f) in cases {
            let err = finite_diff_check(|t, v| f(t, v), &x, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let other = rand_tensor(&[4, 3], 31);
        let row = rand_tensor(&[3], 32);
        let x = rand_tensor(&[4, 3], 33);
        let err = finite_diff_check(
            |t, v| {
                let o = t.constant(other.clone());
                let r = t.param(row.clone());
                let a = t.add_row(t.mul(v, o)?, r)?;
                let b = t.mul_row(t.sub(a, v)?, r)?;
                let y = t.atan2(b, t.add_scalar(t.exp(v), 0.1))?;
                Ok(t.sum(t.scale(y, 1.7)))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn quat_to_rot_gradient() {
        let q = Tensor::vector(vec![0.3, -0.5, 0.7, 0.2]);
        let w = rand_tensor(&[3, 3], 41);
        let err = finite_diff_check(
            |t, v| {
                let r = t.quat_to_rot(t.normalize(v)?)?;
                Ok(t.sum(t.mul(r, t.constant(w.clone()))?))
            },
            &q,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn bce_with_logits_gradient() {
        let target = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let x = rand_tensor(&[2, 3], 51);
        let err = finite_diff_check(|t, v| t.bce_with_logits(v, &target), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
