use std::fmt;
use std::str::FromStr;

use super::tensor::Tensor;
use super::{AdError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for dispatch-style application and error reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    MulElementwise,
    Matmul,
    Relu,
    Tanh,
    ConcatLastDim,
    SliceLastDim { start: usize, end: usize },
    Scale { factor: f64 },
    Mean,
    L1Loss,
    L2Loss,
    DropoutApply,
    StopGradient,
    GradReverse { lambda: f64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::MulElementwise => "mul_elementwise",
            OpKind::Matmul => "matmul",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::ConcatLastDim => "concat_lastdim",
            OpKind::SliceLastDim { .. } => "slice_lastdim",
            OpKind::Scale { .. } => "scale",
            OpKind::Mean => "mean",
            OpKind::L1Loss => "l1_loss",
            OpKind::L2Loss => "l2_loss",
            OpKind::DropoutApply => "dropout_apply",
            OpKind::StopGradient => "stop_gradient",
            OpKind::GradReverse { .. } => "grad_reverse",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = AdError;

    /// Parse a bare op name. Parameterized kinds get default parameters
    /// (`slice_lastdim` 0..0, `scale` 1.0, `grad_reverse` 1.0).
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul_elementwise" => OpKind::MulElementwise,
            "matmul" => OpKind::Matmul,
            "relu" => OpKind::Relu,
            "tanh" => OpKind::Tanh,
            "concat_lastdim" => OpKind::ConcatLastDim,
            "slice_lastdim" => OpKind::SliceLastDim { start: 0, end: 0 },
            "scale" => OpKind::Scale { factor: 1.0 },
            "mean" => OpKind::Mean,
            "l1_loss" => OpKind::L1Loss,
            "l2_loss" => OpKind::L2Loss,
            "dropout_apply" => OpKind::DropoutApply,
            "stop_gradient" => OpKind::StopGradient,
            "grad_reverse" => OpKind::GradReverse { lambda: 1.0 },
            other => return Err(AdError::UnknownKind(other.to_string())),
        })
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Elementwise add, or bias broadcast when rhs is a vector and lhs a matrix.
    Add { bias: bool },
    Sub,
    MulElementwise,
    Matmul { m: usize, k: usize, n: usize },
    Relu,
    Tanh,
    ConcatLastDim { left: usize, right: usize },
    SliceLastDim { start: usize, end: usize, width: usize },
    Scale { factor: f64 },
    Mean,
    L1Loss,
    L2Loss,
    DropoutApply,
    StopGradient,
    GradReverse { lambda: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Gradients produced by [`Tape::backward`], indexed by node id. Nodes not
/// reachable from the loss have no entry.
#[derive(Debug, Clone)]
pub struct GradientMap {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `id`, or zeros of the given length when unreachable.
    pub fn get_or_zeros(&self, id: NodeId, len: usize) -> Vec<f64> {
        match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

/// Per-step computation tape. Nodes are topologically ordered by construction:
/// every operation's inputs were recorded before it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf (input or parameter). Returns the same data with a node
    /// handle attached.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf, vec![], t.shape().to_vec(), t.values().to_vec());
        Tensor::with_node(t.shape().to_vec(), t.values().to_vec(), id)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            values,
        });
        id
    }

    fn node_of(&self, t: &Tensor) -> Result<NodeId> {
        let id = t.node().ok_or(AdError::Detached)?;
        if id.0 >= self.nodes.len() {
            return Err(AdError::ForeignNode(id.0));
        }
        Ok(id)
    }

    fn out(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        let id = self.push(op, inputs, shape.clone(), values.clone());
        Tensor::with_node(shape, values, id)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ia, ib) = (self.node_of(a)?, self.node_of(b)?);
        if a.shape() == b.shape() {
            let values = a
                .values()
                .iter()
                .zip(b.values())
                .map(|(x, y)| x + y)
                .collect();
            return Ok(self.out(Op::Add { bias: false }, vec![ia, ib], a.shape().to_vec(), values));
        }
        // bias broadcast: [m, n] + [n]
        if a.shape().len() == 2 && b.shape().len() == 1 && a.shape()[1] == b.shape()[0] {
            let n = b.len();
            let values = a
                .values()
                .iter()
                .enumerate()
                .map(|(i, x)| x + b.values()[i % n])
                .collect();
            return Ok(self.out(Op::Add { bias: true }, vec![ia, ib], a.shape().to_vec(), values));
        }
        Err(AdError::ShapeMismatch {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ia, ib) = (self.node_of(a)?, self.node_of(b)?);
        same_shape("sub", a, b)?;
        let values = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.out(Op::Sub, vec![ia, ib], a.shape().to_vec(), values))
    }

    pub fn mul_elementwise(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ia, ib) = (self.node_of(a)?, self.node_of(b)?);
        same_shape("mul_elementwise", a, b)?;
        let values = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.out(Op::MulElementwise, vec![ia, ib], a.shape().to_vec(), values))
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ia, ib) = (self.node_of(a)?, self.node_of(b)?);
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let values = matmul_raw(a.values(), b.values(), m, k, n);
        Ok(self.out(Op::Matmul { m, k, n }, vec![ia, ib], vec![m, n], values))
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.node_of(x)?;
        let values = x.values().iter().map(|v| v.max(0.0)).collect();
        Ok(self.out(Op::Relu, vec![ix], x.shape().to_vec(), values))
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.node_of(x)?;
        let values = x.values().iter().map(|v| v.tanh()).collect();
        Ok(self.out(Op::Tanh, vec![ix], x.shape().to_vec(), values))
    }

    /// Concatenate along the last dimension. Leading dimensions must match.
    pub fn concat_lastdim(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ia, ib) = (self.node_of(a)?, self.node_of(b)?);
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(AdError::ShapeMismatch {
                op: "concat_lastdim",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (la, lb) = (a.last_dim(), b.last_dim());
        let rows = a.len() / la;
        let mut values = Vec::with_capacity(a.len() + b.len());
        for r in 0..rows {
            values.extend_from_slice(&a.values()[r * la..(r + 1) * la]);
            values.extend_from_slice(&b.values()[r * lb..(r + 1) * lb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("rank >= 1") = la + lb;
        Ok(self.out(
            Op::ConcatLastDim { left: la, right: lb },
            vec![ia, ib],
            shape,
            values,
        ))
    }

    /// Take `start..end` of the last dimension.
    pub fn slice_lastdim(&mut self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let ix = self.node_of(x)?;
        let width = x.last_dim();
        if start >= end || end > width {
            return Err(AdError::BadShape {
                op: "slice_lastdim",
                expected: format!("0 <= start < end <= {width}, got {start}..{end}"),
                got: x.shape().to_vec(),
            });
        }
        let rows = x.len() / width;
        let out_w = end - start;
        let mut values = Vec::with_capacity(rows * out_w);
        for r in 0..rows {
            values.extend_from_slice(&x.values()[r * width + start..r * width + end]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = out_w;
        Ok(self.out(Op::SliceLastDim { start, end, width }, vec![ix], shape, values))
    }

    pub fn scale(&mut self, x: &Tensor, factor: f64) -> Result<Tensor> {
        let ix = self.node_of(x)?;
        let values = x.values().iter().map(|v| v * factor).collect();
        Ok(self.out(Op::Scale { factor }, vec![ix], x.shape().to_vec(), values))
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.node_of(x)?;
        let m = x.values().iter().sum::<f64>() / x.len() as f64;
        Ok(self.out(Op::Mean, vec![ix], vec![1], vec![m]))
    }

    /// Mean absolute error between `pred` and `target`, as a scalar.
    pub fn l1_loss(&mut self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        let (ip, it) = (self.node_of(pred)?, self.node_of(target)?);
        same_shape("l1_loss", pred, target)?;
        let n = pred.len() as f64;
        let v = pred
            .values()
            .iter()
            .zip(target.values())
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / n;
        Ok(self.out(Op::L1Loss, vec![ip, it], vec![1], vec![v]))
    }

    /// Mean squared error between `pred` and `target`, as a scalar.
    pub fn l2_loss(&mut self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        let (ip, it) = (self.node_of(pred)?, self.node_of(target)?);
        same_shape("l2_loss", pred, target)?;
        let n = pred.len() as f64;
        let v = pred
            .values()
            .iter()
            .zip(target.values())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        Ok(self.out(Op::L2Loss, vec![ip, it], vec![1], vec![v]))
    }

    /// Multiply by a caller-provided binary mask (1 keeps, 0 drops).
    pub fn dropout_apply(&mut self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (ix, im) = (self.node_of(x)?, self.node_of(mask)?);
        same_shape("dropout_apply", x, mask)?;
        debug_assert!(
            mask.values().iter().all(|&m| m == 0.0 || m == 1.0),
            "dropout mask must be binary"
        );
        let values = x
            .values()
            .iter()
            .zip(mask.values())
            .map(|(v, m)| v * m)
            .collect();
        Ok(self.out(Op::DropoutApply, vec![ix, im], x.shape().to_vec(), values))
    }

    /// Identity in forward; blocks all gradient flow in backward.
    pub fn stop_gradient(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.node_of(x)?;
        Ok(self.out(
            Op::StopGradient,
            vec![ix],
            x.shape().to_vec(),
            x.values().to_vec(),
        ))
    }

    /// Identity in forward; multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: &Tensor, lambda: f64) -> Result<Tensor> {
        let ix = self.node_of(x)?;
        Ok(self.out(
            Op::GradReverse { lambda },
            vec![ix],
            x.shape().to_vec(),
            x.values().to_vec(),
        ))
    }

    /// Uniform dispatch over op kinds, mostly for exercising every op the
    /// same way in checks and tests.
    pub fn apply(&mut self, kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
        let arity = |expected: usize| -> Result<()> {
            if inputs.len() != expected {
                Err(AdError::BadArity {
                    op: kind.name(),
                    expected,
                    got: inputs.len(),
                })
            } else {
                Ok(())
            }
        };
        match kind {
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::MulElementwise => {
                arity(2)?;
                self.mul_elementwise(inputs[0], inputs[1])
            }
            OpKind::Matmul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            OpKind::Tanh => {
                arity(1)?;
                self.tanh(inputs[0])
            }
            OpKind::ConcatLastDim => {
                arity(2)?;
                self.concat_lastdim(inputs[0], inputs[1])
            }
            OpKind::SliceLastDim { start, end } => {
                arity(1)?;
                self.slice_lastdim(inputs[0], start, end)
            }
            OpKind::Scale { factor } => {
                arity(1)?;
                self.scale(inputs[0], factor)
            }
            OpKind::Mean => {
                arity(1)?;
                self.mean(inputs[0])
            }
            OpKind::L1Loss => {
                arity(2)?;
                self.l1_loss(inputs[0], inputs[1])
            }
            OpKind::L2Loss => {
                arity(2)?;
                self.l2_loss(inputs[0], inputs[1])
            }
            OpKind::DropoutApply => {
                arity(2)?;
                self.dropout_apply(inputs[0], inputs[1])
            }
            OpKind::StopGradient => {
                arity(1)?;
                self.stop_gradient(inputs[0])
            }
            OpKind::GradReverse { lambda } => {
                arity(1)?;
                self.grad_reverse(inputs[0], lambda)
            }
        }
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every node
    /// reachable from the loss; nodes behind a `stop_gradient` receive no
    /// contribution from that path.
    pub fn backward(&self, loss: &Tensor) -> Result<GradientMap> {
        let root = self.node_of(loss)?;
        if self.nodes[root.0].shape != [1] {
            return Err(AdError::NonScalarLoss(self.nodes[root.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.accumulate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(GradientMap { grads })
    }

    fn accumulate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let input_vals = |i: usize| -> &[f64] { &self.nodes[node.inputs[i].0].values };
        let mut acc = |target: NodeId, contrib: Vec<f64>| {
            let slot = &mut grads[target.0];
            match slot {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contrib) {
                        *e += c;
                    }
                }
                None => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add { bias } => {
                acc(node.inputs[0], g.to_vec());
                if *bias {
                    let n = self.nodes[node.inputs[1].0].values.len();
                    let mut gb = vec![0.0; n];
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % n] += gi;
                    }
                    acc(node.inputs[1], gb);
                } else {
                    acc(node.inputs[1], g.to_vec());
                }
            }
            Op::Sub => {
                acc(node.inputs[0], g.to_vec());
                acc(node.inputs[1], g.iter().map(|v| -v).collect());
            }
            Op::MulElementwise => {
                let (a, b) = (input_vals(0).to_vec(), input_vals(1).to_vec());
                acc(node.inputs[0], g.iter().zip(&b).map(|(gi, bi)| gi * bi).collect());
                acc(node.inputs[1], g.iter().zip(&a).map(|(gi, ai)| gi * ai).collect());
            }
            Op::Matmul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let a = input_vals(0);
                let b = input_vals(1);
                // dA = g . B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij != 0.0 {
                            for p in 0..k {
                                da[i * k + p] += gij * b[p * n + j];
                            }
                        }
                    }
                }
                // dB = A^T . g
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = a[i * k + p];
                        if aip != 0.0 {
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                }
                acc(node.inputs[0], da);
                acc(node.inputs[1], db);
            }
            Op::Relu => {
                let x = input_vals(0);
                acc(
                    node.inputs[0],
                    g.iter()
                        .zip(x)
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect(),
                );
            }
            Op::Tanh => {
                let y = &node.values;
                acc(
                    node.inputs[0],
                    g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect(),
                );
            }
            Op::ConcatLastDim { left, right } => {
                let (la, lb) = (*left, *right);
                let rows = node.values.len() / (la + lb);
                let mut ga = vec![0.0; rows * la];
                let mut gb = vec![0.0; rows * lb];
                for r in 0..rows {
                    let row = &g[r * (la + lb)..(r + 1) * (la + lb)];
                    ga[r * la..(r + 1) * la].copy_from_slice(&row[..la]);
                    gb[r * lb..(r + 1) * lb].copy_from_slice(&row[la..]);
                }
                acc(node.inputs[0], ga);
                acc(node.inputs[1], gb);
            }
            Op::SliceLastDim { start, end, width } => {
                let (start, end, width) = (*start, *end, *width);
                let out_w = end - start;
                let rows = node.values.len() / out_w;
                let mut gx = vec![0.0; rows * width];
                for r in 0..rows {
                    gx[r * width + start..r * width + end]
                        .copy_from_slice(&g[r * out_w..(r + 1) * out_w]);
                }
                acc(node.inputs[0], gx);
            }
            Op::Scale { factor } => {
                acc(node.inputs[0], g.iter().map(|v| v * factor).collect());
            }
            Op::Mean => {
                let n = self.nodes[node.inputs[0].0].values.len();
                let gi = g[0] / n as f64;
                acc(node.inputs[0], vec![gi; n]);
            }
            Op::L1Loss => {
                let p = input_vals(0);
                let t = input_vals(1);
                let n = p.len() as f64;
                // subgradient at 0 defined as 0
                let dp: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .map(|(pi, ti)| {
                        let d = pi - ti;
                        let sign = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[0] * sign / n
                    })
                    .collect();
                let dt: Vec<f64> = dp.iter().map(|v| -v).collect();
                acc(node.inputs[0], dp);
                acc(node.inputs[1], dt);
            }
            Op::L2Loss => {
                let p = input_vals(0);
                let t = input_vals(1);
                let n = p.len() as f64;
                let dp: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .map(|(pi, ti)| g[0] * 2.0 * (pi - ti) / n)
                    .collect();
                let dt: Vec<f64> = dp.iter().map(|v| -v).collect();
                acc(node.inputs[0], dp);
                acc(node.inputs[1], dt);
            }
            Op::DropoutApply => {
                let mask = input_vals(1).to_vec();
                let x = input_vals(0).to_vec();
                acc(
                    node.inputs[0],
                    g.iter().zip(&mask).map(|(gi, mi)| gi * mi).collect(),
                );
                acc(node.inputs[1], g.iter().zip(&x).map(|(gi, xi)| gi * xi).collect());
            }
            Op::GradReverse { lambda } => {
                acc(node.inputs[0], g.iter().map(|v| -lambda * v).collect());
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AdError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Row-major `A[m,k] . B[k,n]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, values: Vec<f64>) -> Tensor {
        tape.leaf(&Tensor::vector(values))
    }

    #[test]
    fn stop_gradient_is_identity_forward_and_zero_backward() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1.5, -2.0]);
        let sg = tape.stop_gradient(&x).unwrap();
        assert_eq!(sg.values(), x.values());
        let y = tape.mul_elementwise(&sg, &sg).unwrap();
        let loss = tape.mean(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(x.node().unwrap()).is_none());
    }

    #[test]
    fn grad_reverse_flips_sign() {
        // f(x) = x^2 at x = 3 through grad_reverse(1): forward 9, gradient -6
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3.0]);
        let r = tape.grad_reverse(&x, 1.0).unwrap();
        let y = tape.mul_elementwise(&r, &r).unwrap();
        let loss = tape.mean(&y).unwrap();
        assert_eq!(loss.item(), 9.0);
        let grads = tape.backward(&loss).unwrap();
        // both mul inputs route through the same reversal, total -2x = -6
        assert_eq!(grads.get(x.node().unwrap()).unwrap(), &[-6.0]);
    }

    #[test]
    fn l1_loss_example() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, vec![0.3, -0.1]);
        let t = leaf(&mut tape, vec![0.1, 0.1]);
        let l = tape.l1_loss(&p, &t).unwrap();
        assert!((l.item() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3.0]);
        let y = tape.mul_elementwise(&x, &x).unwrap();
        let loss = tape.mean(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(x.node().unwrap()).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_linear_l2() {
        // f(W, b) = l2_loss(W.x + b, y), 1x1 case W=2, x=1, b=0, y=0:
        // dW = 2 * (Wx - y) * x = 4, confirmed by central differences.
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let x = tape.leaf(&Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let b = tape.leaf(&Tensor::vector(vec![0.0]));
        let y = tape.leaf(&Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let wx = tape.matmul(&w, &x).unwrap();
        let pred = tape.add(&wx, &b).unwrap();
        let loss = tape.l2_loss(&pred, &y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(w.node().unwrap()).unwrap(), &[4.0]);
        let report = crate::autodiff::finite_diff_check(
            |t, wv| {
                let x = t.leaf(&Tensor::matrix(1, 1, vec![1.0]).unwrap());
                let b = t.leaf(&Tensor::vector(vec![0.0]));
                let y = t.leaf(&Tensor::matrix(1, 1, vec![0.0]).unwrap());
                let wx = t.matmul(wv, &x)?;
                let pred = t.add(&wx, &b)?;
                t.l2_loss(&pred, &y)
            },
            &Tensor::matrix(1, 1, vec![2.0]).unwrap(),
            1e-6,
        )
        .unwrap();
        assert!((report.numeric[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1.0, 2.0]);
        let err = tape.backward(&x).unwrap_err();
        assert!(matches!(err, AdError::NonScalarLoss(_)));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1.0, 2.0]);
        let b = leaf(&mut tape, vec![1.0, 2.0, 3.0]);
        let err = tape.sub(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sub") && msg.contains("[2]") && msg.contains("[3]"));
    }

    #[test]
    fn unknown_kind_is_an_error() {
        let err = "softmax".parse::<OpKind>().unwrap_err();
        assert!(matches!(err, AdError::UnknownKind(k) if k == "softmax"));
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = tape.leaf(&Tensor::matrix(2, 2, vec![7.0, 8.0, 9.0, 10.0]).unwrap());
        let cat = tape.concat_lastdim(&a, &b).unwrap();
        let back = tape.slice_lastdim(&cat, 0, 3).unwrap();
        assert_eq!(back.values(), a.values());
        let right = tape.slice_lastdim(&cat, 3, 5).unwrap();
        assert_eq!(right.values(), b.values());
    }

    #[test]
    fn bias_broadcast_gradient_sums_rows() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(&Tensor::vector(vec![10.0, 20.0]));
        let s = tape.add(&a, &b).unwrap();
        assert_eq!(s.values(), &[11.0, 22.0, 13.0, 24.0]);
        let loss = tape.mean(&s).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(b.node().unwrap()).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn detached_tensor_rejected() {
        let mut tape = Tape::new();
        let free = Tensor::vector(vec![1.0]);
        assert!(matches!(tape.relu(&free), Err(AdError::Detached)));
    }
}
