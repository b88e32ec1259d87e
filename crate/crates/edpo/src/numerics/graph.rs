use crate::{Error, Result};

use super::tensor::Tensor;
use super::{log_softmax, sigmoid};

/// Handle into a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Neg(NodeId),
    /// [m, k] x [k] -> [m]
    MatVec(NodeId, NodeId),
    /// Row r of a [m, k] matrix -> [k]
    Row(NodeId, usize),
    Tanh(NodeId),
    LogSoftmax(NodeId),
    /// Element i of a vector -> scalar
    Index(NodeId, usize),
    Sum(NodeId),
    LogSigmoid(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
}

/// Ordered record of primitive-op applications, replayed in reverse to
/// compute adjoints. Nodes are topologically ordered by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node { op, shape, data, grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec())
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.push(Op::Leaf, shape, data)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::Leaf, vec![], vec![v])
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::InvalidArgument(format!(
                "shape mismatch: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Add(a, b), shape, data))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Sub(a, b), shape, data))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Scale(a, c), shape, data)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| -x).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Neg(a), shape, data)
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let ms = &self.nodes[m.0].shape;
        let vs = &self.nodes[v.0].shape;
        if ms.len() != 2 || vs.len() != 1 || ms[1] != vs[0] {
            return Err(Error::InvalidArgument(format!(
                "matvec shape mismatch: {ms:?} x {vs:?}"
            )));
        }
        let (rows, cols) = (ms[0], ms[1]);
        let mdat = &self.nodes[m.0].data;
        let vdat = &self.nodes[v.0].data;
        let data: Vec<f64> = (0..rows)
            .map(|r| (0..cols).map(|c| mdat[r * cols + c] * vdat[c]).sum())
            .collect();
        Ok(self.push(Op::MatVec(m, v), vec![rows], data))
    }

    pub fn row(&mut self, m: NodeId, r: usize) -> Result<NodeId> {
        let ms = &self.nodes[m.0].shape;
        if ms.len() != 2 || r >= ms[0] {
            return Err(Error::InvalidArgument(format!("row {r} out of {ms:?}")));
        }
        let cols = ms[1];
        let data = self.nodes[m.0].data[r * cols..(r + 1) * cols].to_vec();
        Ok(self.push(Op::Row(m, r), vec![cols], data))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Tanh(a), shape, data)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape.len() != 1 {
            return Err(Error::InvalidArgument("log_softmax expects a vector".into()));
        }
        let data = log_softmax(&self.nodes[a.0].data)?;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::LogSoftmax(a), shape, data))
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        if self.nodes[a.0].shape.len() != 1 || i >= self.nodes[a.0].data.len() {
            return Err(Error::InvalidArgument(format!(
                "index {i} out of vector of shape {:?}",
                self.nodes[a.0].shape
            )));
        }
        let v = self.nodes[a.0].data[i];
        Ok(self.push(Op::Index(a, i), vec![], vec![v]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(Op::Sum(a), vec![], vec![s])
    }

    pub fn logsigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        if !self.nodes[a.0].shape.is_empty() {
            return Err(Error::InvalidArgument("logsigmoid expects a scalar".into()));
        }
        let v = super::logsigmoid(self.nodes[a.0].data[0]);
        Ok(self.push(Op::LogSigmoid(a), vec![], vec![v]))
    }

    /// Sums a list of scalar nodes.
    pub fn sum_scalars(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let mut it = ids.iter();
        let mut acc = *it
            .next()
            .ok_or_else(|| Error::InvalidArgument("sum of empty node list".into()))?;
        for id in it {
            acc = self.add(acc, *id)?;
        }
        Ok(acc)
    }

    /// Reverse-mode sweep from a scalar root. Leaf grads accumulate across
    /// repeated calls; the caller reads them via [`Graph::grad`].
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.nodes[root.0].shape.is_empty() {
            return Err(Error::InvalidArgument("backward root must be a scalar".into()));
        }
        // Adjoint scratch local to this sweep; leaf adjoints fold into node
        // grads at the end so repeated sweeps accumulate.
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        adj[root.0][0] = 1.0;
        for i in (0..=root.0).rev() {
            if adj[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            match self.nodes[i].op.clone() {
                Op::Leaf => {
                    for (dst, src) in self.nodes[i].grad.iter_mut().zip(&g) {
                        *dst += src;
                    }
                }
                Op::Add(a, b) => {
                    for (dst, src) in adj[a.0].iter_mut().zip(&g) {
                        *dst += src;
                    }
                    for (dst, src) in adj[b.0].iter_mut().zip(&g) {
                        *dst += src;
                    }
                }
                Op::Sub(a, b) => {
                    for (dst, src) in adj[a.0].iter_mut().zip(&g) {
                        *dst += src;
                    }
                    for (dst, src) in adj[b.0].iter_mut().zip(&g) {
                        *dst -= src;
                    }
                }
                Op::Scale(a, c) => {
                    for (dst, src) in adj[a.0].iter_mut().zip(&g) {
                        *dst += c * src;
                    }
                }
                Op::Neg(a) => {
                    for (dst, src) in adj[a.0].iter_mut().zip(&g) {
                        *dst -= src;
                    }
                }
                Op::MatVec(m, v) => {
                    let cols = self.nodes[v.0].data.len();
                    let rows = g.len();
                    let mdat = self.nodes[m.0].data.clone();
                    let vdat = self.nodes[v.0].data.clone();
                    for r in 0..rows {
                        for c in 0..cols {
                            adj[m.0][r * cols + c] += g[r] * vdat[c];
                            adj[v.0][c] += g[r] * mdat[r * cols + c];
                        }
                    }
                }
                Op::Row(m, r) => {
                    let cols = g.len();
                    for (c, src) in g.iter().enumerate() {
                        adj[m.0][r * cols + c] += src;
                    }
                }
                Op::Tanh(a) => {
                    let out = self.nodes[i].data.clone();
                    for ((dst, src), t) in adj[a.0].iter_mut().zip(&g).zip(&out) {
                        *dst += src * (1.0 - t * t);
                    }
                }
                Op::LogSoftmax(a) => {
                    // d/dv_j = g_j - softmax(v)_j * sum(g)
                    let gsum: f64 = g.iter().sum();
                    let out = self.nodes[i].data.clone();
                    for ((dst, src), o) in adj[a.0].iter_mut().zip(&g).zip(&out) {
                        *dst += src - o.exp() * gsum;
                    }
                }
                Op::Index(a, idx) => {
                    adj[a.0][idx] += g[0];
                }
                Op::Sum(a) => {
                    for dst in adj[a.0].iter_mut() {
                        *dst += g[0];
                    }
                }
                Op::LogSigmoid(a) => {
                    let x = self.nodes[a.0].data[0];
                    adj[a.0][0] += g[0] * sigmoid(-x);
                }
            }
        }
        Ok(())
    }
}
