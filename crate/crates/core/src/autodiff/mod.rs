//! Minimal reverse-mode automatic differentiation over dense `f32` arrays.
//!
//! A [`Graph`] is a tape: every op appends one node whose inputs precede it, so
//! insertion order is already a topological order. [`Graph::backward`] walks
//! that order in reverse and accumulates gradients into the leaves.
//!
//! The op set is closed ([`Op`]); it covers the MLPs, mean-pooled prompt
//! encoder and cosine regularizer of this crate and nothing else.

mod adamw;
pub mod kernels;

use std::sync::atomic::{AtomicU64, Ordering};

pub use adamw::{adamw_step, AdamWConfig, AdamWState};

use crate::error::{Error, Result};

/// Dense row-major `f32` array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} does not hold {} values", data.len()),
            });
        }
        if !kernels::all_finite(&data) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// A tensor that participates in gradient computation.
    pub fn parameter(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Ok(Self::new(shape, data)?.with_requires_grad(true))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros has a valid shape")
    }

    pub fn scalar(x: f32) -> Self {
        Self::new(vec![1], vec![x]).expect("finite scalar")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape {
                op: "set_grad",
                detail: format!("gradient of {} values for tensor {:?}", grad.len(), self.shape),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        kernels::all_finite(&self.data)
    }
}

/// The closed set of differentiable operations.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// `[m,k] · [k,n]`.
    MatMul,
    /// Elementwise sum; the second operand may be a `[n]` row broadcast over a `[.., n]` first operand.
    Add,
    Mul,
    Concat { axis: usize },
    Silu,
    Relu,
    /// Sum of all elements, shape `[1]`.
    Sum,
    /// Mean of all elements, shape `[1]`.
    Mean,
    /// Row means of a `[N,d]` input over `(start, len)` row groups, shape `[G,d]`.
    MeanGroups(Vec<(usize, usize)>),
    /// Mean squared difference of two equally shaped inputs, shape `[1]`.
    Mse,
    /// Cosine similarity of two equally sized inputs, shape `[1]`.
    CosineSimilarity,
    Abs,
    Scale(f32),
    /// Gathers rows of a `[V,d]` table.
    IndexRows(Vec<usize>),
    /// Sinusoidal features of a vector of timesteps, shape `[B, dim]`. Not differentiable.
    SinusoidEmbed { dim: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Concat { .. } => "concat",
            Op::Silu => "silu",
            Op::Relu => "relu",
            Op::Sum => "sum",
            Op::Mean | Op::MeanGroups(_) => "mean",
            Op::Mse => "mse",
            Op::CosineSimilarity => "cosine_similarity",
            Op::Abs => "abs",
            Op::Scale(_) => "scale",
            Op::IndexRows(_) => "index_rows",
            Op::SinusoidEmbed { .. } => "sinusoid_embed",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::MatMul | Op::Add | Op::Mul | Op::Mse | Op::CosineSimilarity => 2,
            Op::Concat { .. } => usize::MAX,
            _ => 1,
        }
    }
}

/// Handle to a node on a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Debug)]
struct Node {
    op: Option<Op>,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    leaf_grad: Option<Vec<f32>>,
}

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Recording tape for one forward/backward pass.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `t` as a leaf. Gradients are tracked when `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(None, vec![], t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(None, vec![], t.shape, t.data, false))
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.id].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id].shape
    }

    /// Scalar value of a `[1]` node.
    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.id].data[0]
    }

    /// Accumulated gradient of a leaf, present once a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.id].leaf_grad.as_deref()
    }

    /// Copies the accumulated gradient of `v` into `t`'s gradient slot.
    /// Unreached leaves receive an all-zero gradient.
    pub fn export_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        self.check(v)?;
        let g = match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.numel()],
        };
        t.set_grad(g)
    }

    fn push(
        &mut self,
        op: Option<Op>,
        inputs: Vec<usize>,
        shape: Vec<usize>,
        data: Vec<f32>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            data,
            requires_grad,
            leaf_grad: None,
        });
        Var {
            graph: self.id,
            id: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.id >= self.nodes.len() {
            return Err(Error::ForeignVar(v.id));
        }
        Ok(())
    }

    /// Evaluates `op` on `inputs` and records the result.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let name = op.name();
        for v in inputs {
            self.check(*v)?;
        }
        let arity = op.arity();
        if (arity == usize::MAX && inputs.is_empty()) || (arity != usize::MAX && inputs.len() != arity) {
            return Err(shape_err(name, format!("expected {arity} inputs, got {}", inputs.len())));
        }
        let ins: Vec<&Node> = inputs.iter().map(|v| &self.nodes[v.id]).collect();
        let (shape, data) = forward(&op, &ins)?;
        if !kernels::all_finite(&data) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad =
            !matches!(op, Op::SinusoidEmbed { .. }) && ins.iter().any(|n| n.requires_grad);
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(Some(op), ids, shape, data, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Silu, &[x])
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean, &[x])
    }
    pub fn mean_groups(&mut self, x: Var, groups: Vec<(usize, usize)>) -> Result<Var> {
        self.apply(Op::MeanGroups(groups), &[x])
    }
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mse, &[a, b])
    }
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::CosineSimilarity, &[a, b])
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Abs, &[x])
    }
    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        self.apply(Op::Scale(c), &[x])
    }
    pub fn index_rows(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.apply(Op::IndexRows(ids), &[table])
    }
    pub fn sinusoid_embed(&mut self, t: Var, dim: usize) -> Result<Var> {
        self.apply(Op::SinusoidEmbed { dim }, &[t])
    }

    /// Accumulates `∂root/∂leaf` into every gradient-tracking leaf reachable from `root`.
    ///
    /// Calling it twice without resetting doubles every leaf gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check(root)?;
        let root_node = &self.nodes[root.id];
        if root_node.data.len() != 1 {
            return Err(Error::NonScalarRoot(root_node.shape.clone()));
        }
        let mut adj: Vec<Option<Vec<f32>>> = vec![None; root.id + 1];
        adj[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = &node.op else {
                let slot = &mut self.nodes[id].leaf_grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            };
            let ins: Vec<&Node> = node.inputs.iter().map(|&i| &self.nodes[i]).collect();
            let grads = backward_op(op, &ins, node, &g);
            for (&input, grad) in node.inputs.iter().zip(grads) {
                let Some(grad) = grad else { continue };
                match &mut adj[input] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }
}

fn forward(op: &Op, ins: &[&Node]) -> Result<(Vec<usize>, Vec<f32>)> {
    let name = op.name();
    let x = ins[0];
    match op {
        Op::MatMul => {
            let (a, b) = (x, ins[1]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(shape_err(name, format!("{:?} x {:?}", a.shape, b.shape)));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            Ok((vec![m, n], kernels::matmul(&a.data, &b.data, m, k, n)))
        }
        Op::Add => {
            let b = ins[1];
            if x.shape == b.shape {
                let data = x.data.iter().zip(&b.data).map(|(p, q)| p + q).collect();
                Ok((x.shape.clone(), data))
            } else if b.shape.len() == 1 && x.shape.last() == Some(&b.shape[0]) {
                let mut data = x.data.clone();
                kernels::add_rows(&mut data, &b.data);
                Ok((x.shape.clone(), data))
            } else {
                Err(shape_err(name, format!("{:?} + {:?}", x.shape, b.shape)))
            }
        }
        Op::Mul => {
            let b = ins[1];
            if x.shape != b.shape {
                return Err(shape_err(name, format!("{:?} * {:?}", x.shape, b.shape)));
            }
            let data = x.data.iter().zip(&b.data).map(|(p, q)| p * q).collect();
            Ok((x.shape.clone(), data))
        }
        Op::Concat { axis } => {
            let axis = *axis;
            let rank = x.shape.len();
            if axis >= rank {
                return Err(shape_err(name, format!("axis {axis} for rank {rank}")));
            }
            for n in ins {
                let same_elsewhere = n.shape.len() == rank
                    && (0..rank).all(|d| d == axis || n.shape[d] == x.shape[d]);
                if !same_elsewhere {
                    let shapes: Vec<_> = ins.iter().map(|n| n.shape.clone()).collect();
                    return Err(shape_err(name, format!("incompatible shapes {shapes:?} on axis {axis}")));
                }
            }
            let outer: usize = x.shape[..axis].iter().product();
            let mut shape = x.shape.clone();
            shape[axis] = ins.iter().map(|n| n.shape[axis]).sum();
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for n in ins {
                    let chunk = n.data.len() / outer;
                    data.extend_from_slice(&n.data[o * chunk..(o + 1) * chunk]);
                }
            }
            Ok((shape, data))
        }
        Op::Silu => Ok((x.shape.clone(), x.data.iter().map(|&v| kernels::silu(v)).collect())),
        Op::Relu => Ok((x.shape.clone(), x.data.iter().map(|&v| v.max(0.0)).collect())),
        Op::Abs => Ok((x.shape.clone(), x.data.iter().map(|v| v.abs()).collect())),
        Op::Scale(c) => Ok((x.shape.clone(), x.data.iter().map(|v| v * c).collect())),
        Op::Sum => Ok((vec![1], vec![kernels::sum(&x.data) as f32])),
        Op::Mean => Ok((vec![1], vec![(kernels::sum(&x.data) / x.data.len() as f64) as f32])),
        Op::MeanGroups(groups) => {
            if x.shape.len() != 2 || groups.is_empty() {
                return Err(shape_err(name, format!("row groups over {:?}", x.shape)));
            }
            let (rows, d) = (x.shape[0], x.shape[1]);
            let mut data = Vec::with_capacity(groups.len() * d);
            for &(start, len) in groups {
                if len == 0 || start + len > rows {
                    return Err(shape_err(name, format!("group ({start},{len}) over {rows} rows")));
                }
                let mut acc = vec![0f64; d];
                for r in start..start + len {
                    for (a, &v) in acc.iter_mut().zip(&x.data[r * d..(r + 1) * d]) {
                        *a += v as f64;
                    }
                }
                data.extend(acc.iter().map(|a| (a / len as f64) as f32));
            }
            Ok((vec![groups.len(), d], data))
        }
        Op::Mse => {
            let b = ins[1];
            if x.shape != b.shape {
                return Err(shape_err(name, format!("{:?} vs {:?}", x.shape, b.shape)));
            }
            Ok((vec![1], vec![kernels::mse(&x.data, &b.data)]))
        }
        Op::CosineSimilarity => {
            let b = ins[1];
            if x.data.len() != b.data.len() {
                return Err(shape_err(name, format!("{:?} vs {:?}", x.shape, b.shape)));
            }
            Ok((vec![1], vec![kernels::cosine(&x.data, &b.data)]))
        }
        Op::IndexRows(ids) => {
            if x.shape.len() != 2 || ids.is_empty() {
                return Err(shape_err(name, format!("gather {} rows of {:?}", ids.len(), x.shape)));
            }
            let (rows, d) = (x.shape[0], x.shape[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                if i >= rows {
                    return Err(shape_err(name, format!("row {i} of {:?}", x.shape)));
                }
                data.extend_from_slice(&x.data[i * d..(i + 1) * d]);
            }
            Ok((vec![ids.len(), d], data))
        }
        Op::SinusoidEmbed { dim } => {
            if *dim == 0 || dim % 2 != 0 {
                return Err(shape_err(name, format!("embedding width {dim} must be even")));
            }
            let mut data = vec![0f32; x.data.len() * dim];
            for (t, out) in x.data.iter().zip(data.chunks_exact_mut(*dim)) {
                kernels::sinusoid(*t, *dim, out);
            }
            Ok((vec![x.data.len(), *dim], data))
        }
    }
}

/// Gradients of one node's inputs given the upstream gradient `g`.
/// Entries are `None` for inputs that do not track gradients.
fn backward_op(op: &Op, ins: &[&Node], out: &Node, g: &[f32]) -> Vec<Option<Vec<f32>>> {
    let wants = |i: usize| ins[i].requires_grad;
    let x = ins[0];
    match op {
        Op::MatMul => {
            let (a, b) = (x, ins[1]);
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            vec![
                wants(0).then(|| kernels::matmul_a_bt(g, &b.data, m, k, n)),
                wants(1).then(|| kernels::matmul_at_b(&a.data, g, m, k, n)),
            ]
        }
        Op::Add => {
            let b = ins[1];
            let gb = wants(1).then(|| {
                if b.shape == x.shape {
                    g.to_vec()
                } else {
                    let n = b.data.len();
                    let mut acc = vec![0f64; n];
                    for row in g.chunks_exact(n) {
                        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
                    }
                    acc.into_iter().map(|a| a as f32).collect()
                }
            });
            vec![wants(0).then(|| g.to_vec()), gb]
        }
        Op::Mul => {
            let b = ins[1];
            vec![
                wants(0).then(|| g.iter().zip(&b.data).map(|(p, q)| p * q).collect()),
                wants(1).then(|| g.iter().zip(&x.data).map(|(p, q)| p * q).collect()),
            ]
        }
        Op::Concat { axis } => {
            let outer: usize = out.shape[..*axis].iter().product();
            let out_chunk = out.data.len() / outer;
            let mut offset = 0;
            ins.iter()
                .enumerate()
                .map(|(i, n)| {
                    let chunk = n.data.len() / outer;
                    let grad = wants(i).then(|| {
                        let mut gi = Vec::with_capacity(n.data.len());
                        for o in 0..outer {
                            let start = o * out_chunk + offset;
                            gi.extend_from_slice(&g[start..start + chunk]);
                        }
                        gi
                    });
                    offset += chunk;
                    grad
                })
                .collect()
        }
        Op::Silu => vec![Some(
            g.iter().zip(&x.data).map(|(gi, &v)| gi * kernels::silu_grad(v)).collect(),
        )],
        Op::Relu => vec![Some(
            g.iter()
                .zip(&x.data)
                .map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 })
                .collect(),
        )],
        Op::Abs => vec![Some(
            g.iter()
                .zip(&x.data)
                .map(|(gi, &v)| {
                    if v > 0.0 {
                        *gi
                    } else if v < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                })
                .collect(),
        )],
        Op::Scale(c) => vec![Some(g.iter().map(|gi| gi * c).collect())],
        Op::Sum => vec![Some(vec![g[0]; x.data.len()])],
        Op::Mean => {
            let v = (g[0] as f64 / x.data.len() as f64) as f32;
            vec![Some(vec![v; x.data.len()])]
        }
        Op::MeanGroups(groups) => {
            let d = x.shape[1];
            let mut gx = vec![0f32; x.data.len()];
            for (gi, &(start, len)) in groups.iter().enumerate() {
                let up = &g[gi * d..(gi + 1) * d];
                for r in start..start + len {
                    for (dst, &u) in gx[r * d..(r + 1) * d].iter_mut().zip(up) {
                        *dst += (u as f64 / len as f64) as f32;
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::Mse => {
            let b = ins[1];
            let scale = 2.0 * g[0] as f64 / x.data.len() as f64;
            let diff: Vec<f64> = x
                .data
                .iter()
                .zip(&b.data)
                .map(|(&p, &q)| scale * (p as f64 - q as f64))
                .collect();
            vec![
                wants(0).then(|| diff.iter().map(|&d| d as f32).collect()),
                wants(1).then(|| diff.iter().map(|&d| -d as f32).collect()),
            ]
        }
        Op::CosineSimilarity => {
            let b = ins[1];
            let dot = kernels::dot(&x.data, &b.data);
            let (na, nb) = (kernels::norm(&x.data), kernels::norm(&b.data));
            let (ea, eb) = (na + kernels::COSINE_EPS, nb + kernels::COSINE_EPS);
            let up = g[0] as f64;
            let grad_of = |u: &[f32], w: &[f32], nu: f64, eu: f64, ew: f64| -> Vec<f32> {
                u.iter()
                    .zip(w)
                    .map(|(&ui, &wi)| {
                        let radial = if nu > 0.0 {
                            dot * ui as f64 / (nu * eu * eu * ew)
                        } else {
                            0.0
                        };
                        (up * (wi as f64 / (eu * ew) - radial)) as f32
                    })
                    .collect()
            };
            vec![
                wants(0).then(|| grad_of(&x.data, &b.data, na, ea, eb)),
                wants(1).then(|| grad_of(&b.data, &x.data, nb, eb, ea)),
            ]
        }
        Op::IndexRows(ids) => {
            let d = x.shape[1];
            let mut gx = vec![0f32; x.data.len()];
            for (r, &i) in ids.iter().enumerate() {
                for (dst, &u) in gx[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                    *dst += u;
                }
            }
            vec![Some(gx)]
        }
        Op::SinusoidEmbed { .. } => vec![None],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(g: &mut Graph, data: &[f32], grad: bool) -> Var {
        let t = Tensor::new(vec![data.len()], data.to_vec())
            .unwrap()
            .with_requires_grad(grad);
        g.leaf(&t)
    }

    #[test]
    fn cosine_of_identical_and_orthogonal_vectors() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 0.0], false);
        let b = vec_leaf(&mut g, &[0.0, 1.0], false);
        let same = g.cosine_similarity(a, a).unwrap();
        let orth = g.cosine_similarity(a, b).unwrap();
        assert!((g.scalar(same) - 1.0).abs() < 1e-7);
        assert_eq!(g.scalar(orth), 0.0);
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[0.3, -2.0, 7.5], false);
        let l = g.mse(a, a).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_outputs_are_rejected() {
        let mut g = Graph::new();
        let a = g.constant(vec![1], vec![3.0e38]).unwrap();
        let err = g.scale(a, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale" }));
    }

    #[test]
    fn backward_requires_scalar_root_on_this_graph() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 2.0], true);
        assert!(matches!(g.backward(a), Err(Error::NonScalarRoot(_))));
        let mut other = Graph::new();
        let s = other.constant(vec![1], vec![1.0]).unwrap();
        assert!(matches!(g.backward(s), Err(Error::ForeignVar(_))));
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let p = Tensor::parameter(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let pv = g.leaf(&p);
        let x = vec_leaf(&mut g, &[1.0, 1.0], true);
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        let mut p = p;
        g.export_grad(pv, &mut p).unwrap();
        assert_eq!(p.grad().unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradients_accumulate_over_multiple_uses() {
        // l = sum(x * x) + sum(x)  =>  dl/dx = 2x + 1
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[0.5, -1.5], true);
        let sq = g.mul(x, x).unwrap();
        let a = g.sum(sq).unwrap();
        let b = g.sum(x).unwrap();
        let l = g.add(a, b).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -2.0]);
    }

    #[test]
    fn second_backward_doubles_gradients() {
        let mut g = Graph::new();
        let w = Tensor::parameter(vec![2, 2], vec![0.1, -0.7, 1.3, 0.4]).unwrap();
        let wv = g.leaf(&w);
        let x = g.constant(vec![1, 2], vec![0.9, -0.2]).unwrap();
        let y = g.matmul(x, wv).unwrap();
        let s = g.silu(y).unwrap();
        let l = g.mean(s).unwrap();
        g.backward(l).unwrap();
        let once = g.grad(wv).unwrap().to_vec();
        g.backward(l).unwrap();
        let twice = g.grad(wv).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn concat_and_broadcast_add_shapes() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = g.constant(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3]);
        assert_eq!(g.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let bias = g.constant(vec![3], vec![0.5, 0.0, -0.5]).unwrap();
        let d = g.add(c, bias).unwrap();
        assert_eq!(g.value(d), &[1.5, 3.0, 3.5, 2.5, 5.0, 5.5]);
    }

    #[test]
    fn sinusoid_embed_is_not_differentiable() {
        let mut g = Graph::new();
        let t = vec_leaf(&mut g, &[3.0], true);
        let e = g.sinusoid_embed(t, 8).unwrap();
        assert_eq!(g.shape(e), &[1, 8]);
        let l = g.sum(e).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(t).is_none());
    }
}
