//! Eager tape: every op executes immediately and records what its backward
//! needs. Node ids are topological by construction, so the backward sweep
//! is a single reverse pass that visits each node exactly once.

use super::ops;
use super::Tensor;
use crate::attention::{
    block_bwd, block_fwd, dense_bwd, dense_fwd, AttnMask, BlockAux, DenseAux, DenseMask,
};
use crate::error::{Error, Result};
use crate::rope::{rope_rotate, rope_rotate_backward, RoleCoord, RopeConfig};
use std::collections::BTreeMap;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f32),
    Matmul(NodeId, NodeId),
    Silu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    BroadcastRows(NodeId),
    Rope {
        x: NodeId,
        coords: Arc<Vec<RoleCoord>>,
        cfg: RopeConfig,
    },
    AttnDense {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: Arc<DenseMask>,
    },
    AttnBlock {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: Arc<AttnMask>,
    },
}

enum Aux {
    None,
    LayerNorm(ops::LayerNormAux),
    Dense(DenseAux),
    Block(BlockAux),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    aux: Aux,
    name: Option<String>,
}

/// Gradients keyed by parameter name, as produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

/// Topologically ordered record of operations with saved activations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, aux: Aux) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            aux,
            name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a constant input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let needs = value.requires_grad_flag();
        self.push(Op::Leaf, value, needs, Aux::None)
    }

    /// Insert a named trainable parameter.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        let id = self.push(
            Op::Leaf,
            value.clone().requires_grad(true),
            true,
            Aux::None,
        );
        self.nodes[id.0].name = Some(name.to_string());
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::binary_broadcast(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value, self.needs(a) || self.needs(b), Aux::None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::binary_broadcast(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value, self.needs(a) || self.needs(b), Aux::None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::binary_broadcast(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value, self.needs(a) || self.needs(b), Aux::None))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f32) -> NodeId {
        let value = self.value(a).map(|v| v + c);
        self.push(Op::AddScalar(a), value, self.needs(a), Aux::None)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f32) -> NodeId {
        let value = self.value(a).map(|v| v * c);
        self.push(Op::MulScalar(a, c), value, self.needs(a), Aux::None)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(
            Op::Matmul(a, b),
            value,
            self.needs(a) || self.needs(b),
            Aux::None,
        ))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = ops::silu(self.value(a));
        self.push(Op::Silu(a), value, self.needs(a), Aux::None)
    }

    pub fn softmax_lastdim(&mut self, a: NodeId) -> Result<NodeId> {
        let value = ops::softmax_lastdim(self.value(a))?;
        Ok(self.push(Op::Softmax(a), value, self.needs(a), Aux::None))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f32,
    ) -> Result<NodeId> {
        let (value, aux) = ops::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Op::LayerNorm { x, gain, bias },
            value,
            needs,
            Aux::LayerNorm(aux),
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = ops::sum_all(self.value(a));
        self.push(Op::Sum(a), value, self.needs(a), Aux::None)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let value = ops::mean_all(self.value(a));
        self.push(Op::Mean(a), value, self.needs(a), Aux::None)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), value, self.needs(a), Aux::None))
    }

    /// Rows `[start, start + len)` along the first dimension.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = self.value(a);
        let rows = src.shape()[0];
        if start + len > rows || len == 0 {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) of {rows} rows",
                start + len
            )));
        }
        let row_size = src.numel() / rows;
        let mut shape = src.shape().to_vec();
        shape[0] = len;
        let data = src.data()[start * row_size..(start + len) * row_size].to_vec();
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(Op::SliceRows { x: a, start }, value, self.needs(a), Aux::None))
    }

    /// Concatenate along the first dimension.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let trailing = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0usize;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != trailing[..] {
                return Err(Error::Shape(format!(
                    "concat trailing dims differ: {:?} vs {:?}",
                    &t.shape()[1..],
                    trailing
                )));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&trailing);
        let value = Tensor::new(&shape, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, needs, Aux::None))
    }

    /// Tile a `[1, d]` (or `[d]`) tensor into `rows` identical rows.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let src = self.value(a);
        let d = src.numel();
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend_from_slice(src.data());
        }
        let value = Tensor::new(&[rows, d], data)?;
        Ok(self.push(Op::BroadcastRows(a), value, self.needs(a), Aux::None))
    }

    pub fn rope(
        &mut self,
        x: NodeId,
        coords: Arc<Vec<RoleCoord>>,
        cfg: &RopeConfig,
    ) -> Result<NodeId> {
        let value = rope_rotate(self.value(x), &coords, cfg)?;
        Ok(self.push(
            Op::Rope {
                x,
                coords,
                cfg: cfg.clone(),
            },
            value,
            self.needs(x),
            Aux::None,
        ))
    }

    pub fn attn_dense(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: Arc<DenseMask>,
    ) -> Result<NodeId> {
        let (value, aux) = dense_fwd(self.value(q), self.value(k), self.value(v), &mask)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(Op::AttnDense { q, k, v, mask }, value, needs, Aux::Dense(aux)))
    }

    pub fn attn_block(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: Arc<AttnMask>,
    ) -> Result<NodeId> {
        let (value, aux) = block_fwd(self.value(q), self.value(k), self.value(v), &mask)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(Op::AttnBlock { q, k, v, mask }, value, needs, Aux::Block(aux)))
    }

    /// Reverse sweep from a scalar loss. Every named parameter receives a
    /// gradient of its own shape; parameters the loss does not depend on
    /// receive zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &grad, &mut grads)?;
            if self.nodes[idx].name.is_some() {
                grads[idx] = Some(grad);
            }
        }

        let mut by_name = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.name {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                by_name.insert(name.clone(), g);
            }
        }
        Ok(Gradients { by_name })
    }

    fn backprop_node(
        &self,
        idx: usize,
        grad: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let send = |id: NodeId, g: Tensor, grads: &mut [Option<Tensor>]| -> Result<()> {
            if !self.needs(id) {
                return Ok(());
            }
            match &mut grads[id.0] {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::Shape(format!(
                            "gradient accumulation shape mismatch {:?} vs {:?}",
                            acc.shape(),
                            g.shape()
                        )));
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
            Ok(())
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, ops::reduce_to_shape(grad, self.value(*a).shape())?, grads)?;
                send(*b, ops::reduce_to_shape(grad, self.value(*b).shape())?, grads)?;
            }
            Op::Sub(a, b) => {
                send(*a, ops::reduce_to_shape(grad, self.value(*a).shape())?, grads)?;
                let neg = grad.map(|v| -v);
                send(*b, ops::reduce_to_shape(&neg, self.value(*b).shape())?, grads)?;
            }
            Op::Mul(a, b) => {
                let ga = ops::binary_broadcast(grad, self.value(*b), |g, y| g * y)?;
                let gb = ops::binary_broadcast(grad, self.value(*a), |g, x| g * x)?;
                send(*a, ops::reduce_to_shape(&ga, self.value(*a).shape())?, grads)?;
                send(*b, ops::reduce_to_shape(&gb, self.value(*b).shape())?, grads)?;
            }
            Op::AddScalar(a) => send(*a, grad.clone(), grads)?,
            Op::MulScalar(a, c) => {
                let c = *c;
                send(*a, grad.map(|v| v * c), grads)?;
            }
            Op::Matmul(a, b) => {
                let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), grad)?;
                send(*a, da, grads)?;
                send(*b, db, grads)?;
            }
            Op::Silu(a) => send(*a, ops::silu_backward(self.value(*a), grad), grads)?,
            Op::Softmax(a) => send(*a, ops::softmax_backward(&node.value, grad)?, grads)?,
            Op::LayerNorm { x, gain, bias } => {
                let Aux::LayerNorm(aux) = &node.aux else {
                    unreachable!("layer_norm nodes carry LayerNorm aux");
                };
                let (dx, dgain, dbias) =
                    ops::layer_norm_backward(self.value(*x), self.value(*gain), aux, grad)?;
                send(*x, dx, grads)?;
                send(*gain, dgain, grads)?;
                send(*bias, dbias, grads)?;
            }
            Op::Sum(a) => {
                let g = grad.item()?;
                send(*a, Tensor::full(self.value(*a).shape(), g), grads)?;
            }
            Op::Mean(a) => {
                let g = grad.item()? / self.value(*a).numel() as f32;
                send(*a, Tensor::full(self.value(*a).shape(), g), grads)?;
            }
            Op::Reshape(a) => {
                send(*a, grad.reshape(self.value(*a).shape())?, grads)?;
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let rows = src.shape()[0];
                let row_size = src.numel() / rows;
                let mut full = Tensor::zeros(src.shape());
                full.data_mut()[start * row_size..start * row_size + grad.numel()]
                    .copy_from_slice(grad.data());
                send(*x, full, grads)?;
            }
            Op::ConcatRows(parts) => {
                let row_size = grad.numel() / grad.shape()[0];
                let mut offset = 0usize;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let rows = shape[0];
                    let slice =
                        grad.data()[offset * row_size..(offset + rows) * row_size].to_vec();
                    send(p, Tensor::new(&shape, slice)?, grads)?;
                    offset += rows;
                }
            }
            Op::BroadcastRows(a) => {
                let src_shape = self.value(*a).shape().to_vec();
                let d = self.value(*a).numel();
                let mut acc = vec![0.0f64; d];
                for row in grad.data().chunks(d) {
                    for (s, &g) in acc.iter_mut().zip(row) {
                        *s += g as f64;
                    }
                }
                send(
                    *a,
                    Tensor::new(&src_shape, acc.into_iter().map(|v| v as f32).collect())?,
                    grads,
                )?;
            }
            Op::Rope { x, coords, cfg } => {
                send(*x, rope_rotate_backward(grad, coords, cfg)?, grads)?;
            }
            Op::AttnDense { q, k, v, mask } => {
                let Aux::Dense(aux) = &node.aux else {
                    unreachable!("dense attention nodes carry Dense aux");
                };
                let (dq, dk, dv) = dense_bwd(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    mask,
                    aux,
                    grad,
                )?;
                send(*q, dq, grads)?;
                send(*k, dk, grads)?;
                send(*v, dv, grads)?;
            }
            Op::AttnBlock { q, k, v, mask } => {
                let Aux::Block(aux) = &node.aux else {
                    unreachable!("blockwise attention nodes carry Block aux");
                };
                let (dq, dk, dv) = block_bwd(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    mask,
                    aux,
                    grad,
                )?;
                send(*q, dq, grads)?;
                send(*k, dk, grads)?;
                send(*v, dv, grads)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn disconnected_parameter_gets_zeros() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let _unused = g.param("p", &Tensor::new(&[3], vec![1.0, 1.0, 1.0]).unwrap());
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.get("x").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_add_reduces_bias_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[3, 2], vec![1.0; 6]).unwrap());
        let b = g.param("b", &Tensor::new(&[2], vec![0.5, -0.5]).unwrap());
        let y = g.add(x, b).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("b").unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn slice_and_concat_roundtrip_grads() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::new(&[4, 2], (0..8).map(|v| v as f32).collect()).unwrap());
        let top = g.slice_rows(x, 0, 2).unwrap();
        let bottom = g.slice_rows(x, 2, 2).unwrap();
        let back = g.concat_rows(&[top, bottom]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
        let loss = g.sum(back);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[1.0; 8]);
    }
}
