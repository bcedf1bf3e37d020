//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive eagerly together with its output value.
//! Nodes are appended in evaluation order, so node indices are a topological
//! order of the graph. Tags name nodes whose gradients the caller wants to
//! inspect after [`Tape::backward`].

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op<T: Scalar> {
    Leaf,
    Conv2d(ConvGeometry),
    Relu,
    Elu,
    Sigmoid,
    Square,
    Exp,
    Clamp { lo: T, hi: T },
    Add,
    Sub,
    Mul,
    MulScalar(T),
    AddScalar(T),
    Concat,
    Upsample2x,
    AvgPool2,
    Sum,
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<usize>,
    value: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    tags: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn elu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v.exp_m1()
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn eval<T: Scalar>(op: &Op<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let unary = || inputs[0];
    Ok(match op {
        Op::Leaf => unreachable!("leaves are never evaluated"),
        Op::Conv2d(g) => kernels::conv2d(inputs[0], inputs[1], inputs[2], *g)?,
        Op::Relu => unary().map(|v| if v > T::zero() { v } else { T::zero() }),
        Op::Elu => unary().map(elu),
        Op::Sigmoid => unary().map(sigmoid),
        Op::Square => unary().map(|v| v * v),
        Op::Exp => unary().map(|v| v.exp()),
        Op::Clamp { lo, hi } => unary().map(|v| v.max(*lo).min(*hi)),
        Op::Add => inputs[0].add(inputs[1])?,
        Op::Sub => inputs[0].sub(inputs[1])?,
        Op::Mul => inputs[0].mul(inputs[1])?,
        Op::MulScalar(k) => unary().scale(*k),
        Op::AddScalar(k) => unary().map(|v| v + *k),
        Op::Concat => Tensor::concat_channels(inputs)?,
        Op::Upsample2x => kernels::upsample2x(unary()),
        Op::AvgPool2 => kernels::avgpool2(unary())?,
        Op::Sum => Tensor::scalar(T::narrow(unary().sum_f64())),
    })
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            tags: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn resolve(&self, id: NodeId) -> Result<usize> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(Error::ForeignNode(id.index));
        }
        Ok(id.index)
    }

    fn handle(&self, index: usize) -> NodeId {
        NodeId {
            tape: self.id,
            index,
        }
    }

    fn push(&mut self, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        let idx = inputs
            .iter()
            .map(|&i| self.resolve(i))
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let value = eval(&op, &values)?;
        self.nodes.push(Node {
            op,
            inputs: idx,
            value,
        });
        Ok(self.handle(self.nodes.len() - 1))
    }

    /// Records a constant or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
        });
        self.handle(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        self.push(Op::Conv2d(ConvGeometry { stride, pad }), &[x, weight, bias])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, &[x])
    }

    pub fn elu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Elu, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid, &[x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Square, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Exp, &[x])
    }

    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> Result<NodeId> {
        self.push(Op::Clamp { lo, hi }, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, &[a, b])
    }

    pub fn mul_scalar(&mut self, x: NodeId, k: T) -> Result<NodeId> {
        self.push(Op::MulScalar(k), &[x])
    }

    pub fn add_scalar(&mut self, x: NodeId, k: T) -> Result<NodeId> {
        self.push(Op::AddScalar(k), &[x])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat, parts)
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Upsample2x, &[x])
    }

    pub fn avgpool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::AvgPool2, &[x])
    }

    /// Sum of all elements as a `1×1×1×1` node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, &[x])
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.resolve(id)?].value)
    }

    pub fn op(&self, id: NodeId) -> Result<&Op<T>> {
        Ok(&self.nodes[self.resolve(id)?].op)
    }

    /// Binds `name` to `id`. Each name may be bound once.
    pub fn tag(&mut self, id: NodeId, name: &str) -> Result<()> {
        let idx = self.resolve(id)?;
        if self.tags.contains_key(name) {
            return Err(Error::DuplicateTag(name.to_string()));
        }
        self.tags.insert(name.to_string(), idx);
        Ok(())
    }

    pub fn tagged(&self, name: &str) -> Result<NodeId> {
        self.tags
            .get(name)
            .map(|&i| self.handle(i))
            .ok_or_else(|| Error::UnknownTag(name.to_string()))
    }

    pub fn tags(&self) -> impl Iterator<Item = (&str, NodeId)> + '_ {
        self.tags.iter().map(|(k, &v)| (k.as_str(), self.handle(v)))
    }

    /// Re-evaluates every non-leaf node in order. Nodes listed in `overrides`
    /// take the supplied value instead of being recomputed; leaves keep their
    /// recorded value unless overridden.
    pub fn replay(&mut self, overrides: &[(NodeId, Tensor<T>)]) -> Result<()> {
        let mut forced: BTreeMap<usize, &Tensor<T>> = BTreeMap::new();
        for (id, value) in overrides {
            let idx = self.resolve(*id)?;
            self.nodes[idx].value.expect_shape(value.shape(), "replay override")?;
            forced.insert(idx, value);
        }
        for i in 0..self.nodes.len() {
            if let Some(v) = forced.get(&i) {
                self.nodes[i].value = (*v).clone();
                continue;
            }
            if self.nodes[i].op == Op::Leaf {
                continue;
            }
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let values: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &done[j].value).collect();
            node.value = eval(&node.op, &values)?;
        }
        Ok(())
    }

    /// Back-propagates from a single-element node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let root = self.resolve(loss)?;
        let lshape = self.nodes[root].value.shape();
        if lshape.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a single-element loss node, got shape {lshape}"
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::ones(lshape));

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contributions = self.local_grads(node, &g)?;
            for (&input, contrib) in node.inputs.iter().zip(contributions) {
                let slot = &mut grads[input];
                *slot = Some(match slot.take() {
                    Some(acc) => acc.add(&contrib)?,
                    None => contrib,
                });
            }
            grads[i] = Some(g);
        }

        for &idx in self.tags.values() {
            if grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(self.nodes[idx].value.shape()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            tags: self.tags.clone(),
        })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let input = |k: usize| &self.nodes[node.inputs[k]].value;
        let y = &node.value;
        let zero = T::zero();
        let one = T::one();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d(geom) => {
                let (gx, gw, gb) = kernels::conv2d_backward(input(0), input(1), g, *geom);
                let gb = gb.reshape(input(2).shape())?;
                vec![gx, gw, gb]
            }
            Op::Relu => vec![g.zip_map(input(0), "relu'", |gv, x| if x > zero { gv } else { zero })?],
            Op::Elu => {
                let x = input(0);
                let d = x.zip_map(y, "elu'", |xv, yv| if xv > zero { one } else { yv + one })?;
                vec![g.mul(&d)?]
            }
            Op::Sigmoid => vec![g.zip_map(y, "sigmoid'", |gv, yv| gv * yv * (one - yv))?],
            Op::Square => {
                let two = one + one;
                vec![g.zip_map(input(0), "square'", |gv, x| gv * two * x)?]
            }
            Op::Exp => vec![g.mul(y)?],
            Op::Clamp { lo, hi } => vec![g.zip_map(input(0), "clamp'", |gv, x| {
                if x >= *lo && x <= *hi {
                    gv
                } else {
                    zero
                }
            })?],
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => vec![g.clone(), g.map(|v| -v)],
            Op::Mul => vec![g.mul(input(1))?, g.mul(input(0))?],
            Op::MulScalar(k) => vec![g.scale(*k)],
            Op::AddScalar(_) => vec![g.clone()],
            Op::Concat => {
                let counts: Vec<usize> = node
                    .inputs
                    .iter()
                    .map(|&j| self.nodes[j].value.shape().c)
                    .collect();
                g.split_channels(&counts)?
            }
            Op::Upsample2x => vec![kernels::upsample2x_backward(g)],
            Op::AvgPool2 => vec![kernels::avgpool2_backward(g, input(0).shape())],
            Op::Sum => vec![Tensor::full(input(0).shape(), g.data()[0])],
        })
    }
}

/// Result of [`Tape::backward`]: one gradient per node reached from the loss,
/// plus zero gradients for tagged nodes the loss does not depend on.
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar = f32> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    tags: BTreeMap<String, usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Result<Option<&Tensor<T>>> {
        if id.tape != self.tape || id.index >= self.grads.len() {
            return Err(Error::ForeignNode(id.index));
        }
        Ok(self.grads[id.index].as_ref())
    }

    pub fn tagged(&self, name: &str) -> Result<&Tensor<T>> {
        let idx = *self
            .tags
            .get(name)
            .ok_or_else(|| Error::UnknownTag(name.to_string()))?;
        Ok(self.grads[idx].as_ref().expect("tagged gradients are always populated"))
    }

    /// Gradient for `id`, or zeros of `shape` when the loss does not reach it.
    pub fn or_zeros(&self, id: NodeId, shape: Shape) -> Result<Tensor<T>> {
        Ok(self.get(id)?.cloned().unwrap_or_else(|| Tensor::zeros(shape)))
    }
}
