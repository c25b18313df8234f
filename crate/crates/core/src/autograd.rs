//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] records every operation as a node holding its output value,
//! its parent indices, and enough operator metadata to replay the chain
//! rule. [`Graph::backward`] walks the tape once in reverse, accumulating
//! gradients in node order, so repeated runs produce bit-identical
//! gradients.

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec};
use crate::tensor::{Element, Tensor};

/// Handle to a node on the tape. Cheap to copy; only valid for the graph
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum OpKind<E: Element> {
    Leaf,
    Conv2d { spec: ConvSpec },
    Linear,
    MatMul,
    LayerNorm { eps: f64, axis: usize },
    Gelu,
    Softmax { axis: usize },
    Maxout,
    GlobalAvgPool,
    BroadcastSpatial,
    GroupDot { groups: usize },
    SpatialGroupNorm { eps: f64 },
    Modulate,
    Add,
    Mul,
    Scale { factor: E },
    Pad { top: usize, bottom: usize, left: usize, right: usize },
    SumAll,
    MeanAll,
    CrossEntropy { labels: Vec<usize> },
}

struct Node<E: Element> {
    value: Tensor<E>,
    parents: Vec<Var>,
    op: OpKind<E>,
}

/// Computation tape. Record operations through the builder methods, then
/// call [`Graph::backward`] on a scalar node.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, parents: Vec<Var>, op: OpKind<E>) -> Var {
        self.nodes.push(Node { value, parents, op });
        Var(self.nodes.len() - 1)
    }

    /// Inserts an input or parameter tensor as a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Vec::new(), OpKind::Leaf)
    }

    /// The forward value held at `v`.
    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let value = ops::conv2d(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push(value, parents, OpKind::Conv2d { spec: *spec }))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let value = ops::linear(self.value(x), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push(value, parents, OpKind::Linear))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, vec![a, b], OpKind::MatMul))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, axis: usize) -> Result<Var> {
        let value = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps, axis)?;
        Ok(self.push(value, vec![x, gamma, beta], OpKind::LayerNorm { eps, axis }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = ops::gelu(self.value(x));
        self.push(value, vec![x], OpKind::Gelu)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = ops::softmax(self.value(x), axis)?;
        Ok(self.push(value, vec![x], OpKind::Softmax { axis }))
    }

    pub fn maxout(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::maxout(self.value(a), self.value(b))?;
        Ok(self.push(value, vec![a, b], OpKind::Maxout))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(value, vec![x], OpKind::GlobalAvgPool))
    }

    pub fn broadcast_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let value = ops::broadcast_spatial(self.value(v), h, w)?;
        Ok(self.push(value, vec![v], OpKind::BroadcastSpatial))
    }

    pub fn group_dot(&mut self, x: Var, v: Var, groups: usize) -> Result<Var> {
        let value = ops::group_dot(self.value(x), self.value(v), groups)?;
        Ok(self.push(value, vec![x, v], OpKind::GroupDot { groups }))
    }

    pub fn spatial_group_norm(&mut self, s: Var, alpha: Var, beta: Var, eps: f64) -> Result<Var> {
        let value =
            ops::spatial_group_norm(self.value(s), self.value(alpha), self.value(beta), eps)?;
        Ok(self.push(value, vec![s, alpha, beta], OpKind::SpatialGroupNorm { eps }))
    }

    pub fn modulate(&mut self, gc: Var, sim: Var) -> Result<Var> {
        let value = ops::modulate(self.value(gc), self.value(sim))?;
        Ok(self.push(value, vec![gc, sim], OpKind::Modulate))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(value, vec![a, b], OpKind::Add))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(value, vec![a, b], OpKind::Mul))
    }

    pub fn scale(&mut self, x: Var, factor: E) -> Var {
        let value = ops::scale(self.value(x), factor);
        self.push(value, vec![x], OpKind::Scale { factor })
    }

    pub fn pad(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        let value = ops::pad_nchw(self.value(x), top, bottom, left, right)?;
        Ok(self.push(value, vec![x], OpKind::Pad { top, bottom, left, right }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = ops::sum_all(self.value(x));
        self.push(value, vec![x], OpKind::SumAll)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let value = ops::mean_all(self.value(x));
        self.push(value, vec![x], OpKind::MeanAll)
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let value = ops::cross_entropy_logits(self.value(logits), labels)?;
        Ok(self.push(value, vec![logits], OpKind::CrossEntropy { labels: labels.to_vec() }))
    }

    /// Runs the chain rule from `root` (which must hold a single element)
    /// back to every reachable node. Unreached nodes report no gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients<E>> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be a scalar, got shape {:?}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), E::ONE));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, OpKind::Leaf) {
                // leaf gradients stay stored for the caller; there is
                // nothing further to propagate
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let parent_values: Vec<&Tensor<E>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads: Vec<Tensor<E>> = match &node.op {
                OpKind::Leaf => Vec::new(),
                OpKind::Conv2d { spec } => {
                    let (gx, gw) = ops::conv2d_backward(parent_values[0], parent_values[1], spec, &g)?;
                    let mut out = vec![gx, gw];
                    if node.parents.len() == 3 {
                        out.push(ops::conv2d_backward_bias(&g)?);
                    }
                    out
                }
                OpKind::Linear => {
                    let (gx, gw, gb) =
                        ops::linear_backward(parent_values[0], parent_values[1], &g)?;
                    let mut out = vec![gx, gw];
                    if node.parents.len() == 3 {
                        out.push(gb);
                    }
                    out
                }
                OpKind::MatMul => {
                    let bt = ops::transpose2(parent_values[1])?;
                    let at = ops::transpose2(parent_values[0])?;
                    vec![ops::matmul(&g, &bt)?, ops::matmul(&at, &g)?]
                }
                OpKind::LayerNorm { eps, axis } => {
                    let (gx, ggamma, gbeta) =
                        ops::layer_norm_backward(parent_values[0], parent_values[1], *eps, *axis, &g)?;
                    vec![gx, ggamma, gbeta]
                }
                OpKind::Gelu => vec![ops::gelu_backward(parent_values[0], &g)?],
                OpKind::Softmax { axis } => {
                    vec![ops::softmax_backward(&node.value, *axis, &g)?]
                }
                OpKind::Maxout => {
                    let (ga, gb) = ops::maxout_backward(parent_values[0], parent_values[1], &g)?;
                    vec![ga, gb]
                }
                OpKind::GlobalAvgPool => {
                    vec![ops::global_avg_pool_backward(parent_values[0].shape(), &g)?]
                }
                OpKind::BroadcastSpatial => vec![ops::broadcast_spatial_backward(&g)?],
                OpKind::GroupDot { groups } => {
                    let (gx, gv) =
                        ops::group_dot_backward(parent_values[0], parent_values[1], *groups, &g)?;
                    vec![gx, gv]
                }
                OpKind::SpatialGroupNorm { eps } => {
                    let (gs, galpha, gbeta) =
                        ops::spatial_group_norm_backward(parent_values[0], parent_values[1], *eps, &g)?;
                    vec![gs, galpha, gbeta]
                }
                OpKind::Modulate => {
                    let (ggc, gsim) =
                        ops::modulate_backward(parent_values[0], parent_values[1], &g)?;
                    vec![ggc, gsim]
                }
                OpKind::Add => vec![g.clone(), g.clone()],
                OpKind::Mul => {
                    vec![ops::mul(&g, parent_values[1])?, ops::mul(&g, parent_values[0])?]
                }
                OpKind::Scale { factor } => vec![ops::scale(&g, *factor)],
                OpKind::Pad { top, bottom, left, right } => {
                    vec![ops::crop_nchw(&g, *top, *bottom, *left, *right)?]
                }
                OpKind::SumAll => {
                    vec![Tensor::full(parent_values[0].shape(), g.data()[0])]
                }
                OpKind::MeanAll => {
                    let factor = g.data()[0] / E::from_f64(parent_values[0].numel() as f64);
                    vec![Tensor::full(parent_values[0].shape(), factor)]
                }
                OpKind::CrossEntropy { labels } => {
                    vec![ops::cross_entropy_backward(parent_values[0], labels, g.data()[0])?]
                }
            };
            debug_assert_eq!(
                parent_grads.len(),
                node.parents.len(),
                "every parent needs exactly one gradient"
            );
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[parent.0] {
                    Some(existing) => *existing = ops::add(existing, &pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the root with respect to `v`. Only leaf gradients are
    /// retained; interior gradients are consumed while the tape unwinds,
    /// and leaves the root never reached report `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or a zero tensor of the given shape if the root did
    /// not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<E> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}
