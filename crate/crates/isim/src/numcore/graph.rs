//! Static computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the insertion order is a
//! topological order and backward is a single reverse sweep. Gradient
//! accumulation is additive across fan-out and runs in a fixed order.

use crate::error::{IsimError, Result};
use crate::numcore::kernels as k;
use crate::numcore::kernels::PixelCeSpec;
use crate::numcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    LogSoftmaxChannelwise,
}

enum Op {
    Leaf,
    Conv2d { stride: usize, pad: usize, dil: usize },
    ConvTranspose2d { stride: usize },
    UpsampleBilinear { oh: usize, ow: usize },
    GlobalAvgPool,
    Elementwise(Activation),
    ConcatChannels,
    Sum,
    Reshape,
    MultiLabelSoftMargin { targets: Vec<f64> },
    PixelCrossEntropy(PixelCeSpec),
    WeightedSum { weights: Vec<f64> },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` call with respect to this node,
    /// if the node participated.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let rg = t.requires_grad;
        self.push(Op::Leaf, vec![], t, rg)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Result<NodeId> {
        let out = k::conv2d_fwd(self.value(x), self.value(w), self.value(b), stride, pad, dil)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(Op::Conv2d { stride, pad, dil }, vec![x, w, b], out, rg))
    }

    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        let out = k::conv_transpose2d_fwd(self.value(x), self.value(w), stride)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(Op::ConvTranspose2d { stride }, vec![x, w], out, rg))
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let out = k::upsample_bilinear_fwd(self.value(x), oh, ow)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::UpsampleBilinear { oh, ow }, vec![x], out, rg))
    }

    pub fn global_average_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let out = k::global_average_pool_fwd(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::GlobalAvgPool, vec![x], out, rg))
    }

    pub fn elementwise(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        let out = match kind {
            Activation::Relu => k::relu_fwd(self.value(x)),
            Activation::Sigmoid => k::sigmoid_fwd(self.value(x)),
            Activation::LogSoftmaxChannelwise => k::log_softmax_fwd(self.value(x))?,
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Elementwise(kind), vec![x], out, rg))
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(IsimError::Config("concat of zero tensors".into()));
        }
        let vals: Vec<&Tensor> = xs.iter().map(|&i| self.value(i)).collect();
        let out = k::concat_channels_fwd(&vals)?;
        let rg = self.any_grad(xs);
        Ok(self.push(Op::ConcatChannels, xs.to_vec(), out, rg))
    }

    /// Reduce to the scalar sum of all entries.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Op::Sum, vec![x], Tensor::scalar(s), rg)
    }

    /// View the same data under a new shape of equal element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(IsimError::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", v.shape(), shape),
            ));
        }
        let out = Tensor::new(shape, v.data().to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Reshape, vec![x], out, rg))
    }

    pub fn multilabel_soft_margin(&mut self, logits: NodeId, targets: Vec<f64>) -> Result<NodeId> {
        let loss = k::multilabel_soft_margin_fwd(self.value(logits), &targets)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Op::MultiLabelSoftMargin { targets },
            vec![logits],
            Tensor::scalar(loss),
            rg,
        ))
    }

    pub fn pixel_cross_entropy(&mut self, logits: NodeId, spec: PixelCeSpec) -> Result<NodeId> {
        let loss = k::pixel_ce_fwd(self.value(logits), &spec)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Op::PixelCrossEntropy(spec),
            vec![logits],
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Scalar combination sum_i weights[i] * xs[i].
    pub fn weighted_sum(&mut self, xs: &[NodeId], weights: Vec<f64>) -> Result<NodeId> {
        if xs.len() != weights.len() {
            return Err(IsimError::Config("weighted_sum arity mismatch".into()));
        }
        let mut acc = 0.0;
        for (&i, &wt) in xs.iter().zip(&weights) {
            let v = self.value(i);
            if !v.is_scalar() {
                return Err(IsimError::shape(
                    "weighted_sum",
                    format!("non-scalar input of shape {:?}", v.shape()),
                ));
            }
            acc += wt * v.item();
        }
        let rg = self.any_grad(xs);
        Ok(self.push(
            Op::WeightedSum { weights },
            xs.to_vec(),
            Tensor::scalar(acc),
            rg,
        ))
    }

    /// Reverse sweep from `loss`, writing gradients into every node that
    /// requires them. The loss node must be scalar.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(IsimError::shape(
                "backward",
                format!("loss node has shape {:?}, expected scalar", self.value(loss).shape()),
            ));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let gy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let inputs = self.nodes[idx].inputs.clone();
            let input_grads: Vec<(NodeId, Vec<f64>)> = match &self.nodes[idx].op {
                Op::Leaf => vec![],
                Op::Conv2d { stride, pad, dil } => {
                    let x = self.value(inputs[0]);
                    let w = self.value(inputs[1]);
                    let (gx, gw, gb) = k::conv2d_bwd(x, w, &gy, *stride, *pad, *dil)?;
                    vec![(inputs[0], gx), (inputs[1], gw), (inputs[2], gb)]
                }
                Op::ConvTranspose2d { stride } => {
                    let x = self.value(inputs[0]);
                    let w = self.value(inputs[1]);
                    let (gx, gw) = k::conv_transpose2d_bwd(x, w, &gy, *stride)?;
                    vec![(inputs[0], gx), (inputs[1], gw)]
                }
                Op::UpsampleBilinear { oh, ow } => {
                    let gx = k::upsample_bilinear_bwd(self.value(inputs[0]), &gy, *oh, *ow)?;
                    vec![(inputs[0], gx)]
                }
                Op::GlobalAvgPool => {
                    let gx = k::global_average_pool_bwd(self.value(inputs[0]), &gy)?;
                    vec![(inputs[0], gx)]
                }
                Op::Elementwise(kind) => {
                    let gx = match kind {
                        Activation::Relu => k::relu_bwd(self.value(inputs[0]), &gy),
                        Activation::Sigmoid => k::sigmoid_bwd(&self.nodes[idx].value, &gy),
                        Activation::LogSoftmaxChannelwise => {
                            k::log_softmax_bwd(&self.nodes[idx].value, &gy)?
                        }
                    };
                    vec![(inputs[0], gx)]
                }
                Op::ConcatChannels => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                    let gs = k::concat_channels_bwd(&vals, &gy);
                    inputs.iter().copied().zip(gs).collect()
                }
                Op::Sum => {
                    let gx = vec![gy[0]; self.value(inputs[0]).numel()];
                    vec![(inputs[0], gx)]
                }
                Op::Reshape => vec![(inputs[0], gy.clone())],
                Op::MultiLabelSoftMargin { targets } => {
                    let gx = k::multilabel_soft_margin_bwd(self.value(inputs[0]), targets, gy[0]);
                    vec![(inputs[0], gx)]
                }
                Op::PixelCrossEntropy(spec) => {
                    let gx = k::pixel_ce_bwd(self.value(inputs[0]), spec, gy[0])?;
                    vec![(inputs[0], gx)]
                }
                Op::WeightedSum { weights } => inputs
                    .iter()
                    .zip(weights)
                    .map(|(&i, &wt)| (i, vec![gy[0] * wt]))
                    .collect(),
            };
            for (iid, g) in input_grads {
                if !self.nodes[iid.0].requires_grad {
                    continue;
                }
                match &mut grads[iid.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
            self.nodes[idx].value.grad = Some(gy);
        }
        // leaves still holding unpropagated buffers (no consumers below loss)
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.nodes[idx].value.grad = Some(g);
            }
        }
        Ok(())
    }
}
