//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and the ids of
//! its inputs. Because a node can only reference nodes recorded before it,
//! the recording order is a topological order and [`Graph::backward`] walks
//! it in reverse, visiting each node once and accumulating into its inputs.

use std::fmt;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Element, Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(i: usize) -> Var {
        Var(i)
    }
}

/// Operation kind of a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    DepthwiseConv2d,
    Relu,
    PixelShuffle,
    ConcatChannels,
    AddScaled,
    Mul,
    Sum,
    L1Loss,
    ChannelShift,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::DepthwiseConv2d => "depthwise_conv2d",
            OpKind::Relu => "relu",
            OpKind::PixelShuffle => "pixel_shuffle",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::AddScaled => "add_scaled",
            OpKind::Mul => "mul",
            OpKind::Sum => "sum",
            OpKind::L1Loss => "l1_loss",
            OpKind::ChannelShift => "channel_shift",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        use OpKind::*;
        [
            Leaf,
            Conv2d,
            DepthwiseConv2d,
            Relu,
            PixelShuffle,
            ConcatChannels,
            AddScaled,
            Mul,
            Sum,
            L1Loss,
            ChannelShift,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum Op<T: Element> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Depthwise { x: Var, w: Var, b: Var },
    Relu(Var),
    PixelShuffle(Var, usize),
    Concat(Vec<Var>),
    AddScaled(Var, Var, T),
    Mul(Var, Var),
    Sum(Var),
    L1(Var, Var),
    ChannelShift(Var),
}

impl<T: Element> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Depthwise { .. } => OpKind::DepthwiseConv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::PixelShuffle(..) => OpKind::PixelShuffle,
            Op::Concat(_) => OpKind::ConcatChannels,
            Op::AddScaled(..) => OpKind::AddScaled,
            Op::Mul(..) => OpKind::Mul,
            Op::Sum(_) => OpKind::Sum,
            Op::L1(..) => OpKind::L1Loss,
            Op::ChannelShift(_) => OpKind::ChannelShift,
        }
    }
}

struct Node<T: Element> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    tag: Option<usize>,
}

/// Recorded computation.
///
/// Leaves own their tensors, including gradient buffers. Gradients reach a
/// leaf only if it was created with `requires_grad`.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Self-test hook: negates the input gradients produced by every node
    /// of `kind` during backward.
    pub fn with_fault(mut self, kind: OpKind) -> Self {
        self.fault = Some(kind);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            tag: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Depthwise { x, w, b } => vec![*x, *w, *b],
            Op::Relu(x) | Op::PixelShuffle(x, _) | Op::Sum(x) | Op::ChannelShift(x) => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::AddScaled(a, b, _) | Op::Mul(a, b) | Op::L1(a, b) => vec![*a, *b],
        }
    }

    /// Records a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(Op::Leaf, tensor)
    }

    /// Leaf carrying an external identifier (e.g. a parameter slot).
    pub fn tagged_leaf(&mut self, tensor: Tensor<T>, tag: usize) -> Var {
        let v = self.leaf(tensor);
        self.nodes[v.0].tag = Some(tag);
        v
    }

    /// Records a constant input (never receives a gradient).
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Accumulated gradient of a leaf, if any has been propagated.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Tagged leaves with their gradient buffers.
    pub fn tagged_grads(&self) -> impl Iterator<Item = (usize, Option<&[T]>)> {
        self.nodes
            .iter()
            .filter_map(|n| n.tag.map(|t| (t, n.value.grad())))
    }

    /// Mutable access to a leaf, e.g. for finite-difference perturbation.
    /// Downstream values are not recomputed.
    pub fn leaf_mut(&mut self, v: Var) -> Result<&mut Tensor<T>> {
        match self.nodes[v.0].op {
            Op::Leaf => Ok(&mut self.nodes[v.0].value),
            _ => Err(Error::Usage(format!("node {} is not a leaf", v.0))),
        }
    }

    /// Smallest `|x|` over all relu inputs; used to keep finite-difference
    /// probes away from the kink.
    pub fn min_relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(&self.nodes[x.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|v| v.as_f64().abs()))
            .reduce(f64::min)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, out))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::depthwise_conv2d(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Depthwise { x, w, b }, out))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(Op::Relu(x), out)
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = ops::pixel_shuffle(self.value(x), r)?;
        Ok(self.push(Op::PixelShuffle(x, r), out))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&refs)?;
        Ok(self.push(Op::Concat(xs.to_vec()), out))
    }

    pub fn add_scaled(&mut self, a: Var, b: Var, alpha: T) -> Result<Var> {
        let out = ops::add_scaled(self.value(a), self.value(b), alpha)?;
        Ok(self.push(Op::AddScaled(a, b, alpha), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = ops::sum(self.value(x));
        self.push(Op::Sum(x), out)
    }

    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let out = ops::l1_loss(self.value(pred), self.value(target))?;
        Ok(self.push(Op::L1(pred, target), out))
    }

    pub fn channel_shift(&mut self, x: Var, shift: &[T]) -> Result<Var> {
        let out = ops::channel_shift(self.value(x), shift)?;
        Ok(self.push(Op::ChannelShift(x), out))
    }

    /// Propagates `d loss / d node` to every leaf that requires a gradient.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// recomputed from scratch each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != Shape::scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                self.nodes[idx].value.accumulate_grad(g.data());
                continue;
            }
            let negate = self.fault == Some(self.nodes[idx].op.kind());
            for (input, mut contrib) in self.input_grads(idx, &g)? {
                if negate {
                    contrib = contrib.map(|v| -v);
                }
                match grads[input.0].as_mut() {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + *c;
                        }
                    }
                    None => grads[input.0] = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let need = [self.wants(x), self.wants(w), self.wants(b)];
                let gr = ops::conv2d_backward(self.value(x), self.value(w), stride, pad, g, need)?;
                push_some(&mut out, x, gr.input);
                push_some(&mut out, w, gr.weight);
                push_some(&mut out, b, gr.bias);
            }
            &Op::Depthwise { x, w, b } => {
                let need = [self.wants(x), self.wants(w), self.wants(b)];
                let gr = ops::depthwise_conv2d_backward(self.value(x), self.value(w), g, need)?;
                push_some(&mut out, x, gr.input);
                push_some(&mut out, w, gr.weight);
                push_some(&mut out, b, gr.bias);
            }
            &Op::Relu(x) => out.push((x, ops::relu_backward(self.value(x), g))),
            &Op::PixelShuffle(x, r) => out.push((x, ops::pixel_unshuffle(g, r)?)),
            Op::Concat(xs) => {
                let mut start = 0;
                for &x in xs {
                    let c = self.value(x).shape().c;
                    if self.wants(x) {
                        out.push((x, ops::slice_channels(g, start, c)?));
                    }
                    start += c;
                }
            }
            &Op::AddScaled(a, b, alpha) => {
                if self.wants(a) {
                    out.push((a, g.clone()));
                }
                if self.wants(b) {
                    out.push((b, g.map(|v| v * alpha)));
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    out.push((a, ops::mul(g, self.value(b))?));
                }
                if self.wants(b) {
                    out.push((b, ops::mul(g, self.value(a))?));
                }
            }
            &Op::Sum(x) => {
                let s = g.item()?;
                out.push((x, Tensor::full(self.value(x).shape(), s)));
            }
            &Op::L1(p, t) => {
                let up = g.item()?;
                if self.wants(p) {
                    out.push((p, ops::l1_loss_backward(self.value(p), self.value(t), up)));
                }
                if self.wants(t) {
                    let gp = ops::l1_loss_backward(self.value(p), self.value(t), up);
                    out.push((t, gp.map(|v| -v)));
                }
            }
            &Op::ChannelShift(x) => out.push((x, g.clone())),
        }
        out.retain(|(v, _)| self.wants(*v));
        Ok(out)
    }
}

fn push_some<T: Element>(out: &mut Vec<(Var, Tensor<T>)>, v: Var, g: Option<Tensor<T>>) {
    if let Some(g) = g {
        out.push((v, g));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_gradient_is_input() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::from_fn(Shape::new(1, 2, 2, 2), |_, c, h, w| (c * 4 + h * 2 + w) as f64);
        let w = g.leaf(Tensor::full(x.shape(), 0.5).with_requires_grad());
        let xv = g.constant(x.clone());
        let prod = g.mul(w, xv).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), x.data());
        assert!(g.grad(xv).is_none());
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 2.0).with_requires_grad());
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        let first = g.grad(w).unwrap().to_vec();
        g.backward(loss).unwrap();
        let second = g.grad(w).unwrap();
        for (a, b) in first.iter().zip(second) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn fan_out_sums_branch_gradients() {
        // y = sum(relu(x) + 3 * x): both branches must reach x
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(Shape::new(1, 1, 1, 2), vec![1.5, -2.0]).unwrap().with_requires_grad());
        let r = g.relu(x);
        let y = g.add_scaled(r, x, 3.0).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 3.0]);
    }

    #[test]
    fn non_scalar_backward_is_usage_error() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)).with_requires_grad());
        let r = g.relu(x);
        assert!(matches!(g.backward(r), Err(Error::Usage(_))));
    }

    #[test]
    fn fault_injection_negates_gradient() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0);
        let grad_of = |fault: Option<OpKind>| {
            let mut g = Graph::new();
            if let Some(k) = fault {
                g = g.with_fault(k);
            }
            let xv = g.constant(x.clone());
            let w = g.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 0.1).with_requires_grad());
            let b = g.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1)));
            let y = g.conv2d(xv, w, b, 1, 1).unwrap();
            let loss = g.sum(y);
            g.backward(loss).unwrap();
            g.grad(w).unwrap().to_vec()
        };
        let clean = grad_of(None);
        let flipped = grad_of(Some(OpKind::Conv2d));
        for (a, b) in clean.iter().zip(&flipped) {
            assert_eq!(*a, -*b);
        }
    }
}
