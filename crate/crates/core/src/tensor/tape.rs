use crate::error::{Error, Result};
use crate::wavelet;

use super::ops::{self, Unary};
use super::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var },
    Concat(Vec<Var>),
    Unary { input: Var, op: Unary },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Mean(Var),
    MeanPerSample(Var),
    AvgPool2(Var),
    Sobel(Var),
    Dwt(Var),
    Iwt(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d { input, weight, bias } => vec![*input, *weight, *bias],
            Op::Concat(parts) => parts.clone(),
            Op::Unary { input, .. } => vec![*input],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Mean(a)
            | Op::MeanPerSample(a)
            | Op::AvgPool2(a)
            | Op::Sobel(a)
            | Op::Dwt(a)
            | Op::Iwt(a) => vec![*a],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of tensor operations. Nodes are stored in creation
/// order, which is a topological order of the computation graph.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to the nodes that required them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.record(out, Op::Conv2d { input, weight, bias }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&values)?;
        Ok(self.record(out, Op::Concat(parts.to_vec())))
    }

    pub fn unary(&mut self, input: Var, op: Unary) -> Var {
        let out = self.value(input).map(|v| op.apply(v));
        self.record(out, Op::Unary { input, op })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, Unary::Sigmoid)
    }

    pub fn exp(&mut self, input: Var) -> Var {
        self.unary(input, Unary::Exp)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        self.unary(input, Unary::LeakyRelu(slope))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, Unary::Relu)
    }

    pub fn abs(&mut self, input: Var) -> Var {
        self.unary(input, Unary::Abs)
    }

    pub fn scale(&mut self, input: Var, c: f64) -> Var {
        self.unary(input, Unary::Scale(c))
    }

    pub fn offset(&mut self, input: Var, c: f64) -> Var {
        self.unary(input, Unary::Offset(c))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.record(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.record(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.record(out, Op::Mul(a, b)))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let out = ops::mean(self.value(input))?;
        Ok(self.record(out, Op::Mean(input)))
    }

    pub fn mean_per_sample(&mut self, input: Var) -> Result<Var> {
        let out = ops::mean_per_sample(self.value(input))?;
        Ok(self.record(out, Op::MeanPerSample(input)))
    }

    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let out = ops::avg_pool2(self.value(input))?;
        Ok(self.record(out, Op::AvgPool2(input)))
    }

    pub fn sobel(&mut self, input: Var) -> Result<Var> {
        let out = ops::sobel(self.value(input))?;
        Ok(self.record(out, Op::Sobel(input)))
    }

    pub fn dwt(&mut self, input: Var) -> Result<Var> {
        let out = wavelet::dwt(self.value(input))?;
        Ok(self.record(out, Op::Dwt(input)))
    }

    pub fn iwt(&mut self, input: Var) -> Result<Var> {
        let out = wavelet::iwt(self.value(input))?;
        Ok(self.record(out, Op::Iwt(input)))
    }

    /// Reverse-mode sweep from a one-element `loss`. Gradients are kept for
    /// leaves only; intermediate gradients are released once propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss {
                op: "backward",
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (var, contrib) in self.local_grads(node, &g)? {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                let slot = &mut grads[var.0];
                *slot = Some(match slot.take() {
                    None => contrib,
                    Some(prev) => prev.zip_map(&contrib, "backward", |a, b| a + b)?,
                });
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias } => {
                let need_params = self.wants(*weight) || self.wants(*bias);
                let (gi, gw, gb) = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    self.wants(*input),
                    need_params,
                )?;
                out.extend(gi.map(|t| (*input, t)));
                out.extend(gw.map(|t| (*weight, t)));
                out.extend(gb.map(|t| (*bias, t)));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if self.wants(p) {
                        out.push((p, ops::slice_channels(g, start, c)?));
                    }
                    start += c;
                }
            }
            Op::Unary { input, op } => {
                let x = self.value(*input);
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(&gv, (&xv, &yv))| gv * op.derivative(xv, yv))
                    .collect();
                out.push((*input, Tensor::new(x.shape(), data)?));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.zip_map(self.value(*b), "mul", |x, y| x * y)?));
                }
                if self.wants(*b) {
                    out.push((*b, g.zip_map(self.value(*a), "mul", |x, y| x * y)?));
                }
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let gv = g.data()[0] / T::from_f64(x.len() as f64);
                out.push((*a, Tensor::full(x.shape(), gv)));
            }
            Op::MeanPerSample(a) => {
                let x = self.value(*a);
                let per = x.len() / g.len();
                let inv = T::from_f64(1.0 / per as f64);
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat(gv * inv).take(per))
                    .collect();
                out.push((*a, Tensor::new(x.shape(), data)?));
            }
            Op::AvgPool2(a) => out.push((*a, ops::avg_pool2_backward(g)?)),
            Op::Sobel(a) => out.push((*a, ops::sobel_backward(g)?)),
            // The Haar transform is orthonormal, so its adjoint is its inverse.
            Op::Dwt(a) => out.push((*a, wavelet::iwt(g)?)),
            Op::Iwt(a) => out.push((*a, wavelet::dwt(g)?)),
        }
        Ok(out)
    }
}
