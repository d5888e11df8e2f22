use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::ops::{self, RowStats};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool2d(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: RowStats,
    },
    Reshape(Var),
    Transpose(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Full-precision value for scalar reductions.
    scalar64: Option<f64>,
}

/// Records one forward pass. Nodes are appended after their parents, so the
/// node order is a topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scalar64: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Value of a one-element node, at full precision when it came from a reduction.
    pub fn scalar(&self, var: Var) -> f64 {
        let node = &self.nodes[var.0];
        node.scalar64.unwrap_or(node.value.data()[0] as f64)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::sub(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mul(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let v = self.value(x).map(|e| e * factor);
        let rg = self.needs(&[x]);
        self.push(v, Op::Scale(x, factor), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let v = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.needs(&deps);
        Ok(self.push(v, Op::Linear { x, w, b }, rg))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let v = ops::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.needs(&deps);
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = ops::relu(self.value(x));
        let rg = self.needs(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = ops::sigmoid(self.value(x));
        let rg = self.needs(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (v, argmax) = ops::max_pool2d_with_indices(self.value(x), kernel, stride)?;
        let rg = self.needs(&[x]);
        Ok(self.push(v, Op::MaxPool2d { x, argmax }, rg))
    }

    pub fn adaptive_avg_pool2d(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let v = ops::adaptive_avg_pool2d(self.value(x), target)?;
        let rg = self.needs(&[x]);
        Ok(self.push(v, Op::AdaptiveAvgPool2d(x), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = ops::softmax(self.value(x), axis)?;
        let rg = self.needs(&[x]);
        Ok(self.push(v, Op::Softmax { x, axis }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (v, stats) =
            ops::layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    /// Inverted dropout; the identity when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f32,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        ops::check_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask(self.shape(x), rate, rng)?;
        let mask = self.constant(mask);
        self.mul(x, mask)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = ops::transpose2d(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(v, Op::Transpose(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat(&values, axis)?;
        let rg = self.needs(parts);
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = ops::narrow(self.value(x), axis, start, len)?;
        let rg = self.needs(&[x]);
        Ok(self.push(v, Op::Narrow { x, axis, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.needs(&[x]);
        let var = self.push(Tensor::scalar(s as f32), Op::Sum(x), rg);
        self.nodes[var.0].scalar64 = Some(s);
        var
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let rg = self.needs(&[x]);
        let var = self.push(Tensor::scalar(m as f32), Op::Mean(x), rg);
        self.nodes[var.0].scalar64 = Some(m);
        var
    }

    /// Fingerprint of every piecewise-linear branch taken in the forward pass
    /// (ReLU signs and max-pool winners). Two evaluations with equal
    /// fingerprints lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn with_shape(&self, var: Var, data: Vec<f32>) -> Tensor {
        Tensor::new(self.shape(var), data).expect("gradient matches parent shape")
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, ops::mul(g, self.value(*b))?);
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, ops::mul(g, self.value(*a))?);
                }
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.map(|v| v * f)),
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, None, g, grads)?,
            Op::Linear { x, w, b } => self.matmul_backward(*x, *w, *b, g, grads)?,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let cg =
                    ops::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *padding);
                let dx = self.with_shape(*x, cg.input);
                self.accumulate(grads, *x, dx);
                let dw = self.with_shape(*w, cg.weight);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    let db = self.with_shape(*b, cg.bias);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let data = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                let dx = self.with_shape(*x, data);
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * y * (1.0 - y))
                    .collect();
                let dx = self.with_shape(*x, data);
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool2d { x, argmax } => {
                let mut data = vec![0.0f32; self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    data[src] += gv;
                }
                let dx = self.with_shape(*x, data);
                self.accumulate(grads, *x, dx);
            }
            Op::AdaptiveAvgPool2d(x) => {
                let data = ops::adaptive_avg_pool2d_backward(g, self.shape(*x));
                let dx = self.with_shape(*x, data);
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let data = ops::softmax_backward(&node.value, g, *axis);
                let dx = self.with_shape(*x, data);
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let lg = ops::layer_norm_backward(self.value(*x), self.value(*gamma), stats, g);
                let dx = self.with_shape(*x, lg.input);
                self.accumulate(grads, *x, dx);
                let dgamma = self.with_shape(*gamma, lg.gamma);
                self.accumulate(grads, *gamma, dgamma);
                let dbeta = self.with_shape(*beta, lg.beta);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Reshape(x) => {
                let dx = self.with_shape(*x, g.data().to_vec());
                self.accumulate(grads, *x, dx);
            }
            Op::Transpose(x) => self.accumulate(grads, *x, ops::transpose2d(g)?),
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    self.accumulate(grads, p, ops::narrow(g, *axis, start, len)?);
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                // Scatter back into a zero tensor of the parent's shape.
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let (n, len) = (shape[*axis], g.shape()[*axis]);
                let mut data = vec![0.0f32; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                let dx = self.with_shape(*x, data);
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let dx = Tensor::full(self.shape(*x), g.data()[0]);
                self.accumulate(grads, *x, dx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f32;
                let dx = Tensor::full(self.shape(*x), g.data()[0] / n);
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        bias: Option<Var>,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        if self.nodes[a.0].requires_grad {
            let bt = ops::transpose2d(self.value(b))?;
            self.accumulate(grads, a, ops::matmul(g, &bt)?);
        }
        if self.nodes[b.0].requires_grad {
            let at = ops::transpose2d(self.value(a))?;
            self.accumulate(grads, b, ops::matmul(&at, g)?);
        }
        if let Some(bias) = bias {
            let out = g.shape()[1];
            let mut acc = vec![0.0f64; out];
            for row in g.data().chunks(out) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
            let db = self.with_shape(bias, acc.into_iter().map(|v| v as f32).collect());
            self.accumulate(grads, bias, db);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[3]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let c = g.constant(Tensor::full(&[2], 3.0));
        let y = g.mul(x, c).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn shared_node_accumulates() {
        // y = x + x + 2x -> dy/dx = 4
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.5));
        let a = g.add(x, x).unwrap();
        let b = g.scale(x, 2.0);
        let y = g.add(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        let loss = g.sum(r);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }
}
