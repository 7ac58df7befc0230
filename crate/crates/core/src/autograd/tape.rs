use std::sync::Arc;

use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeometry};
use crate::tensor::{Real, Tensor};

/// A linear map with an explicit adjoint, usable as a differentiable tape op.
pub trait LinearMap<T: Real>: Send + Sync {
    fn input_shape(&self) -> Vec<usize>;
    fn output_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &[T]) -> Vec<T>;
    fn apply_adjoint(&self, y: &[T]) -> Vec<T>;
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Real> {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Abs(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Upsample2x(Var),
    GroupNorm {
        input: Var,
        rstd: Vec<T>,
    },
    ChannelMul(Var, Var),
    ChannelAdd(Var, Var),
    Concat(Vec<Var>),
    Diff {
        input: Var,
        axis: usize,
    },
    Linear {
        input: Var,
        map: Arc<dyn LinearMap<T>>,
    },
    PoissonNll {
        input: Var,
        /// `N0 * exp(-y * mu)` per bin.
        target_rate: Vec<T>,
        n0: T,
        mu: T,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for one forward pass and replays it backwards.
///
/// Nodes are appended in evaluation order, so reverse index order is a
/// reverse topological order.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    frozen_grads: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape that propagates gradients to every parameter, frozen or not.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            frozen_grads: true,
        }
    }

    /// A tape that skips gradient work for non-trainable parameters.
    pub fn trainable_only() -> Self {
        Self {
            nodes: Vec::new(),
            frozen_grads: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Constant, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let requires_grad = p.trainable() || self.frozen_grads;
        self.push_with(p.value().clone(), Op::Param(id), requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).add_scalar(s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.value(a).leaky_relu(slope);
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).sigmoid();
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// Elementwise `|x|`; the gradient at exactly zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).abs();
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        let b = bias.map(|b| self.value(b));
        let geom = ConvGeometry::new(x, w, b, stride, padding)?;
        let out = kernels::conv2d_forward(&geom, x, w, b);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).upsample_bilinear2x()?;
        Ok(self.push(v, Op::Upsample2x(a), &[a]))
    }

    pub fn group_norm(&mut self, a: Var, groups: usize, eps: T) -> Result<Var> {
        let x = self.value(a);
        let (c, h, w) = x.dims3()?;
        kernels::check_groups(c, groups)?;
        let (out, rstd) = kernels::group_norm_forward(x.data(), c, h, w, groups, eps);
        Ok(self.push(out, Op::GroupNorm { input: a, rstd }, &[a]))
    }

    pub fn channel_mul(&mut self, x: Var, scale: Var) -> Result<Var> {
        let v = self.value(x).channel_mul(self.value(scale))?;
        Ok(self.push(v, Op::ChannelMul(x, scale), &[x, scale]))
    }

    pub fn channel_add(&mut self, x: Var, shift: Var) -> Result<Var> {
        let v = self.value(x).channel_add(self.value(shift))?;
        Ok(self.push(v, Op::ChannelAdd(x, shift), &[x, shift]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_channels(&tensors)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    pub fn diff(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).diff(axis)?;
        Ok(self.push(v, Op::Diff { input: a, axis }, &[a]))
    }

    pub fn linear(&mut self, a: Var, map: Arc<dyn LinearMap<T>>) -> Result<Var> {
        let x = self.value(a);
        let expected: usize = map.input_shape().iter().product();
        if x.len() != expected {
            return Err(Error::invalid(format!(
                "operator expects {:?} ({expected} values), got {:?}",
                map.input_shape(),
                x.shape()
            )));
        }
        let out = Tensor::new(map.output_shape(), map.apply(x.data()))?;
        Ok(self.push(out, Op::Linear { input: a, map }, &[a]))
    }

    /// Negative Poisson log-likelihood of post-log data `y` given line integrals `a`:
    /// `-sum_j [N0 exp(-y_j mu) (-a_j mu + ln N0) - N0 exp(-a_j mu)]`.
    pub fn poisson_nll(&mut self, a: Var, y: &Tensor<T>, n0: T, mu: T) -> Result<Var> {
        let x = self.value(a);
        x.check_same_shape(y)?;
        let ln_n0 = n0.ln();
        let target_rate: Vec<T> = y.data().iter().map(|&yj| n0 * (-yj * mu).exp()).collect();
        let total: T = x
            .data()
            .iter()
            .zip(&target_rate)
            .map(|(&aj, &r)| r * (-aj * mu + ln_n0) - n0 * (-aj * mu).exp())
            .sum();
        Ok(self.push(
            Tensor::scalar(-total),
            Op::PoissonNll {
                input: a,
                target_rate,
                n0,
                mu,
            },
            &[a],
        ))
    }

    /// Reverse pass from a scalar node; parameter gradients are added into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::ONE]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, g, &mut grads, store);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        store: &mut ParamStore<T>,
    ) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => store.get_mut(*id).accumulate_grad(&g),
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.iter().map(|&x| -x).collect());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.into_iter().map(|x| x * s).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, g),
            Op::LeakyRelu(a, slope) => {
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gi, &x)| if x >= T::ZERO { gi } else { gi * *slope })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gi, &y)| gi * y * (T::ONE - y))
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gi, &x)| {
                        if x > T::ZERO {
                            gi
                        } else if x < T::ZERO {
                            -gi
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gi, &y)| gi * y)
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                self.accumulate(grads, *a, vec![g[0] / T::from_usize(n); n]);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let cg = kernels::conv2d_backward(
                    geom,
                    val(*input),
                    val(*weight),
                    &g,
                    self.needs(*input),
                    self.needs(*weight),
                    bias.is_some_and(|b| self.needs(b)),
                );
                if let Some(gi) = cg.input {
                    self.accumulate(grads, *input, gi);
                }
                if let Some(gw) = cg.weight {
                    self.accumulate(grads, *weight, gw);
                }
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Upsample2x(a) => {
                let (c, h, w) = self.nodes[a.0].value.dims3().expect("validated in forward");
                self.accumulate(grads, *a, kernels::upsample2x_backward(&g, c, h, w));
            }
            Op::GroupNorm { input, rstd } => {
                let gx = kernels::group_norm_backward(node.value.data(), rstd, &g);
                self.accumulate(grads, *input, gx);
            }
            Op::ChannelMul(x, s) => {
                let xs = val(*x);
                let scale = val(*s);
                let plane = xs.len() / scale.len();
                if self.needs(*x) {
                    let gx = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * scale[i / plane])
                        .collect();
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*s) {
                    let gs = g
                        .chunks(plane)
                        .zip(xs.chunks(plane))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *s, gs);
                }
            }
            Op::ChannelAdd(x, b) => {
                if self.needs(*b) {
                    let plane = g.len() / val(*b).len();
                    let gb = g.chunks(plane).map(|c| c.iter().copied().sum()).collect();
                    self.accumulate(grads, *b, gb);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    if self.needs(*p) {
                        self.accumulate(grads, *p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Diff { input, axis } => {
                let (rows, cols) = self.nodes[input.0].value.dims2().expect("validated in forward");
                let mut gx = vec![T::ZERO; rows * cols];
                if *axis == 0 {
                    for i in 0..rows - 1 {
                        for j in 0..cols {
                            let gi = g[i * cols + j];
                            gx[(i + 1) * cols + j] += gi;
                            gx[i * cols + j] -= gi;
                        }
                    }
                } else {
                    for i in 0..rows {
                        for j in 0..cols - 1 {
                            let gi = g[i * (cols - 1) + j];
                            gx[i * cols + j + 1] += gi;
                            gx[i * cols + j] -= gi;
                        }
                    }
                }
                self.accumulate(grads, *input, gx);
            }
            Op::Linear { input, map } => {
                self.accumulate(grads, *input, map.apply_adjoint(&g));
            }
            Op::PoissonNll {
                input,
                target_rate,
                n0,
                mu,
            } => {
                let scale = g[0] * *mu;
                let ga = val(*input)
                    .iter()
                    .zip(target_rate)
                    .map(|(&aj, &r)| scale * (r - *n0 * (-aj * *mu).exp()))
                    .collect();
                self.accumulate(grads, *input, ga);
            }
        }
    }
}
