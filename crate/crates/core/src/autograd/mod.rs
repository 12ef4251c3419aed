//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Ops are
//! appended in execution order, so the node list is already topologically
//! sorted and [`Tape::backward`] is a single reverse sweep. Handles ([`Var`])
//! are plain indices into the tape.
//!
//! ```
//! use strokeseg_core::{autograd::Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let half = tape.scale(sq, 0.5);
//! let loss = tape.sum(half);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[1.0, -2.0, 3.0]);
//! ```

pub mod conv;
mod ops;

pub use ops::sigmoid;

use alloc::{format, vec, vec::Vec};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use conv::conv3d_direct;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-voxel weighting for binary cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BceWeights {
    Unit,
    /// Weight applied to target-1 voxels and to target-0 voxels.
    Class {
        positive: f64,
        negative: f64,
    },
}

/// Probability clamp applied before logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

pub(crate) enum Op<T> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        alpha: T,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sum {
        x: Var,
    },
    MulChannelwise {
        x: Var,
        s: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Bce {
        p: Var,
        y: Var,
        weights: BceWeights,
    },
    SoftDice {
        p: Var,
        y: Var,
        eps: f64,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    negate_leaky_relu_grad: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            negate_leaky_relu_grad: false,
        }
    }

    /// Test hook: flips the sign of the LeakyReLU adjoint so gradient checks
    /// can demonstrate that they catch a broken backward pass.
    #[doc(hidden)]
    pub fn inject_sign_fault(&mut self, on: bool) {
        self.negate_leaky_relu_grad = on;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    /// Stride-1 convolution with zero padding `(k-1)/2`, `k` in {1, 3}.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = conv::forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Conv3d { x, w, b }, rg))
    }

    /// Non-overlapping 2x2x2 max pooling.
    pub fn maxpool3d(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool_forward(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Trilinear x2 upsampling (`align_corners = false`).
    pub fn upsample_trilinear(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample_forward(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample { x }, rg))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) =
            ops::instance_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        let a = T::from_f64(alpha);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { a * v });
        let rg = self.rg(&[x]);
        self.push(out, Op::LeakyRelu { x, alpha: a }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    /// Mean over D*H*W, producing an `(N, C)` tensor.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::gap_forward(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool { x }, rg))
    }

    /// `x (B, in) -> x W^T + b` with `W (out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, c }, rg)
    }

    /// Sum of all elements (scalar).
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum { x }, rg)
    }

    /// `x (N, C, D, H, W) * s (N, C)` broadcast over space.
    pub fn mul_channelwise(&mut self, x: Var, s: Var) -> Result<Var> {
        let out = ops::mul_channelwise_forward(self.value(x), self.value(s))?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::MulChannelwise { x, s }, rg))
    }

    /// Channel concatenation `[a, b]` of two N-C-D-H-W tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_forward(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Summed binary cross-entropy of probabilities `p` against targets `y`,
    /// with `p` clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce(&mut self, p: Var, y: Var, weights: BceWeights) -> Result<Var> {
        self.same_shape("bce", p, y)?;
        let value = ops::bce_value(self.value(p).data(), self.value(y).data(), weights);
        let rg = self.rg(&[p, y]);
        Ok(self.push(
            Tensor::scalar(T::from_f64(value)),
            Op::Bce { p, y, weights },
            rg,
        ))
    }

    /// `1 - (2 sum(p y) + eps) / (sum(p^2) + sum(y^2) + eps)` over all elements.
    pub fn soft_dice(&mut self, p: Var, y: Var, eps: f64) -> Result<Var> {
        self.same_shape("soft_dice", p, y)?;
        let (i, pp, yy) = ops::dice_sums(self.value(p).data(), self.value(y).data());
        let value = 1.0 - (2.0 * i + eps) / (pp + yy + eps);
        let rg = self.rg(&[p, y]);
        Ok(self.push(
            Tensor::scalar(T::from_f64(value)),
            Op::SoftDice { p, y, eps },
            rg,
        ))
    }

    /// Populates gradients of every `requires_grad` leaf w.r.t. the scalar
    /// `loss`. Intermediate gradients are released as the sweep passes them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.adjoint(i, &g);
            for (v, grad) in contributions {
                self.accumulate(v, grad);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, grad: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grad) {
                    *a += g;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn adjoint(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b } => {
                let geom = conv::Geom::new(self.value(*x).shape(), self.value(*w).shape())
                    .expect("validated in forward");
                if self.wants(*x) {
                    out.push((*x, conv::backward_input(g, self.value(*w).data(), &geom)));
                }
                if self.wants(*w) || b.is_some_and(|b| self.wants(b)) {
                    let (dw, db) = conv::backward_params(self.value(*x).data(), g, &geom);
                    out.push((*w, dw));
                    if let Some(b) = b {
                        out.push((*b, db));
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (gv, &idx) in g.iter().zip(argmax) {
                    dx[idx as usize] += *gv;
                }
                out.push((*x, dx));
            }
            Op::Upsample { x } => {
                out.push((*x, ops::upsample_backward(self.value(*x).shape(), g)));
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dgamma, dbeta) = ops::instance_norm_backward(
                    self.value(*x).shape(),
                    self.value(*gamma).data(),
                    xhat,
                    inv_std,
                    g,
                );
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::LeakyRelu { x, alpha } => {
                let sign = if self.negate_leaky_relu_grad {
                    -T::one()
                } else {
                    T::one()
                };
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| sign * if v > T::zero() { gv } else { *alpha * gv })
                    .collect();
                out.push((*x, dx));
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::Sigmoid { x } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                out.push((*x, dx));
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.value(*x);
                let spatial = xs.len() / g.len().max(1);
                let inv = T::from_f64(1.0 / spatial as f64);
                let mut dx = Vec::with_capacity(xs.len());
                for gv in g {
                    dx.extend(core::iter::repeat_n(*gv * inv, spatial));
                }
                out.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), g);
                out.push((*x, dx));
                out.push((*w, dw));
                if let Some(b) = b {
                    out.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(vb).map(|(gv, v)| *gv * *v).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(va).map(|(gv, v)| *gv * *v).collect()));
                }
            }
            Op::Scale { x, c } => out.push((*x, g.iter().map(|gv| *gv * *c).collect())),
            Op::Sum { x } => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::MulChannelwise { x, s } => {
                let (dx, ds) = ops::mul_channelwise_backward(self.value(*x), self.value(*s), g);
                out.push((*x, dx));
                out.push((*s, ds));
            }
            Op::Concat { a, b } => {
                let (da, db) =
                    ops::concat_backward(self.value(*a).shape(), self.value(*b).shape(), g);
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Bce { p, y, weights } => {
                out.push((
                    *p,
                    ops::bce_grad(self.value(*p).data(), self.value(*y).data(), *weights, g[0]),
                ));
            }
            Op::SoftDice { p, y, eps } => {
                out.push((
                    *p,
                    ops::dice_grad(self.value(*p).data(), self.value(*y).data(), *eps, g[0]),
                ));
            }
        }
        out.retain(|(v, _)| self.wants(*v));
        out
    }
}
