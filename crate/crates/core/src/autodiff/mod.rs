//! Reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every op as it executes, in order, so the tape is always
//! topologically sorted. [`Tape::backward`] walks it once in reverse, summing
//! gradients at fan-out points, and returns gradients for every trainable leaf.

pub mod check;
mod loss;
mod optim;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{
    activation, activation_backward, batchnorm_infer, concat_channels, conv2d, conv2d_backward,
    ewise, maxpool2d_with_argmax, slice_channels, Activation, ConvSpec, Element, EwiseOp,
    ResizePlan, Shape4, Tensor4,
};

pub use check::{finite_diff, gradcheck_suite, GradCheckResult, GRADCHECK_TOLERANCE};
pub use loss::{loss_seg, seg_loss_with_grad, DICE_SMOOTH};
pub use optim::{OptimKind, OptimState};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Var,
        var: Var,
        eps: T,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Resize {
        x: Var,
        plan: ResizePlan,
    },
    Ewise {
        a: Var,
        b: Var,
        op: EwiseOp,
    },
    Concat {
        xs: Vec<Var>,
    },
    Sum {
        x: Var,
    },
    SegLoss {
        logits: Var,
        dlogits: Tensor4<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Activation { x, .. }
            | Op::MaxPool { x, .. }
            | Op::Resize { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::Ewise { a, b, .. } => vec![*a, *b],
            Op::Concat { xs } => xs.clone(),
            Op::SegLoss { logits, .. } => vec![*logits],
        }
    }
}

/// Recorded forward computation.
pub struct Tape<T: Element> {
    values: Vec<Tensor4<T>>,
    ops: Vec<Op<T>>,
    requires_grad: Vec<bool>,
    trainable: Vec<bool>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every trainable leaf of a tape.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: BTreeMap<Var, Tensor4<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor4<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            requires_grad: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>) -> Var {
        let rg = op.inputs().iter().any(|v| self.requires_grad[v.0]);
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(rg);
        self.trainable.push(false);
        Var(self.values.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor4<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.requires_grad[v.0] = true;
        self.trainable[v.0] = true;
        v
    }

    /// Non-differentiable leaf (inputs, targets, frozen statistics).
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.values[v.0].shape()
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.trainable[v.0]
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let y = conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.values[b.0].data()),
            spec,
        )?;
        Ok(self.push(
            y,
            Op::Conv {
                x,
                w,
                b,
                spec: *spec,
            },
        ))
    }

    /// Inference-mode batch norm; `mean` and `var` are treated as constants.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Var,
        var: Var,
        eps: T,
    ) -> Result<Var> {
        let y = batchnorm_infer(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            self.value(mean).data(),
            self.value(var).data(),
            eps,
        )?;
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            },
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = activation(self.value(x), kind);
        self.push(y, Op::Activation { x, kind })
    }

    pub fn maxpool(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (y, argmax) = maxpool2d_with_argmax(self.value(x), kernel, stride, padding)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize, align_corners: bool) -> Result<Var> {
        let s = self.shape(x);
        let plan = ResizePlan::new((s.h, s.w), (out_h, out_w), align_corners)?;
        let y = plan.apply(self.value(x))?;
        Ok(self.push(y, Op::Resize { x, plan }))
    }

    pub fn ewise(&mut self, a: Var, b: Var, op: EwiseOp) -> Result<Var> {
        let y = ewise(self.value(a), self.value(b), op)?;
        Ok(self.push(y, Op::Ewise { a, b, op }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(a, b, EwiseOp::Mul)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(a, b, EwiseOp::Add)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor4<T>> = xs.iter().map(|v| &self.values[v.0]).collect();
        let y = concat_channels(&refs)?;
        Ok(self.push(y, Op::Concat { xs: xs.to_vec() }))
    }

    /// Sum of all elements as a `1×1×1×1` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor4::scalar(s), Op::Sum { x })
    }

    /// Binary cross-entropy with logits plus soft-dice, see [`loss_seg`].
    pub fn seg_loss(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (l, dlogits) = seg_loss_with_grad(self.value(logits), self.value(target))?;
        Ok(self.push(Tensor4::scalar(l), Op::SegLoss { logits, dlogits }))
    }

    /// Gradients of scalar `loss` for every trainable leaf. Leaves the loss does
    /// not reach get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor4::ones(self.shape(loss)));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.requires_grad[i] {
                continue;
            }
            let contributions = self.vjp(i, &gy)?;
            for (v, g) in contributions {
                if !self.requires_grad[v.0] {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
            if self.trainable[i] {
                grads[i] = Some(gy);
            }
        }

        let mut out = BTreeMap::new();
        for (i, trainable) in self.trainable.iter().enumerate() {
            if !trainable {
                continue;
            }
            let g = grads
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor4::zeros(self.values[i].shape()));
            out.insert(Var(i), g);
        }
        Ok(Gradients { grads: out })
    }

    fn vjp(&self, i: usize, gy: &Tensor4<T>) -> Result<Vec<(Var, Tensor4<T>)>> {
        let rg = |v: &Var| self.requires_grad[v.0];
        Ok(match &self.ops[i] {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, spec } => {
                let g = conv2d_backward(self.value(*x), self.value(*w), gy, spec, rg(x))?;
                let mut out = vec![(*w, g.weight)];
                if let Some(gx) = g.input {
                    out.push((*x, gx));
                }
                if let (Some(b), Some(gb)) = (b, g.bias) {
                    let shape = self.shape(*b);
                    out.push((*b, Tensor4::new(shape, gb)?));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let (g, m, v) = (
                    self.value(*gamma).data(),
                    self.value(*mean).data(),
                    self.value(*var).data(),
                );
                let inv: Vec<T> = v.iter().map(|&vv| T::one() / (vv + *eps).sqrt()).collect();
                let mut gx = gy.clone();
                let mut ggamma = vec![T::zero(); s.c];
                let mut gbeta = vec![T::zero(); s.c];
                let p = s.plane();
                for (pi, (gplane, xplane)) in gx
                    .data_mut()
                    .chunks_mut(p)
                    .zip(xv.data().chunks(p))
                    .enumerate()
                {
                    let c = pi % s.c;
                    for (gv, &xval) in gplane.iter_mut().zip(xplane) {
                        gbeta[c] = gbeta[c] + *gv;
                        ggamma[c] = ggamma[c] + *gv * (xval - m[c]) * inv[c];
                        *gv = *gv * g[c] * inv[c];
                    }
                }
                vec![
                    (*x, gx),
                    (*gamma, Tensor4::new(self.shape(*gamma), ggamma)?),
                    (*beta, Tensor4::new(self.shape(*beta), gbeta)?),
                ]
            }
            Op::Activation { x, kind } => vec![(
                *x,
                activation_backward(self.value(*x), &self.values[i], gy, *kind),
            )],
            Op::MaxPool { x, argmax } => {
                let mut gx = Tensor4::zeros(self.shape(*x));
                let d = gx.data_mut();
                for (&src, &g) in argmax.iter().zip(gy.data()) {
                    d[src] = d[src] + g;
                }
                vec![(*x, gx)]
            }
            Op::Resize { x, plan } => vec![(*x, plan.backward(gy)?)],
            Op::Ewise { a, b, op } => match op {
                EwiseOp::Add => vec![(*a, gy.clone()), (*b, gy.clone())],
                EwiseOp::Mul => {
                    let mut out = Vec::new();
                    if rg(a) {
                        out.push((*a, ewise(gy, self.value(*b), EwiseOp::Mul)?));
                    }
                    if rg(b) {
                        out.push((*b, ewise(gy, self.value(*a), EwiseOp::Mul)?));
                    }
                    out
                }
            },
            Op::Concat { xs } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(xs.len());
                for v in xs {
                    let c = self.shape(*v).c;
                    if rg(v) {
                        out.push((*v, slice_channels(gy, start, c)?));
                    }
                    start += c;
                }
                out
            }
            Op::Sum { x } => {
                vec![(*x, Tensor4::full(self.shape(*x), gy.data()[0]))]
            }
            Op::SegLoss { logits, dlogits } => vec![(*logits, dlogits.scale(gy.data()[0]))],
        })
    }
}
