use serde::{Deserialize, Serialize};

use super::{Element, Shape4, Tensor4};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Relu6,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply<T: Element>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Relu6 => v.max(T::zero()).min(T::from_f64_lossy(6.0)),
            Activation::Sigmoid => sigmoid(v),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Relu6 => "relu6",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Element>(x: &Tensor4<T>, kind: Activation) -> Tensor4<T> {
    x.map(|v| kind.apply(v))
}

/// Gradient of [`activation`]; `y` is the forward output (used by sigmoid).
pub fn activation_backward<T: Element>(
    x: &Tensor4<T>,
    y: &Tensor4<T>,
    gy: &Tensor4<T>,
    kind: Activation,
) -> Tensor4<T> {
    let six = T::from_f64_lossy(6.0);
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(gy.data())
        .map(|((&xv, &yv), &g)| match kind {
            Activation::Relu => {
                if xv > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }
            Activation::Relu6 => {
                if xv > T::zero() && xv < six {
                    g
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => g * yv * (T::one() - yv),
        })
        .collect();
    Tensor4::new(x.shape(), data).expect("same shape")
}

fn per_channel_affine<T: Element>(
    op: &'static str,
    channels: usize,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<(Vec<T>, Vec<T>)> {
    for (name, v) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        if v.len() != channels {
            return Err(Error::shape(
                op,
                format!("{name} has {} entries for {channels} channels", v.len()),
            ));
        }
    }
    let mut scale = Vec::with_capacity(channels);
    let mut shift = Vec::with_capacity(channels);
    for c in 0..channels {
        let denom = var[c] + eps;
        if denom.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::invalid(
                op,
                format!("var + eps must be positive (channel {c}: {denom})"),
            ));
        }
        let s = gamma[c] / denom.sqrt();
        scale.push(s);
        shift.push(beta[c] - mean[c] * s);
    }
    Ok((scale, shift))
}

/// Inference batch norm: `gamma·(x − mean)/sqrt(var + eps) + beta` per channel.
pub fn batchnorm_infer<T: Element>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<Tensor4<T>> {
    let s = x.shape();
    let (scale, _) = per_channel_affine("batchnorm", s.c, gamma, beta, mean, var, eps)?;
    let mut out = x.clone();
    let p = s.plane();
    for (i, plane) in out.data_mut().chunks_mut(p).enumerate() {
        let c = i % s.c;
        for v in plane {
            *v = (*v - mean[c]) * scale[c] + beta[c];
        }
    }
    Ok(out)
}

/// Folds an inference batch norm into the preceding convolution's weights and bias.
pub fn batchnorm_fold<T: Element>(
    conv_w: &Tensor4<T>,
    conv_b: Option<&[T]>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<(Tensor4<T>, Vec<T>)> {
    let oc = conv_w.shape().n;
    let (scale, _) = per_channel_affine("batchnorm_fold", oc, gamma, beta, mean, var, eps)?;
    if let Some(b) = conv_b {
        if b.len() != oc {
            return Err(Error::shape(
                "batchnorm_fold",
                format!("conv bias has {} entries for {oc} output channels", b.len()),
            ));
        }
    }
    let per = conv_w.numel() / oc.max(1);
    let mut w = conv_w.clone();
    for (c, row) in w.data_mut().chunks_mut(per.max(1)).enumerate().take(oc) {
        for v in row {
            *v = *v * scale[c];
        }
    }
    let b = (0..oc)
        .map(|c| {
            let b0 = conv_b.map_or(T::zero(), |b| b[c]);
            (b0 - mean[c]) * scale[c] + beta[c]
        })
        .collect();
    Ok((w, b))
}

fn pool_out(op: &'static str, len: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if k == 0 || s == 0 {
        return Err(Error::invalid(op, "kernel and stride must be positive"));
    }
    if k > len + 2 * p {
        return Err(Error::shape(
            op,
            format!("kernel {k} larger than padded input {}", len + 2 * p),
        ));
    }
    Ok((len + 2 * p - k) / s + 1)
}

/// Max pooling with `−∞` padding. Returns the output and, per output element,
/// the flat input index of the selected maximum (first in scan order).
pub fn maxpool2d_with_argmax<T: Element>(
    x: &Tensor4<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor4<T>, Vec<usize>)> {
    let s = x.shape();
    let oh = pool_out("maxpool2d", s.h, kernel, stride, padding)?;
    let ow = pool_out("maxpool2d", s.w, kernel, stride, padding)?;
    let os = s.with_hw(oh, ow);
    let mut out = Vec::with_capacity(os.numel());
    let mut arg = Vec::with_capacity(os.numel());
    let p = s.plane();
    for (pi, plane) in x.data().chunks(p.max(1)).enumerate().take(s.n * s.c) {
        for oy in 0..oh {
            let y0 = (oy * stride) as isize - padding as isize;
            let ys = y0.max(0) as usize..((y0 + kernel as isize).min(s.h as isize)) as usize;
            for ox in 0..ow {
                let x0 = (ox * stride) as isize - padding as isize;
                let xs = x0.max(0) as usize..((x0 + kernel as isize).min(s.w as isize)) as usize;
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for iy in ys.clone() {
                    for ix in xs.clone() {
                        let v = plane[iy * s.w + ix];
                        if best_i == usize::MAX || v > best {
                            best = v;
                            best_i = iy * s.w + ix;
                        }
                    }
                }
                if best_i == usize::MAX {
                    return Err(Error::shape(
                        "maxpool2d",
                        format!("window at ({oy},{ox}) lies entirely in padding"),
                    ));
                }
                out.push(best);
                arg.push(pi * p + best_i);
            }
        }
    }
    Ok((Tensor4::new(os, out)?, arg))
}

pub fn maxpool2d<T: Element>(
    x: &Tensor4<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor4<T>> {
    maxpool2d_with_argmax(x, kernel, stride, padding).map(|(y, _)| y)
}

/// Per-axis bilinear sampling table: output index → (low source, high source, weight of high).
#[derive(Clone, Debug, PartialEq)]
struct AxisTable {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTable {
    fn new(in_len: usize, out_len: usize, align_corners: bool) -> Self {
        let mut t = AxisTable {
            lo: Vec::with_capacity(out_len),
            hi: Vec::with_capacity(out_len),
            frac: Vec::with_capacity(out_len),
        };
        for d in 0..out_len {
            let src = if align_corners {
                if out_len > 1 {
                    d as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
                } else {
                    0.0
                }
            } else {
                let scale = in_len as f64 / out_len as f64;
                ((d as f64 + 0.5) * scale - 0.5).max(0.0)
            };
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            t.lo.push(lo);
            t.hi.push(hi);
            t.frac.push(frac);
        }
        t
    }
}

/// Precomputed bilinear resize from one spatial size to another.
#[derive(Clone, Debug, PartialEq)]
pub struct ResizePlan {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub align_corners: bool,
    rows: AxisTable,
    cols: AxisTable,
}

impl ResizePlan {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize), align_corners: bool) -> Result<Self> {
        if out_hw.0 == 0 || out_hw.1 == 0 || in_hw.0 == 0 || in_hw.1 == 0 {
            return Err(Error::invalid(
                "upsample_bilinear",
                format!("sizes must be positive: {in_hw:?} -> {out_hw:?}"),
            ));
        }
        Ok(ResizePlan {
            in_hw,
            out_hw,
            align_corners,
            rows: AxisTable::new(in_hw.0, out_hw.0, align_corners),
            cols: AxisTable::new(in_hw.1, out_hw.1, align_corners),
        })
    }

    pub fn apply<T: Element>(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = x.shape();
        if (s.h, s.w) != self.in_hw {
            return Err(Error::shape(
                "upsample_bilinear",
                format!("input {s} does not match plan input {:?}", self.in_hw),
            ));
        }
        let (oh, ow) = self.out_hw;
        let os = s.with_hw(oh, ow);
        let fy: Vec<T> = self.rows.frac.iter().map(|&f| T::from_f64_lossy(f)).collect();
        let fx: Vec<T> = self.cols.frac.iter().map(|&f| T::from_f64_lossy(f)).collect();
        let mut out = Vec::with_capacity(os.numel());
        for plane in x.data().chunks(s.plane()) {
            for oy in 0..oh {
                let r0 = &plane[self.rows.lo[oy] * s.w..][..s.w];
                let r1 = &plane[self.rows.hi[oy] * s.w..][..s.w];
                let ly = fy[oy];
                for ((&c0, &c1), &lx) in self.cols.lo.iter().zip(&self.cols.hi).zip(&fx) {
                    // lerp form keeps constant inputs exactly constant
                    let top = r0[c0] + lx * (r0[c1] - r0[c0]);
                    let bot = r1[c0] + lx * (r1[c1] - r1[c0]);
                    out.push(top + ly * (bot - top));
                }
            }
        }
        Tensor4::new(os, out)
    }

    /// Adjoint of [`ResizePlan::apply`]: scatters the output gradient back.
    pub fn backward<T: Element>(&self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = gy.shape();
        if (s.h, s.w) != self.out_hw {
            return Err(Error::shape(
                "upsample_bilinear_backward",
                format!("gradient {s} does not match plan output {:?}", self.out_hw),
            ));
        }
        let (ih, iw) = self.in_hw;
        let is = s.with_hw(ih, iw);
        let mut gx = Tensor4::zeros(is);
        let in_plane = ih * iw;
        for (pi, gplane) in gy.data().chunks(s.plane()).enumerate() {
            let dst = &mut gx.data_mut()[pi * in_plane..][..in_plane];
            for oy in 0..s.h {
                let (r0, r1) = (self.rows.lo[oy], self.rows.hi[oy]);
                let ly = T::from_f64_lossy(self.rows.frac[oy]);
                for ox in 0..s.w {
                    let (c0, c1) = (self.cols.lo[ox], self.cols.hi[ox]);
                    let lx = T::from_f64_lossy(self.cols.frac[ox]);
                    let g = gplane[oy * s.w + ox];
                    let gt = g * (T::one() - ly);
                    let gb = g * ly;
                    dst[r0 * iw + c0] = dst[r0 * iw + c0] + gt * (T::one() - lx);
                    dst[r0 * iw + c1] = dst[r0 * iw + c1] + gt * lx;
                    dst[r1 * iw + c0] = dst[r1 * iw + c0] + gb * (T::one() - lx);
                    dst[r1 * iw + c1] = dst[r1 * iw + c1] + gb * lx;
                }
            }
        }
        Ok(gx)
    }
}

/// Bilinear resize to `out_h × out_w`. With `align_corners = false` the source
/// coordinate is `(dst + 0.5)·(in/out) − 0.5`, clamped at 0.
pub fn upsample_bilinear<T: Element>(
    x: &Tensor4<T>,
    out_h: usize,
    out_w: usize,
    align_corners: bool,
) -> Result<Tensor4<T>> {
    let s = x.shape();
    ResizePlan::new((s.h, s.w), (out_h, out_w), align_corners)?.apply(x)
}

pub fn upsample_bilinear_backward<T: Element>(
    gy: &Tensor4<T>,
    in_h: usize,
    in_w: usize,
    align_corners: bool,
) -> Result<Tensor4<T>> {
    let s = gy.shape();
    ResizePlan::new((in_h, in_w), (s.h, s.w), align_corners)?.backward(gy)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EwiseOp {
    Mul,
    Add,
}

/// Elementwise product or sum of equally shaped tensors (no broadcasting).
pub fn ewise<T: Element>(a: &Tensor4<T>, b: &Tensor4<T>, op: EwiseOp) -> Result<Tensor4<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "ewise",
            format!("{} vs {}", a.shape(), b.shape()),
        ));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match op {
            EwiseOp::Mul => x * y,
            EwiseOp::Add => x + y,
        })
        .collect();
    Tensor4::new(a.shape(), data)
}

/// Concatenates along the channel axis, preserving input order.
pub fn concat_channels<T: Element>(xs: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?
        .shape();
    let mut c = 0;
    for t in xs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(
                "concat_channels",
                format!("input {s} does not share n/h/w with {first}"),
            ));
        }
        c += s.c;
    }
    let os = first.with_c(c);
    let mut data = Vec::with_capacity(os.numel());
    for n in 0..first.n {
        for t in xs {
            let per = t.shape().c * first.plane();
            data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor4::new(os, data)
}

/// Channels `[start, start + len)` as a new tensor.
pub fn slice_channels<T: Element>(x: &Tensor4<T>, start: usize, len: usize) -> Result<Tensor4<T>> {
    let s = x.shape();
    if start + len > s.c {
        return Err(Error::shape(
            "slice_channels",
            format!("range {start}..{} exceeds {} channels", start + len, s.c),
        ));
    }
    let p = s.plane();
    let mut data = Vec::with_capacity(s.n * len * p);
    for n in 0..s.n {
        let base = (n * s.c + start) * p;
        data.extend_from_slice(&x.data()[base..base + len * p]);
    }
    Tensor4::new(s.with_c(len), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

/// Mirrors every plane left-right (`Horizontal`) or top-bottom (`Vertical`).
pub fn flip<T: Element>(x: &Tensor4<T>, axis: FlipAxis) -> Tensor4<T> {
    let s = x.shape();
    let mut out = x.clone();
    for plane in out.data_mut().chunks_mut(s.plane().max(1)) {
        match axis {
            FlipAxis::Horizontal => plane.chunks_mut(s.w).for_each(|r| r.reverse()),
            FlipAxis::Vertical => {
                for y in 0..s.h / 2 {
                    let (a, b) = plane.split_at_mut((s.h - 1 - y) * s.w);
                    a[y * s.w..(y + 1) * s.w].swap_with_slice(&mut b[..s.w]);
                }
            }
        }
    }
    out
}

pub(crate) fn shape_of_concat(shapes: &[Shape4]) -> Result<Shape4> {
    let first = *shapes
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let mut c = 0;
    for s in shapes {
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(
                "concat_channels",
                format!("input {s} does not share n/h/w with {first}"),
            ));
        }
        c += s.c;
    }
    Ok(first.with_c(c))
}

pub(crate) fn pool_output_shape(s: Shape4, k: usize, st: usize, p: usize) -> Result<Shape4> {
    Ok(s.with_hw(
        pool_out("maxpool2d", s.h, k, st, p)?,
        pool_out("maxpool2d", s.w, k, st, p)?,
    ))
}
