use serde::{Deserialize, Serialize};

use super::gemm::{gemm, MatRef};
use super::{Element, Shape4, Tensor4};
use crate::error::{Error, Result};

/// Hyperparameters of a 2-D cross-correlation.
///
/// Weight layout is `(out_ch, in_ch / groups, kh, kw)`; padding is zero-padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square `k×k` kernel, stride 1, no padding, no dilation, one group, with bias.
    pub fn new(in_ch: usize, out_ch: usize, k: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel: (k, k),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
            has_bias: true,
        }
    }

    pub fn kernel2(mut self, kh: usize, kw: usize) -> Self {
        self.kernel = (kh, kw);
        self
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn padding2(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn bias(mut self, on: bool) -> Self {
        self.has_bias = on;
        self
    }

    /// Padding that keeps spatial size at stride 1: `d·(k−1)/2` per axis.
    pub fn same_padding(mut self) -> Self {
        self.padding = (
            self.dilation.0 * (self.kernel.0 - 1) / 2,
            self.dilation.1 * (self.kernel.1 - 1) / 2,
        );
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_ch", self.in_ch),
            ("out_ch", self.out_ch),
            ("kernel height", self.kernel.0),
            ("kernel width", self.kernel.1),
            ("stride height", self.stride.0),
            ("stride width", self.stride.1),
            ("dilation height", self.dilation.0),
            ("dilation width", self.dilation.1),
            ("groups", self.groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid("conv2d", format!("{name} must be positive")));
            }
        }
        if !self.in_ch.is_multiple_of(self.groups) || !self.out_ch.is_multiple_of(self.groups) {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "groups {} must divide in_ch {} and out_ch {}",
                    self.groups, self.in_ch, self.out_ch
                ),
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Shape4 {
        Shape4::new(
            self.out_ch,
            self.in_ch / self.groups,
            self.kernel.0,
            self.kernel.1,
        )
    }

    /// Output spatial size `floor((H + 2p − d(k−1) − 1)/s) + 1`; errors if < 1.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |name: &str, len: usize, k: usize, s: usize, p: usize, d: usize| {
            let span = d * (k - 1) + 1;
            let padded = len + 2 * p;
            if padded < span {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "{name}: padded input {padded} is smaller than the dilated kernel extent {span}"
                    ),
                ));
            }
            Ok((padded - span) / s + 1)
        };
        Ok((
            axis(
                "height",
                h,
                self.kernel.0,
                self.stride.0,
                self.padding.0,
                self.dilation.0,
            )?,
            axis(
                "width",
                w,
                self.kernel.1,
                self.stride.1,
                self.padding.1,
                self.dilation.1,
            )?,
        ))
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        let (oh, ow) = self.output_hw(input.h, input.w)?;
        Ok(Shape4::new(input.n, self.out_ch, oh, ow))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }

    fn patch_len(&self) -> usize {
        self.in_ch / self.groups * self.kernel.0 * self.kernel.1
    }

    fn check_operands(
        &self,
        x: Shape4,
        w: Shape4,
        bias_len: Option<usize>,
    ) -> Result<Shape4> {
        self.validate()?;
        if x.c != self.in_ch {
            return Err(Error::shape(
                "conv2d",
                format!("input channels: got {}, spec expects {}", x.c, self.in_ch),
            ));
        }
        let ws = self.weight_shape();
        if w != ws {
            let dim = ["out_ch", "in_ch/groups", "kernel height", "kernel width"]
                .iter()
                .zip(w.to_vec().into_iter().zip(ws.to_vec()))
                .find(|(_, (a, b))| a != b)
                .map(|(name, _)| *name)
                .unwrap_or("weight");
            return Err(Error::shape(
                "conv2d",
                format!("weight {dim}: got weight shape {w}, spec expects {ws}"),
            ));
        }
        match (bias_len, self.has_bias) {
            (Some(len), _) if len != self.out_ch => {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias length {len}, spec expects {}", self.out_ch),
                ))
            }
            (None, true) => {
                return Err(Error::shape("conv2d", "spec has bias but none was given"))
            }
            (Some(_), false) => {
                return Err(Error::shape("conv2d", "bias given for a bias-free spec"))
            }
            _ => {}
        }
        self.output_shape(x)
    }
}

/// Unfolds one group of one sample into a `(cin_g·kh·kw) × (oh·ow)` matrix.
fn im2col<T: Element>(
    x: &[T],
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let cin = spec.in_ch / spec.groups;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let l = oh * ow;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut col[((c * kh + i) * kw + j) * l..][..l];
                let (lo, hi) = valid_range(ow, w, sw, j * dw, pw);
                for oy in 0..oh {
                    let out = &mut row[oy * ow..(oy + 1) * ow];
                    let iy = (oy * sh + i * dh) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let ix0 = lo * sw + j * dw - pw;
                    if sw == 1 {
                        out[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (k, o) in out[lo..hi].iter_mut().enumerate() {
                            *o = src[ix0 + k * sw];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates a column matrix back onto one group of one sample (adjoint of `im2col`).
fn col2im<T: Element>(
    col: &[T],
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let cin = spec.in_ch / spec.groups;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let l = oh * ow;
    for c in 0..cin {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &col[((c * kh + i) * kw + j) * l..][..l];
                let (lo, hi) = valid_range(ow, w, sw, j * dw, pw);
                if lo >= hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * sh + i * dh) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    let ix0 = lo * sw + j * dw - pw;
                    for (k, &g) in src[lo..hi].iter().enumerate() {
                        let d = &mut dst[ix0 + k * sw];
                        *d = *d + g;
                    }
                }
            }
        }
    }
}

/// Range `[lo, hi)` of output columns whose input column `o·s + off − pad` lies in `[0, len)`.
fn valid_range(out_len: usize, len: usize, s: usize, off: usize, pad: usize) -> (usize, usize) {
    // o·s + off ≥ pad  and  o·s + off < pad + len
    let lo = if off >= pad { 0 } else { (pad - off).div_ceil(s) };
    let limit = pad + len;
    let hi = if off >= limit {
        0
    } else {
        ((limit - off).div_ceil(s)).min(out_len)
    };
    (lo.min(hi), hi)
}

/// Cross-correlation via im2col + matrix multiply.
pub fn conv2d<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let xs = x.shape();
    let out_shape = spec.check_operands(xs, w.shape(), bias.map(|b| b.len()))?;
    let (oh, ow) = (out_shape.h, out_shape.w);
    let l = oh * ow;
    let g = spec.groups;
    let cin_g = spec.in_ch / g;
    let cout_g = spec.out_ch / g;
    let k = spec.patch_len();
    let mut out = Tensor4::zeros(out_shape);
    let mut col = if spec.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * l]
    };
    let in_per_group = cin_g * xs.plane();
    let out_per_group = cout_g * l;
    for n in 0..xs.n {
        for gi in 0..g {
            let xin = &x.data()[(n * g + gi) * in_per_group..][..in_per_group];
            let b_mat = if spec.is_pointwise() {
                MatRef::row_major(xin, k, l)
            } else {
                im2col(xin, xs.h, xs.w, spec, oh, ow, &mut col);
                MatRef::row_major(&col, k, l)
            };
            let w_mat = MatRef::row_major(&w.data()[gi * cout_g * k..][..cout_g * k], cout_g, k);
            let dst = &mut out.data_mut()[(n * g + gi) * out_per_group..][..out_per_group];
            gemm(w_mat, b_mat, T::zero(), dst);
            if let Some(b) = bias {
                for (oc, plane) in dst.chunks_mut(l).enumerate() {
                    let bv = b[gi * cout_g + oc];
                    for v in plane {
                        *v = *v + bv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Direct seven-loop cross-correlation, accumulated in `f64`. Reference semantics
/// for [`conv2d`].
pub fn conv2d_naive<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let xs = x.shape();
    let os = spec.check_operands(xs, w.shape(), bias.map(|b| b.len()))?;
    let cin_g = spec.in_ch / spec.groups;
    let cout_g = spec.out_ch / spec.groups;
    let mut out = Tensor4::zeros(os);
    for n in 0..xs.n {
        for oc in 0..spec.out_ch {
            let g = oc / cout_g;
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = bias.map_or(0.0, |b| b[oc].as_f64());
                    for ic in 0..cin_g {
                        for i in 0..spec.kernel.0 {
                            for j in 0..spec.kernel.1 {
                                let iy = (oy * spec.stride.0 + i * spec.dilation.0) as isize
                                    - spec.padding.0 as isize;
                                let ix = (ox * spec.stride.1 + j * spec.dilation.1) as isize
                                    - spec.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize
                                {
                                    continue;
                                }
                                acc += x.at(n, g * cin_g + ic, iy as usize, ix as usize).as_f64()
                                    * w.at(oc, ic, i, j).as_f64();
                            }
                        }
                    }
                    out.set(n, oc, oy, ox, T::from_f64_lossy(acc));
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its operands.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor4<T>>,
    pub weight: Tensor4<T>,
    pub bias: Option<Vec<T>>,
}

/// Vector-Jacobian product of [`conv2d`] given the output gradient `gy`.
pub fn conv2d_backward<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    gy: &Tensor4<T>,
    spec: &ConvSpec,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    let bias_len = spec.has_bias.then_some(spec.out_ch);
    let os = spec.check_operands(xs, w.shape(), bias_len)?;
    if gy.shape() != os {
        return Err(Error::shape(
            "conv2d_backward",
            format!("output gradient {} vs forward output {os}", gy.shape()),
        ));
    }
    let l = os.h * os.w;
    let g = spec.groups;
    let cin_g = spec.in_ch / g;
    let cout_g = spec.out_ch / g;
    let k = spec.patch_len();
    let in_per_group = cin_g * xs.plane();
    let out_per_group = cout_g * l;
    let pointwise = spec.is_pointwise();

    let mut gw = Tensor4::zeros(w.shape());
    let mut gx = need_input.then(|| Tensor4::zeros(xs));
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k * l]
    };
    for n in 0..xs.n {
        for gi in 0..g {
            let gy_g = &gy.data()[(n * g + gi) * out_per_group..][..out_per_group];
            let gy_mat = MatRef::row_major(gy_g, cout_g, l);

            // dW_g += gy_g · colᵀ
            let xin = &x.data()[(n * g + gi) * in_per_group..][..in_per_group];
            let col_t = if pointwise {
                MatRef::transposed(xin, l, k)
            } else {
                im2col(xin, xs.h, xs.w, spec, os.h, os.w, &mut col);
                MatRef::transposed(&col, l, k)
            };
            let gw_g = &mut gw.data_mut()[gi * cout_g * k..][..cout_g * k];
            gemm(gy_mat, col_t, T::one(), gw_g);

            // dcol = W_gᵀ · gy_g, folded back onto the input
            if let Some(gx) = gx.as_mut() {
                let w_t = MatRef::transposed(&w.data()[gi * cout_g * k..][..cout_g * k], k, cout_g);
                let gx_g = &mut gx.data_mut()[(n * g + gi) * in_per_group..][..in_per_group];
                if pointwise {
                    gemm(w_t, gy_mat, T::zero(), gx_g);
                } else {
                    gemm(w_t, gy_mat, T::zero(), &mut col);
                    col2im(&col, xs.h, xs.w, spec, os.h, os.w, gx_g);
                }
            }
        }
    }
    let gb = spec.has_bias.then(|| {
        let mut gb = vec![T::zero(); spec.out_ch];
        for n in 0..os.n {
            for (oc, acc) in gb.iter_mut().enumerate() {
                *acc = *acc + gy.plane(n, oc).iter().copied().sum();
            }
        }
        gb
    });
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}
