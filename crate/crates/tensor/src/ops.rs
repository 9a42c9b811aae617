//! Forward and backward kernels on plain tensors.
//!
//! These are the building blocks the [`Tape`](crate::Tape) records. They can
//! also be called directly for inference, where no gradient bookkeeping is
//! needed.

use crate::error::{Result, TensorError};
use crate::scalar::matmul;
use crate::{Scalar, Shape4, Tensor};

/// Stride, zero padding and group count of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Conv2dParams {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

impl Conv2dParams {
    pub fn new(stride: (usize, usize), padding: (usize, usize), groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1, symmetric padding `k / 2` for odd square kernels.
    pub fn same(k: usize) -> Self {
        Self::new((1, 1), (k / 2, k / 2), 1)
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Output spatial extent of a convolution along one axis, or `None` when the
/// kernel does not fit into the padded input.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Validated geometry of one convolution call.
///
/// Kernel taps that only ever see padding are dropped from the im2col
/// matrices; their weight gradients are exactly zero.
#[derive(Debug, Clone)]
pub(crate) struct ConvPlan {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
    cg: usize,
    og: usize,
    oh: usize,
    ow: usize,
    taps_y: Vec<usize>,
    taps_x: Vec<usize>,
}

fn active_taps(kernel: usize, out: usize, stride: usize, pad: usize, len: usize) -> Vec<usize> {
    (0..kernel)
        .filter(|&k| {
            (0..out).any(|o| {
                let pos = (o * stride + k) as isize - pad as isize;
                pos >= 0 && (pos as usize) < len
            })
        })
        .collect()
}

impl ConvPlan {
    pub(crate) fn new(input: Shape4, weight: Shape4, p: Conv2dParams) -> Result<Self> {
        let err = |msg: String| Err(TensorError::Conv(msg));
        if p.groups == 0 {
            return err("groups must be at least 1".into());
        }
        if p.stride.0 == 0 || p.stride.1 == 0 {
            return err("stride must be at least 1".into());
        }
        if input.numel() == 0 || weight.numel() == 0 {
            return err(format!("empty operand: input {input}, weight {weight}"));
        }
        if input.c % p.groups != 0 {
            return err(format!(
                "input channels {} not divisible by groups {}",
                input.c, p.groups
            ));
        }
        if weight.n % p.groups != 0 {
            return err(format!(
                "output channels {} not divisible by groups {}",
                weight.n, p.groups
            ));
        }
        let cg = input.c / p.groups;
        if weight.c != cg {
            return err(format!(
                "weight {weight} expects {} input channels per group, input {input} with {} groups has {cg}",
                weight.c, p.groups
            ));
        }
        let (kh, kw) = (weight.h, weight.w);
        let oh = conv_out_len(input.h, kh, p.stride.0, p.padding.0);
        let ow = conv_out_len(input.w, kw, p.stride.1, p.padding.1);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return err(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                input.h + 2 * p.padding.0,
                input.w + 2 * p.padding.1
            ));
        };
        let taps_y = active_taps(kh, oh, p.stride.0, p.padding.0, input.h);
        let taps_x = active_taps(kw, ow, p.stride.1, p.padding.1, input.w);
        Ok(Self {
            n: input.n,
            h: input.h,
            w: input.w,
            cin: input.c,
            cout: weight.n,
            kh,
            kw,
            stride: p.stride,
            padding: p.padding,
            groups: p.groups,
            cg,
            og: weight.n / p.groups,
            oh,
            ow,
            taps_y,
            taps_x,
        })
    }

    pub(crate) fn out_shape(&self) -> Shape4 {
        Shape4::new(self.n, self.cout, self.oh, self.ow)
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Rows of the per-group im2col matrix.
    fn k_rows(&self) -> usize {
        self.cg * self.taps_y.len() * self.taps_x.len()
    }

    /// Columns of the im2col matrix: every output position of every item.
    fn cols(&self) -> usize {
        self.n * self.positions()
    }

    fn im2col<T: Scalar>(&self, input: &[T], group: usize, cols: &mut [T]) {
        let ncols = self.cols();
        let p = self.positions();
        let (sh, sw) = self.stride;
        let (ph, pw) = (self.padding.0 as isize, self.padding.1 as isize);
        let mut row = 0;
        for c in 0..self.cg {
            let ch = group * self.cg + c;
            for &ky in &self.taps_y {
                for &kx in &self.taps_x {
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for ni in 0..self.n {
                        let plane = &input[(ni * self.cin + ch) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.oh {
                            let y = (oy * sh + ky) as isize - ph;
                            let out = &mut dst[ni * p + oy * self.ow..][..self.ow];
                            if y < 0 || y as usize >= self.h {
                                out.fill(T::ZERO);
                                continue;
                            }
                            let src = &plane[y as usize * self.w..][..self.w];
                            for (ox, o) in out.iter_mut().enumerate() {
                                let x = (ox * sw + kx) as isize - pw;
                                *o = if x < 0 || x as usize >= self.w {
                                    T::ZERO
                                } else {
                                    src[x as usize]
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], group: usize, grad_in: &mut [T]) {
        let ncols = self.cols();
        let p = self.positions();
        let (sh, sw) = self.stride;
        let (ph, pw) = (self.padding.0 as isize, self.padding.1 as isize);
        let mut row = 0;
        for c in 0..self.cg {
            let ch = group * self.cg + c;
            for &ky in &self.taps_y {
                for &kx in &self.taps_x {
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for ni in 0..self.n {
                        let base = (ni * self.cin + ch) * self.h * self.w;
                        for oy in 0..self.oh {
                            let y = (oy * sh + ky) as isize - ph;
                            if y < 0 || y as usize >= self.h {
                                continue;
                            }
                            let row_base = base + y as usize * self.w;
                            let g = &src[ni * p + oy * self.ow..][..self.ow];
                            for (ox, &v) in g.iter().enumerate() {
                                let x = (ox * sw + kx) as isize - pw;
                                if x >= 0 && (x as usize) < self.w {
                                    grad_in[row_base + x as usize] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Weight rows of one group restricted to the active taps, `og x k_rows`.
    fn gather_weight<T: Scalar>(&self, weight: &[T], group: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.og * self.k_rows());
        for o in 0..self.og {
            let oc = group * self.og + o;
            for c in 0..self.cg {
                for &ky in &self.taps_y {
                    let base = ((oc * self.cg + c) * self.kh + ky) * self.kw;
                    out.extend(self.taps_x.iter().map(|&kx| weight[base + kx]));
                }
            }
        }
        out
    }

    fn scatter_weight<T: Scalar>(&self, rows: &[T], group: usize, grad_w: &mut [T]) {
        let mut i = 0;
        for o in 0..self.og {
            let oc = group * self.og + o;
            for c in 0..self.cg {
                for &ky in &self.taps_y {
                    let base = ((oc * self.cg + c) * self.kh + ky) * self.kw;
                    for &kx in &self.taps_x {
                        grad_w[base + kx] += rows[i];
                        i += 1;
                    }
                }
            }
        }
    }

    /// Gradient of one group's output channels laid out as `og x cols`.
    fn gather_out<T: Scalar>(&self, out: &[T], group: usize) -> Vec<T> {
        let p = self.positions();
        let ncols = self.cols();
        let mut m = vec![T::ZERO; self.og * ncols];
        for o in 0..self.og {
            let oc = group * self.og + o;
            for ni in 0..self.n {
                m[o * ncols + ni * p..][..p].copy_from_slice(&out[(ni * self.cout + oc) * p..][..p]);
            }
        }
        m
    }
}

/// 2-D cross-correlation with zero padding, optional grouping and bias.
///
/// `weight` is `(out_c, in_c / groups, k_h, k_w)`; `bias`, when given, holds
/// `out_c` values in any shape.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: Conv2dParams,
) -> Result<Tensor<T>> {
    let plan = ConvPlan::new(input.shape(), weight.shape(), params)?;
    if let Some(b) = bias {
        if b.len() != plan.cout {
            return Err(TensorError::Conv(format!(
                "bias has {} values for {} output channels",
                b.len(),
                plan.cout
            )));
        }
    }
    Ok(conv2d_planned(&plan, input, weight, bias))
}

pub(crate) fn conv2d_planned<T: Scalar>(
    plan: &ConvPlan,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let mut out = Tensor::zeros(plan.out_shape());
    let (k, ncols, p) = (plan.k_rows(), plan.cols(), plan.positions());
    let mut cols = vec![T::ZERO; k * ncols];
    let mut prod = vec![T::ZERO; plan.og * ncols];
    for g in 0..plan.groups {
        plan.im2col(input.data(), g, &mut cols);
        let wg = plan.gather_weight(weight.data(), g);
        matmul(&wg, &cols, &mut prod, plan.og, k, ncols, false, false, false);
        let od = out.data_mut();
        for o in 0..plan.og {
            let oc = g * plan.og + o;
            let b = bias.map_or(T::ZERO, |b| b.data()[oc]);
            for ni in 0..plan.n {
                let dst = &mut od[(ni * plan.cout + oc) * p..][..p];
                let src = &prod[o * ncols + ni * p..][..p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    params: Conv2dParams,
    need: (bool, bool, bool),
) -> Result<Conv2dGrads<T>> {
    let plan = ConvPlan::new(input.shape(), weight.shape(), params)?;
    if grad_out.shape() != plan.out_shape() {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            expected: plan.out_shape(),
            got: grad_out.shape(),
        });
    }
    Ok(conv2d_backward_planned(&plan, input, weight, grad_out, need))
}

pub(crate) fn conv2d_backward_planned<T: Scalar>(
    plan: &ConvPlan,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    (need_input, need_weight, need_bias): (bool, bool, bool),
) -> Conv2dGrads<T> {
    let (k, ncols, p) = (plan.k_rows(), plan.cols(), plan.positions());
    let mut gi = need_input.then(|| Tensor::zeros(input.shape()));
    let mut gw = need_weight.then(|| Tensor::zeros(weight.shape()));
    let gb = need_bias.then(|| {
        let mut b = Tensor::zeros(Shape4::new(1, plan.cout, 1, 1));
        let god = grad_out.data();
        for (oc, v) in b.data_mut().iter_mut().enumerate() {
            for ni in 0..plan.n {
                *v += god[(ni * plan.cout + oc) * p..][..p].iter().copied().sum::<T>();
            }
        }
        b
    });
    if gi.is_some() || gw.is_some() {
        let mut cols = vec![T::ZERO; k * ncols];
        let mut wrows = vec![T::ZERO; plan.og * k];
        for g in 0..plan.groups {
            let go = plan.gather_out(grad_out.data(), g);
            if let Some(gw) = gw.as_mut() {
                plan.im2col(input.data(), g, &mut cols);
                matmul(&go, &cols, &mut wrows, plan.og, ncols, k, false, true, false);
                plan.scatter_weight(&wrows, g, gw.data_mut());
            }
            if let Some(gi) = gi.as_mut() {
                let wg = plan.gather_weight(weight.data(), g);
                matmul(&wg, &go, &mut cols, k, plan.og, ncols, true, false, false);
                plan.col2im(&cols, g, gi.data_mut());
            }
        }
    }
    Conv2dGrads {
        input: gi,
        weight: gw,
        bias: gb,
    }
}

/// Source index pairs and weights for doubling one axis with half-pixel
/// centers. A length-1 axis replicates.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear 2x spatial upsampling (align-corners off).
pub fn bilinear_upsample2x<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.h == 0 || s.w == 0 {
        return Err(TensorError::Invalid {
            op: "bilinear_upsample2x",
            reason: format!("empty spatial extent in {s}"),
        });
    }
    let ty = upsample_taps(s.h);
    let tx = upsample_taps(s.w);
    let os = Shape4::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let mut out = Tensor::zeros(os);
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..s.n * s.c {
        let sp = &src[plane * s.plane()..][..s.plane()];
        let dp = &mut dst[plane * os.plane()..][..os.plane()];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(1.0 - fy), T::from_f64(fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64(1.0 - fx), T::from_f64(fx));
                let top = sp[y0 * s.w + x0] * wx0 + sp[y0 * s.w + x1] * wx1;
                let bot = sp[y1 * s.w + x0] * wx0 + sp[y1 * s.w + x1] * wx1;
                dp[oy * os.w + ox] = top * wy0 + bot * wy1;
            }
        }
    }
    Ok(out)
}

pub fn bilinear_upsample2x_backward<T: Scalar>(in_shape: Shape4, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = in_shape;
    let os = grad_out.shape();
    let ty = upsample_taps(s.h);
    let tx = upsample_taps(s.w);
    let mut gin = Tensor::zeros(s);
    let g = grad_out.data();
    let d = gin.data_mut();
    for plane in 0..s.n * s.c {
        let gp = &g[plane * os.plane()..][..os.plane()];
        let dp = &mut d[plane * s.plane()..][..s.plane()];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(1.0 - fy), T::from_f64(fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64(1.0 - fx), T::from_f64(fx));
                let v = gp[oy * os.w + ox];
                dp[y0 * s.w + x0] += v * wy0 * wx0;
                dp[y0 * s.w + x1] += v * wy0 * wx1;
                dp[y1 * s.w + x0] += v * wy1 * wx0;
                dp[y1 * s.w + x1] += v * wy1 * wx1;
            }
        }
    }
    gin
}

pub fn leaky_relu<T: Scalar>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|x| if x >= T::ZERO { x } else { slope * x })
}

/// Uses `slope` as the derivative at exactly zero.
pub fn leaky_relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>, slope: T) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::ZERO { g } else { slope * g })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("shape preserved")
}

/// Concatenate along channels, `a` first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels",
            expected: Shape4::new(sa.n, sb.c, sa.h, sa.w),
            got: sb,
        });
    }
    let os = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(os.numel());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * sa.item()..][..sa.item()]);
        data.extend_from_slice(&b.data()[n * sb.item()..][..sb.item()]);
    }
    Tensor::from_vec(os, data)
}

pub fn split_channels<T: Scalar>(grad: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let s = grad.shape();
    (
        grad.channel_slice(0, ca).expect("channel split in range"),
        grad.channel_slice(ca, s.c - ca).expect("channel split in range"),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

pub fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, kind: Elementwise) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "elementwise",
            expected: a.shape(),
            got: b.shape(),
        });
    }
    let f = match kind {
        Elementwise::Add => |x: T, y: T| x + y,
        Elementwise::Sub => |x: T, y: T| x - y,
        Elementwise::Mul => |x: T, y: T| x * y,
    };
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

pub fn reduce<T: Scalar>(input: &Tensor<T>, kind: Reduce) -> Tensor<T> {
    let s = input.sum();
    match kind {
        Reduce::Sum => Tensor::scalar(s),
        Reduce::Mean => Tensor::scalar(s / T::from_f64(input.len().max(1) as f64)),
    }
}
