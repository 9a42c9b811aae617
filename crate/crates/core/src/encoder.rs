//! The measurement operator: one bias-free strided convolution `Z = Psi X`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use hsics_tensor::ops::{conv2d, conv_out_len};
use hsics_tensor::{Conv2dParams, ParamId, ParamStore, Scalar, Shape4, Tape, Tensor, Var};

use crate::error::{Error, Result};

pub const KERNEL_H: usize = 9;
pub const KERNEL_W: usize = 1;
/// Largest measurement matrix `as_measurement_matrix` will materialize.
pub const MAX_MATRIX_ENTRIES: usize = 100_000_000;
const RATE_BOUNDARY: f64 = 0.01;

/// Geometry of the encoder for one stripe shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub bands: usize,
    pub stripe_h: usize,
    pub stripe_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    /// Output channels.
    pub b: usize,
    pub h: usize,
    pub w: usize,
    /// Requested sampling rate, if the config was derived from one.
    pub target_rate: Option<f64>,
}

impl EncoderConfig {
    /// An arbitrary single-convolution encoder; output extents follow from the geometry.
    pub fn explicit(
        bands: usize,
        stripe: (usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        b: usize,
    ) -> Result<Self> {
        if bands == 0 || b == 0 || stripe.0 == 0 || stripe.1 == 0 {
            return Err(Error::config("enc", "bands, output channels and stripe extents must be >= 1"));
        }
        let h = conv_out_len(stripe.0, kernel.0, stride.0, padding.0);
        let w = conv_out_len(stripe.1, kernel.1, stride.1, padding.1);
        let (Some(h), Some(w)) = (h, w) else {
            return Err(Error::config(
                "enc",
                format!("kernel {}x{} does not fit stripe {}x{} with padding {:?}", kernel.0, kernel.1, stripe.0, stripe.1, padding),
            ));
        };
        Ok(Self {
            bands,
            stripe_h: stripe.0,
            stripe_w: stripe.1,
            k_h: kernel.0,
            k_w: kernel.1,
            stride,
            padding,
            b,
            h,
            w,
            target_rate: None,
        })
    }

    pub fn conv_params(&self) -> Conv2dParams {
        Conv2dParams::new(self.stride, self.padding, 1)
    }

    pub fn weight_shape(&self) -> Shape4 {
        Shape4::new(self.b, self.bands, self.k_h, self.k_w)
    }

    pub fn stripe_shape(&self, n: usize) -> Shape4 {
        Shape4::new(n, self.bands, self.stripe_h, self.stripe_w)
    }

    pub fn measurement_shape(&self, n: usize) -> Shape4 {
        Shape4::new(n, self.b, self.h, self.w)
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().numel()
    }

    /// `(b h w) / (B H_s W_s)`.
    pub fn achieved_rate(&self) -> f64 {
        (self.b * self.h * self.w) as f64 / (self.bands * self.stripe_h * self.stripe_w) as f64
    }

    /// Multiply-accumulates per stripe: `b B k_h k_w h w`.
    pub fn mac_count(&self) -> u64 {
        [self.b, self.bands, self.k_h, self.k_w, self.h, self.w]
            .iter()
            .map(|&v| v as u64)
            .product()
    }

    /// Spatial reduction factor `(H_s W_s) / (h w)` rounded to the nearest integer.
    pub fn spatial_reduction(&self) -> usize {
        ((self.stripe_h * self.stripe_w) as f64 / (self.h * self.w) as f64).round() as usize
    }

    /// The integer path accumulates `255 * 127 * B k_h k_w` at most.
    pub fn int8_accumulator_bound(&self) -> u64 {
        255 * 127 * (self.bands * self.k_h * self.k_w) as u64
    }

    pub fn check_int8(&self) -> Result<()> {
        let bound = self.int8_accumulator_bound();
        if bound >= 1 << 31 {
            return Err(Error::config(
                "enc",
                format!("int8 accumulator bound {bound} does not fit in i32"),
            ));
        }
        Ok(())
    }
}

/// Derive the encoder geometry for a target sampling rate.
///
/// Rates up to 1% use stride 4 in both axes (1/16 spatial reduction) with
/// `b = floor(B s_r 16)`; higher rates use stride 2 with `b = floor(B s_r 4)`.
/// Row padding is `(k_h - 1) / 2`, giving `h = ceil(H_s / s_h)`.
pub fn shape_for_rate(bands: usize, stripe_h: usize, stripe_w: usize, s_r: f64) -> Result<EncoderConfig> {
    if !(s_r > 0.0 && s_r <= 0.25) {
        return Err(Error::config("enc.rate", format!("sampling rate {s_r} outside (0, 0.25]")));
    }
    let (stride, reduction) = if s_r <= RATE_BOUNDARY + 1e-12 { (4, 16.0) } else { (2, 4.0) };
    let b = (bands as f64 * s_r * reduction + 1e-9).floor() as usize;
    if b == 0 {
        return Err(Error::config(
            "enc.rate",
            format!("sampling rate {s_r} leaves no measurement channels for {bands} bands"),
        ));
    }
    let mut cfg = EncoderConfig::explicit(
        bands,
        (stripe_h, stripe_w),
        (KERNEL_H, KERNEL_W),
        (stride, stride),
        ((KERNEL_H - 1) / 2, 0),
        b,
    )?;
    cfg.target_rate = Some(s_r);
    Ok(cfg)
}

/// Cost of forming the `(W_s H_s)^2 B` Gram matrix that a
/// covariance-based competitor needs per stripe.
pub fn gram_cost(stripe_h: usize, stripe_w: usize, bands: usize) -> u64 {
    let p = (stripe_h * stripe_w) as u64;
    p * p * bands as u64
}

/// I.i.d. Gaussian weights with variance `1 / (B k_h k_w)`.
pub fn init_weights(cfg: &EncoderConfig, rng: &mut impl Rng) -> Tensor<f32> {
    let fan_in = (cfg.bands * cfg.k_h * cfg.k_w) as f64;
    let normal = Normal::new(0.0, fan_in.recip().sqrt()).expect("positive deviation");
    Tensor::from_fn(cfg.weight_shape(), |_, _, _, _| normal.sample(rng) as f32)
}

fn check_inputs<T: Scalar>(stripe: &Tensor<T>, weights: &Tensor<T>, cfg: &EncoderConfig) -> Result<()> {
    let s = stripe.shape();
    if s.c != cfg.bands || s.h != cfg.stripe_h || s.w != cfg.stripe_w {
        return Err(Error::Data(format!(
            "stripe {s} does not match encoder input {}x{}x{}",
            cfg.bands, cfg.stripe_h, cfg.stripe_w
        )));
    }
    if weights.shape() != cfg.weight_shape() {
        return Err(Error::Data(format!(
            "encoder weights {} do not match {}",
            weights.shape(),
            cfg.weight_shape()
        )));
    }
    Ok(())
}

/// `Z = conv(X, Psi)` for a batch of stripes shaped `(n, B, H_s, W_s)`.
pub fn encode<T: Scalar>(stripe: &Tensor<T>, weights: &Tensor<T>, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    check_inputs(stripe, weights, cfg)?;
    Ok(conv2d(stripe, weights, None, cfg.conv_params())?)
}

/// Record the encoder on a tape.
pub fn encode_on_tape<T: Scalar>(tape: &mut Tape<T>, stripe: Var, weights: Var, cfg: &EncoderConfig) -> Result<Var> {
    Ok(tape.conv2d(stripe, weights, None, cfg.conv_params())?)
}

/// Dense `Psi` with `b h w` rows and `B H_s W_s` columns.
///
/// Row `(o, y, x)` holds the taps of output `o` at `(y, x)` placed on the
/// input voxels they touch; taps that land in the zero padding are dropped.
pub fn as_measurement_matrix(weights: &Tensor<f32>, cfg: &EncoderConfig) -> Result<DMatrix<f64>> {
    if weights.shape() != cfg.weight_shape() {
        return Err(Error::Data(format!("encoder weights {} do not match {}", weights.shape(), cfg.weight_shape())));
    }
    let rows = cfg.b * cfg.h * cfg.w;
    let cols = cfg.bands * cfg.stripe_h * cfg.stripe_w;
    if rows.checked_mul(cols).is_none_or(|n| n > MAX_MATRIX_ENTRIES) {
        return Err(Error::Data(format!(
            "measurement matrix {rows}x{cols} exceeds {MAX_MATRIX_ENTRIES} entries"
        )));
    }
    let mut psi = DMatrix::<f64>::zeros(rows, cols);
    let (ph, pw) = (cfg.padding.0 as isize, cfg.padding.1 as isize);
    for o in 0..cfg.b {
        for y in 0..cfg.h {
            for x in 0..cfg.w {
                let r = (o * cfg.h + y) * cfg.w + x;
                for c in 0..cfg.bands {
                    for i in 0..cfg.k_h {
                        let yy = (y * cfg.stride.0) as isize + i as isize - ph;
                        if yy < 0 || yy >= cfg.stripe_h as isize {
                            continue;
                        }
                        for j in 0..cfg.k_w {
                            let xx = (x * cfg.stride.1) as isize + j as isize - pw;
                            if xx < 0 || xx >= cfg.stripe_w as isize {
                                continue;
                            }
                            let col = (c * cfg.stripe_h + yy as usize) * cfg.stripe_w + xx as usize;
                            psi[(r, col)] = weights.at(o, c, i, j) as f64;
                        }
                    }
                }
            }
        }
    }
    Ok(psi)
}

/// Per-tensor symmetric int8 encoder weights with zero point 0.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedEncoder {
    pub shape: Shape4,
    pub codes: Vec<i8>,
    pub scale: f32,
}

/// Post-training quantization: `scale = max|w| / 127`, or 1 when all weights are zero.
pub fn quantize_pq(weights: &Tensor<f32>) -> Result<QuantizedEncoder> {
    if !weights.all_finite() {
        return Err(Error::Numerical("cannot quantize non-finite encoder weights".into()));
    }
    let max = weights.max_abs();
    let scale = if max == 0.0 { 1.0 } else { max / 127.0 };
    let codes = weights
        .data()
        .iter()
        .map(|w| (w / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    Ok(QuantizedEncoder { shape: weights.shape(), codes, scale })
}

impl QuantizedEncoder {
    pub fn dequantize(&self) -> Tensor<f32> {
        let data = self.codes.iter().map(|&q| q as f32 * self.scale).collect();
        Tensor::from_vec(self.shape, data).expect("codes match their shape")
    }
}

/// Quantize then dequantize with the scale taken from the current weights.
pub fn fake_quantize(weights: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(quantize_pq(weights)?.dequantize())
}

/// Signal-to-quantization-noise ratio in dB; infinite for an exact copy.
pub fn sqnr_db(reference: &Tensor<f32>, approx: &Tensor<f32>) -> f64 {
    let (mut sig, mut err) = (0.0f64, 0.0f64);
    for (&a, &b) in reference.data().iter().zip(approx.data()) {
        sig += (a as f64).powi(2);
        err += (a as f64 - b as f64).powi(2);
    }
    if err == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (sig / err).log10()
    }
}

/// Training-mode encoder: the forward pass sees PQ-dequantized weights, the
/// gradient reaches the float parameter `id` unchanged.
pub fn qat_forward(
    tape: &mut Tape<f32>,
    stripe: Var,
    store: &ParamStore<f32>,
    id: ParamId,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let fq = fake_quantize(&store.get(id).value)?;
    let w = tape.param_with_value(id, fq);
    encode_on_tape(tape, stripe, w, cfg)
}

/// Reflectance `[0, 1]` to `u8` with scale `1/255`.
pub fn quantize_input(x: f32) -> u8 {
    (x * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Integer accumulators of the int8 encoder for a batch of stripes, shaped
/// like the float measurements.
pub fn int8_accumulate(stripe: &Tensor<f32>, q: &QuantizedEncoder, cfg: &EncoderConfig) -> Result<Vec<i32>> {
    cfg.check_int8()?;
    let s = stripe.shape();
    if s.c != cfg.bands || s.h != cfg.stripe_h || s.w != cfg.stripe_w || q.shape != cfg.weight_shape() {
        return Err(Error::Data(format!(
            "int8 encoder expects stripes 1x{}x{}x{} and weights {}, got {s} and {}",
            cfg.bands, cfg.stripe_h, cfg.stripe_w, cfg.weight_shape(), q.shape
        )));
    }
    let xq: Vec<i32> = stripe.data().iter().map(|&v| quantize_input(v) as i32).collect();
    let out_shape = cfg.measurement_shape(s.n);
    let mut acc = vec![0i32; out_shape.numel()];
    let (ph, pw) = (cfg.padding.0 as isize, cfg.padding.1 as isize);
    for n in 0..s.n {
        for o in 0..cfg.b {
            for y in 0..cfg.h {
                for x in 0..cfg.w {
                    let mut sum = 0i32;
                    for c in 0..cfg.bands {
                        for i in 0..cfg.k_h {
                            let yy = (y * cfg.stride.0) as isize + i as isize - ph;
                            if yy < 0 || yy >= s.h as isize {
                                continue;
                            }
                            for j in 0..cfg.k_w {
                                let xx = (x * cfg.stride.1) as isize + j as isize - pw;
                                if xx < 0 || xx >= s.w as isize {
                                    continue;
                                }
                                let wq = q.codes[((o * cfg.bands + c) * cfg.k_h + i) * cfg.k_w + j] as i32;
                                sum += wq * xq[s.offset(n, c, yy as usize, xx as usize)];
                            }
                        }
                    }
                    acc[out_shape.offset(n, o, y, x)] = sum;
                }
            }
        }
    }
    Ok(acc)
}

/// Int8 encoder output dequantized by `scale_w / 255`.
pub fn encode_int8(stripe: &Tensor<f32>, q: &QuantizedEncoder, cfg: &EncoderConfig) -> Result<Tensor<f32>> {
    let acc = int8_accumulate(stripe, q, cfg)?;
    let k = q.scale as f64 / 255.0;
    let data = acc.iter().map(|&a| (a as f64 * k) as f32).collect();
    Ok(Tensor::from_vec(cfg.measurement_shape(stripe.shape().n), data)?)
}
