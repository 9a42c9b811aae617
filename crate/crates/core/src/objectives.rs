//! Reconstruction losses and quality metrics.
//!
//! Losses are computed in f64 regardless of the tensor precision. Spectral
//! vectors run along the channel axis, one per `(item, row, column)`.

use hsics_tensor::{CustomOp, Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};

pub const SAM_EPS: f64 = 1e-8;
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the spectral-angle term.
    pub alpha: f64,
    pub eps: f64,
    /// Supervise the masked branch against the masked input instead of the full cube.
    pub literal_masked_target: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.1, eps: SAM_EPS, literal_masked_target: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("loss.alpha", format!("must be a finite value >= 0, got {}", self.alpha)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("loss.eps", format!("must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Data(format!("{what}: shapes {} and {} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute error over all voxels.
pub fn l1_loss<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape(x, y, "l1_loss")?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a.to_f64() - b.to_f64()).abs()).sum();
    Ok(s / x.len() as f64)
}

/// Clipped cosine of one spectral pair and its raw (unclipped) value.
fn cosine(dot: f64, nx: f64, ny: f64, eps: f64) -> (f64, f64) {
    let raw = (dot + eps) / (nx * ny + eps);
    (raw.clamp(-1.0, 1.0), raw)
}

/// Per-pixel spectral angles in radians, item-major.
fn angles<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, eps: f64) -> Vec<f64> {
    let s = x.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let base = n * s.item();
        for p in 0..plane {
            let (mut dot, mut xx, mut yy) = (0.0, 0.0, 0.0);
            for c in 0..s.c {
                let a = x.data()[base + c * plane + p].to_f64();
                let b = y.data()[base + c * plane + p].to_f64();
                dot += a * b;
                xx += a * a;
                yy += b * b;
            }
            out.push(cosine(dot, xx.sqrt(), yy.sqrt(), eps).0.acos());
        }
    }
    out
}

/// Mean spectral angle in radians.
pub fn sam_loss<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, eps: f64) -> Result<f64> {
    same_shape(x, y, "sam_loss")?;
    let a = angles(x, y, eps);
    Ok(a.iter().sum::<f64>() / a.len() as f64)
}

pub fn total_loss<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    let l1 = l1_loss(x, y)?;
    if cfg.alpha == 0.0 {
        return Ok(l1);
    }
    Ok(l1 + cfg.alpha * sam_loss(x, y, cfg.eps)?)
}

/// Clean-branch total loss plus the masked-branch loss against `x`
/// (or against `x * mask` when `literal_masked_target` is set).
pub fn aug_loss<T: Scalar>(
    x: &Tensor<T>,
    clean: &Tensor<T>,
    masked: &Tensor<T>,
    mask: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<f64> {
    same_shape(x, mask, "aug_loss mask")?;
    let target = if cfg.literal_masked_target {
        hsics_tensor::ops::elementwise(x, mask, hsics_tensor::Elementwise::Mul)?
    } else {
        x.clone()
    };
    Ok(total_loss(x, clean, cfg)? + total_loss(&target, masked, cfg)?)
}

pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape(x, y, "psnr")?;
    Ok(psnr_from_rms(rms(x, y)))
}

fn rms<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> f64 {
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a.to_f64() - b.to_f64()).powi(2)).sum();
    (s / x.len() as f64).sqrt()
}

fn psnr_from_rms(rms: f64) -> f64 {
    if rms == 0.0 {
        PSNR_CAP_DB
    } else {
        (-20.0 * rms.log10()).min(PSNR_CAP_DB)
    }
}

pub fn rmse<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, native_scale: f64) -> Result<f64> {
    same_shape(x, y, "rmse")?;
    Ok(rms(x, y) * native_scale)
}

/// Mean spectral angle in degrees.
pub fn sam_metric<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> f64 {
    sam_loss(x, y, SAM_EPS).expect("sam_metric needs equal shapes").to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub psnr: f64,
    pub rmse: f64,
    pub sam: f64,
}

impl MetricsReport {
    pub fn compute<T: Scalar>(truth: &Tensor<T>, recon: &Tensor<T>, native_scale: f64) -> Result<Self> {
        same_shape(truth, recon, "metrics")?;
        let r = rms(truth, recon);
        Ok(Self { psnr: psnr_from_rms(r), rmse: r * native_scale, sam: sam_metric(truth, recon) })
    }

    pub fn mean(rows: &[MetricsReport]) -> Option<Self> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some(Self {
            psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            rmse: rows.iter().map(|r| r.rmse).sum::<f64>() / n,
            sam: rows.iter().map(|r| r.sam).sum::<f64>() / n,
        })
    }
}

fn item_weights(n: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0 / n as f64; n]),
        Some(w) if w.len() == n => Ok(w.to_vec()),
        Some(w) => Err(Error::Data(format!("{} loss weights for a batch of {n}", w.len()))),
    }
}

struct WeightedL1 {
    /// Per-item weight divided by the item size.
    coef: Vec<f64>,
    item: usize,
}

impl<T: Scalar> CustomOp<T> for WeightedL1 {
    fn name(&self) -> &'static str {
        "l1_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let g = g.data()[0].to_f64();
        let (a, b) = (inputs[0], inputs[1]);
        let mut ga = Tensor::zeros(a.shape());
        for (i, v) in ga.data_mut().iter_mut().enumerate() {
            let d = a.data()[i].to_f64() - b.data()[i].to_f64();
            let s = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
            *v = T::from_f64(g * s * self.coef[i / self.item]);
        }
        let gb = ga.map(|v| T::ZERO - v);
        vec![Some(ga), Some(gb)]
    }
}

/// `sum_n w_n * mean |a_n - b_n|`; plain mean over items when `weights` is `None`.
pub fn l1_loss_var<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, weights: Option<&[f64]>) -> Result<Var> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    same_shape(ta, tb, "l1_loss")?;
    let s = ta.shape();
    let coef: Vec<f64> = item_weights(s.n, weights)?.iter().map(|w| w / s.item() as f64).collect();
    let mut total = 0.0;
    for (i, (x, y)) in ta.data().iter().zip(tb.data()).enumerate() {
        total += coef[i / s.item()] * (x.to_f64() - y.to_f64()).abs();
    }
    let rule = WeightedL1 { coef, item: s.item() };
    Ok(tape.custom(&[a, b], Tensor::scalar(T::from_f64(total)), Box::new(rule))?)
}

struct WeightedSam {
    /// Per-item weight divided by the pixel count.
    coef: Vec<f64>,
    eps: f64,
}

/// Gradient of `acos(t(x, y))` with respect to `y`.
fn angle_grad_y(x: &[f64], y: &[f64], eps: f64, out: &mut [f64]) {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|b| b * b).sum::<f64>().sqrt();
    let (t, raw) = cosine(dot, nx, ny, eps);
    let denom = 1.0 - t * t;
    if raw.abs() >= 1.0 || denom < 1e-14 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let dacos = -1.0 / denom.sqrt();
    let (num, den) = (dot + eps, nx * ny + eps);
    for (k, o) in out.iter_mut().enumerate() {
        let dn = if ny > 0.0 { nx * y[k] / ny } else { 0.0 };
        *o = dacos * (x[k] / den - num * dn / (den * den));
    }
}

impl<T: Scalar> CustomOp<T> for WeightedSam {
    fn name(&self) -> &'static str {
        "sam_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let g = g.data()[0].to_f64();
        let (a, b) = (inputs[0], inputs[1]);
        let s = a.shape();
        let plane = s.plane();
        let mut ga = Tensor::zeros(s);
        let mut gb = Tensor::zeros(s);
        let (mut va, mut vb) = (vec![0.0; s.c], vec![0.0; s.c]);
        let (mut da, mut db) = (vec![0.0; s.c], vec![0.0; s.c]);
        for n in 0..s.n {
            let base = n * s.item();
            let k = g * self.coef[n];
            for p in 0..plane {
                for c in 0..s.c {
                    va[c] = a.data()[base + c * plane + p].to_f64();
                    vb[c] = b.data()[base + c * plane + p].to_f64();
                }
                angle_grad_y(&vb, &va, self.eps, &mut da);
                angle_grad_y(&va, &vb, self.eps, &mut db);
                for c in 0..s.c {
                    ga.data_mut()[base + c * plane + p] = T::from_f64(k * da[c]);
                    gb.data_mut()[base + c * plane + p] = T::from_f64(k * db[c]);
                }
            }
        }
        vec![Some(ga), Some(gb)]
    }
}

/// `sum_n w_n * mean_pixels angle(a_n, b_n)` in radians.
pub fn sam_loss_var<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, eps: f64, weights: Option<&[f64]>) -> Result<Var> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    same_shape(ta, tb, "sam_loss")?;
    let s = ta.shape();
    let coef: Vec<f64> = item_weights(s.n, weights)?.iter().map(|w| w / s.plane() as f64).collect();
    let per_pixel = angles(ta, tb, eps);
    let total: f64 = per_pixel.iter().enumerate().map(|(i, v)| coef[i / s.plane()] * v).sum();
    let rule = WeightedSam { coef, eps };
    Ok(tape.custom(&[a, b], Tensor::scalar(T::from_f64(total)), Box::new(rule))?)
}

/// `l1 + alpha * sam` on the tape with optional per-item weights.
pub fn total_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    cfg: &LossConfig,
    weights: Option<&[f64]>,
) -> Result<Var> {
    let l1 = l1_loss_var(tape, pred, target, weights)?;
    if cfg.alpha == 0.0 {
        return Ok(l1);
    }
    let sam = sam_loss_var(tape, pred, target, cfg.eps, weights)?;
    let sam = tape.scale(sam, T::from_f64(cfg.alpha))?;
    Ok(tape.add(l1, sam)?)
}
