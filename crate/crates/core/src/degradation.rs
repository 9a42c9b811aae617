//! Stripe-effect masks and channel noise.
//!
//! Masks act on the sensor side (applied to a cube or stripe before encoding),
//! noise acts on the transmitted measurements.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use hsics_tensor::{Shape4, Tensor};

use crate::error::{Error, Result};
use crate::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskKind {
    /// Random cross-track lines lost across a band range.
    Pm,
    /// Every second detector element (cross-track row) lost across a band range.
    Bm,
    /// Everything lost across a band range.
    Cm,
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::Pm => "PM",
            MaskKind::Bm => "BM",
            MaskKind::Cm => "CM",
        })
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PM" => Ok(MaskKind::Pm),
            "BM" => Ok(MaskKind::Bm),
            "CM" => Ok(MaskKind::Cm),
            _ => Err(Error::config("mask.kind", format!("unknown mask kind {s:?} (PM, BM, CM)"))),
        }
    }
}

/// Fraction of rows dropped by a PM mask inside its band range.
pub const PM_ROW_DENSITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// Inclusive.
    pub band_lo: usize,
    /// Inclusive.
    pub band_hi: usize,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(kind: MaskKind, band_lo: usize, band_hi: usize, seed: u64) -> Result<Self> {
        if band_lo > band_hi {
            return Err(Error::config(
                "mask.bands",
                format!("band range {band_lo}-{band_hi} is reversed"),
            ));
        }
        Ok(Self { kind, band_lo, band_hi, seed })
    }

    pub fn band_count(&self) -> usize {
        self.band_hi - self.band_lo + 1
    }
}

/// Training-time mask statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskStats {
    /// Probability that a sample is masked at all.
    pub p_affect: f64,
    /// Upper bound on the masked band span as a fraction of `B`.
    pub max_band_frac: f64,
}

impl Default for MaskStats {
    fn default() -> Self {
        Self { p_affect: 0.2, max_band_frac: 0.2 }
    }
}

impl MaskStats {
    pub fn max_span(&self, bands: usize) -> usize {
        (self.max_band_frac * bands as f64 + 1e-9).floor() as usize
    }
}

/// Binary presence mask shaped `(1, B, H, W)`: 1 = present, 0 = missing.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    bits: Tensor<f32>,
}

impl Mask {
    pub fn ones(bands: usize, h: usize, w: usize) -> Self {
        Self { bits: Tensor::ones(Shape4::new(1, bands, h, w)) }
    }

    /// Wrap an existing `(1, B, H, W)` tensor of zeros and ones.
    pub fn from_bits(bits: Tensor<f32>) -> Result<Self> {
        if bits.shape().n != 1 {
            return Err(Error::Data(format!("mask must have batch 1, got {}", bits.shape())));
        }
        if let Some(v) = bits.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("mask values must be 0 or 1, found {v}")));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &Tensor<f32> {
        &self.bits
    }

    pub fn zero_count(&self) -> usize {
        self.bits.data().iter().filter(|&&v| v == 0.0).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        self.zero_count() as f64 / self.bits.len() as f64
    }

    /// Restrict to columns `[x0, x0 + w)`, e.g. one stripe of a cube-sized mask.
    pub fn columns(&self, x0: usize, w: usize) -> Result<Mask> {
        let s = self.bits.shape();
        if x0 + w > s.w {
            return Err(Error::Data(format!("columns {x0}..{} outside mask width {}", x0 + w, s.w)));
        }
        Ok(Mask { bits: Tensor::from_fn(Shape4::new(1, s.c, s.h, w), |_, c, y, x| self.bits.at(0, c, y, x0 + x)) })
    }
}

pub fn gen_mask(spec: &MaskSpec, bands: usize, h: usize, w: usize) -> Result<Mask> {
    if spec.band_hi >= bands {
        return Err(Error::config(
            "mask.bands",
            format!("band {} out of range for {bands} bands", spec.band_hi),
        ));
    }
    let mut rng = substream(spec.seed, 0);
    let dropped_rows: Vec<bool> = match spec.kind {
        MaskKind::Pm => (0..h).map(|_| rng.random_bool(PM_ROW_DENSITY)).collect(),
        _ => vec![true; h],
    };
    let mut bits = Tensor::ones(Shape4::new(1, bands, h, w));
    for c in spec.band_lo..=spec.band_hi {
        for y in 0..h {
            for x in 0..w {
                let missing = match spec.kind {
                    MaskKind::Pm => dropped_rows[y],
                    MaskKind::Bm => y % 2 == 1,
                    MaskKind::Cm => true,
                };
                if missing {
                    *bits.at_mut(0, c, y, x) = 0.0;
                }
            }
        }
    }
    Ok(Mask { bits })
}

/// With probability `p_affect` draw a PM or CM spec over a random contiguous band run.
pub fn draw_training_mask(bands: usize, stats: &MaskStats, rng: &mut impl Rng) -> Option<MaskSpec> {
    if !rng.random_bool(stats.p_affect.clamp(0.0, 1.0)) {
        return None;
    }
    let kind = if rng.random_bool(0.5) { MaskKind::Pm } else { MaskKind::Cm };
    let span = stats.max_span(bands);
    let len = if span == 0 { 0 } else { rng.random_range(1..=span) };
    let lo = rng.random_range(0..=bands - len.max(1));
    let seed = rng.random();
    (len > 0).then(|| MaskSpec { kind, band_lo: lo, band_hi: lo + len - 1, seed })
}

pub fn apply_mask(x: &Tensor<f32>, m: &Mask) -> Result<Tensor<f32>> {
    let (xs, ms) = (x.shape(), m.bits.shape());
    if (xs.c, xs.h, xs.w) != (ms.c, ms.h, ms.w) {
        return Err(Error::Data(format!("mask shape {ms} does not match data {xs}")));
    }
    let item = ms.item();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= m.bits.data()[i % item];
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// `f64::INFINITY` means no noise.
    pub snr_db: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(snr_db: f64, seed: u64) -> Result<Self> {
        if !(snr_db > 0.0) {
            return Err(Error::config("noise.snr_db", format!("SNR must be positive, got {snr_db}")));
        }
        Ok(Self { snr_db, seed })
    }
}

/// Add white Gaussian noise at `snr_db` relative to the mean power of each
/// batch item separately.
pub fn add_awgn_with(z: &Tensor<f32>, snr_db: f64, rng: &mut impl Rng) -> Tensor<f32> {
    let mut out = z.clone();
    if snr_db.is_infinite() {
        return out;
    }
    let item = z.shape().item();
    for chunk in out.data_mut().chunks_mut(item.max(1)) {
        let p = chunk.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / chunk.len() as f64;
        let sigma = (p / 10f64.powf(snr_db / 10.0)).sqrt();
        for v in chunk.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v = (*v as f64 + sigma * n) as f32;
        }
    }
    out
}

pub fn add_awgn(z: &Tensor<f32>, spec: &NoiseSpec) -> Tensor<f32> {
    add_awgn_with(z, spec.snr_db, &mut substream(spec.seed, 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(b: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(Shape4::new(1, b, h, w), |_, c, y, x| 0.1 + ((c + 2 * y + 3 * x) % 11) as f32 / 20.0)
    }

    #[test]
    fn cm_counts_exactly() {
        let m = gen_mask(&MaskSpec::new(MaskKind::Cm, 50, 80, 1).unwrap(), 172, 16, 4).unwrap();
        assert_eq!(m.zero_count(), 31 * 16 * 4);
        assert!((m.missing_fraction() - 31.0 / 172.0).abs() < 1e-12);
        for c in 0..172 {
            let plane = &m.bits().data()[c * 64..(c + 1) * 64];
            let expect = if (50..=80).contains(&c) { 0.0 } else { 1.0 };
            assert!(plane.iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn bm_drops_odd_detector_rows() {
        let m = gen_mask(&MaskSpec::new(MaskKind::Bm, 2, 4, 0).unwrap(), 8, 5, 4).unwrap();
        assert_eq!(m.zero_count(), 3 * 2 * 4);
        assert_eq!(m.bits().at(0, 3, 1, 2), 0.0);
        assert_eq!(m.bits().at(0, 3, 3, 0), 0.0);
        assert_eq!(m.bits().at(0, 3, 2, 1), 1.0);
        assert_eq!(m.bits().at(0, 5, 1, 2), 1.0);
    }

    #[test]
    fn pm_is_row_structured_and_seeded() {
        let spec = MaskSpec::new(MaskKind::Pm, 1, 3, 42).unwrap();
        let a = gen_mask(&spec, 6, 64, 4).unwrap();
        assert_eq!(a, gen_mask(&spec, 6, 64, 4).unwrap());
        for y in 0..64 {
            let v = a.bits().at(0, 1, y, 0);
            for c in 1..=3 {
                for x in 0..4 {
                    assert_eq!(a.bits().at(0, c, y, x), v);
                }
            }
        }
        assert_eq!(a.zero_count() % 12, 0);
        let other = gen_mask(&MaskSpec { seed: 43, ..spec }, 6, 64, 4).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn reversed_or_out_of_range_bands_rejected() {
        assert!(MaskSpec::new(MaskKind::Cm, 5, 4, 0).is_err());
        let spec = MaskSpec::new(MaskKind::Cm, 5, 8, 0).unwrap();
        assert!(gen_mask(&spec, 8, 2, 2).is_err());
    }

    #[test]
    fn zero_span_stats_never_mask() {
        let stats = MaskStats { p_affect: 1.0, max_band_frac: 0.0 };
        let mut rng = substream(1, 1);
        assert!((0..100).all(|_| draw_training_mask(32, &stats, &mut rng).is_none()));
    }

    #[test]
    fn apply_mask_algebra() {
        let x = ramp(6, 4, 4);
        assert_eq!(apply_mask(&x, &Mask::ones(6, 4, 4)).unwrap(), x);
        let zero = Mask { bits: Tensor::zeros(Shape4::new(1, 6, 4, 4)) };
        assert!(apply_mask(&x, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        let m = gen_mask(&MaskSpec::new(MaskKind::Pm, 0, 2, 3).unwrap(), 6, 4, 4).unwrap();
        let once = apply_mask(&x, &m).unwrap();
        assert_eq!(apply_mask(&once, &m).unwrap(), once);
        assert!(apply_mask(&x, &Mask::ones(5, 4, 4)).is_err());
    }

    #[test]
    fn masks_broadcast_over_batch() {
        let x = Tensor::<f32>::stack(&[ramp(4, 2, 2), ramp(4, 2, 2)]).unwrap();
        let m = gen_mask(&MaskSpec::new(MaskKind::Cm, 1, 1, 0).unwrap(), 4, 2, 2).unwrap();
        let y = apply_mask(&x, &m).unwrap();
        assert_eq!(y.at(1, 1, 1, 1), 0.0);
        assert_eq!(y.at(1, 2, 1, 1), x.at(1, 2, 1, 1));
    }

    #[test]
    fn column_restriction() {
        let m = gen_mask(&MaskSpec::new(MaskKind::Pm, 0, 3, 7).unwrap(), 4, 6, 8).unwrap();
        let s = m.columns(4, 4).unwrap();
        assert_eq!(s.bits().shape(), Shape4::new(1, 4, 6, 4));
        for c in 0..4 {
            for y in 0..6 {
                for x in 0..4 {
                    assert_eq!(s.bits().at(0, c, y, x), m.bits().at(0, c, y, x + 4));
                }
            }
        }
        assert!(m.columns(6, 4).is_err());
    }

    #[test]
    fn infinite_snr_is_identity() {
        let z = ramp(3, 4, 4);
        assert_eq!(add_awgn(&z, &NoiseSpec::new(f64::INFINITY, 0).unwrap()), z);
        assert!(NoiseSpec::new(0.0, 0).is_err());
        assert!(NoiseSpec::new(-5.0, 0).is_err());
    }

    #[test]
    fn awgn_hits_target_snr() {
        let z = ramp(10, 40, 40);
        let spec = NoiseSpec::new(30.0, 9).unwrap();
        let noisy = add_awgn(&z, &spec);
        assert_eq!(noisy, add_awgn(&z, &spec));
        let p_sig: f64 = z.data().iter().map(|v| (*v as f64).powi(2)).sum();
        let p_noise: f64 = noisy.data().iter().zip(z.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        let snr = 10.0 * (p_sig / p_noise).log10();
        assert!((snr - 30.0).abs() < 0.5, "{snr}");
    }
}
