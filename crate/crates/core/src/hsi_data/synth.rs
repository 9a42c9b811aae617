//! Synthetic scenes from a linear mixing model.
//!
//! Each pixel is a convex combination of smooth endmember spectra, scaled by
//! a smooth shading field. Abundances are a softmax over spatially blurred
//! Gaussian fields, so they are non-negative and sum to one everywhere.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use hsics_tensor::{Shape4, Tensor};

use super::HsiCube;
use crate::error::{Error, Result};
use crate::substream;

const MIN_ANGLE_DEG: f64 = 5.0;

/// Library of max-normalized, non-negative material spectra.
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberLib {
    spectra: Vec<Vec<f32>>,
}

fn angle_deg(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

impl EndmemberLib {
    pub fn generate(k: usize, bands: usize, rng: &mut impl Rng) -> Result<Self> {
        if k == 0 || bands < 2 {
            return Err(Error::Data(format!("need k >= 1 and bands >= 2, got k={k} bands={bands}")));
        }
        let mut spectra: Vec<Vec<f32>> = Vec::with_capacity(k);
        let mut attempts = 0;
        while spectra.len() < k {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Data(format!(
                    "could not draw {k} spectra {MIN_ANGLE_DEG} degrees apart over {bands} bands"
                )));
            }
            let s = random_spectrum(bands, rng);
            if spectra.iter().all(|o| angle_deg(o, &s) >= MIN_ANGLE_DEG) {
                spectra.push(s);
            }
        }
        Ok(Self { spectra })
    }

    pub fn len(&self) -> usize {
        self.spectra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectra.is_empty()
    }

    pub fn bands(&self) -> usize {
        self.spectra[0].len()
    }

    pub fn spectrum(&self, k: usize) -> &[f32] {
        &self.spectra[k]
    }

    pub fn min_pairwise_angle_deg(&self) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                m = m.min(angle_deg(&self.spectra[i], &self.spectra[j]));
            }
        }
        m
    }
}

/// Baseline plus a tilt plus a few Gaussian absorption/reflection bumps.
fn random_spectrum(bands: usize, rng: &mut impl Rng) -> Vec<f32> {
    let base = rng.random_range(0.05..0.35);
    let tilt = rng.random_range(-0.3..0.5);
    let bumps: Vec<(f64, f64, f64)> = (0..rng.random_range(2..=4))
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.04..0.25),
                rng.random_range(-0.25..1.0),
            )
        })
        .collect();
    let raw: Vec<f64> = (0..bands)
        .map(|b| {
            let t = b as f64 / (bands - 1) as f64;
            let v = base
                + tilt * t
                + bumps
                    .iter()
                    .map(|(c, w, a)| a * (-0.5 * ((t - c) / w).powi(2)).exp())
                    .sum::<f64>();
            v.max(0.01)
        })
        .collect();
    let max = raw.iter().cloned().fold(0.0, f64::max);
    raw.iter().map(|v| (v / max) as f32).collect()
}

/// Generator settings shared by every cube in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub endmembers: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    /// Blur width of the abundance fields as a fraction of the smaller side.
    pub smoothness: f64,
    /// Softmax inverse temperature; larger gives purer regions.
    pub sharpness: f64,
    pub native_scale: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            endmembers: 6,
            bands: 32,
            height: 64,
            width: 64,
            smoothness: 0.08,
            sharpness: 2.5,
            native_scale: 10_000.0,
        }
    }
}

/// A synthetic cube together with the abundance maps that produced it.
#[derive(Debug, Clone)]
pub struct Scene {
    pub cube: HsiCube,
    /// `K` maps of `H * W` values.
    pub abundances: Vec<Vec<f32>>,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamped borders.
fn blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    kv * field[y * w + xx]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    kv * tmp[yy * w + x]
                })
                .sum();
        }
    }
    out
}

/// Blurred white noise rescaled to zero mean and unit deviation.
fn smooth_field(h: usize, w: usize, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let noise: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let f = blur(&noise, h, w, sigma);
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    f.into_iter().map(|v| (v - mean) / sd).collect()
}

impl Scene {
    /// Mix `lib` over an `height x width` grid.
    pub fn generate(lib: &EndmemberLib, params: &SceneParams, rng: &mut impl Rng) -> Result<Self> {
        let (h, w, bands) = (params.height, params.width, lib.bands());
        if h == 0 || w == 0 {
            return Err(Error::Data("scene must have a non-empty spatial grid".into()));
        }
        let sigma = (params.smoothness * h.min(w) as f64).max(0.5);
        let k = lib.len();
        let fields: Vec<Vec<f64>> = (0..k).map(|_| smooth_field(h, w, sigma, rng)).collect();
        let shading_field = smooth_field(h, w, sigma * 2.0, rng);

        let mut abundances = vec![vec![0.0f32; h * w]; k];
        let mut shading = vec![0.0f64; h * w];
        for p in 0..h * w {
            let logits: Vec<f64> = fields.iter().map(|f| params.sharpness * f[p]).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (a, ev) in abundances.iter_mut().zip(&e) {
                a[p] = (ev / z) as f32;
            }
            shading[p] = 0.75 + 0.2 * shading_field[p].tanh();
        }

        let data = Tensor::from_fn(Shape4::new(1, bands, h, w), |_, b, y, x| {
            let p = y * w + x;
            let mix: f64 = (0..k)
                .map(|kk| abundances[kk][p] as f64 * lib.spectrum(kk)[b] as f64)
                .sum();
            (shading[p] * mix).clamp(0.0, 1.0) as f32
        });
        Ok(Self {
            cube: HsiCube::new(data, params.native_scale)?,
            abundances,
        })
    }
}

/// Standalone scene with its own `k`-material library, deterministic in `seed`.
pub fn synth_scene(k: usize, bands: usize, height: usize, width: usize, seed: u64) -> Result<Scene> {
    if k < 1 {
        return Err(Error::Data("need at least one endmember".into()));
    }
    let params = SceneParams {
        endmembers: k,
        bands,
        height,
        width,
        ..SceneParams::default()
    };
    let lib = EndmemberLib::generate(k, bands, &mut substream(seed, 0))?;
    Scene::generate(&lib, &params, &mut substream(seed, 1))
}
