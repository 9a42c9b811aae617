//! Compression round trips on whole cubes and scenario-based evaluation.

use std::fmt;
use std::str::FromStr;

use hsics_tensor::Tensor;

use crate::bitstream::{Bitstream, CompressedStripe};
use crate::degradation::{add_awgn_with, apply_mask, gen_mask, Mask, MaskKind, MaskSpec};
use crate::error::{Error, Result};
use crate::hsi_data::{pushbroom_stripes, reassemble, HsiCube, Stripe, StripeSet};
use crate::model::Model;
use crate::objectives::MetricsReport;
use crate::substream;

/// Stripes decoded per forward pass.
const DECODE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantMode {
    Pq,
    Qat,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scenario {
    Clean,
    Mask { kind: MaskKind, band_lo: usize, band_hi: usize },
    Noise { snr_db: f64 },
    Int8(QuantMode),
}

pub const SCENARIO_HELP: &str =
    "clean | mask:{PM,BM,CM}:LO-HI | noise:{25,30,35,40} | int8:{pq,qat}";

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("--scenario", format!("unknown scenario {s:?}; valid: {SCENARIO_HELP}"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["clean"] => Ok(Scenario::Clean),
            ["mask", kind, range] => {
                let kind: MaskKind = kind.parse().map_err(|_| bad())?;
                let (lo, hi) = range.split_once('-').ok_or_else(bad)?;
                let band_lo = lo.parse().map_err(|_| bad())?;
                let band_hi = hi.parse().map_err(|_| bad())?;
                if band_lo > band_hi {
                    return Err(bad());
                }
                Ok(Scenario::Mask { kind, band_lo, band_hi })
            }
            ["noise", snr] => {
                let snr_db: f64 = snr.parse().map_err(|_| bad())?;
                if !(snr_db > 0.0) {
                    return Err(bad());
                }
                Ok(Scenario::Noise { snr_db })
            }
            ["int8", "pq"] => Ok(Scenario::Int8(QuantMode::Pq)),
            ["int8", "qat"] => Ok(Scenario::Int8(QuantMode::Qat)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Clean => write!(f, "clean"),
            Scenario::Mask { kind, band_lo, band_hi } => write!(f, "mask:{kind}:{band_lo}-{band_hi}"),
            Scenario::Noise { snr_db } => write!(f, "noise:{snr_db}"),
            Scenario::Int8(QuantMode::Pq) => write!(f, "int8:pq"),
            Scenario::Int8(QuantMode::Qat) => write!(f, "int8:qat"),
        }
    }
}

/// Degradations applied on the way through the codec.
#[derive(Debug, Clone, Default)]
pub struct Degrade {
    /// Sensor-side mask over the whole cube.
    pub mask: Option<Mask>,
    /// Channel noise on the measurements, seeded per cube.
    pub noise: Option<(f64, u64)>,
    pub int8: bool,
}

fn stack_stripes(set: &StripeSet) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = set.stripes.iter().map(|s| s.data.clone()).collect();
    Ok(Tensor::stack(&parts)?)
}

/// Compress every stripe of `cube`.
pub fn encode_cube(model: &Model, cube: &HsiCube, int8: bool) -> Result<Bitstream> {
    let set = pushbroom_stripes(cube, model.enc.stripe_w, "")?;
    let x = stack_stripes(&set)?;
    let z = if int8 { model.encode_int8(&x)? } else { model.encode(&x)? };
    let stripes = (0..z.shape().n)
        .map(|i| {
            let zi = z.batch_slice(i, 1)?;
            Ok(if int8 { CompressedStripe::from_f32_quantized(i, &zi) } else { CompressedStripe::from_f32(i, &zi) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Bitstream { stripes })
}

fn measurements(model: &Model, bs: &Bitstream) -> Result<Tensor<f32>> {
    let want = model.enc.measurement_shape(1);
    let mut parts = Vec::with_capacity(bs.stripes.len());
    let mut ordered: Vec<&CompressedStripe> = bs.stripes.iter().collect();
    ordered.sort_by_key(|s| s.index);
    for s in ordered {
        if s.shape() != want {
            return Err(Error::Data(format!(
                "bitstream stripe {} has measurements {}, decoder expects {want}",
                s.index,
                s.shape()
            )));
        }
        parts.push(s.to_tensor());
    }
    if parts.is_empty() {
        return Err(Error::Data("bitstream holds no stripes".into()));
    }
    Ok(Tensor::stack(&parts)?)
}

fn reassemble_decoded(xhat: &Tensor<f32>, native_scale: f64) -> Result<HsiCube> {
    let stripes = (0..xhat.shape().n)
        .map(|i| Ok(Stripe { index: i, data: xhat.batch_slice(i, 1)? }))
        .collect::<Result<Vec<_>>>()?;
    reassemble(&StripeSet { source: String::new(), native_scale, stripes })
}

/// Reconstruct a cube from its bitstream.
pub fn decode_bitstream(model: &Model, bs: &Bitstream, native_scale: f64) -> Result<HsiCube> {
    let mut idx: Vec<u32> = bs.stripes.iter().map(|s| s.index).collect();
    idx.sort_unstable();
    if idx.iter().enumerate().any(|(i, &v)| v as usize != i) {
        return Err(Error::Data("bitstream stripe indices are not 0..n".into()));
    }
    let z = measurements(model, bs)?;
    let xhat = model.decode_batched(&z, DECODE_CHUNK)?;
    reassemble_decoded(&xhat, native_scale)
}

/// Degrade, compress, transmit and reconstruct one cube.
pub fn round_trip(model: &Model, cube: &HsiCube, d: &Degrade) -> Result<HsiCube> {
    let input = match &d.mask {
        Some(m) => HsiCube::new(apply_mask(cube.tensor(), m)?, cube.native_scale())?,
        None => cube.clone(),
    };
    let bs = encode_cube(model, &input, d.int8)?;
    let mut z = measurements(model, &bs)?;
    if let Some((snr, seed)) = d.noise {
        z = add_awgn_with(&z, snr, &mut substream(seed, 0));
    }
    let xhat = model.decode_batched(&z, DECODE_CHUNK)?;
    reassemble_decoded(&xhat, cube.native_scale())
}

/// Per-cube metrics of the reconstruction against the clean cube.
pub fn evaluate_cubes(
    model: &Model,
    cubes: &[(&str, &HsiCube)],
    degrade: &dyn Fn(usize) -> Result<Degrade>,
) -> Result<Vec<(String, MetricsReport)>> {
    cubes
        .iter()
        .enumerate()
        .map(|(i, (name, cube))| {
            let rec = round_trip(model, cube, &degrade(i)?)?;
            Ok((name.to_string(), MetricsReport::compute(cube.tensor(), rec.tensor(), cube.native_scale())?))
        })
        .collect()
}

/// How a scenario degrades cube `index`.
pub fn scenario_degrade(model: &Model, scenario: &Scenario, cube: &HsiCube, index: usize, seed: u64) -> Result<Degrade> {
    let key = substream_key(seed, index);
    Ok(match *scenario {
        Scenario::Clean => Degrade::default(),
        Scenario::Mask { kind, band_lo, band_hi } => {
            let spec = MaskSpec::new(kind, band_lo, band_hi, key)?;
            Degrade { mask: Some(gen_mask(&spec, cube.bands(), cube.height(), cube.width())?), ..Degrade::default() }
        }
        Scenario::Noise { snr_db } => Degrade { noise: Some((snr_db, key)), ..Degrade::default() },
        Scenario::Int8(QuantMode::Pq) => Degrade { int8: true, ..Degrade::default() },
        Scenario::Int8(QuantMode::Qat) => {
            if !model.qat {
                return Err(Error::Data("scenario int8:qat needs a checkpoint trained with train.qat".into()));
            }
            Degrade { int8: true, ..Degrade::default() }
        }
    })
}

/// Seed for cube `index`, identical across scenarios so noise levels share one realization.
fn substream_key(seed: u64, index: usize) -> u64 {
    use rand::Rng;
    substream(seed, index as u64).random()
}

pub const CSV_HEADER: &str = "scenario,cube,psnr,rmse,sam";

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub rows: Vec<(String, MetricsReport)>,
    pub mean: MetricsReport,
    /// Fraction of voxels a mask scenario removes.
    pub masked_fraction: Option<f64>,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for (name, m) in self.rows.iter().map(|(n, m)| (n.as_str(), m)).chain([("mean", &self.mean)]) {
            s.push_str(&format!("{},{},{},{},{}\n", self.scenario, name, m.psnr, m.rmse, m.sam));
        }
        s
    }
}

pub fn evaluate(model: &Model, cubes: &[(&str, &HsiCube)], scenario: &Scenario, seed: u64) -> Result<EvalReport> {
    if cubes.is_empty() {
        return Err(Error::Data("no cubes to evaluate".into()));
    }
    let degrades = cubes
        .iter()
        .enumerate()
        .map(|(i, (_, c))| scenario_degrade(model, scenario, c, i, seed))
        .collect::<Result<Vec<_>>>()?;
    let masked_fraction = degrades[0].mask.as_ref().map(Mask::missing_fraction);
    let rows = evaluate_cubes(model, cubes, &|i| Ok(degrades[i].clone()))?;
    let mean = MetricsReport::mean(&rows.iter().map(|r| r.1).collect::<Vec<_>>()).expect("non-empty");
    Ok(EvalReport { scenario: *scenario, rows, mean, masked_fraction })
}
