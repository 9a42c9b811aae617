//! `RTCZ` bitstream: the measurements of every stripe of one cube.

use std::fs;
use std::path::Path;

use hsics_tensor::{Shape4, Tensor};

use crate::error::{Error, Result};

pub const BITSTREAM_MAGIC: &[u8; 4] = b"RTCZ";
pub const BITSTREAM_VERSION: u32 = 1;
pub const FILE_HEADER_BYTES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    /// Symmetric codes; the value is `code * scale`.
    I8 { codes: Vec<i8>, scale: f64 },
}

/// One stripe's measurements `Z` of shape `(b, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedStripe {
    pub index: u32,
    pub b: u32,
    pub h: u32,
    pub w: u32,
    pub payload: Payload,
}

impl CompressedStripe {
    /// Store `z` (shape `(1, b, h, w)`) as f32.
    pub fn from_f32(index: usize, z: &Tensor<f32>) -> Self {
        let s = z.shape();
        Self { index: index as u32, b: s.c as u32, h: s.h as u32, w: s.w as u32, payload: Payload::F32(z.data().to_vec()) }
    }

    /// Store `z` as int8 with a per-stripe symmetric scale `max|z| / 127`.
    pub fn from_f32_quantized(index: usize, z: &Tensor<f32>) -> Self {
        let s = z.shape();
        let max = z.max_abs() as f64;
        let scale = if max == 0.0 { 1.0 } else { max / 127.0 };
        let codes = z
            .data()
            .iter()
            .map(|&v| (v as f64 / scale).round().clamp(-127.0, 127.0) as i8)
            .collect();
        Self { index: index as u32, b: s.c as u32, h: s.h as u32, w: s.w as u32, payload: Payload::I8 { codes, scale } }
    }

    pub fn shape(&self) -> Shape4 {
        Shape4::new(1, self.b as usize, self.h as usize, self.w as usize)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = match &self.payload {
            Payload::F32(v) => v.clone(),
            Payload::I8 { codes, scale } => codes.iter().map(|&c| (c as f64 * scale) as f32).collect(),
        };
        Tensor::from_vec(self.shape(), data).expect("payload length checked on construction")
    }

    pub fn payload_bytes(&self) -> usize {
        match &self.payload {
            Payload::F32(v) => 4 * v.len(),
            Payload::I8 { codes, .. } => codes.len(),
        }
    }

    pub fn header_bytes(&self) -> usize {
        17 + matches!(self.payload, Payload::I8 { .. }) as usize * 8
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Bitstream {
    pub stripes: Vec<CompressedStripe>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(BITSTREAM_MAGIC);
        b.extend_from_slice(&BITSTREAM_VERSION.to_le_bytes());
        for s in &self.stripes {
            for v in [s.index, s.b, s.h, s.w] {
                b.extend_from_slice(&v.to_le_bytes());
            }
            match &s.payload {
                Payload::F32(v) => {
                    b.push(0);
                    v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes()));
                }
                Payload::I8 { codes, scale } => {
                    b.push(1);
                    b.extend_from_slice(&scale.to_le_bytes());
                    b.extend(codes.iter().map(|&c| c as u8));
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FILE_HEADER_BYTES || &bytes[..4] != BITSTREAM_MAGIC {
            return Err(Error::Format("not a bitstream: bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != BITSTREAM_VERSION {
            return Err(Error::Format(format!(
                "unsupported bitstream version {version}, expected {BITSTREAM_VERSION}"
            )));
        }
        let mut pos = FILE_HEADER_BYTES;
        let mut stripes = Vec::new();
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format(format!(
                    "truncated bitstream: need {n} bytes at offset {}, have {}",
                    *pos,
                    bytes.len() - *pos
                )));
            }
            *pos += n;
            Ok(&bytes[*pos - n..*pos])
        };
        while pos < bytes.len() {
            let head = take(&mut pos, 17)?;
            let u = |i: usize| u32::from_le_bytes(head[4 * i..4 * i + 4].try_into().unwrap());
            let (index, b, h, w) = (u(0), u(1), u(2), u(3));
            let n = (b as usize)
                .checked_mul(h as usize)
                .and_then(|v| v.checked_mul(w as usize))
                .ok_or_else(|| Error::Format("stripe dims overflow".into()))?;
            let payload = match head[16] {
                0 => Payload::F32(
                    take(&mut pos, 4 * n)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => {
                    let scale = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
                    let codes = take(&mut pos, n)?.iter().map(|&c| c as i8).collect();
                    Payload::I8 { codes, scale }
                }
                d => return Err(Error::Format(format!("stripe {index} has unknown dtype {d}"))),
            };
            stripes.push(CompressedStripe { index, b, h, w, payload });
        }
        Ok(Self { stripes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn payload_bytes(&self) -> usize {
        self.stripes.iter().map(|s| s.payload_bytes()).sum()
    }
}
