//! `HSIC` cube container: magic, version, dims, native scale, f32 LE BSQ payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use hsics_tensor::{Shape4, Tensor};

use super::HsiCube;
use crate::error::{Error, Result};

pub const CUBE_MAGIC: &[u8; 4] = b"HSIC";
pub const CUBE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 12 + 8;

pub fn write_cube(cube: &HsiCube, mut w: impl Write) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * cube.tensor().len());
    buf.extend_from_slice(CUBE_MAGIC);
    buf.extend_from_slice(&CUBE_VERSION.to_le_bytes());
    for d in [cube.bands(), cube.height(), cube.width()] {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.extend_from_slice(&cube.native_scale().to_le_bytes());
    for v in cube.tensor().data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_cube(mut r: impl Read) -> Result<HsiCube> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("cube file shorter than its magic".into()))?;
    if &magic != CUBE_MAGIC {
        return Err(Error::Format(format!(
            "bad cube magic {magic:?}, expected {:?}",
            CUBE_MAGIC
        )));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() < HEADER_LEN - 4 {
        return Err(Error::Format(format!(
            "truncated cube header: {} bytes, expected {}",
            rest.len() + 4,
            HEADER_LEN
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(rest[o..o + 4].try_into().unwrap());
    let version = u32_at(0);
    if version != CUBE_VERSION {
        return Err(Error::Format(format!(
            "unsupported cube version {version}, expected {CUBE_VERSION}"
        )));
    }
    let (b, h, w) = (u32_at(4) as usize, u32_at(8) as usize, u32_at(12) as usize);
    let scale = f64::from_le_bytes(rest[16..24].try_into().unwrap());
    let shape = Shape4::new(1, b, h, w);
    let count = shape
        .checked_numel()
        .ok_or_else(|| Error::Format(format!("cube dims {b}x{h}x{w} overflow")))?;
    let payload = &rest[HEADER_LEN - 4..];
    let expected = count * 4;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "cube payload is {} bytes, expected {expected} for {b}x{h}x{w}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    HsiCube::new(Tensor::from_vec(shape, data)?, scale)
}

pub fn save_cube(cube: &HsiCube, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write_cube(cube, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_cube(path: &Path) -> Result<HsiCube> {
    read_cube(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsi_data::synth_scene;

    fn bytes() -> (HsiCube, Vec<u8>) {
        let cube = synth_scene(3, 8, 5, 7, 11).unwrap().cube;
        let mut buf = Vec::new();
        write_cube(&cube, &mut buf).unwrap();
        (cube, buf)
    }

    #[test]
    fn round_trip_is_exact() {
        let (cube, buf) = bytes();
        assert_eq!(buf.len(), HEADER_LEN + 4 * 8 * 5 * 7);
        let back = read_cube(buf.as_slice()).unwrap();
        assert_eq!(back, cube);
        assert_eq!(back.native_scale().to_bits(), cube.native_scale().to_bits());
    }

    #[test]
    fn truncation_names_lengths() {
        let (_, buf) = bytes();
        let e = read_cube(&buf[..buf.len() - 3]).unwrap_err().to_string();
        assert!(e.contains("1117") && e.contains("1120"), "{e}");
        assert!(read_cube(&buf[..10]).is_err());
    }

    #[test]
    fn bad_magic_and_version() {
        let (_, mut buf) = bytes();
        buf[4] = 9;
        assert!(read_cube(buf.as_slice()).unwrap_err().to_string().contains("version"));
        buf[0] = b'X';
        assert!(read_cube(buf.as_slice()).unwrap_err().to_string().contains("magic"));
        assert!(read_cube(&b"XXXX"[..]).unwrap_err().to_string().contains("magic"));
    }
}
