use std::fs;
use std::io::BufWriter;
use std::path::Path;

use super::HsiCube;
use crate::error::{Error, Result};

pub const DEFAULT_FALSE_COLOR_BANDS: [usize; 3] = [13, 25, 61];

/// Interleaved 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

/// Render three bands as RGB, each min-max stretched on its own.
/// A band with zero range renders as 0.
pub fn false_color(cube: &HsiCube, bands: [usize; 3]) -> Result<RgbImage> {
    if let Some(b) = bands.iter().find(|&&b| b >= cube.bands()) {
        return Err(Error::Data(format!(
            "false-color band {b} out of range for a {}-band cube",
            cube.bands()
        )));
    }
    let (h, w) = (cube.height(), cube.width());
    let mut pixels = vec![0u8; h * w * 3];
    for (ch, &band) in bands.iter().enumerate() {
        let plane = &cube.tensor().data()[band * h * w..(band + 1) * h * w];
        let lo = plane.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = plane.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        for (p, v) in plane.iter().enumerate() {
            pixels[p * 3 + ch] = ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(RgbImage { height: h, width: w, pixels })
}

impl RgbImage {
    /// Side-by-side concatenation with a `gap`-pixel black separator.
    pub fn hconcat(images: &[RgbImage], gap: usize) -> Result<RgbImage> {
        let h = images.first().map_or(0, |i| i.height);
        if images.iter().any(|i| i.height != h) {
            return Err(Error::Data("images to concatenate differ in height".into()));
        }
        let width = images.iter().map(|i| i.width).sum::<usize>() + gap * images.len().saturating_sub(1);
        let mut pixels = vec![0u8; h * width * 3];
        let mut x0 = 0;
        for img in images {
            for y in 0..h {
                let src = &img.pixels[y * img.width * 3..(y + 1) * img.width * 3];
                let dst = (y * width + x0) * 3;
                pixels[dst..dst + src.len()].copy_from_slice(src);
            }
            x0 += img.width + gap;
        }
        Ok(RgbImage { height: h, width, pixels })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png header: {e}")))?;
        writer
            .write_image_data(&self.pixels)
            .map_err(|e| Error::Format(format!("png data: {e}")))?;
        writer.finish().map_err(|e| Error::Format(format!("png finish: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hsics_tensor::{Shape4, Tensor};

    #[test]
    fn constant_cube_is_black() {
        let cube = HsiCube::new(Tensor::full(Shape4::new(1, 4, 3, 2), 0.4), 1.0).unwrap();
        let img = false_color(&cube, [0, 1, 3]).unwrap();
        assert_eq!((img.height, img.width, img.pixels.len()), (3, 2, 18));
        assert!(img.pixels.iter().all(|&p| p == 0));
    }

    #[test]
    fn default_bands_pick_their_planes() {
        let cube = HsiCube::new(
            Tensor::from_fn(Shape4::new(1, 172, 2, 2), |_, c, y, x| {
                if [13, 25, 61].contains(&c) {
                    ((y * 2 + x) as f32) / 3.0
                } else {
                    0.5
                }
            }),
            1.0,
        )
        .unwrap();
        let img = false_color(&cube, DEFAULT_FALSE_COLOR_BANDS).unwrap();
        assert_eq!(img.pixels, vec![0, 0, 0, 85, 85, 85, 170, 170, 170, 255, 255, 255]);
        assert!(false_color(&cube, [0, 1, 172]).is_err());
    }

    #[test]
    fn png_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage { height: 2, width: 3, pixels: (0..18).map(|v| v * 10).collect() };
        let both = RgbImage::hconcat(&[img.clone(), img], 1).unwrap();
        assert_eq!(both.width, 7);
        let p = dir.path().join("a.png");
        both.save_png(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}
