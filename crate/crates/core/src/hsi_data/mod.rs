//! Hyperspectral cubes, pushbroom stripes and their on-disk forms.

mod color;
mod dataset;
mod io;
mod synth;

pub use color::{false_color, RgbImage, DEFAULT_FALSE_COLOR_BANDS};
pub use dataset::{CubeEntry, Dataset, DatasetManifest, Split, MANIFEST_FILE};
pub use io::{load_cube, read_cube, save_cube, write_cube, CUBE_MAGIC, CUBE_VERSION};
pub use synth::{synth_scene, EndmemberLib, Scene, SceneParams};

use hsics_tensor::{Shape4, Tensor};

use crate::error::{Error, Result};

/// A `B x H x W` reflectance cube in band-sequential order, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    data: Tensor<f32>,
    native_scale: f64,
}

impl HsiCube {
    /// `data` must be shaped `(1, B, H, W)`.
    pub fn new(data: Tensor<f32>, native_scale: f64) -> Result<Self> {
        let s = data.shape();
        if s.n != 1 {
            return Err(Error::Data(format!("cube tensor must have batch 1, got {s}")));
        }
        if s.c < 3 {
            return Err(Error::Data(format!("cube needs at least 3 bands, got {}", s.c)));
        }
        if s.h == 0 || s.w == 0 {
            return Err(Error::Data(format!("empty cube {s}")));
        }
        if !(native_scale > 0.0 && native_scale.is_finite()) {
            return Err(Error::Data(format!("native scale must be positive, got {native_scale}")));
        }
        if let Some(v) = data.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("cube value {v} outside [0, 1]")));
        }
        Ok(Self { data, native_scale })
    }

    pub fn bands(&self) -> usize {
        self.data.shape().c
    }

    pub fn height(&self) -> usize {
        self.data.shape().h
    }

    pub fn width(&self) -> usize {
        self.data.shape().w
    }

    pub fn native_scale(&self) -> f64 {
        self.native_scale
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, band: usize, y: usize, x: usize) -> f32 {
        self.data.at(0, band, y, x)
    }
}

/// One pushbroom stripe: all bands, all rows, `stripe_w` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Stripe {
    pub index: usize,
    /// `(1, B, H, stripe_w)`
    pub data: Tensor<f32>,
}

/// Ordered width-wise partition of a cube.
#[derive(Debug, Clone, PartialEq)]
pub struct StripeSet {
    pub source: String,
    pub native_scale: f64,
    pub stripes: Vec<Stripe>,
}

/// Cut a cube into consecutive `stripe_w`-column stripes.
pub fn pushbroom_stripes(cube: &HsiCube, stripe_w: usize, source: &str) -> Result<StripeSet> {
    let (b, h, w) = (cube.bands(), cube.height(), cube.width());
    if stripe_w == 0 || w % stripe_w != 0 {
        return Err(Error::Data(format!(
            "cube width {w} is not divisible by stripe width {stripe_w}"
        )));
    }
    let stripes = (0..w / stripe_w)
        .map(|j| Stripe {
            index: j,
            data: Tensor::from_fn(Shape4::new(1, b, h, stripe_w), |_, c, y, x| {
                cube.at(c, y, j * stripe_w + x)
            }),
        })
        .collect();
    Ok(StripeSet {
        source: source.to_string(),
        native_scale: cube.native_scale(),
        stripes,
    })
}

/// Concatenate stripes along the width axis in index order.
pub fn reassemble(set: &StripeSet) -> Result<HsiCube> {
    let mut order: Vec<&Stripe> = set.stripes.iter().collect();
    order.sort_by_key(|s| s.index);
    let first = order.first().ok_or_else(|| Error::Data("no stripes to reassemble".into()))?;
    let s0 = first.data.shape();
    for (expected, s) in order.iter().enumerate() {
        if s.index != expected {
            return Err(Error::Data(format!(
                "stripe index {expected} missing (found {} instead)",
                s.index
            )));
        }
        if s.data.shape() != s0 {
            return Err(Error::Data(format!(
                "stripe {} has shape {}, expected {s0}",
                s.index,
                s.data.shape()
            )));
        }
    }
    let sw = s0.w;
    let data = Tensor::from_fn(Shape4::new(1, s0.c, s0.h, sw * order.len()), |_, c, y, x| {
        order[x / sw].data.at(0, c, y, x % sw)
    });
    HsiCube::new(data, set.native_scale)
}
