//! Two-branch decoder.
//!
//! Both branches start from a 3x3 stem on the measurements. The narrow-kernel
//! branch stacks bottleneck-growth blocks; the wide-kernel branch stacks
//! residual dense blocks whose last layer is a grouped 9x9 convolution. The
//! branches are summed, upsampled by bilinear doubling plus a 3x3 conv per
//! stage, and mapped to the output bands by a final 3x3 conv.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use hsics_tensor::{Conv2dParams, ParamId, ParamStore, Scalar, Shape4, Tape, Tensor, Var, LEAKY_SLOPE};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

pub const K_IMFA: usize = 3;
pub const K_FRDB: usize = 9;
pub const BASE_BLOCKS_PER_BLOCK: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    /// Blocks per branch.
    pub n_f: usize,
    /// Width of the 3x3 branch.
    pub n_base: usize,
    /// Bottleneck growth channels in the 3x3 branch.
    pub c_s: usize,
    /// Width of the 9x9 branch, also the fused width.
    pub frdb_width: usize,
    /// Growth channels of each dense layer in the 9x9 branch.
    pub frdb_growth: usize,
    /// Groups of the last 9x9 layer in each dense block.
    pub c_g: usize,
    pub b_out: usize,
}

impl DecoderConfig {
    pub fn desk(b_out: usize) -> Self {
        Self { n_f: 2, n_base: 16, c_s: 16, frdb_width: 24, frdb_growth: 4, c_g: 4, b_out }
    }

    pub fn full(b_out: usize) -> Self {
        Self { n_f: 8, n_base: 64, c_s: 16, frdb_width: 96, frdb_growth: 4, c_g: 4, b_out }
    }

    pub fn fuse_width(&self) -> usize {
        self.frdb_width
    }

    /// Channels entering the grouped layer of a dense block.
    pub fn frdb_stack(&self) -> usize {
        self.frdb_width + 2 * self.frdb_growth
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dec.n_base", self.n_base),
            ("dec.c_s", self.c_s),
            ("dec.frdb_width", self.frdb_width),
            ("dec.frdb_growth", self.frdb_growth),
            ("dec.c_g", self.c_g),
            ("dec.b_out", self.b_out),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*k, "must be >= 1"));
        }
        if self.frdb_width % self.c_g != 0 || self.frdb_stack() % self.c_g != 0 {
            return Err(Error::config(
                "dec.c_g",
                format!(
                    "{} groups must divide both the branch width {} and the dense stack {}",
                    self.c_g,
                    self.frdb_width,
                    self.frdb_stack()
                ),
            ));
        }
        Ok(())
    }
}

/// Doubling stages that bring the measurement grid back to the stripe grid.
pub fn upsample_stages(enc: &EncoderConfig) -> Result<usize> {
    let stages = match enc.stride {
        (2, 2) => 1,
        (4, 4) => 2,
        s => {
            return Err(Error::config(
                "enc",
                format!("decoder supports encoder strides (2,2) and (4,4), got {s:?}"),
            ))
        }
    };
    if enc.h << stages != enc.stripe_h || enc.w << stages != enc.stripe_w {
        return Err(Error::config(
            "data.stripe",
            format!(
                "measurement grid {}x{} upsampled {} times does not give the stripe {}x{}",
                enc.h, enc.w, stages, enc.stripe_h, enc.stripe_w
            ),
        ));
    }
    Ok(stages)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub params: Conv2dParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImfaBase {
    pub squeeze: Conv,
    pub fuse: Conv,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrdbBase {
    pub grow1: Conv,
    pub grow2: Conv,
    pub fuse: Conv,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsfNet {
    pub cfg: DecoderConfig,
    pub b_in: usize,
    pub stem_imfa: Conv,
    pub stem_frdb: Conv,
    pub imfa_blocks: Vec<[ImfaBase; BASE_BLOCKS_PER_BLOCK]>,
    pub frdb_blocks: Vec<[FrdbBase; BASE_BLOCKS_PER_BLOCK]>,
    pub f_u: Conv,
    pub upsamplers: Vec<Conv>,
    pub f_rec: Conv,
}

/// How weights are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Followed by a leaky ReLU.
    He,
    /// Linear output.
    Lecun,
}

struct Builder<'a, T: Scalar, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, groups: usize, init: Init) -> Conv {
        let fan_in = (cin / groups * k * k) as f64;
        let gain = match init {
            Init::He => 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE),
            Init::Lecun => 1.0,
        };
        let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive deviation");
        let shape = Shape4::new(cout, cin / groups, k, k);
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(shape, |_, _, _, _| T::from_f64(normal.sample(rng)));
        let weight = self.store.add(format!("{name}.w"), w);
        let bias = self.store.add(format!("{name}.b"), Tensor::zeros(Shape4::new(1, cout, 1, 1)));
        Conv { weight, bias, params: Conv2dParams::same(k).with_groups(groups) }
    }
}

/// Closed-form weight plus bias count of one conv layer.
fn conv_params(cin: usize, cout: usize, k: usize, groups: usize) -> usize {
    cout * (cin / groups) * k * k + cout
}

/// Decoder parameters only.
pub fn decoder_param_count(cfg: &DecoderConfig, b_in: usize, stages: usize) -> usize {
    let (nb, fw, g) = (cfg.n_base, cfg.frdb_width, cfg.frdb_growth);
    let imfa_base = conv_params(nb, cfg.c_s, K_IMFA, 1) + conv_params(nb + cfg.c_s, nb, 1, 1);
    let frdb_base = conv_params(fw, g, K_FRDB, 1)
        + conv_params(fw + g, g, K_FRDB, 1)
        + conv_params(cfg.frdb_stack(), fw, K_FRDB, cfg.c_g);
    conv_params(b_in, nb, 3, 1)
        + conv_params(b_in, fw, 3, 1)
        + cfg.n_f * BASE_BLOCKS_PER_BLOCK * (imfa_base + frdb_base)
        + conv_params(nb, cfg.fuse_width(), 1, 1)
        + stages * conv_params(cfg.fuse_width(), cfg.fuse_width(), 3, 1)
        + conv_params(cfg.fuse_width(), cfg.b_out, 3, 1)
}

/// Encoder weights plus decoder parameters.
pub fn param_count(cfg: &DecoderConfig, enc: &EncoderConfig) -> Result<usize> {
    Ok(enc.weight_count() + decoder_param_count(cfg, enc.b, upsample_stages(enc)?))
}

/// Where a parameter comes from when recording a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// Parameters receive gradients.
    Train,
    /// Parameters are constants.
    Infer,
}

struct Fwd<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    binding: Binding,
}

impl<T: Scalar> Fwd<'_, T> {
    fn bind(&mut self, id: ParamId) -> Var {
        match self.binding {
            Binding::Train => self.tape.param(self.store, id),
            Binding::Infer => self.tape.constant(self.store.get(id).value.clone()),
        }
    }

    fn conv(&mut self, c: &Conv, x: Var) -> Result<Var> {
        let w = self.bind(c.weight);
        let b = self.bind(c.bias);
        Ok(self.tape.conv2d(x, w, Some(b), c.params)?)
    }

    fn act(&mut self, x: Var) -> Result<Var> {
        Ok(self.tape.leaky_relu(x, T::from_f64(LEAKY_SLOPE))?)
    }

    fn imfa_base(&mut self, blk: &ImfaBase, x: Var) -> Result<Var> {
        let a = self.act(x)?;
        let s = self.conv(&blk.squeeze, a)?;
        let cat = self.tape.concat_channels(x, s)?;
        self.conv(&blk.fuse, cat)
    }

    fn frdb_base(&mut self, blk: &FrdbBase, x: Var) -> Result<Var> {
        let g1 = self.conv(&blk.grow1, x)?;
        let f1 = self.act(g1)?;
        let s1 = self.tape.concat_channels(x, f1)?;
        let g2 = self.conv(&blk.grow2, s1)?;
        let f2 = self.act(g2)?;
        let s2 = self.tape.concat_channels(s1, f2)?;
        self.conv(&blk.fuse, s2)
    }
}

impl CsfNet {
    /// Register every decoder parameter in `store`.
    pub fn build<T: Scalar>(
        cfg: DecoderConfig,
        enc: &EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let stages = upsample_stages(enc)?;
        let (b_in, nb, fw) = (enc.b, cfg.n_base, cfg.frdb_width);
        let mut bld = Builder { store, rng };
        let stem_imfa = bld.conv("stem_imfa", b_in, nb, 3, 1, Init::Lecun);
        let stem_frdb = bld.conv("stem_frdb", b_in, fw, 3, 1, Init::Lecun);
        let imfa_blocks = (0..cfg.n_f)
            .map(|i| {
                std::array::from_fn(|j| ImfaBase {
                    squeeze: bld.conv(&format!("imfa.{i}.{j}.squeeze"), nb, cfg.c_s, K_IMFA, 1, Init::He),
                    fuse: bld.conv(&format!("imfa.{i}.{j}.fuse"), nb + cfg.c_s, nb, 1, 1, Init::Lecun),
                })
            })
            .collect();
        let frdb_blocks = (0..cfg.n_f)
            .map(|i| {
                std::array::from_fn(|j| FrdbBase {
                    grow1: bld.conv(&format!("frdb.{i}.{j}.grow1"), fw, cfg.frdb_growth, K_FRDB, 1, Init::He),
                    grow2: bld.conv(
                        &format!("frdb.{i}.{j}.grow2"),
                        fw + cfg.frdb_growth,
                        cfg.frdb_growth,
                        K_FRDB,
                        1,
                        Init::He,
                    ),
                    fuse: bld.conv(&format!("frdb.{i}.{j}.fuse"), cfg.frdb_stack(), fw, K_FRDB, cfg.c_g, Init::Lecun),
                })
            })
            .collect();
        let f_u = bld.conv("f_u", nb, cfg.fuse_width(), 1, 1, Init::Lecun);
        let upsamplers = (0..stages)
            .map(|s| bld.conv(&format!("up.{s}"), cfg.fuse_width(), cfg.fuse_width(), 3, 1, Init::He))
            .collect();
        let f_rec = bld.conv("f_rec", cfg.fuse_width(), cfg.b_out, 3, 1, Init::Lecun);
        Ok(Self { cfg, b_in, stem_imfa, stem_frdb, imfa_blocks, frdb_blocks, f_u, upsamplers, f_rec })
    }

    pub fn convs(&self) -> Vec<&Conv> {
        let mut v = vec![&self.stem_imfa, &self.stem_frdb];
        for blk in &self.imfa_blocks {
            for b in blk {
                v.extend([&b.squeeze, &b.fuse]);
            }
        }
        for blk in &self.frdb_blocks {
            for b in blk {
                v.extend([&b.grow1, &b.grow2, &b.fuse]);
            }
        }
        v.push(&self.f_u);
        v.extend(self.upsamplers.iter());
        v.push(&self.f_rec);
        v
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.convs().iter().flat_map(|c| [c.weight, c.bias]).collect()
    }

    pub fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).numel()).sum()
    }

    /// Unclamped reconstruction of a batch of measurements `(n, b, h, w)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: Var,
        binding: Binding,
    ) -> Result<Var> {
        let zs = tape.shape(z);
        if zs.c != self.b_in {
            return Err(Error::Data(format!(
                "decoder expects {} measurement channels, got {}",
                self.b_in, zs.c
            )));
        }
        let mut f = Fwd { tape, store, binding };
        let mut a = f.conv(&self.stem_imfa, z)?;
        for blk in &self.imfa_blocks {
            let mut y = a;
            for base in blk {
                y = f.imfa_base(base, y)?;
            }
            a = f.tape.add(a, y)?;
        }
        let mut r = f.conv(&self.stem_frdb, z)?;
        for blk in &self.frdb_blocks {
            let mut y = r;
            for base in blk {
                y = f.frdb_base(base, y)?;
            }
            r = f.tape.add(r, y)?;
        }
        let u = f.conv(&self.f_u, a)?;
        let mut h = f.tape.add(u, r)?;
        for up in &self.upsamplers {
            let s = f.tape.bilinear_upsample2x(h)?;
            let c = f.conv(up, s)?;
            h = f.act(c)?;
        }
        f.conv(&self.f_rec, h)
    }

    /// Reconstruction clamped to `[0, 1]`.
    pub fn decode(&self, store: &ParamStore<f32>, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, store, zv, Binding::Infer)?;
        Ok(tape.value(out).map(|v| v.clamp(0.0, 1.0)))
    }
}

/// Record one 3x3-branch base block on its own, for isolated testing.
pub fn imfa_base_block<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    blk: &ImfaBase,
    x: Var,
    binding: Binding,
) -> Result<Var> {
    Fwd { tape, store, binding }.imfa_base(blk, x)
}

/// Record one dense base block on its own, for isolated testing.
pub fn frdb_base_block<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    blk: &FrdbBase,
    x: Var,
    binding: Binding,
) -> Result<Var> {
    Fwd { tape, store, binding }.frdb_base(blk, x)
}
