//! Run configuration: a flat `key = value` text format.
//!
//! Resolution order is profile defaults, then the file, then command-line
//! overrides. Unknown keys and invalid values are rejected naming the key.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use hsics_tensor::AdamWConfig;

use crate::decoder::{upsample_stages, DecoderConfig};
use crate::degradation::MaskStats;
use crate::encoder::{shape_for_rate, EncoderConfig};
use crate::error::{Error, Result};
use crate::hsi_data::SceneParams;
use crate::objectives::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            _ => Err(Error::config("profile", format!("unknown profile {s:?} (desk, full)"))),
        }
    }
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dir: String,
    pub seed: u64,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub endmembers: usize,
    pub smoothness: f64,
    pub sharpness: f64,
    pub native_scale: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub stripe_w: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch: usize,
    /// Random stripes drawn from each training cube per epoch.
    pub stripes_per_cube: usize,
    pub seed: u64,
    pub aug: bool,
    pub noise: bool,
    pub qat: bool,
    pub val_every: u64,
    pub checkpoint_every: u64,
    pub out: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub data: DataConfig,
    pub rate: f64,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub mask: MaskStats,
    pub noise_snr_db: f64,
    pub opt: AdamWConfig,
    pub train: TrainConfig,
    pub eval_seed: u64,
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        let desk = profile == Profile::Desk;
        let bands = if desk { 32 } else { 172 };
        Self {
            profile,
            data: DataConfig {
                dir: "data".into(),
                seed: 7,
                bands,
                height: if desk { 64 } else { 128 },
                width: if desk { 64 } else { 256 },
                endmembers: if desk { 6 } else { 12 },
                smoothness: 0.08,
                sharpness: 2.5,
                native_scale: 10_000.0,
                train: if desk { 40 } else { 1000 },
                val: if desk { 5 } else { 100 },
                test: if desk { 5 } else { 100 },
                stripe_w: 4,
            },
            rate: 0.01,
            decoder: if desk { DecoderConfig::desk(bands) } else { DecoderConfig::full(bands) },
            loss: LossConfig::default(),
            mask: MaskStats::default(),
            noise_snr_db: 30.0,
            // The desk run is a fifth as long, so it also halves five times.
            opt: AdamWConfig {
                lr: if desk { 1e-3 } else { 1e-4 },
                decay_every: if desk { 200 } else { 1000 },
                ..AdamWConfig::default()
            },
            train: TrainConfig {
                epochs: if desk { 1000 } else { 5000 },
                batch: 10,
                stripes_per_cube: 1,
                seed: 1,
                aug: true,
                noise: false,
                qat: false,
                val_every: 100,
                checkpoint_every: 100,
                out: "run".into(),
            },
            eval_seed: 99,
        }
    }

    /// Keys that control where and how long a run goes but not what it learns.
    pub const RUN_CONTROL_KEYS: &'static [&'static str] = &[
        "data.dir",
        "train.epochs",
        "train.val_every",
        "train.checkpoint_every",
        "train.out",
        "eval.seed",
    ];

    /// Every key with its canonical value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let t = &self.train;
        let dc = &self.decoder;
        vec![
            ("profile", self.profile.name().to_string()),
            ("data.dir", d.dir.clone()),
            ("data.seed", d.seed.to_string()),
            ("data.bands", d.bands.to_string()),
            ("data.height", d.height.to_string()),
            ("data.width", d.width.to_string()),
            ("data.endmembers", d.endmembers.to_string()),
            ("data.smoothness", d.smoothness.to_string()),
            ("data.sharpness", d.sharpness.to_string()),
            ("data.native_scale", d.native_scale.to_string()),
            ("data.train", d.train.to_string()),
            ("data.val", d.val.to_string()),
            ("data.test", d.test.to_string()),
            ("data.stripe_w", d.stripe_w.to_string()),
            ("enc.rate", self.rate.to_string()),
            ("dec.n_f", dc.n_f.to_string()),
            ("dec.n_base", dc.n_base.to_string()),
            ("dec.c_s", dc.c_s.to_string()),
            ("dec.frdb_width", dc.frdb_width.to_string()),
            ("dec.frdb_growth", dc.frdb_growth.to_string()),
            ("dec.c_g", dc.c_g.to_string()),
            ("loss.alpha", self.loss.alpha.to_string()),
            ("loss.eps", self.loss.eps.to_string()),
            ("loss.literal_masked_target", self.loss.literal_masked_target.to_string()),
            ("mask.p_affect", self.mask.p_affect.to_string()),
            ("mask.max_band_frac", self.mask.max_band_frac.to_string()),
            ("noise.snr_db", self.noise_snr_db.to_string()),
            ("opt.lr", self.opt.lr.to_string()),
            ("opt.beta1", self.opt.beta1.to_string()),
            ("opt.beta2", self.opt.beta2.to_string()),
            ("opt.eps", self.opt.eps.to_string()),
            ("opt.weight_decay", self.opt.weight_decay.to_string()),
            ("opt.decay_every", self.opt.decay_every.to_string()),
            ("opt.decay_factor", self.opt.decay_factor.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.stripes_per_cube", t.stripes_per_cube.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.aug", t.aug.to_string()),
            ("train.noise", t.noise.to_string()),
            ("train.qat", t.qat.to_string()),
            ("train.val_every", t.val_every.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.out", t.out.clone()),
            ("eval.seed", self.eval_seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
        }
        let v = value;
        match key {
            "profile" => {
                let prof: Profile = v.parse()?;
                if prof != self.profile {
                    return Err(Error::config(
                        "profile",
                        format!("file selects {v:?} but the run already resolved {:?}", self.profile.name()),
                    ));
                }
            }
            "data.dir" => self.data.dir = v.to_string(),
            "data.seed" => self.data.seed = p(key, v)?,
            "data.bands" => {
                self.data.bands = p(key, v)?;
                self.decoder.b_out = self.data.bands;
            }
            "data.height" => self.data.height = p(key, v)?,
            "data.width" => self.data.width = p(key, v)?,
            "data.endmembers" => self.data.endmembers = p(key, v)?,
            "data.smoothness" => self.data.smoothness = p(key, v)?,
            "data.sharpness" => self.data.sharpness = p(key, v)?,
            "data.native_scale" => self.data.native_scale = p(key, v)?,
            "data.train" => self.data.train = p(key, v)?,
            "data.val" => self.data.val = p(key, v)?,
            "data.test" => self.data.test = p(key, v)?,
            "data.stripe_w" => self.data.stripe_w = p(key, v)?,
            "enc.rate" => self.rate = p(key, v)?,
            "dec.n_f" => self.decoder.n_f = p(key, v)?,
            "dec.n_base" => self.decoder.n_base = p(key, v)?,
            "dec.c_s" => self.decoder.c_s = p(key, v)?,
            "dec.frdb_width" => self.decoder.frdb_width = p(key, v)?,
            "dec.frdb_growth" => self.decoder.frdb_growth = p(key, v)?,
            "dec.c_g" => self.decoder.c_g = p(key, v)?,
            "loss.alpha" => self.loss.alpha = p(key, v)?,
            "loss.eps" => self.loss.eps = p(key, v)?,
            "loss.literal_masked_target" => self.loss.literal_masked_target = p(key, v)?,
            "mask.p_affect" => self.mask.p_affect = p(key, v)?,
            "mask.max_band_frac" => self.mask.max_band_frac = p(key, v)?,
            "noise.snr_db" => self.noise_snr_db = p(key, v)?,
            "opt.lr" => self.opt.lr = p(key, v)?,
            "opt.beta1" => self.opt.beta1 = p(key, v)?,
            "opt.beta2" => self.opt.beta2 = p(key, v)?,
            "opt.eps" => self.opt.eps = p(key, v)?,
            "opt.weight_decay" => self.opt.weight_decay = p(key, v)?,
            "opt.decay_every" => self.opt.decay_every = p(key, v)?,
            "opt.decay_factor" => self.opt.decay_factor = p(key, v)?,
            "train.epochs" => self.train.epochs = p(key, v)?,
            "train.batch" => self.train.batch = p(key, v)?,
            "train.stripes_per_cube" => self.train.stripes_per_cube = p(key, v)?,
            "train.seed" => self.train.seed = p(key, v)?,
            "train.aug" => self.train.aug = p(key, v)?,
            "train.noise" => self.train.noise = p(key, v)?,
            "train.qat" => self.train.qat = p(key, v)?,
            "train.val_every" => self.train.val_every = p(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = p(key, v)?,
            "train.out" => self.train.out = v.to_string(),
            "eval.seed" => self.eval_seed = p(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Parse `key = value` lines; blank lines and `#` comments are skipped.
    pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}", i + 1), format!("expected key = value, got {line:?}")));
            };
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    /// Resolve from optional file text plus `key=value` overrides.
    ///
    /// The profile comes from an override, else from the file, else desk.
    pub fn resolve(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let file = file_text.map(Self::parse_text).transpose()?.unwrap_or_default();
        let profile_src = overrides
            .iter()
            .rev()
            .chain(file.iter().rev())
            .find(|(k, _)| k == "profile")
            .map(|(_, v)| v.as_str());
        let profile = profile_src.map(str::parse).transpose()?.unwrap_or(Profile::Desk);
        let mut cfg = Self::defaults(profile);
        for (k, v) in file.iter().chain(overrides) {
            if k == "profile" {
                continue;
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = path
            .map(|p| {
                fs::read_to_string(p).map_err(|e| Error::config("--config", format!("cannot read {}: {e}", p.display())))
            })
            .transpose()?;
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 over the canonical text of every key that affects the learned model.
    pub fn model_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !Self::RUN_CONTROL_KEYS.contains(&k) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        shape_for_rate(self.data.bands, self.data.height, self.data.stripe_w, self.rate)
    }

    pub fn scene_params(&self) -> SceneParams {
        SceneParams {
            endmembers: self.data.endmembers,
            bands: self.data.bands,
            height: self.data.height,
            width: self.data.width,
            smoothness: self.data.smoothness,
            sharpness: self.data.sharpness,
            native_scale: self.data.native_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.bands < 3 {
            return Err(Error::config("data.bands", format!("need at least 3 bands, got {}", d.bands)));
        }
        if d.height == 0 || d.width == 0 {
            return Err(Error::config("data.height", "cube extents must be >= 1"));
        }
        if d.stripe_w == 0 || d.width % d.stripe_w != 0 {
            return Err(Error::config(
                "data.stripe_w",
                format!("{} does not divide the cube width {}", d.stripe_w, d.width),
            ));
        }
        if d.endmembers == 0 {
            return Err(Error::config("data.endmembers", "must be >= 1"));
        }
        if !(d.smoothness > 0.0 && d.sharpness > 0.0) {
            return Err(Error::config("data.smoothness", "smoothness and sharpness must be positive"));
        }
        if !(d.native_scale > 0.0 && d.native_scale.is_finite()) {
            return Err(Error::config("data.native_scale", "must be positive"));
        }
        if d.train == 0 {
            return Err(Error::config("data.train", "need at least one training cube"));
        }
        let enc = self.encoder()?;
        upsample_stages(&enc)?;
        enc.check_int8()?;
        if self.decoder.b_out != d.bands {
            return Err(Error::config("data.bands", "decoder output bands must equal the data bands"));
        }
        self.decoder.validate()?;
        self.loss.validate()?;
        for (key, v) in [("mask.p_affect", self.mask.p_affect), ("mask.max_band_frac", self.mask.max_band_frac)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !(self.noise_snr_db > 0.0) {
            return Err(Error::config("noise.snr_db", "must be positive"));
        }
        self.opt
            .validate()
            .map_err(|e| Error::config("opt", e.to_string()))?;
        if self.train.batch == 0 || self.train.stripes_per_cube == 0 {
            return Err(Error::config("train.batch", "batch and stripes_per_cube must be >= 1"));
        }
        if self.train.val_every == 0 || self.train.checkpoint_every == 0 {
            return Err(Error::config("train.val_every", "cadences must be >= 1"));
        }
        Ok(())
    }
}

/// Parse `key=value` command-line overrides.
pub fn parse_overrides(items: &[String]) -> Result<Vec<(String, String)>> {
    items
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::config(s.clone(), "override must look like key=value"))
        })
        .collect()
}
