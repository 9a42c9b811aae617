//! Mini-batch training with optional mask augmentation, channel noise and
//! quantization-aware encoder weights.
//!
//! Every random draw is keyed by `(seed, epoch, sample)`, so a run resumed
//! from a checkpoint continues exactly as an uninterrupted run would.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use hsics_tensor::{adamw_step, Shape4, Tape, Tensor};

use crate::config::RunConfig;
use crate::decoder::Binding;
use crate::degradation::{add_awgn_with, apply_mask, draw_training_mask, gen_mask, Mask};
use crate::encoder::{encode_on_tape, qat_forward};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_cubes, Degrade};
use crate::hsi_data::{pushbroom_stripes, Dataset, Split};
use crate::model::Model;
use crate::objectives::{total_loss_var, MetricsReport};
use crate::substream;

pub const CHECKPOINT_FILE: &str = "checkpoint.rtck";
pub const LOG_FILE: &str = "train_log.csv";
const SAMPLE_BITS: u32 = 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    /// Epochs completed.
    pub epoch: u64,
    pub lr: f64,
    /// Mean step loss over the epoch.
    pub loss: f64,
    pub val: Option<MetricsReport>,
}

pub const LOG_HEADER: &str = "epoch,lr,loss,val_psnr,val_rmse,val_sam";

impl LogRow {
    pub fn csv(&self) -> String {
        let mut s = format!("{},{},{}", self.epoch, self.lr, self.loss);
        match self.val {
            Some(v) => {
                let _ = write!(s, ",{},{},{}", v.psnr, v.rmse, v.sam);
            }
            None => s.push_str(",,,"),
        }
        s
    }
}

/// One training example: a stripe and its optional stripe-effect mask.
struct Sample<'a> {
    x: &'a Tensor<f32>,
    mask: Option<Mask>,
    noise_seed: u64,
}

/// Training stripes grouped per cube.
pub struct TrainSet {
    cubes: Vec<Vec<Tensor<f32>>>,
    bands: usize,
}

impl TrainSet {
    pub fn from_dataset(data: &Dataset, stripe_w: usize) -> Result<Self> {
        let cubes = data
            .split(Split::Train)
            .iter()
            .map(|(name, c)| pushbroom_stripes(c, stripe_w, name).map(|s| s.stripes.into_iter().map(|s| s.data).collect()))
            .collect::<Result<Vec<Vec<_>>>>()?;
        if cubes.is_empty() {
            return Err(Error::Data("dataset has no training cubes".into()));
        }
        let bands = cubes[0][0].shape().c;
        Ok(Self { cubes, bands })
    }
}

fn epoch_samples<'a>(cfg: &RunConfig, set: &'a TrainSet, epoch: u64) -> Vec<Sample<'a>> {
    let spc = cfg.train.stripes_per_cube;
    let total = set.cubes.len() * spc;
    let epoch_key = (epoch + 1) << SAMPLE_BITS;
    let mut out: Vec<Sample<'a>> = (0..total)
        .map(|id| {
            let mut rng = substream(cfg.train.seed, epoch_key | id as u64);
            let stripes = &set.cubes[id / spc];
            let x = &stripes[rng.random_range(0..stripes.len())];
            let mask = if cfg.train.aug {
                draw_training_mask(set.bands, &cfg.mask, &mut rng).map(|spec| {
                    let s = x.shape();
                    gen_mask(&spec, s.c, s.h, s.w).expect("drawn band range lies inside the stripe")
                })
            } else {
                None
            };
            Sample { x, mask, noise_seed: rng.random() }
        })
        .collect();
    out.shuffle(&mut substream(cfg.train.seed, epoch_key | ((1 << SAMPLE_BITS) - 1)));
    out
}

/// One optimizer step; returns the loss.
fn train_step(model: &mut Model, cfg: &RunConfig, batch: &[Sample], lr: f64) -> Result<f64> {
    let n = batch.len();
    let mut inputs: Vec<Tensor<f32>> = batch.iter().map(|s| s.x.clone()).collect();
    let mut targets = inputs.clone();
    let mut weights = vec![0.0; n];
    let mut noise_keys: Vec<(u64, u64)> = batch.iter().map(|s| (s.noise_seed, 0)).collect();
    for (i, s) in batch.iter().enumerate() {
        match (&s.mask, cfg.train.aug) {
            (Some(m), _) => {
                let xm = apply_mask(s.x, m)?;
                weights[i] = 1.0 / n as f64;
                weights.push(1.0 / n as f64);
                targets.push(if cfg.loss.literal_masked_target { xm.clone() } else { s.x.clone() });
                inputs.push(xm);
                noise_keys.push((s.noise_seed, 1));
            }
            (None, true) => weights[i] = 2.0 / n as f64,
            (None, false) => weights[i] = 1.0 / n as f64,
        }
    }
    let x = Tensor::stack(&inputs)?;
    let target = Tensor::stack(&targets)?;

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let tv = tape.constant(target);
    let mut z = if model.qat {
        qat_forward(&mut tape, xv, &model.store, model.encoder_w, &model.enc)?
    } else {
        let w = tape.param(&model.store, model.encoder_w);
        encode_on_tape(&mut tape, xv, w, &model.enc)?
    };
    if cfg.train.noise {
        let zval = tape.value(z).clone();
        let item = zval.shape().item();
        let mut noise = Tensor::zeros(zval.shape());
        for (k, &(seed, stream)) in noise_keys.iter().enumerate() {
            let zk = zval.batch_slice(k, 1)?;
            let noisy = add_awgn_with(&zk, cfg.noise_snr_db, &mut substream(seed, stream));
            for (j, (a, b)) in noisy.data().iter().zip(zk.data()).enumerate() {
                noise.data_mut()[k * item + j] = a - b;
            }
        }
        let nv = tape.constant(noise);
        z = tape.add(z, nv)?;
    }
    let pred = model.net.forward(&mut tape, &model.store, z, Binding::Train)?;
    let loss = total_loss_var(&mut tape, pred, tv, &cfg.loss, Some(&weights))?;
    let value = tape.value(loss).item()? as f64;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss became {value}")));
    }
    model.store.zero_grad();
    tape.backward_into(loss, &mut model.store)?;
    adamw_step(&mut model.store, &cfg.opt, lr);
    Ok(value)
}

/// Run one epoch; returns the mean step loss.
pub fn train_epoch(model: &mut Model, cfg: &RunConfig, set: &TrainSet) -> Result<f64> {
    let epoch = model.epoch;
    let lr = cfg.opt.lr_at(epoch);
    let samples = epoch_samples(cfg, set, epoch);
    let mut total = 0.0;
    let mut steps = 0;
    for (i, batch) in samples.chunks(cfg.train.batch).enumerate() {
        total += train_step(model, cfg, batch, lr).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("{m} at epoch {epoch}, step {i}")),
            other => other,
        })?;
        steps += 1;
    }
    model.epoch += 1;
    Ok(total / steps as f64)
}

/// Mean clean-input metrics over the validation split.
pub fn validate(model: &Model, data: &Dataset) -> Result<Option<MetricsReport>> {
    let val = data.split(Split::Val);
    if val.is_empty() {
        return Ok(None);
    }
    let rows = evaluate_cubes(model, &val, &|_| Ok(Degrade::default()))?;
    Ok(MetricsReport::mean(&rows.iter().map(|r| r.1).collect::<Vec<_>>()))
}

/// Train from `model.epoch` up to `cfg.train.epochs`.
///
/// With `out`, the log is written to `out/train_log.csv` and a checkpoint to
/// `out/checkpoint.rtck` at the configured cadence and at the end.
pub fn train(cfg: &RunConfig, data: &Dataset, mut model: Model, out: Option<&Path>) -> Result<(Model, Vec<LogRow>)> {
    let set = TrainSet::from_dataset(data, cfg.data.stripe_w)?;
    if set.bands != model.enc.bands {
        return Err(Error::Data(format!(
            "dataset has {} bands, model expects {}",
            set.bands, model.enc.bands
        )));
    }
    let want = Shape4::new(1, model.enc.bands, model.enc.stripe_h, model.enc.stripe_w);
    if set.cubes[0][0].shape() != want {
        return Err(Error::Data(format!("training stripes are {}, model expects {want}", set.cubes[0][0].shape())));
    }
    if cfg.train.qat {
        model.qat = true;
    }
    let mut log = Vec::new();
    let mut log_text = String::new();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        log_text = if model.epoch > 0 && path.exists() {
            fs::read_to_string(&path)?
        } else {
            format!("{LOG_HEADER}\n")
        };
    }
    while model.epoch < cfg.train.epochs {
        let lr = cfg.opt.lr_at(model.epoch);
        let loss = train_epoch(&mut model, cfg, &set)?;
        let e = model.epoch;
        let last = e == cfg.train.epochs;
        let val = if e % cfg.train.val_every == 0 || last {
            validate(&model, data)?
        } else {
            None
        };
        let row = LogRow { epoch: e, lr, loss, val };
        log.push(row);
        if let Some(dir) = out {
            log_text.push_str(&row.csv());
            log_text.push('\n');
            if e % cfg.train.checkpoint_every == 0 || last {
                model.to_checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
                fs::write(dir.join(LOG_FILE), &log_text)?;
            }
        }
    }
    if let Some(dir) = out {
        model.to_checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        fs::write(dir.join(LOG_FILE), &log_text)?;
    }
    Ok((model, log))
}
