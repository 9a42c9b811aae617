//! Implementations of the command-line verbs. Each returns a printable summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bitstream::Bitstream;
use crate::checkpoint::{Checkpoint, EntryData};
use crate::config::RunConfig;
use crate::encoder::{quantize_pq, sqnr_db};
use crate::error::{Error, Result};
use crate::evaluate::{decode_bitstream, encode_cube, evaluate, round_trip, scenario_degrade, Scenario};
use crate::hsi_data::{false_color, load_cube, save_cube, Dataset, DatasetManifest, RgbImage, Split};
use crate::hsi_data::{HsiCube, DEFAULT_FALSE_COLOR_BANDS};
use crate::model::{Model, ENCODER_PARAM};
use crate::train::{train, CHECKPOINT_FILE};

pub const QUANT_CODES: &str = "quant/encoder.codes";
pub const QUANT_SCALE: &str = "quant/encoder.scale";
/// Cubes per evaluation that get a false-color triptych.
const TRIPTYCHS: usize = 2;

fn ensure_empty_or_overwrite(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !overwrite {
        return Err(Error::config(
            "--out",
            format!("{} exists and is not empty; pass --overwrite to replace it", dir.display()),
        ));
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &Path, overwrite: bool) -> Result<String> {
    ensure_empty_or_overwrite(out, overwrite)?;
    let d = &cfg.data;
    let m = DatasetManifest::plan(d.seed, cfg.scene_params(), d.train, d.val, d.test);
    m.write_all(out)?;
    Ok(format!(
        "wrote {} cubes ({} train / {} val / {} test) of {}x{}x{} to {} (seed {})",
        m.cubes.len(),
        d.train,
        d.val,
        d.test,
        d.bands,
        d.height,
        d.width,
        out.display(),
        d.seed
    ))
}

pub fn load_model(cfg: &RunConfig, ckpt: &Path, allow_mismatch: bool) -> Result<Model> {
    let c = Checkpoint::load(ckpt).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("cannot read checkpoint {}: {io}", ckpt.display())),
        other => other,
    })?;
    if let Some(e) = c.get(QUANT_CODES) {
        if !matches!(e.data, EntryData::I8(_)) {
            return Err(Error::Format(format!("{QUANT_CODES} must be int8")));
        }
    }
    Model::from_checkpoint(cfg, &c, allow_mismatch)
}

pub fn train_cmd(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    init_from: Option<&Path>,
    allow_mismatch: bool,
) -> Result<String> {
    let data = Dataset::open(data_dir)?;
    let model = match (resume, init_from) {
        (Some(p), _) => load_model(cfg, p, allow_mismatch)?,
        (None, Some(p)) => {
            // Fine-tuning: parameters carry over, optimizer state and epoch restart.
            let src = load_model(cfg, p, true)?;
            let mut m = Model::init(cfg)?;
            for (dst, s) in m.store.iter_mut().zip(src.store.iter()) {
                dst.value = s.value.clone();
            }
            m
        }
        (None, None) => Model::init(cfg)?,
    };
    let start = model.epoch;
    let (model, log) = train(cfg, &data, model, Some(out))?;
    let mut s = format!(
        "trained epochs {}..{} into {}",
        start,
        model.epoch,
        out.join(CHECKPOINT_FILE).display()
    );
    if let Some(v) = log.iter().rev().find_map(|r| r.val) {
        let _ = write!(s, "; val psnr {:.3} dB, rmse {:.3}, sam {:.3} deg", v.psnr, v.rmse, v.sam);
    }
    Ok(s)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "cube".into())
}

pub fn encode_cmd(cfg: &RunConfig, model: &Model, cubes: &[PathBuf], out: &Path, int8: bool) -> Result<String> {
    fs::create_dir_all(out)?;
    let mut s = String::new();
    for path in cubes {
        let cube = load_cube(path)?;
        if cube.native_scale() != cfg.data.native_scale {
            return Err(Error::Data(format!(
                "{} has native scale {}, the configuration says {}",
                path.display(),
                cube.native_scale(),
                cfg.data.native_scale
            )));
        }
        let bs = encode_cube(model, &cube, int8)?;
        let dst = out.join(format!("{}.rtcz", stem(path)));
        bs.save(&dst)?;
        let raw = cube.tensor().len() * 4;
        let total = bs.to_bytes().len();
        let _ = writeln!(
            s,
            "{} -> {}: {} stripes, payload {} bytes, file {} bytes, {:.4}% of the f32 cube",
            path.display(),
            dst.display(),
            bs.stripes.len(),
            bs.payload_bytes(),
            total,
            100.0 * total as f64 / raw as f64
        );
    }
    Ok(s)
}

pub fn decode_cmd(cfg: &RunConfig, model: &Model, streams: &[PathBuf], out: &Path) -> Result<String> {
    fs::create_dir_all(out)?;
    let mut s = String::new();
    for path in streams {
        let bs = Bitstream::load(path)?;
        let cube = decode_bitstream(model, &bs, cfg.data.native_scale)?;
        let dst = out.join(format!("{}.hsic", stem(path)));
        save_cube(&cube, &dst)?;
        let _ = writeln!(
            s,
            "{} -> {}: {}x{}x{}",
            path.display(),
            dst.display(),
            cube.bands(),
            cube.height(),
            cube.width()
        );
    }
    Ok(s)
}

fn sanitize(scenario: &Scenario) -> String {
    scenario.to_string().replace([':', '.'], "_")
}

fn color_bands(cube: &HsiCube) -> [usize; 3] {
    if DEFAULT_FALSE_COLOR_BANDS.iter().all(|&b| b < cube.bands()) {
        DEFAULT_FALSE_COLOR_BANDS
    } else {
        let b = cube.bands();
        [b * 13 / 172, b * 25 / 172, b * 61 / 172]
    }
}

pub fn evaluate_cmd(cfg: &RunConfig, model: &Model, data_dir: &Path, scenario: &Scenario, out: &Path) -> Result<String> {
    let data = Dataset::open(data_dir)?;
    let test = data.split(Split::Test);
    let report = evaluate(model, &test, scenario, cfg.eval_seed)?;
    fs::create_dir_all(out)?;
    let tag = sanitize(scenario);
    let csv = out.join(format!("eval_{tag}.csv"));
    fs::write(&csv, report.csv())?;
    for (i, (name, cube)) in test.iter().take(TRIPTYCHS).enumerate() {
        let d = scenario_degrade(model, scenario, cube, i, cfg.eval_seed)?;
        let degraded = match &d.mask {
            Some(m) => HsiCube::new(crate::degradation::apply_mask(cube.tensor(), m)?, cube.native_scale())?,
            None => (*cube).clone(),
        };
        let rec = round_trip(model, cube, &d)?;
        let bands = color_bands(cube);
        let img = RgbImage::hconcat(
            &[false_color(cube, bands)?, false_color(&degraded, bands)?, false_color(&rec, bands)?],
            2,
        )?;
        img.save_png(&out.join(format!("{}_{tag}.png", stem(Path::new(name)))))?;
    }
    let m = report.mean;
    let mut s = format!(
        "{}: mean psnr {:.3} dB, rmse {:.3}, sam {:.3} deg over {} cubes -> {}",
        scenario,
        m.psnr,
        m.rmse,
        m.sam,
        report.rows.len(),
        csv.display()
    );
    if let Some(f) = report.masked_fraction {
        let _ = write!(s, "; masked voxel fraction {f:.4}");
    }
    Ok(s)
}

/// PQ-quantize the encoder. The output checkpoint carries the codes and scale
/// and holds the dequantized weights as the encoder parameter.
pub fn quantize_cmd(ckpt: &Path, out: &Path) -> Result<String> {
    let mut c = Checkpoint::load(ckpt)?;
    let name = format!("param/{ENCODER_PARAM}");
    let entry = c.require(&name)?.clone();
    let EntryData::F32(values) = &entry.data else {
        return Err(Error::Format(format!("{name} is not f32")));
    };
    let dims: Vec<usize> = entry.dims.iter().map(|&d| d as usize).collect();
    let shape = match dims.as_slice() {
        [n, ch, h, w] => hsics_tensor::Shape4::new(*n, *ch, *h, *w),
        _ => return Err(Error::Format(format!("{name} must be 4-D"))),
    };
    let w = hsics_tensor::Tensor::from_vec(shape, values.clone())?;
    let q = quantize_pq(&w)?;
    let deq = q.dequantize();
    let sqnr = sqnr_db(&w, &deq);
    c.entries.retain(|e| e.name != QUANT_CODES && e.name != QUANT_SCALE);
    for e in c.entries.iter_mut().filter(|e| e.name == name) {
        e.data = EntryData::F32(deq.data().to_vec());
    }
    c.push(QUANT_CODES, &dims, EntryData::I8(q.codes.clone()));
    c.push(QUANT_SCALE, &[1], EntryData::F64(vec![q.scale as f64]));
    c.save(out)?;
    Ok(format!(
        "quantized {} weights: scale {:e}, SQNR {:.2} dB -> {}",
        q.codes.len(),
        q.scale,
        sqnr,
        out.display()
    ))
}
