//! Encoder plus decoder with their parameters and optimizer state.

use hsics_tensor::{ParamId, ParamStore, Shape4, Tape, Tensor};

use crate::checkpoint::{Checkpoint, EntryData};
use crate::config::RunConfig;
use crate::decoder::{Binding, CsfNet, DecoderConfig};
use crate::encoder::{encode, encode_int8, fake_quantize, init_weights, quantize_pq, EncoderConfig, QuantizedEncoder};
use crate::error::{Error, Result};
use crate::substream;

const ENCODER_INIT_STREAM: u64 = 1 << 40;
const DECODER_INIT_STREAM: u64 = (1 << 40) + 1;
pub const ENCODER_PARAM: &str = "encoder.w";

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub enc: EncoderConfig,
    pub net: CsfNet,
    pub encoder_w: ParamId,
    pub store: ParamStore<f32>,
    /// Completed training epochs.
    pub epoch: u64,
    /// Encoder trained with fake-quantized weights.
    pub qat: bool,
    pub config_hash: [u8; 32],
}

impl Model {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        Self::init_parts(cfg.encoder()?, cfg.decoder, cfg.train.seed, cfg.model_hash())
    }

    pub fn init_parts(enc: EncoderConfig, dec: DecoderConfig, seed: u64, config_hash: [u8; 32]) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder_w = store.add(ENCODER_PARAM, init_weights(&enc, &mut substream(seed, ENCODER_INIT_STREAM)));
        let net = CsfNet::build(dec, &enc, &mut store, &mut substream(seed, DECODER_INIT_STREAM))?;
        Ok(Self { enc, net, encoder_w, store, epoch: 0, qat: false, config_hash })
    }

    pub fn encoder_weights(&self) -> &Tensor<f32> {
        &self.store.get(self.encoder_w).value
    }

    /// Weights the float encoder runs with: fake-quantized after QAT.
    pub fn effective_encoder_weights(&self) -> Result<Tensor<f32>> {
        if self.qat {
            fake_quantize(self.encoder_weights())
        } else {
            Ok(self.encoder_weights().clone())
        }
    }

    pub fn quantized_encoder(&self) -> Result<QuantizedEncoder> {
        quantize_pq(self.encoder_weights())
    }

    pub fn encode(&self, stripes: &Tensor<f32>) -> Result<Tensor<f32>> {
        encode(stripes, &self.effective_encoder_weights()?, &self.enc)
    }

    pub fn encode_int8(&self, stripes: &Tensor<f32>) -> Result<Tensor<f32>> {
        encode_int8(stripes, &self.quantized_encoder()?, &self.enc)
    }

    pub fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = z.shape();
        if s.c != self.enc.b || s.h != self.enc.h || s.w != self.enc.w {
            return Err(Error::Data(format!(
                "measurements {s} do not match the decoder input {}x{}x{}",
                self.enc.b, self.enc.h, self.enc.w
            )));
        }
        self.net.decode(&self.store, z)
    }

    /// Decode in chunks of `chunk` items to bound tape memory.
    pub fn decode_batched(&self, z: &Tensor<f32>, chunk: usize) -> Result<Tensor<f32>> {
        let n = z.shape().n;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let k = chunk.min(n - start);
            parts.push(self.decode(&z.batch_slice(start, k)?)?);
            start += k;
        }
        Ok(Tensor::stack(&parts)?)
    }

    /// Unclamped training-graph output for a measurement batch, for tests that
    /// need the raw network response.
    pub fn decode_raw(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.net.forward(&mut tape, &self.store, zv, Binding::Infer)?;
        Ok(tape.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.config_hash);
        for p in self.store.iter() {
            let dims = shape_dims(p.value.shape());
            c.push(format!("param/{}", p.name), &dims, EntryData::F32(p.value.data().to_vec()));
            c.push(format!("adam_m/{}", p.name), &dims, EntryData::F32(p.m.data().to_vec()));
            c.push(format!("adam_v/{}", p.name), &dims, EntryData::F32(p.v.data().to_vec()));
            c.push(format!("adam_step/{}", p.name), &[1], EntryData::U64(vec![p.step]));
        }
        c.push("epoch", &[1], EntryData::U64(vec![self.epoch]));
        c.push("qat", &[1], EntryData::U64(vec![self.qat as u64]));
        c
    }

    /// Rebuild from `ckpt`. A config-hash mismatch is an error unless `allow_mismatch`.
    pub fn from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint, allow_mismatch: bool) -> Result<Self> {
        let hash = cfg.model_hash();
        if ckpt.config_hash != hash && !allow_mismatch {
            return Err(Error::config(
                "--checkpoint",
                "checkpoint was trained under a different model configuration",
            ));
        }
        let mut m = Self::init_parts(cfg.encoder()?, cfg.decoder, cfg.train.seed, ckpt.config_hash)?;
        for p in m.store.iter_mut() {
            let shape = p.value.shape();
            for (prefix, dst) in [("param", &mut p.value), ("adam_m", &mut p.m), ("adam_v", &mut p.v)] {
                let name = format!("{prefix}/{}", p.name);
                let e = ckpt.require(&name)?;
                match &e.data {
                    EntryData::F32(v) if v.len() == shape.numel() && e.dims == dims_u32(shape) => {
                        dst.data_mut().copy_from_slice(v)
                    }
                    _ => {
                        return Err(Error::Format(format!(
                            "checkpoint entry {name} does not match the configured shape {shape}"
                        )))
                    }
                }
            }
            p.step = ckpt.scalar_u64(&format!("adam_step/{}", p.name))?;
        }
        m.epoch = ckpt.scalar_u64("epoch")?;
        m.qat = ckpt.scalar_u64("qat")? != 0;
        Ok(m)
    }
}

fn shape_dims(s: Shape4) -> Vec<usize> {
    vec![s.n, s.c, s.h, s.w]
}

fn dims_u32(s: Shape4) -> Vec<u32> {
    shape_dims(s).into_iter().map(|d| d as u32).collect()
}
