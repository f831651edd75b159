//! Binary checkpoint format `FMBC`: architecture, model kind, training
//! metadata, parameters, and (optionally) optimizer state. Round-trips are
//! bit-exact so a reloaded net forwards identically.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::adam::{AdamConfig, AdamState};
use super::unet::{ArchConfig, NetError, ParamStore, VectorFieldNet};
use crate::codec::LatentUpsample;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FMBC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected \"FMBC\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("truncated checkpoint: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Which training objective produced this checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Cfm,
    FmNaive,
    DmUpsampler,
    DdpmPrior,
    RegL1,
    RegL2,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cfm => "cfm",
            ModelKind::FmNaive => "fm_naive",
            ModelKind::DmUpsampler => "dm_upsampler",
            ModelKind::DdpmPrior => "ddpm_prior",
            ModelKind::RegL1 => "reg_l1",
            ModelKind::RegL2 => "reg_l2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cfm" => Some(Self::Cfm),
            "fm_naive" => Some(Self::FmNaive),
            "dm_upsampler" => Some(Self::DmUpsampler),
            "ddpm_prior" => Some(Self::DdpmPrior),
            "reg_l1" => Some(Self::RegL1),
            "reg_l2" => Some(Self::RegL2),
            _ => None,
        }
    }

    fn tag(self) -> u8 {
        match self {
            ModelKind::Cfm => 0,
            ModelKind::FmNaive => 1,
            ModelKind::DmUpsampler => 2,
            ModelKind::DdpmPrior => 3,
            ModelKind::RegL1 => 4,
            ModelKind::RegL2 => 5,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => ModelKind::Cfm,
            1 => ModelKind::FmNaive,
            2 => ModelKind::DmUpsampler,
            3 => ModelKind::DdpmPrior,
            4 => ModelKind::RegL1,
            5 => ModelKind::RegL2,
            _ => return None,
        })
    }
}

/// Inference-relevant settings captured at training time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMeta {
    pub sigma_min: f64,
    pub noise_aug_t: u32,
    pub schedule_steps: u32,
    pub schedule_offset: f64,
    pub upsample: LatentUpsample,
    /// Spatial upsampling factor between the low and high latent grids.
    pub factor: u32,
    pub codec_seed: u64,
}

impl Default for TrainMeta {
    fn default() -> Self {
        Self {
            sigma_min: 1e-4,
            noise_aug_t: 400,
            schedule_steps: 1000,
            schedule_offset: 0.008,
            upsample: LatentUpsample::Psu,
            factor: 4,
            codec_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub arch: ArchConfig,
    pub meta: TrainMeta,
    pub step: u64,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    /// Reconstructs a net with exactly the stored parameters.
    pub fn build_net(&self) -> Result<VectorFieldNet, NetError> {
        let mut net = VectorFieldNet::new(self.arch.clone(), 0);
        if net.params().len() != self.params.len() {
            return Err(NetError::UnknownParam(format!(
                "parameter count mismatch: arch wants {}, checkpoint has {}",
                net.params().len(),
                self.params.len()
            )));
        }
        for (name, tensor) in self.params.iter() {
            net.params_mut().set(name, tensor.clone())?;
        }
        Ok(net)
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: self.pos + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::Corrupt("non-utf8 name".into()))
    }
    fn tensor(&mut self) -> Result<Tensor, CheckpointError> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = self.take(4 * count)?;
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            data.push(f32::from_le_bytes(raw[4 * i..4 * i + 4].try_into().unwrap()));
        }
        Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }
}

fn upsample_tag(u: LatentUpsample) -> u8 {
    match u {
        LatentUpsample::Nearest => 0,
        LatentUpsample::Bilinear => 1,
        LatentUpsample::Psu => 2,
    }
}

fn upsample_from_tag(t: u8) -> Option<LatentUpsample> {
    Some(match t {
        0 => LatentUpsample::Nearest,
        1 => LatentUpsample::Bilinear,
        2 => LatentUpsample::Psu,
        _ => return None,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u8(ckpt.kind.tag());

    let a = &ckpt.arch;
    w.u32(a.in_channels_x as u32);
    w.u32(a.in_channels_z as u32);
    w.u32(a.base_channels as u32);
    w.u32(a.channel_mults.len() as u32);
    for &m in &a.channel_mults {
        w.u32(m as u32);
    }
    w.u32(a.blocks_per_level as u32);
    w.u8(a.attn_at_bottom as u8);
    w.u32(a.time_embed_dim as u32);
    w.u32(a.norm_groups as u32);

    let m = &ckpt.meta;
    w.f64(m.sigma_min);
    w.u32(m.noise_aug_t);
    w.u32(m.schedule_steps);
    w.f64(m.schedule_offset);
    w.u8(upsample_tag(m.upsample));
    w.u32(m.factor);
    w.u64(m.codec_seed);

    w.u64(ckpt.step);
    w.u32(ckpt.params.len() as u32);
    for (name, tensor) in ckpt.params.iter() {
        w.str(name);
        w.tensor(tensor);
    }

    match &ckpt.adam {
        None => w.u8(0),
        Some(adam) => {
            w.u8(1);
            w.f64(adam.config.lr);
            w.f64(adam.config.beta1);
            w.f64(adam.config.beta2);
            w.f64(adam.config.eps);
            w.u64(adam.step);
            for t in &adam.m {
                w.tensor(t);
            }
            for t in &adam.v {
                w.tensor(t);
            }
        }
    }

    fs::write(path, w.buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };

    let mut magic = [0u8; 4];
    magic.copy_from_slice(r.take(4)?);
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let kind = ModelKind::from_tag(r.u8()?)
        .ok_or_else(|| CheckpointError::Corrupt("unknown model kind".into()))?;

    let in_channels_x = r.u32()? as usize;
    let in_channels_z = r.u32()? as usize;
    let base_channels = r.u32()? as usize;
    let n_mults = r.u32()? as usize;
    if n_mults == 0 || n_mults > 8 {
        return Err(CheckpointError::Corrupt(format!(
            "implausible level count {n_mults}"
        )));
    }
    let mut channel_mults = Vec::with_capacity(n_mults);
    for _ in 0..n_mults {
        channel_mults.push(r.u32()? as usize);
    }
    let blocks_per_level = r.u32()? as usize;
    let attn_at_bottom = r.u8()? != 0;
    let time_embed_dim = r.u32()? as usize;
    let norm_groups = r.u32()? as usize;
    let arch = ArchConfig {
        in_channels_x,
        in_channels_z,
        base_channels,
        channel_mults,
        blocks_per_level,
        attn_at_bottom,
        time_embed_dim,
        norm_groups,
    };

    let meta = TrainMeta {
        sigma_min: r.f64()?,
        noise_aug_t: r.u32()?,
        schedule_steps: r.u32()?,
        schedule_offset: r.f64()?,
        upsample: upsample_from_tag(r.u8()?)
            .ok_or_else(|| CheckpointError::Corrupt("unknown upsample tag".into()))?,
        factor: r.u32()?,
        codec_seed: r.u64()?,
    };

    let step = r.u64()?;
    let n_params = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name = r.str()?;
        let tensor = r.tensor()?;
        params
            .insert(name, tensor)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }

    let adam = match r.u8()? {
        0 => None,
        1 => {
            let config = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let adam_step = r.u64()?;
            let mut m = Vec::with_capacity(n_params);
            for _ in 0..n_params {
                m.push(r.tensor()?);
            }
            let mut v = Vec::with_capacity(n_params);
            for _ in 0..n_params {
                v.push(r.tensor()?);
            }
            Some(AdamState {
                config,
                step: adam_step,
                m,
                v,
            })
        }
        other => {
            return Err(CheckpointError::Corrupt(format!(
                "bad optimizer flag {other}"
            )))
        }
    };

    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    Ok(Checkpoint {
        kind,
        arch,
        meta,
        step,
        params,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("flowsr-checkpoint-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn small_arch() -> ArchConfig {
        ArchConfig {
            in_channels_x: 4,
            in_channels_z: 4,
            base_channels: 8,
            channel_mults: vec![1, 2],
            blocks_per_level: 1,
            attn_at_bottom: true,
            time_embed_dim: 16,
            norm_groups: 4,
        }
    }

    #[test]
    fn round_trip_reproduces_forward_bit_exactly() {
        let net = VectorFieldNet::new(small_arch(), 21);
        let ckpt = Checkpoint {
            kind: ModelKind::Cfm,
            arch: net.config().clone(),
            meta: TrainMeta::default(),
            step: 137,
            params: net.params().clone(),
            adam: Some(AdamState::new(AdamConfig::default(), net.params())),
        };
        let path = tmp("roundtrip.fmbc");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.kind, ModelKind::Cfm);
        assert_eq!(loaded.step, 137);
        assert_eq!(loaded.meta, ckpt.meta);

        let net2 = loaded.build_net().unwrap();
        let mut rng = RngStream::new(3, 0);
        let x = Tensor::gaussian(vec![4, 8, 8], &mut rng).unwrap();
        let z = Tensor::gaussian(vec![4, 8, 8], &mut rng).unwrap();
        let a = net.forward(0.3, &x, Some(&z)).unwrap();
        let b = net2.forward(0.3, &x, Some(&z)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let net = VectorFieldNet::new(small_arch(), 1);
        let ckpt = Checkpoint {
            kind: ModelKind::RegL2,
            arch: net.config().clone(),
            meta: TrainMeta::default(),
            step: 0,
            params: net.params().clone(),
            adam: None,
        };
        let path = tmp("tampered.fmbc");
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic { .. })
        ));

        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Version { found: 7 })
        ));
    }

    #[test]
    fn truncation_rejected() {
        let net = VectorFieldNet::new(small_arch(), 1);
        let ckpt = Checkpoint {
            kind: ModelKind::DdpmPrior,
            arch: net.config().clone(),
            meta: TrainMeta::default(),
            step: 0,
            params: net.params().clone(),
            adam: None,
        };
        let path = tmp("short.fmbc");
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Truncated { .. })
        ));
    }
}
