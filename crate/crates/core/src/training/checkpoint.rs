//! Binary checkpoint codec: parameters, optimizer moments, stage cursor,
//! and RNG position, guarded by an FNV-1a checksum.
//!
//! Everything serializes little-endian in BTreeMap (name) order, so a
//! save / load / save cycle is byte-identical.

use std::path::Path;

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{AdamState, Cursor, TrainPhase, TrainState, TrainingError};
use crate::network::NetworkConfig;
use crate::nn::{fnv1a, ParamGroup, ParamKind, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8] = b"deoccl-ckpt v1\n";

fn corrupt(reason: impl Into<String>) -> TrainingError {
    TrainingError::BadCheckpoint { reason: reason.into() }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainingError> {
        if self.pos + n > self.buf.len() {
            return Err(corrupt("truncated"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, TrainingError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TrainingError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TrainingError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainingError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128, TrainingError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, TrainingError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| corrupt("non-utf8 name"))
    }

    fn tensor(&mut self) -> Result<ArrayD<f32>, TrainingError> {
        let ndim = self.u8()? as usize;
        if ndim > 8 {
            return Err(corrupt("implausible tensor rank"));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        if len > (1 << 30) {
            return Err(corrupt("implausible tensor size"));
        }
        let raw = self.take(len * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        ArrayD::from_shape_vec(dims, data).map_err(|_| corrupt("bad tensor shape"))
    }
}

fn put_string(buf: &mut Vec<u8>, s: &str) {
    assert!(s.len() <= u16::MAX as usize, "name too long");
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, t: &ArrayD<f32>) {
    buf.push(t.ndim() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_config(buf: &mut Vec<u8>, c: &NetworkConfig) {
    for v in [c.image_size, c.base_filters, c.bottleneck_dim, c.encoder_depth, c.attention_site_size]
    {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.push(c.batch_norm as u8);
    buf.push(c.mask_input_channel as u8);
}

fn read_config(r: &mut Reader) -> Result<NetworkConfig, TrainingError> {
    Ok(NetworkConfig {
        image_size: r.u32()? as usize,
        base_filters: r.u32()? as usize,
        bottleneck_dim: r.u32()? as usize,
        encoder_depth: r.u32()? as usize,
        attention_site_size: r.u32()? as usize,
        batch_norm: r.u8()? != 0,
        mask_input_channel: r.u8()? != 0,
    })
}

fn put_moments(buf: &mut Vec<u8>, opt: &AdamState<f32>) {
    buf.extend_from_slice(&opt.t.to_le_bytes());
    for map in [&opt.m, &opt.v] {
        buf.extend_from_slice(&(map.len() as u32).to_le_bytes());
        for (name, t) in map {
            put_string(buf, name);
            put_tensor(buf, t);
        }
    }
}

fn read_moments(r: &mut Reader) -> Result<AdamState<f32>, TrainingError> {
    let mut opt = AdamState::new();
    opt.t = r.u64()?;
    for map in [&mut opt.m, &mut opt.v] {
        let count = r.u32()?;
        for _ in 0..count {
            let name = r.string()?;
            let t = r.tensor()?;
            map.insert(name, t);
        }
    }
    Ok(opt)
}

/// Serializes the full training state next to its network config.
pub fn save_checkpoint(
    state: &TrainState,
    config: &NetworkConfig,
    path: &Path,
) -> Result<(), TrainingError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_config(&mut buf, config);

    let c = &state.cursor;
    buf.push(c.phase.code());
    buf.extend_from_slice(&(c.stage as u32).to_le_bytes());
    buf.extend_from_slice(&(c.epoch as u32).to_le_bytes());
    buf.extend_from_slice(&c.step.to_le_bytes());
    buf.extend_from_slice(&c.epoch_seq.to_le_bytes());

    buf.extend_from_slice(&state.rng.get_seed());
    buf.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    buf.extend_from_slice(&state.rng.get_stream().to_le_bytes());

    buf.push(ParamGroup::ALL.len() as u8);
    for g in ParamGroup::ALL {
        buf.push(g.code());
        buf.push(state.params.is_trainable(g) as u8);
    }

    buf.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    for (name, entry) in state.params.iter() {
        put_string(&mut buf, name);
        buf.push(entry.group.code());
        buf.push(entry.kind.code());
        put_tensor(&mut buf, &entry.data);
    }

    put_moments(&mut buf, &state.gen_opt);
    put_moments(&mut buf, &state.disc_opt);

    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    std::fs::write(path, &buf).map_err(|e| TrainingError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Loads a checkpoint, validating checksum, version, and network config.
pub fn load_checkpoint(
    path: &Path,
    expect: &NetworkConfig,
) -> Result<TrainState, TrainingError> {
    let buf = std::fs::read(path).map_err(|e| TrainingError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if buf.len() < CHECKPOINT_MAGIC.len() + 8 {
        return Err(corrupt("truncated"));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let sum = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != sum {
        return Err(corrupt("checksum mismatch"));
    }
    if !body.starts_with(CHECKPOINT_MAGIC) {
        let line_end = body.iter().position(|&b| b == b'\n').unwrap_or(0).min(64);
        let found = String::from_utf8_lossy(&body[..line_end]).into_owned();
        if found.starts_with("deoccl-ckpt") {
            return Err(TrainingError::CheckpointVersion { found });
        }
        return Err(corrupt("not a checkpoint file"));
    }
    let mut r = Reader { buf: body, pos: CHECKPOINT_MAGIC.len() };

    let config = read_config(&mut r)?;
    if config != *expect {
        return Err(TrainingError::CheckpointConfig {
            saved: Box::new(config),
            expected: Box::new(expect.clone()),
        });
    }

    let phase = TrainPhase::from_code(r.u8()?).ok_or_else(|| corrupt("bad phase code"))?;
    let cursor = Cursor {
        phase,
        stage: r.u32()? as usize,
        epoch: r.u32()? as usize,
        step: r.u64()?,
        epoch_seq: r.u64()?,
    };

    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = r.u128()?;
    let stream = r.u64()?;
    let mut rng = ChaCha20Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let mut params = ParamStore::new();
    let flag_count = r.u8()?;
    for _ in 0..flag_count {
        let group = ParamGroup::from_code(r.u8()?).ok_or_else(|| corrupt("bad group code"))?;
        params.set_trainable(group, r.u8()? != 0);
    }
    let param_count = r.u32()?;
    for _ in 0..param_count {
        let name = r.string()?;
        let group = ParamGroup::from_code(r.u8()?).ok_or_else(|| corrupt("bad group code"))?;
        let kind = ParamKind::from_code(r.u8()?).ok_or_else(|| corrupt("bad kind code"))?;
        let data = r.tensor()?;
        params.insert(&name, group, kind, data);
    }

    let gen_opt = read_moments(&mut r)?;
    let disc_opt = read_moments(&mut r)?;
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }

    Ok(TrainState { params, gen_opt, disc_opt, cursor, rng, history: Vec::new() })
}
