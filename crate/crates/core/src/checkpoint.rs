//! Binary checkpoint format for training state.
//!
//! A checkpoint is a single little-endian file: a fixed header (magic,
//! version, step, seed, optimizer step counters), a sha256-verified copy
//! of the run configuration, and a flat list of length-prefixed tensor
//! records. Record names carry a section prefix ("p." for parameters,
//! "g_m."/"g_v."/"d_m."/"d_v." for Adam moments, "e." for the generator
//! average) and appear in store order, so encoding the decoded state
//! reproduces the original bytes exactly.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{AdamState, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PXFOLDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn sha256(bytes: &[u8]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().into()
}

fn put_record<T: Scalar>(out: &mut Vec<u8>, name: &str, tensor: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(tensor.shape().len() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in tensor.data() {
        x.write_le(out);
    }
}

pub fn encode_checkpoint<T: Scalar>(state: &TrainState<T>, config_blob: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.seed.to_le_bytes());
    out.extend_from_slice(&state.g_opt.t.to_le_bytes());
    out.extend_from_slice(&state.d_opt.t.to_le_bytes());
    out.push(state.ema.is_some() as u8);
    out.push(T::BYTES as u8);
    out.extend_from_slice(&sha256(config_blob));
    out.extend_from_slice(&(config_blob.len() as u32).to_le_bytes());
    out.extend_from_slice(config_blob);

    let ema_len = state.ema.as_ref().map_or(0, |avg| avg.len());
    let count = state.store.len()
        + 2 * state.g_opt.m.len()
        + 2 * state.d_opt.m.len()
        + ema_len;
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, value) in state.store.iter() {
        put_record(&mut out, &format!("p.{name}"), value);
    }
    for (name, value) in &state.g_opt.m {
        put_record(&mut out, &format!("g_m.{name}"), value);
    }
    for (name, value) in &state.g_opt.v {
        put_record(&mut out, &format!("g_v.{name}"), value);
    }
    for (name, value) in &state.d_opt.m {
        put_record(&mut out, &format!("d_m.{name}"), value);
    }
    for (name, value) in &state.d_opt.v {
        put_record(&mut out, &format!("d_v.{name}"), value);
    }
    if let Some(avg) = &state.ema {
        for (name, value) in avg.iter() {
            put_record(&mut out, &format!("e.{name}"), value);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {} more of {})",
                self.pos,
                n,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn get_record<T: Scalar>(cur: &mut Cursor) -> Result<(String, Tensor<T>)> {
    let name_len = cur.u16()? as usize;
    let name = std::str::from_utf8(cur.take(name_len)?)
        .map_err(|_| Error::Checkpoint("record name is not utf-8".into()))?
        .to_string();
    let rank = cur.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let d = cur.u64()? as usize;
        numel = numel.saturating_mul(d);
        shape.push(d);
    }
    let raw = cur.take(numel * T::BYTES)?;
    let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
    Ok((name, Tensor::from_vec(&shape, data)?))
}

/// Decodes a checkpoint, returning the state and the embedded config
/// bytes. The scalar type must match the width the file was written with.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(TrainState<T>, Vec<u8>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let step = cur.u64()?;
    let seed = cur.u64()?;
    let g_t = cur.u64()?;
    let d_t = cur.u64()?;
    let has_ema = match cur.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::Checkpoint(format!("bad ema flag {other}"))),
    };
    let width = cur.u8()? as usize;
    if width != T::BYTES {
        return Err(Error::Checkpoint(format!(
            "scalar width {width} does not match the requested {}-byte type",
            T::BYTES
        )));
    }
    let digest: [u8; 32] = cur.take(32)?.try_into().unwrap();
    let config_len = cur.u32()? as usize;
    let config_blob = cur.take(config_len)?.to_vec();
    if sha256(&config_blob) != digest {
        return Err(Error::Checkpoint("config digest mismatch; file corrupted".into()));
    }

    let count = cur.u32()? as usize;
    let mut store = ParamStore::new();
    let mut g_opt = AdamState { m: Default::default(), v: Default::default(), t: g_t };
    let mut d_opt = AdamState { m: Default::default(), v: Default::default(), t: d_t };
    let mut ema = has_ema.then(ParamStore::new);
    for _ in 0..count {
        let (tagged, tensor) = get_record::<T>(&mut cur)?;
        if let Some(name) = tagged.strip_prefix("p.") {
            store.insert(name, tensor)?;
        } else if let Some(name) = tagged.strip_prefix("g_m.") {
            g_opt.m.insert(name.to_string(), tensor);
        } else if let Some(name) = tagged.strip_prefix("g_v.") {
            g_opt.v.insert(name.to_string(), tensor);
        } else if let Some(name) = tagged.strip_prefix("d_m.") {
            d_opt.m.insert(name.to_string(), tensor);
        } else if let Some(name) = tagged.strip_prefix("d_v.") {
            d_opt.v.insert(name.to_string(), tensor);
        } else if let Some(name) = tagged.strip_prefix("e.") {
            let avg = ema
                .as_mut()
                .ok_or_else(|| Error::Checkpoint("average record without the ema flag".into()))?;
            avg.insert(name, tensor)?;
        } else {
            return Err(Error::Checkpoint(format!("unknown record section in {tagged}")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last record",
            bytes.len() - cur.pos
        )));
    }
    Ok((TrainState { store, g_opt, d_opt, ema, step, seed }, config_blob))
}

pub fn write_checkpoint<T: Scalar>(
    path: &Path,
    state: &TrainState<T>,
    config_blob: &[u8],
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state, config_blob))?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<(TrainState<T>, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::DiscriminatorConfig;
    use crate::generator::GeneratorConfig;
    use crate::training::{init_state, TrainConfig};

    fn tiny_state(ema: bool) -> TrainState<f32> {
        let gcfg = GeneratorConfig {
            stage_resolutions: vec![4, 16],
            init_dims: vec![8, 8],
            trunk_widths: vec![8, 8],
            fold_width: 1,
            latent_dim: 8,
            mapping_depth: 2,
            ..GeneratorConfig::reference()
        };
        let dcfg = DiscriminatorConfig {
            input_resolution: 16,
            base_channels: 4,
            max_channels: 8,
            stddev_group: 2,
        };
        let tcfg = TrainConfig { seed: 9, ema, ..TrainConfig::default() };
        init_state(&gcfg, &dcfg, &tcfg).unwrap()
    }

    #[test]
    fn encode_decode_encode_is_bitwise_stable() {
        let mut state = tiny_state(true);
        state.step = 37;
        state.g_opt.t = 37;
        state.d_opt.t = 37;
        let blob = b"[train]\nsteps = 37\n";
        let bytes = encode_checkpoint(&state, blob);
        let (back, cfg) = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(cfg, blob);
        assert_eq!(back.step, 37);
        assert_eq!(back.seed, 9);
        assert_eq!(back.store.len(), state.store.len());
        assert_eq!(encode_checkpoint(&back, &cfg), bytes);
    }

    #[test]
    fn header_and_payload_corruption_are_rejected() {
        let state = tiny_state(false);
        let bytes = encode_checkpoint(&state, b"cfg");
        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xff;
        assert!(decode_checkpoint::<f32>(&bad_magic).is_err());
        let mut bad_cfg = bytes.clone();
        let cfg_at = 8 + 4 + 4 * 8 + 2 + 32 + 4;
        bad_cfg[cfg_at] ^= 0x01;
        let err = decode_checkpoint::<f32>(&bad_cfg).map(|_| ()).unwrap_err();
        assert!(err.to_string().contains("digest"), "{err}");
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 3]).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode_checkpoint::<f32>(&trailing).is_err());
    }

    #[test]
    fn scalar_width_must_match_the_file() {
        let state = tiny_state(false);
        let bytes = encode_checkpoint(&state, b"cfg");
        let err = decode_checkpoint::<f64>(&bytes).map(|_| ()).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn files_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let state = tiny_state(false);
        write_checkpoint(&path, &state, b"disk cfg").unwrap();
        let (back, cfg) = read_checkpoint::<f32>(&path).unwrap();
        assert_eq!(cfg, b"disk cfg");
        for (name, value) in state.store.iter() {
            assert_eq!(back.store.get(name).unwrap().data(), value.data());
        }
    }
}
