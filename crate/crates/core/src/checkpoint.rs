//! Versioned binary files for training state and pseudo-targets.
//!
//! Checkpoint layout (little endian): magic `DUALCKPT`, u32 version, config
//! hash, seed, stage, step, model config (JSON), input width, init seed,
//! utterance-head size, then every parameter by name with its group, frozen
//! flag, shape and values, then the Adam state. A SHA-256 of all preceding
//! bytes closes the file. Strings are u32-length-prefixed UTF-8.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::encoders::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamGroup;
use crate::tensor::Tensor;
use crate::trainer::{Stage, Targets, TrainState};

const CKPT_MAGIC: &[u8; 8] = b"DUALCKPT";
const CKPT_VERSION: u32 = 1;
const TGT_MAGIC: &[u8; 8] = b"DUALTGT\0";
const TGT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.write_u32::<LittleEndian>(s.len() as u32).unwrap();
    w.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n > r.get_ref().len() {
        return Err(bad("string length beyond end of file"));
    }
    let mut buf = vec![0; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| bad(format!("invalid utf-8: {e}")))
}

fn put_values(w: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        w.write_f64::<LittleEndian>(v).unwrap();
    }
}

fn get_values(r: &mut Cursor<&[u8]>, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n * 8 > r.get_ref().len() {
        return Err(bad("tensor larger than file"));
    }
    let mut data = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut data)?;
    Tensor::new(shape.to_vec(), data)
}

fn with_digest(mut body: Vec<u8>) -> Vec<u8> {
    let d = Sha256::digest(&body);
    body.extend_from_slice(&d);
    body
}

fn split_digest(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 32 {
        return Err(bad("file truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch (corrupt file)"));
    }
    Ok(body)
}

fn check_header(r: &mut Cursor<&[u8]>, magic: &[u8; 8], version: u32) -> Result<()> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(bad("bad magic"));
    }
    let v = r.read_u32::<LittleEndian>()?;
    if v != version {
        return Err(bad(format!("unsupported version {v}, expected {version}")));
    }
    Ok(())
}

pub fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend_from_slice(CKPT_MAGIC);
    w.write_u32::<LittleEndian>(CKPT_VERSION).unwrap();
    put_str(&mut w, &state.config_hash);
    w.write_u64::<LittleEndian>(state.seed).unwrap();
    w.write_u8(state.stage.as_u8()).unwrap();
    w.write_u64::<LittleEndian>(state.step).unwrap();
    let m = &state.model;
    put_str(&mut w, &serde_json::to_string(&m.cfg).expect("model config serializes"));
    w.write_u64::<LittleEndian>(m.d_in as u64).unwrap();
    w.write_u64::<LittleEndian>(m.seed).unwrap();
    w.write_u32::<LittleEndian>(m.num_utt_targets().unwrap_or(0) as u32).unwrap();

    w.write_u32::<LittleEndian>(m.store.len() as u32).unwrap();
    for (_, p) in m.store.iter() {
        put_str(&mut w, &p.name);
        w.write_u8(p.group.as_u8()).unwrap();
        w.write_u8(p.frozen as u8).unwrap();
        w.write_u32::<LittleEndian>(p.value.rank() as u32).unwrap();
        for &d in p.value.shape() {
            w.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        put_values(&mut w, &p.value);
    }

    let a = &state.adam;
    for v in [a.cfg.beta1, a.cfg.beta2, a.cfg.eps] {
        w.write_f64::<LittleEndian>(v).unwrap();
    }
    for s in a.steps {
        w.write_u64::<LittleEndian>(s).unwrap();
    }
    w.write_u32::<LittleEndian>(a.m.len() as u32).unwrap();
    for (m, v) in a.m.iter().zip(&a.v) {
        put_values(&mut w, m);
        put_values(&mut w, v);
    }
    with_digest(w)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let body = split_digest(bytes)?;
    let mut r = Cursor::new(body);
    check_header(&mut r, CKPT_MAGIC, CKPT_VERSION)?;
    let config_hash = get_str(&mut r)?;
    let seed = r.read_u64::<LittleEndian>()?;
    let stage = Stage::from_u8(r.read_u8()?).ok_or_else(|| bad("unknown stage"))?;
    let step = r.read_u64::<LittleEndian>()?;
    let cfg: ModelConfig =
        serde_json::from_str(&get_str(&mut r)?).map_err(|e| bad(format!("model config: {e}")))?;
    let d_in = r.read_u64::<LittleEndian>()? as usize;
    let model_seed = r.read_u64::<LittleEndian>()?;
    let q = r.read_u32::<LittleEndian>()? as usize;
    let mut model = Model::new(&cfg, d_in, model_seed).map_err(|e| bad(format!("model: {e}")))?;
    if q > 0 {
        model.ensure_utt_head(q)?;
    }

    let n = r.read_u32::<LittleEndian>()? as usize;
    if n != model.store.len() {
        return Err(bad(format!(
            "{n} parameters stored, model has {}",
            model.store.len()
        )));
    }
    for _ in 0..n {
        let name = get_str(&mut r)?;
        let group = ParamGroup::from_u8(r.read_u8()?).ok_or_else(|| bad("unknown group"))?;
        let frozen = r.read_u8()? != 0;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        if rank > 8 {
            return Err(bad(format!("rank {rank} implausible")));
        }
        let shape = (0..rank)
            .map(|_| Ok(r.read_u64::<LittleEndian>()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let value = get_values(&mut r, &shape)?;
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| bad(format!("unknown parameter {name}")))?;
        let p = model.store.get_mut(id);
        if p.value.shape() != value.shape() || p.group != group {
            return Err(bad(format!("parameter {name} does not match the model")));
        }
        p.value = value;
        p.frozen = frozen;
    }

    let adam_cfg = AdamConfig {
        beta1: r.read_f64::<LittleEndian>()?,
        beta2: r.read_f64::<LittleEndian>()?,
        eps: r.read_f64::<LittleEndian>()?,
    };
    let mut steps = [0u64; 4];
    for s in &mut steps {
        *s = r.read_u64::<LittleEndian>()?;
    }
    let nm = r.read_u32::<LittleEndian>()? as usize;
    if nm > model.store.len() {
        return Err(bad("more optimizer moments than parameters"));
    }
    let mut adam = Adam {
        cfg: adam_cfg,
        m: Vec::with_capacity(nm),
        v: Vec::with_capacity(nm),
        steps,
    };
    for (_, p) in model.store.iter().take(nm) {
        adam.m.push(get_values(&mut r, p.value.shape())?);
        adam.v.push(get_values(&mut r, p.value.shape())?);
    }
    if (r.position() as usize) != body.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(TrainState {
        model,
        adam,
        stage,
        step,
        seed,
        config_hash,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    std::fs::File::create(path)?.write_all(&checkpoint_bytes(state))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Target file: magic `DUALTGT\0`, u32 version, K, Q, utterance count, then
/// per utterance its frame count, frame labels and utterance label
/// (`u32::MAX` when absent), closed by a SHA-256.
pub fn targets_bytes(t: &Targets) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend_from_slice(TGT_MAGIC);
    w.write_u32::<LittleEndian>(TGT_VERSION).unwrap();
    w.write_u32::<LittleEndian>(t.k as u32).unwrap();
    w.write_u32::<LittleEndian>(t.q as u32).unwrap();
    w.write_u32::<LittleEndian>(t.frame.len() as u32).unwrap();
    for (i, f) in t.frame.iter().enumerate() {
        w.write_u32::<LittleEndian>(f.len() as u32).unwrap();
        for &c in f {
            w.write_u32::<LittleEndian>(c).unwrap();
        }
        w.write_u32::<LittleEndian>(t.utt.get(i).copied().unwrap_or(u32::MAX))
            .unwrap();
    }
    with_digest(w)
}

pub fn targets_from_bytes(bytes: &[u8]) -> Result<Targets> {
    let body = split_digest(bytes)?;
    let mut r = Cursor::new(body);
    check_header(&mut r, TGT_MAGIC, TGT_VERSION)?;
    let k = r.read_u32::<LittleEndian>()? as usize;
    let q = r.read_u32::<LittleEndian>()? as usize;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut frame = Vec::with_capacity(n.min(1 << 20));
    let mut utt = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let t = r.read_u32::<LittleEndian>()? as usize;
        if t * 4 > body.len() {
            return Err(bad("frame count beyond end of file"));
        }
        let mut f = vec![0u32; t];
        r.read_u32_into::<LittleEndian>(&mut f)?;
        if f.iter().any(|&c| c as usize >= k) {
            return Err(bad("frame target outside 0..K"));
        }
        frame.push(f);
        utt.push(r.read_u32::<LittleEndian>()?);
    }
    let utt = if utt.iter().all(|&u| u == u32::MAX) {
        Vec::new()
    } else if utt.iter().any(|&u| u as usize >= q) {
        return Err(bad("utterance target outside 0..Q"));
    } else {
        utt
    };
    if (r.position() as usize) != body.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Targets { k, q, frame, utt })
}

pub fn save_targets(path: &Path, t: &Targets) -> Result<()> {
    std::fs::File::create(path)?.write_all(&targets_bytes(t))?;
    Ok(())
}

pub fn load_targets(path: &Path) -> Result<Targets> {
    targets_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> TrainState {
        let cfg = ModelConfig {
            d_frame: 6,
            d_feat: 5,
            d_utt: 4,
            frame_layers: 2,
            utt_layers: 3,
            num_frame_targets: 7,
            var_hidden: 8,
            seg_len: 10,
            ..ModelConfig::default()
        };
        let mut model = Model::new(&cfg, 3, 9).unwrap();
        model.freeze_extractor();
        model.ensure_utt_head(5).unwrap();
        let mut st = TrainState::new(model, AdamConfig::default(), 42, "abc");
        st.stage = Stage::Stage2;
        st.step = 17;
        st.adam.steps = [3, 4, 5, 6];
        st.adam.m[2].data_mut()[0] = 0.25;
        st.adam.v[3].data_mut()[1] = 1e-9;
        st
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let st = state();
        let bytes = checkpoint_bytes(&st);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&back), bytes);
        assert_eq!(back.model.store, st.model.store);
        assert_eq!(back.adam, st.adam);
        assert_eq!((back.stage, back.step, back.seed), (Stage::Stage2, 17, 42));
        assert!(back.model.extractor_frozen());
    }

    #[test]
    fn corruption_and_version_rejected() {
        let bytes = checkpoint_bytes(&state());
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(checkpoint_from_bytes(&flipped), Err(Error::Checkpoint(_))));
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 5]).is_err());

        let mut body = bytes[..bytes.len() - 32].to_vec();
        body[8] = 2;
        let err = checkpoint_from_bytes(&with_digest(body)).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn targets_round_trip() {
        let t = Targets {
            k: 4,
            q: 3,
            frame: vec![vec![0, 1, 3], vec![2, 2]],
            utt: vec![2, 0],
        };
        let bytes = targets_bytes(&t);
        assert_eq!(targets_from_bytes(&bytes).unwrap(), t);
        let boot = Targets {
            q: 0,
            utt: Vec::new(),
            ..t
        };
        assert_eq!(targets_from_bytes(&targets_bytes(&boot)).unwrap(), boot);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(targets_from_bytes(&bad).is_err());
    }
}
