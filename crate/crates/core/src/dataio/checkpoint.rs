use std::path::Path;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::archive::{put_string, Reader};
use super::write_atomic;
use crate::error::{Error, Result};
use crate::losses::SubCenterBank;
use crate::trainer::{Checkpoint, ToyNet, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SVCK";
pub const CHECKPOINT_VERSION: u16 = 1;

// Layout: magic, u16 version, u32 config length + key-value config text,
// stage string, u64 step, u64 seed, u32 class count + names,
// u32 sub-centers, u32 dim, then each network tensor as u64 length + f64
// values and finally the bank weights.

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = ckpt.config.to_kv();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    put_string(&mut out, &ckpt.stage)?;
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    let (j, k, d) = ckpt.bank.weights.dim();
    if ckpt.class_names.len() != j {
        return Err(Error::Internal(format!("{} class names for {j} classes", ckpt.class_names.len())));
    }
    out.extend_from_slice(&(j as u32).to_le_bytes());
    for name in &ckpt.class_names {
        put_string(&mut out, name)?;
    }
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    let bank = ckpt.bank.weights.as_standard_layout();
    let mut tensors = ckpt.net.tensors();
    tensors.push(bank.as_slice().expect("standard layout"));
    for t in tensors {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?)
        .map_err(|_| Error::Parse("checkpoint config: invalid UTF-8".into()))?;
    let config = TrainConfig::from_kv_text(cfg_text, TrainConfig::default())?;
    let stage = r.string("stage")?;
    let step = r.u64("step")?;
    let seed = r.u64("seed")?;
    let j = r.u32("class count")? as usize;
    let class_names = (0..j).map(|_| r.string("class name")).collect::<Result<Vec<_>>>()?;
    let k = r.u32("sub-centers")? as usize;
    let d = r.u32("dim")? as usize;
    if d != config.net.embed_dim {
        return Err(Error::DimMismatch { expected: config.net.embed_dim, found: d });
    }

    let mut net = ToyNet::init(&config.net, &mut ChaCha8Rng::seed_from_u64(0))?;
    for t in net.tensors_mut() {
        let n = r.u64("tensor length")? as usize;
        if n != t.len() {
            return Err(Error::DimMismatch { expected: t.len(), found: n });
        }
        t.copy_from_slice(&r.f64s(n, "tensor")?);
    }
    let n = r.u64("bank length")? as usize;
    let expected = j * k * d;
    if n != expected {
        return Err(Error::DimMismatch { expected, found: n });
    }
    let weights = Array3::from_shape_vec((j, k, d), r.f64s(n, "bank")?)
        .map_err(|e| Error::Internal(e.to_string()))?;
    r.finish()?;
    Ok(Checkpoint { net, bank: SubCenterBank::new(weights)?, class_names, config, stage, step, seed })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(ckpt)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
