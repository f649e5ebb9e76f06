//! Binary tensor container ("CMAB"): magic bytes, u16 LE version, then
//! tensor payloads. Version 1 holds one bare f32 tensor (embedding dumps,
//! compact and tool-friendly). Version 2 holds named f64 records plus meta
//! entries and backs checkpoints, where reload must reproduce evaluation
//! bit-exactly; f32 would round the parameters.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = [0x43, 0x4D, 0x41, 0x42];
pub const VERSION_DUMP: u16 = 1;
pub const VERSION_CHECKPOINT: u16 = 2;

const META_STEP: &str = "meta.step";
const META_HASH_HI: &str = "meta.config_hash_hi";
const META_HASH_LO: &str = "meta.config_hash_lo";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: u64,
    pub tensors: Vec<(String, Tensor)>,
}

// ── low-level readers/writers ────────────────────────────────────────────────

fn write_extents(w: &mut impl Write, shape: &[usize]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::Checkpoint(format!("rank {} too large", shape.len())));
    }
    w.write_all(&[shape.len() as u8])?;
    for &e in shape {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    Ok(())
}

fn read_extents(r: &mut impl Read) -> Result<Vec<usize>> {
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        shape.push(u64::from_le_bytes(buf) as usize);
    }
    Ok(shape)
}

fn check_header(r: &mut impl Read, want_version: u16) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:02x?}")));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver)?;
    let version = u16::from_le_bytes(ver);
    if version != want_version {
        return Err(Error::Checkpoint(format!(
            "version {version}, expected {want_version}"
        )));
    }
    Ok(())
}

// ── version 1: single f32 tensor (embedding dumps) ──────────────────────────

pub fn write_dump(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + t.numel() * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION_DUMP.to_le_bytes());
    write_extents(&mut buf, t.shape())?;
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    check_header(&mut r, VERSION_DUMP)?;
    let shape = read_extents(&mut r)?;
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        data.push(f32::from_le_bytes(b) as f64);
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
    }
    Tensor::new(shape, data)
}

// ── version 2: named f64 records (checkpoints) ───────────────────────────────

fn write_record(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    let nb = name.as_bytes();
    w.write_all(&(nb.len() as u32).to_le_bytes())?;
    w.write_all(nb)?;
    write_extents(w, t.shape())?;
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_record(r: &mut impl Read) -> Result<(String, Tensor)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
    let shape = read_extents(r)?;
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok((name, Tensor::new(shape, data)?))
}

fn scalar1(v: f64) -> Tensor {
    Tensor::new(vec![1], vec![v]).expect("scalar record")
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION_CHECKPOINT.to_le_bytes());
    let count = ck.tensors.len() + 3;
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    write_record(&mut buf, META_STEP, &scalar1(ck.step as f64))?;
    write_record(&mut buf, META_HASH_HI, &scalar1((ck.config_hash >> 32) as f64))?;
    write_record(
        &mut buf,
        META_HASH_LO,
        &scalar1((ck.config_hash & 0xffff_ffff) as f64),
    )?;
    for (name, t) in &ck.tensors {
        write_record(&mut buf, name, t)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    check_header(&mut r, VERSION_CHECKPOINT)?;
    let mut cnt = [0u8; 4];
    r.read_exact(&mut cnt)?;
    let count = u32::from_le_bytes(cnt) as usize;
    let mut step = None;
    let mut hash_hi = None;
    let mut hash_lo = None;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let (name, t) = read_record(&mut r)?;
        match name.as_str() {
            META_STEP => step = Some(t.item() as u64),
            META_HASH_HI => hash_hi = Some(t.item() as u64),
            META_HASH_LO => hash_lo = Some(t.item() as u64),
            _ => tensors.push((name, t)),
        }
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
    }
    let (step, hi, lo) = match (step, hash_hi, hash_lo) {
        (Some(s), Some(h), Some(l)) => (s, h, l),
        _ => return Err(Error::Checkpoint("missing meta records".into())),
    };
    Ok(Checkpoint {
        step,
        config_hash: (hi << 32) | lo,
        tensors,
    })
}

// ─────────────────────────────────────────────────────────────────────────────
