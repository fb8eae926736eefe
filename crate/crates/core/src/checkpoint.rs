//! Binary checkpoints.
//!
//! Layout, all integers little-endian: magic `PCEM`, `u32` version, `u32`
//! tensor count, then per tensor a `u32` name length, the UTF-8 name, `u32`
//! rows, `u32` cols and `rows·cols` `f64` values in row-major order.
//!
//! Every parameter `N` is stored as `N` together with `N.adam_m`,
//! `N.adam_v` and `N.adam_t` (1x1 step count), followed by `meta.epoch`
//! (1x1) and `meta.seen` (1 x |S| seen class ids).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::Models;
use crate::ndcore::Matrix;

pub const MAGIC: &[u8; 4] = b"PCEM";
pub const VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.pcem";

fn tensors(models: &Models, epoch: usize) -> Vec<(String, Matrix)> {
    let mut out = Vec::new();
    for (name, p) in models.named_params() {
        out.push((format!("{name}.adam_m"), p.adam_m.clone()));
        out.push((format!("{name}.adam_v"), p.adam_v.clone()));
        out.push((format!("{name}.adam_t"), Matrix::filled(1, 1, p.step_count as f64)));
        out.push((name, p.value.clone()));
    }
    out.push(("meta.epoch".into(), Matrix::filled(1, 1, epoch as f64)));
    let seen: Vec<f64> = models.prototypes.class_ids().iter().map(|&c| c as f64).collect();
    out.push(("meta.seen".into(), Matrix::row_vector(&seen)));
    out
}

pub fn to_bytes(models: &Models, epoch: usize) -> Vec<u8> {
    let t = tensors(models, epoch);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.len() as u32).to_le_bytes());
    for (name, m) in &t {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()?;
    let mut out = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        let count = rows
            .checked_mul(cols)
            .filter(|c| c.saturating_mul(8) <= bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} has impossible shape {rows}x{cols}")))?;
        let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        out.push((name, Matrix::new(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

fn scalar(m: &Matrix, name: &str) -> Result<u64> {
    let v = if m.shape() == (1, 1) { m.get(0, 0) } else { -1.0 };
    if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
        Ok(v as u64)
    } else {
        Err(Error::Checkpoint(format!("{name} is not a non-negative integer scalar")))
    }
}

/// Fills a copy of `template` (whose shapes and seen classes come from the
/// config and dataset) from checkpoint bytes; returns it with the number of
/// completed epochs.
pub fn from_bytes(bytes: &[u8], template: &Models) -> Result<(Models, usize)> {
    let stored = parse(bytes)?;
    let expected = tensors(template, 0);
    if stored.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            stored.len()
        )));
    }
    for ((name, m), (want, w)) in stored.iter().zip(&expected) {
        if name != want {
            return Err(Error::Checkpoint(format!("expected tensor {want}, found {name}")));
        }
        if m.shape() != w.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, config expects {:?}",
                m.shape(),
                w.shape()
            )));
        }
    }
    let lookup = |n: &str| &stored.iter().find(|(k, _)| k == n).unwrap().1;
    if lookup("meta.seen") != &expected.last().unwrap().1 {
        return Err(Error::Checkpoint("seen classes differ from the dataset".into()));
    }
    let epoch = scalar(lookup("meta.epoch"), "meta.epoch")? as usize;
    let mut models = template.clone();
    for (name, p) in models.named_params_mut() {
        p.value = lookup(&name).clone();
        p.adam_m = lookup(&format!("{name}.adam_m")).clone();
        p.adam_v = lookup(&format!("{name}.adam_v")).clone();
        let t = format!("{name}.adam_t");
        p.step_count = scalar(lookup(&t), &t)?;
        p.zero_grad();
    }
    Ok((models, epoch))
}

pub fn save(models: &Models, epoch: usize, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(models, epoch)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, template: &Models) -> Result<(Models, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, template)
}
