//! Binary checkpoints: model configuration, named 32-bit parameter blobs,
//! and optional optimizer state.
//!
//! Layout (little-endian): `"RSTR"`, `u32` version, `u32`-prefixed config
//! text, `u32` parameter count, then per parameter a `u32`-prefixed name,
//! `u32` rank, `u32` dims and `f32` values; finally a `u8` flag and, when
//! set, the `u64` optimizer step followed by every first moment and then
//! every second moment as `f32`.

use std::fs;
use std::path::Path;

use crate::config::{parse_model_text, RunConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::AdamW;

pub const MAGIC: &[u8; 4] = b"RSTR";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f64]) {
    for &v in vals {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode(model: &Model, opt: Option<&AdamW>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = RunConfig {
        model: model.config.clone(),
        ..RunConfig::default()
    }
    .model_text();
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    put_u32(&mut out, model.store.len());
    for p in model.store.iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.tensor.shape().len());
        for &d in p.tensor.shape() {
            put_u32(&mut out, d);
        }
        put_f32s(&mut out, p.tensor.data());
    }
    match opt {
        None => out.push(0),
        Some(o) => {
            out.push(1);
            out.extend_from_slice(&o.step.to_le_bytes());
            for m in &o.m {
                put_f32s(&mut out, m);
            }
            for v in &o.v {
                put_f32s(&mut out, v);
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("length overflow")?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid utf-8".to_string())
    }
}

/// Rebuilds a model (and optimizer state, when stored) from checkpoint bytes.
pub fn decode(buf: &[u8], path: &Path) -> Result<(Model, Option<AdamW>)> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.into(),
        reason,
    };
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(&corrupt)? != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32().map_err(&corrupt)?;
    if version != VERSION as usize {
        return Err(Error::Version {
            found: version.to_string(),
            expected: VERSION.to_string(),
        });
    }
    let config = parse_model_text(&r.string().map_err(&corrupt)?)?;
    let mut model = Model::new(config, 0)?;
    let count = r.u32().map_err(&corrupt)?;
    if count != model.store.len() {
        return Err(corrupt(format!(
            "{count} parameters stored, configuration defines {}",
            model.store.len()
        )));
    }
    for param in model.store.iter_mut() {
        let name = r.string().map_err(&corrupt)?;
        if name != param.name {
            return Err(corrupt(format!("expected parameter {}, found {name}", param.name)));
        }
        let rank = r.u32().map_err(&corrupt)?;
        let shape = (0..rank).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>().map_err(&corrupt)?;
        if shape != param.tensor.shape() {
            return Err(corrupt(format!("{name}: shape {shape:?}, expected {:?}", param.tensor.shape())));
        }
        let vals = r.f32s(param.tensor.len()).map_err(&corrupt)?;
        param.tensor.data_mut().copy_from_slice(&vals);
    }
    let opt = match r.take(1).map_err(&corrupt)?[0] {
        0 => None,
        1 => {
            let step = u64::from_le_bytes(r.take(8).map_err(&corrupt)?.try_into().unwrap());
            let lens: Vec<usize> = model.store.iter().map(|p| p.tensor.len()).collect();
            let m = lens.iter().map(|&n| r.f32s(n)).collect::<std::result::Result<_, _>>().map_err(&corrupt)?;
            let v = lens.iter().map(|&n| r.f32s(n)).collect::<std::result::Result<_, _>>().map_err(&corrupt)?;
            Some(AdamW { step, m, v })
        }
        f => return Err(corrupt(format!("invalid optimizer flag {f}"))),
    };
    if r.pos != buf.len() {
        return Err(corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((model, opt))
}

pub fn save(path: &Path, model: &Model, opt: Option<&AdamW>) -> Result<()> {
    fs::write(path, encode(model, opt)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, Option<AdamW>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf, path)
}
