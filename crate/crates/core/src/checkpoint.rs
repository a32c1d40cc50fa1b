//! Versioned binary checkpoints (little-endian).
//!
//! ```text
//! "RPSTCKPT"  u32 version  u32 len  config text
//! u32 n  n x { u32 len  name  u8 trainable  u32 rank  u32 dims[rank]  f32 data }
//! u32 m  m x { u32 len  name  u32 channels  f32 mean[c]  f32 var[c] }
//! u8 has_optimizer  [n x { u64 step  f32 first[len]  f32 second[len] }]
//! ```

use std::fs;
use std::path::Path;

use crate::config::{DataConfig, ExperimentConfig};
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 8] = b"RPSTCKPT";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn to_bytes(model: &Model, with_optimizer: bool) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = ExperimentConfig {
        model: model.config.clone(),
        data: DataConfig::default(),
    };
    put_str(&mut out, &cfg.to_text());
    let params = model.store.params();
    put_u32(&mut out, params.len());
    for p in params {
        put_str(&mut out, &p.name);
        out.push(p.trainable as u8);
        put_u32(&mut out, p.value.rank());
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        put_f32s(&mut out, p.value.data());
    }
    let stats = model.store.all_stats();
    put_u32(&mut out, stats.len());
    for s in stats {
        put_str(&mut out, &s.name);
        put_u32(&mut out, s.stats.mean.len());
        put_f32s(&mut out, &s.stats.mean);
        put_f32s(&mut out, &s.stats.var);
    }
    out.push(with_optimizer as u8);
    if with_optimizer {
        for p in params {
            out.extend_from_slice(&p.step.to_le_bytes());
            put_f32s(&mut out, &p.first_moment);
            put_f32s(&mut out, &p.second_moment);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated checkpoint: missing {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        Ok(self
            .take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{what} too large")))?, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Rebuild a model from checkpoint bytes; every block is checked against a
/// freshly built model of the stored config.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint: wrong magic".into()));
    }
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg: ExperimentConfig = r.string("config block")?.parse()?;
    let mut model = Model::new(cfg.model)?;
    let n = r.u32("parameter count")?;
    if n != model.store.params().len() {
        return Err(Error::Shape(format!(
            "checkpoint has {n} parameters, config builds {}",
            model.store.params().len()
        )));
    }
    for p in model.store.params_mut() {
        let name = r.string("parameter name")?;
        if name != p.name {
            return Err(Error::Shape(format!("expected parameter '{}', found '{name}'", p.name)));
        }
        let trainable = r.u8("trainable flag")? != 0;
        let rank = r.u32("parameter rank")?;
        let dims = (0..rank).map(|_| r.u32("parameter dims")).collect::<Result<Vec<_>>>()?;
        if dims != p.value.shape() {
            return Err(Error::Shape(format!(
                "parameter '{name}' has shape {dims:?}, config expects {:?}",
                p.value.shape()
            )));
        }
        let data = r.f32s(p.value.len(), &format!("data of '{name}'"))?;
        p.value.data_mut().copy_from_slice(&data);
        p.trainable = trainable;
    }
    let m = r.u32("stats count")?;
    if m != model.store.all_stats().len() {
        return Err(Error::Shape(format!(
            "checkpoint has {m} stats blocks, config builds {}",
            model.store.all_stats().len()
        )));
    }
    for s in model.store.all_stats_mut() {
        let name = r.string("stats name")?;
        if name != s.name {
            return Err(Error::Shape(format!("expected stats '{}', found '{name}'", s.name)));
        }
        let c = r.u32("stats channels")?;
        if c != s.stats.mean.len() {
            return Err(Error::Shape(format!(
                "stats '{name}' has {c} channels, config expects {}",
                s.stats.mean.len()
            )));
        }
        s.stats.mean = r.f32s(c, "running mean")?;
        s.stats.var = r.f32s(c, "running var")?;
    }
    match r.u8("optimizer flag")? {
        0 => {}
        1 => {
            for p in model.store.params_mut() {
                p.step = r.u64("optimizer step")?;
                p.first_moment = r.f32s(p.value.len(), "first moment")?;
                p.second_moment = r.f32s(p.value.len(), "second moment")?;
            }
        }
        f => return Err(Error::Format(format!("invalid optimizer flag {f}"))),
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(path: &Path, model: &Model, with_optimizer: bool) -> Result<()> {
    fs::write(path, to_bytes(model, with_optimizer))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}
