//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "OCTM" | u16 version
//! u32 layers | u32 heads | u32 width | u32 ff_width | u32 max_positions
//! u32 classes | u32 max_depth | f64 dropout | u32 len | scheme text
//! u32 count | count x (u32 len | name | u32 rows | u32 cols | rows*cols f64)
//! u32 crc32 of everything above
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OCTM";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.layers, c.heads, c.width, c.ff_width, c.max_positions, c.classes, c.max_depth as usize] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&c.dropout.to_le_bytes());
    put_str(&mut out, &c.scheme);
    put_u32(&mut out, model.store.len());
    for (_, name, t) in model.store.iter() {
        put_str(&mut out, name);
        put_u32(&mut out, t.rows());
        put_u32(&mut out, t.cols());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

/// Verified body (without the checksum) and the stored config.
fn parse_header(bytes: &[u8]) -> Result<(ModelConfig, Reader<'_>)> {
    if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing OCTM magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch (file truncated or corrupt)".into()));
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut r = Reader { buf: body, at: 6 };
    let mut ints = [0usize; 7];
    for v in &mut ints {
        *v = r.u32()?;
    }
    let dropout = r.f64()?;
    let scheme = r.string()?;
    let config = ModelConfig {
        layers: ints[0],
        heads: ints[1],
        width: ints[2],
        ff_width: ints[3],
        max_positions: ints[4],
        classes: ints[5],
        max_depth: ints[6] as u32,
        scheme,
        dropout,
    };
    Ok((config, r))
}

fn load_params(model: &mut Model, mut r: Reader) -> Result<()> {
    let count = r.u32()?;
    if count != model.store.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {count} parameters, config expects {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let name = r.string()?;
        let rows = r.u32()?;
        let cols = r.u32()?;
        let target = model
            .store
            .by_name_mut(&name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
        if target.shape() != (rows, cols) {
            return Err(Error::Shape(format!(
                "{name}: checkpoint {rows}x{cols}, config {}x{}",
                target.rows(),
                target.cols()
            )));
        }
        let raw = r.take(rows * cols * 8)?;
        for (v, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if r.at != r.buf.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    if !model.store.all_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (config, r) = parse_header(bytes)?;
    let mut model = Model::new(config, 0)?;
    load_params(&mut model, r)?;
    Ok(model)
}

/// Loads parameters into a model built from `config`; shapes must agree.
pub fn from_bytes_with_config(bytes: &[u8], config: &ModelConfig) -> Result<Model> {
    let (_, r) = parse_header(bytes)?;
    let mut model = Model::new(config.clone(), 0)?;
    load_params(&mut model, r)?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}
