//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "LTOK" | u16 version | u32 len, config text | u32 tensor count
//! per tensor: u32 len, name | u8 dtype (0 = f64, 1 = u64) | u32 rank | u32 dims… | data
//! u32 CRC32 of every preceding byte
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{ActionNormalizer, Tokenizer, TokenizerConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::Module;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LTOK";
pub const CHECKPOINT_VERSION: u16 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_U64: u8 = 1;

const NORM_LO: &str = "normalizer.lo";
const NORM_HI: &str = "normalizer.hi";
const USAGE: &str = "codebook.usage_counts";
const STEPS: &str = "meta.trained_steps";

enum Data {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

struct Entry {
    name: String,
    dims: Vec<usize>,
    data: Data,
}

pub fn save_checkpoint(tok: &Tokenizer, path: impl AsRef<Path>) -> Result<()> {
    let mut entries = Vec::new();
    tok.visit_params("", &mut |name, t| {
        entries.push(Entry {
            name,
            dims: t.shape().to_vec(),
            data: Data::F64(t.data().to_vec()),
        })
    });
    let norm = tok.normalizer();
    for (name, v) in [(NORM_LO, &norm.lo), (NORM_HI, &norm.hi)] {
        entries.push(Entry {
            name: name.into(),
            dims: vec![v.len()],
            data: Data::F64(v.clone()),
        });
    }
    if let Some(cb) = tok.codebook() {
        entries.push(Entry {
            name: USAGE.into(),
            dims: vec![cb.size()],
            data: Data::U64(cb.usage_counts().to_vec()),
        });
    }
    entries.push(Entry {
        name: STEPS.into(),
        dims: vec![1],
        data: Data::U64(vec![tok.trained_steps()]),
    });

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut buf, &tok.config().to_canonical());
    put_u32(&mut buf, entries.len());
    for e in &entries {
        put_str(&mut buf, &e.name);
        buf.push(match e.data {
            Data::F64(_) => DTYPE_F64,
            Data::U64(_) => DTYPE_U64,
        });
        put_u32(&mut buf, e.dims.len());
        for &d in &e.dims {
            put_u32(&mut buf, d);
        }
        match &e.data {
            Data::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            Data::U64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

fn put_u32(buf: &mut Vec<u8>, n: usize) {
    buf.extend_from_slice(&(n as u32).to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Tokenizer> {
    let path = path.as_ref();
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic bytes".into()));
    }
    if bytes.len() < 10 {
        return Err(fail("truncated header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(fail("checksum mismatch".into()));
    }

    let mut r = Reader { bytes: body, pos: 6 };
    let config_text = r.str().map_err(fail)?;
    let config = TokenizerConfig::from_canonical(&config_text)
        .map_err(|e| fail(format!("config: {e}")))?;
    let count = r.u32().map_err(fail)?;
    let mut tensors = HashMap::new();
    let mut lo = None;
    let mut hi = None;
    let mut usage = None;
    let mut steps = 0;
    for _ in 0..count {
        let name = r.str().map_err(fail)?;
        let dtype = r.take(1).map_err(fail)?[0];
        let rank = r.u32().map_err(fail)?;
        let dims = (0..rank)
            .map(|_| r.u32())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(fail)?;
        let n: usize = dims.iter().product();
        let raw = r
            .take(n.checked_mul(8).ok_or_else(|| fail("tensor too large".into()))?)
            .map_err(fail)?;
        let words = raw.chunks_exact(8).map(|c| c.try_into().unwrap());
        match (dtype, name.as_str()) {
            (DTYPE_F64, _) => {
                let data: Vec<f64> = words.map(f64::from_le_bytes).collect();
                match name.as_str() {
                    NORM_LO => lo = Some(data),
                    NORM_HI => hi = Some(data),
                    _ => {
                        let t = Tensor::new(dims, data)
                            .map_err(|e| fail(format!("tensor `{name}`: {e}")))?;
                        tensors.insert(name, t.into_param());
                    }
                }
            }
            (DTYPE_U64, USAGE) => usage = Some(words.map(u64::from_le_bytes).collect()),
            (DTYPE_U64, STEPS) => {
                steps = words.map(u64::from_le_bytes).next().unwrap_or(0);
            }
            (DTYPE_U64, _) => return Err(fail(format!("unexpected integer tensor `{name}`"))),
            (t, _) => return Err(fail(format!("unknown dtype tag {t} for `{name}`"))),
        }
    }
    if r.pos != body.len() {
        return Err(fail("trailing bytes before checksum".into()));
    }
    let normalizer = match (lo, hi) {
        (Some(lo), Some(hi)) => ActionNormalizer::new(lo, hi).map_err(|e| fail(e.to_string()))?,
        _ => return Err(fail("normalizer missing".into())),
    };
    Tokenizer::restore_parts(config, normalizer, steps, tensors, usage)
        .map_err(|e| fail(e.to_string()))
}
