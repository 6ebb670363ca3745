//! Binary checkpoint: `IMPR`, version, JSON config record, token table,
//! named f32 tensors. Integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use irag_tensor::Tensor;

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::model::Model;
use crate::params::Params;
use crate::tokenizer::Tokenizer;

pub const MAGIC: &[u8; 4] = b"IMPR";
pub const VERSION: u32 = 1;
const SNAPSHOT_PREFIX: &str = "snapshot.";
const MAX_RECORD: usize = 1 << 20;
const MAX_DIMS: usize = 8;

fn bad(msg: impl Into<String>) -> CoreError {
    CoreError::Checkpoint(msg.into())
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, model: &Model) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_string(&model.config).map_err(|e| bad(e.to_string()))?;
    put_str(w, &config)?;
    let table = model.tokenizer.table();
    put_u32(w, table.len())?;
    for t in table {
        put_str(w, t)?;
    }
    let mut tensors: Vec<(String, &Tensor)> = model.params.named();
    if let Some(s) = &model.snapshot {
        tensors.extend(s.named().into_iter().map(|(n, t)| (format!("{SNAPSHOT_PREFIX}{n}"), t)));
    }
    put_u32(w, tensors.len())?;
    for (name, t) in tensors {
        put_str(w, &name)?;
        put_u32(w, t.shape().len())?;
        for &d in t.shape() {
            put_u32(w, d)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if buf.len() != n {
            return Err(bad("truncated file"));
        }
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.exact(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        if n > MAX_RECORD {
            return Err(bad(format!("record of {n} bytes is too long")));
        }
        String::from_utf8(self.exact(n)?).map_err(|_| bad("record is not UTF-8"))
    }
}

pub fn read_checkpoint(r: impl Read) -> Result<Model> {
    let mut r = Reader { inner: r };
    if r.exact(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    let config: ModelConfig = serde_json::from_str(&r.string()?).map_err(|e| bad(format!("config: {e}")))?;
    config.validate()?;
    let n_tokens = r.u32()?;
    if n_tokens != config.vocab_size {
        return Err(bad(format!("token table has {n_tokens} entries, config says {}", config.vocab_size)));
    }
    let table = (0..n_tokens).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let tokenizer = Tokenizer::from_table(table)?;

    let n_tensors = r.u32()?;
    let mut params = BTreeMap::new();
    let mut snapshot = BTreeMap::new();
    for _ in 0..n_tensors {
        let name = r.string()?;
        let ndim = r.u32()?;
        if ndim > MAX_DIMS {
            return Err(bad(format!("tensor {name} has {ndim} dims")));
        }
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor too large"))?;
        let bytes = r.exact(numel.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(shape, data)?;
        let (map, key) = match name.strip_prefix(SNAPSHOT_PREFIX) {
            Some(rest) => (&mut snapshot, rest.to_string()),
            None => (&mut params, name.clone()),
        };
        if map.insert(key, t).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
    }
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    let params = Params::from_named(&config, params).map_err(|e| bad(e.to_string()))?;
    let snapshot = if snapshot.is_empty() {
        None
    } else {
        let mut s = Params::from_named(&config, snapshot).map_err(|e| bad(format!("snapshot: {e}")))?;
        s.set_requires_grad(false);
        Some(s)
    };
    Ok(Model { config, tokenizer, params, snapshot })
}

/// Write to a temporary sibling, then rename over `path`.
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let tmp = path.with_extension("impr.tmp");
    {
        let mut w = std::io::BufWriter::new(fs::File::create(&tmp)?);
        write_checkpoint(&mut w, model)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(std::io::BufReader::new(fs::File::open(path)?))
}
