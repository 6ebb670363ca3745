//! `IIDX` index files (all integers little-endian):
//!
//! ```text
//! magic "IIDX" | version u32 | kind u8 (0 flat, 1 pq) | dim u32 | n u64
//! ids: count u64, then count × u64
//! flat payload: n × dim × f32
//! pq payload:   m u32 | bits u32 | has_rotation u8 | [dim × dim f32]
//!               | m × 2^bits × sub_dim f32 centroids | n × m u8 codes
//! ```

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{IndexError, Result};
use crate::{AnnIndex, FlatIndex, PqCodebook, PqIndex};

pub const MAGIC: &[u8; 4] = b"IIDX";
pub const VERSION: u32 = 1;

const KIND_FLAT: u8 = 0;
const KIND_PQ: u8 = 1;

/// Refuse headers that would need more than this many values.
const MAX_VALUES: u64 = 1 << 34;

pub fn write_index<W: Write>(w: &mut W, index: &AnnIndex) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let (kind, ids) = match index {
        AnnIndex::Flat(f) => (KIND_FLAT, f.ids()),
        AnnIndex::Pq(p) => (KIND_PQ, p.ids()),
    };
    w.write_all(&[kind])?;
    w.write_all(&(index.dim() as u32).to_le_bytes())?;
    w.write_all(&(index.len() as u64).to_le_bytes())?;
    w.write_all(&(ids.len() as u64).to_le_bytes())?;
    for id in ids {
        w.write_all(&id.to_le_bytes())?;
    }
    match index {
        AnnIndex::Flat(f) => write_f32s(w, f.vectors())?,
        AnnIndex::Pq(p) => {
            let cb = p.codebook();
            w.write_all(&(cb.m() as u32).to_le_bytes())?;
            w.write_all(&cb.bits().to_le_bytes())?;
            match cb.rotation() {
                Some(r) => {
                    w.write_all(&[1])?;
                    write_f32s(w, r)?;
                }
                None => w.write_all(&[0])?,
            }
            write_f32s(w, cb.centroids())?;
            w.write_all(p.codes())?;
        }
    }
    Ok(())
}

pub fn read_index<R: Read>(r: &mut R) -> Result<AnnIndex> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(IndexError::Format("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(IndexError::Format(format!("unsupported version {version}")));
    }
    let kind = read_u8(r)?;
    let dim = read_u32(r)? as usize;
    let n = read_u64(r)?;
    let id_count = read_u64(r)?;
    if id_count != n {
        return Err(IndexError::Format(format!("header says {n} rows but {id_count} ids")));
    }
    check_size(n.saturating_mul(dim as u64))?;
    let n = n as usize;
    let mut ids = Vec::new();
    for _ in 0..n {
        ids.push(read_u64(r)?);
    }
    let index = match kind {
        KIND_FLAT => AnnIndex::Flat(FlatIndex::from_rows(dim, ids, read_f32s(r, n * dim)?)?),
        KIND_PQ => {
            let m = read_u32(r)? as usize;
            let bits = read_u32(r)?;
            if m == 0 || m > dim.max(1) || bits == 0 || bits > 8 {
                return Err(IndexError::Format(format!("bad pq geometry m={m} bits={bits}")));
            }
            check_size((dim as u64) * (dim as u64))?;
            let rotation = match read_u8(r)? {
                0 => None,
                1 => Some(read_f32s(r, dim * dim)?),
                f => return Err(IndexError::Format(format!("bad rotation flag {f}"))),
            };
            let centroids = read_f32s(r, dim << bits)?;
            let mut codes = Vec::new();
            r.take((n * m) as u64).read_to_end(&mut codes)?;
            if codes.len() < n * m {
                return Err(IndexError::Format("truncated file".into()));
            }
            let codebook = PqCodebook::from_parts(dim, m, bits, centroids, rotation)?;
            AnnIndex::Pq(PqIndex::from_codes(codebook, ids, codes)?)
        }
        k => return Err(IndexError::Format(format!("unknown index kind {k}"))),
    };
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(IndexError::Format("trailing bytes after payload".into()));
    }
    Ok(index)
}

/// Write to a sibling temp file, then rename over `path`.
pub fn save_index(path: &Path, index: &AnnIndex) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        write_index(&mut w, index)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<AnnIndex> {
    let bytes = fs::read(path)?;
    read_index(&mut bytes.as_slice())
}

fn check_size(values: u64) -> Result<()> {
    if values > MAX_VALUES {
        return Err(IndexError::Format(format!("implausible payload of {values} values")));
    }
    Ok(())
}

fn write_f32s<W: Write>(w: &mut W, xs: &[f32]) -> io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => IndexError::Format("truncated file".into()),
        _ => IndexError::Io(e),
    })
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads incrementally so a lying header cannot force a huge allocation.
fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f32>> {
    let want = count as u64 * 4;
    let mut bytes = Vec::new();
    r.take(want).read_to_end(&mut bytes)?;
    if (bytes.len() as u64) < want {
        return Err(IndexError::Format("truncated file".into()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}
