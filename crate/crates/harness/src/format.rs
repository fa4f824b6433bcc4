//! Binary artifact formats.
//!
//! Checkpoint: magic `SADG`, version, tensor count, then per tensor the name
//! length and UTF-8 name, rank, dims and a binary32 payload.
//! Dataset: magic `SADD`, version, `N C H W`, a binary32 image payload, then
//! `N` u16 labels (`u16::MAX` marks an unlabeled image).
//! Both end with a `PROV` block: seed (u64), config hash (u64), flags (u32).
//! All integers and floats are little-endian.

use std::io::Write;
use std::path::Path;

use sadag_autodiff::Array;
use sadag_core::synthesis::Provenance;

use crate::error::FormatError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SADG";
pub const DATASET_MAGIC: &[u8; 4] = b"SADD";
pub const PROV_MAGIC: &[u8; 4] = b"PROV";
pub const FORMAT_VERSION: u32 = 1;
pub const UNLABELED: u16 = u16::MAX;

const FLAG_WARMUP_ONLY: u32 = 1;
const FLAG_FALLBACK_WARNING: u32 = 2;

type Result<T> = std::result::Result<T, FormatError>;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| FormatError::Invalid(format!("{what} {v} does not fit in u32")))?;
    put_u32(out, v);
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, data: &[f64]) {
    out.reserve(data.len() * 4);
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn put_provenance(out: &mut Vec<u8>, p: &Provenance) {
    out.extend_from_slice(PROV_MAGIC);
    out.extend_from_slice(&p.seed.to_le_bytes());
    out.extend_from_slice(&p.config_hash.to_le_bytes());
    let mut flags = 0;
    if p.warmup_only {
        flags |= FLAG_WARMUP_ONLY;
    }
    if p.fallback_warning {
        flags |= FLAG_FALLBACK_WARNING;
    }
    put_u32(out, flags);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(FormatError::Truncated { offset: self.pos, need: n - remaining });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn magic(&mut self, expected: &'static [u8; 4]) -> Result<()> {
        let offset = self.pos;
        let found = self.take(4)?;
        if found != expected {
            return Err(FormatError::BadMagic {
                offset,
                expected: std::str::from_utf8(expected).expect("ASCII magic"),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let found = self.u32()?;
        if found != FORMAT_VERSION {
            return Err(FormatError::Version { found, expected: FORMAT_VERSION });
        }
        Ok(())
    }

    /// Product of `dims` as a byte count of `width`-byte elements, checked
    /// against overflow and the bytes left.
    fn payload_len(&self, dims: &[usize], width: usize, offset: usize) -> Result<usize> {
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(width))
            .ok_or(FormatError::DimOverflow { offset })?;
        if n > self.bytes.len() - self.pos {
            return Err(FormatError::Truncated { offset: self.pos, need: n - (self.bytes.len() - self.pos) });
        }
        Ok(n)
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn provenance(&mut self) -> Result<Provenance> {
        self.magic(PROV_MAGIC)?;
        let seed = self.u64()?;
        let config_hash = self.u64()?;
        let flags = self.u32()?;
        if flags & !(FLAG_WARMUP_ONLY | FLAG_FALLBACK_WARNING) != 0 {
            return Err(FormatError::Invalid(format!("unknown provenance flags {flags:#x}")));
        }
        Ok(Provenance {
            seed,
            config_hash,
            warmup_only: flags & FLAG_WARMUP_ONLY != 0,
            fallback_warning: flags & FLAG_FALLBACK_WARNING != 0,
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(FormatError::Trailing { offset: self.pos, extra: self.bytes.len() - self.pos });
        }
        Ok(())
    }
}

/// Named tensors, each stored at binary32 precision.
pub fn encode_checkpoint(tensors: &[(String, Array)], prov: &Provenance) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_len(&mut out, tensors.len(), "tensor count")?;
    for (name, a) in tensors {
        put_len(&mut out, name.len(), "name length")?;
        out.extend_from_slice(name.as_bytes());
        put_len(&mut out, a.rank(), "rank")?;
        for &d in a.shape() {
            put_len(&mut out, d, "dimension")?;
        }
        put_f32s(&mut out, a.data());
    }
    put_provenance(&mut out, prov);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Vec<(String, Array)>, Provenance)> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let offset = r.pos;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| FormatError::Utf8 { offset })?.to_string();
        let rank = r.u32()? as usize;
        let offset = r.pos;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n = r.payload_len(&dims, 4, offset)? / 4;
        let data = r.f32s(n)?;
        let a = Array::new(dims, data).map_err(|e| FormatError::Invalid(format!("tensor {name}: {e}")))?;
        tensors.push((name, a));
    }
    let prov = r.provenance()?;
    r.finish()?;
    Ok((tensors, prov))
}

/// An image set as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    /// `N x C x H x W`.
    pub images: Array,
    /// `None` for unlabeled (synthetic) images.
    pub labels: Option<Vec<usize>>,
    pub provenance: Provenance,
}

pub fn encode_dataset(ds: &DatasetFile) -> Result<Vec<u8>> {
    let shape = ds.images.shape();
    if shape.len() != 4 {
        return Err(FormatError::Invalid(format!("images must be N x C x H x W, got {shape:?}")));
    }
    let n = shape[0];
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    for &d in shape {
        put_len(&mut out, d, "dimension")?;
    }
    put_f32s(&mut out, ds.images.data());
    match &ds.labels {
        Some(labels) => {
            if labels.len() != n {
                return Err(FormatError::Invalid(format!("{} labels for {n} images", labels.len())));
            }
            for &l in labels {
                let l = u16::try_from(l)
                    .ok()
                    .filter(|&l| l != UNLABELED)
                    .ok_or_else(|| FormatError::Invalid(format!("label {l} out of range")))?;
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        None => (0..n).for_each(|_| out.extend_from_slice(&UNLABELED.to_le_bytes())),
    }
    put_provenance(&mut out, &ds.provenance);
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetFile> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(DATASET_MAGIC)?;
    r.version()?;
    let offset = r.pos;
    let dims: Vec<usize> = (0..4).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
    let n = r.payload_len(&dims, 4, offset)? / 4;
    let images = Array::new(dims.clone(), r.f32s(n)?).map_err(|e| FormatError::Invalid(e.to_string()))?;
    let raw: Vec<u16> = r.take(dims[0] * 2)?.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    let labels = if raw.iter().all(|&l| l == UNLABELED) {
        None
    } else if raw.contains(&UNLABELED) {
        return Err(FormatError::Invalid("mix of labeled and unlabeled images".into()));
    } else {
        Some(raw.into_iter().map(usize::from).collect())
    };
    let provenance = r.provenance()?;
    r.finish()?;
    Ok(DatasetFile { images, labels, provenance })
}

/// Writes to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(FormatError::EmptyPath);
    }
    let io = |source| FormatError::Io { path: path.to_path_buf(), source };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if path.as_os_str().is_empty() {
        return Err(FormatError::EmptyPath);
    }
    std::fs::read(path).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, Array)], prov: &Provenance) -> Result<()> {
    write_atomic(path, &encode_checkpoint(tensors, prov)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Vec<(String, Array)>, Provenance)> {
    decode_checkpoint(&read(path)?)
}

pub fn save_dataset(path: &Path, ds: &DatasetFile) -> Result<()> {
    write_atomic(path, &encode_dataset(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    decode_dataset(&read(path)?)
}

/// Rounds every value to binary32, as a save and load would.
pub fn snap_f32(a: &Array) -> Array {
    a.map(|v| v as f32 as f64)
}
