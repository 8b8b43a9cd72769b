//! `SKDS` dataset container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! b"SKDS" | u32 version | u32 N | u32 C | u32 T | u32 V | u32 M
//! N*C*T*V*M f64 coordinates, each sample laid out [C, T, V, M]
//! N u32 labels
//! u32 trailer length | UTF-8 JSON trailer
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::{Dataset, DatasetMeta, SkeletonSequence};
use crate::error::{Error, Result};
use crate::numerics::DenseArray;

pub const MAGIC: &[u8; 4] = b"SKDS";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("truncated payload: {section} needs {missing} more bytes")]
    Truncated { section: String, missing: usize },
    #[error("inconsistent file: {0}")]
    Consistency(String),
    #[error("invalid trailer: {0}")]
    Trailer(String),
}

impl From<FormatError> for Error {
    fn from(e: FormatError) -> Self {
        Error::Parse(e.to_string())
    }
}

/// Cursor over a byte buffer that reports which section ran short.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if available < n {
            return Err(FormatError::Truncated {
                section: section.to_string(),
                missing: n - available,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, section: &str) -> Result<u32, FormatError> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, section: &str) -> Result<u64, FormatError> {
        let b = self.take(8, section)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, count: usize, section: &str) -> Result<Vec<f64>, FormatError> {
        let bytes = count
            .checked_mul(8)
            .ok_or_else(|| FormatError::Consistency(format!("{section} size overflows")))?;
        let b = self.take(bytes, section)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.take(4, "magic")?;
        if found != magic {
            return Err(FormatError::Magic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} does not fit in u32")))
}

/// Serializes a dataset; every sequence must share one shape.
pub fn write_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    let n = dataset.len();
    let dims = match dataset.shape()? {
        Some(s) => s.dims(),
        None => [0, 0, 0, 0],
    };
    let mut meta = dataset.meta.clone();
    meta.sample_ids = dataset.sequences.iter().map(|s| s.id.clone()).collect();
    let trailer = serde_json::to_vec(&meta)?;

    let per = dims.iter().product::<usize>();
    let mut out = Vec::with_capacity(28 + n * per * 8 + n * 4 + 4 + trailer.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(n, "sample count")?.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&to_u32(d, "dimension")?.to_le_bytes());
    }
    for seq in &dataset.sequences {
        for v in seq.data.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for seq in &dataset.sequences {
        out.extend_from_slice(&to_u32(seq.label, "label")?.to_le_bytes());
    }
    out.extend_from_slice(&to_u32(trailer.len(), "trailer length")?.to_le_bytes());
    out.extend_from_slice(&trailer);
    Ok(out)
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::Version(version).into());
    }
    let n = r.u32("header")? as usize;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32("header")? as usize;
    }
    let per: usize = dims.iter().product();
    if n > 0 && per == 0 {
        return Err(FormatError::Consistency(format!("{n} samples with empty shape {dims:?}")).into());
    }
    let total = n
        .checked_mul(per)
        .ok_or_else(|| FormatError::Consistency("coordinate count overflows".into()))?;
    let coords = r.f64s(total, "coordinate block")?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(r.u32("label block")? as usize);
    }
    let trailer_len = r.u32("trailer length")? as usize;
    let trailer = r.take(trailer_len, "trailer")?;
    if r.remaining() != 0 {
        return Err(FormatError::Consistency(format!(
            "{} unexpected bytes after the trailer",
            r.remaining()
        ))
        .into());
    }
    let mut meta: DatasetMeta =
        serde_json::from_slice(trailer).map_err(|e| FormatError::Trailer(e.to_string()))?;
    if !meta.sample_ids.is_empty() && meta.sample_ids.len() != n {
        return Err(FormatError::Consistency(format!(
            "trailer lists {} sample ids but the header declares {n} samples",
            meta.sample_ids.len()
        ))
        .into());
    }
    let ids = std::mem::take(&mut meta.sample_ids);
    let mut sequences = Vec::with_capacity(n);
    for (i, (chunk, label)) in coords.chunks_exact(per.max(1)).take(n).zip(labels).enumerate() {
        let id = ids.get(i).cloned().unwrap_or_else(|| format!("sample{i}"));
        let data = DenseArray::new(dims.to_vec(), chunk.to_vec())?;
        sequences.push(SkeletonSequence::new(data, label, id)?);
    }
    Ok(Dataset { sequences, meta })
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let bytes = write_dataset(dataset)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    read_dataset(&bytes)
}
