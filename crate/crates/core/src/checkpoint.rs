//! `SKOD` checkpoint container.
//!
//! ```text
//! b"SKOD" | u32 version | u64 header length | UTF-8 JSON header
//! u32 block count
//! per block: u32 name length | name | u32 rank | rank x u32 dims | f64 data
//! ```
//!
//! The header carries the model configuration and the detector state, so a
//! checkpoint is self-contained for inference.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::FormatError;
use crate::data::format::ByteReader;
use crate::energy::DetectorState;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::DenseArray;
use crate::params::ParamSet;

pub const MAGIC: &[u8; 4] = b"SKOD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    detector: DetectorState,
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} does not fit in u32")))
}

pub fn write_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        model: model.config().clone(),
        detector: model.detector.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&u32_of(model.params.len(), "block count")?.to_le_bytes());
    for (name, value) in model.params.iter() {
        out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(value.shape().len(), "rank")?.to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::Version(version).into());
    }
    let len = usize::try_from(r.u64("header length")?)
        .map_err(|_| FormatError::Consistency("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| FormatError::Trailer(e.to_string()))?;
    let blocks = r.u32("block count")? as usize;
    let mut params = ParamSet::new();
    for i in 0..blocks {
        let section = format!("parameter block {i}");
        let name_len = r.u32(&section)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &section)?)
            .map_err(|_| FormatError::Consistency(format!("{section} name is not UTF-8")))?
            .to_string();
        let rank = r.u32(&section)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&section)? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::Consistency(format!("{section} size overflows")))?;
        let data = r.f64s(count, &format!("parameter {name}"))?;
        if params.get(&name).is_some() {
            return Err(FormatError::Consistency(format!("duplicate parameter {name}")).into());
        }
        params.insert(name, DenseArray::new(shape, data)?);
    }
    if r.remaining() != 0 {
        return Err(FormatError::Consistency(format!(
            "{} unexpected bytes after the last block",
            r.remaining()
        ))
        .into());
    }
    if header.detector.seen_classes != header.model.head.seen_classes {
        return Err(FormatError::Consistency("detector and head disagree on seen classes".into()).into());
    }
    Model::from_parts(header.model, params, Some(header.detector))
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(&fs::read(path)?)
}
