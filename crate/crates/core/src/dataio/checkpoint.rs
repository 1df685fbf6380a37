//! `PCFM` checkpoint containers.
//!
//! ```text
//! "PCFM" | version u32 | config (len u32, utf8 text) | record_count u32
//! record: name (len u32, utf8) | rank u32 | rank × dim u32 | Π dims × f32
//! ```
//!
//! The config block is free-form text; the model layer stores TOML there.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::wire::{put_f32s, put_str, put_u32, WireReader};
use super::FormatError;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PCFM";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub records: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(config: impl Into<String>, records: Vec<(String, Tensor<f32>)>) -> Self {
        Self {
            config: config.into(),
            records,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, t) in &self.records {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate record `{name}`")));
            }
            if t.rank() == 0 || t.rank() > MAX_RANK as usize {
                return Err(Error::InvalidInput(format!(
                    "record `{name}` has rank {}",
                    t.rank()
                )));
            }
            if !t.is_finite() {
                return Err(FormatError::NonFinite(format!("record `{name}`")).into());
            }
        }
        let io = |e| Error::Format(FormatError::Io(e));
        w.write_all(&CHECKPOINT_MAGIC).map_err(io)?;
        put_u32(&mut w, CHECKPOINT_VERSION).map_err(io)?;
        put_str(&mut w, &self.config).map_err(io)?;
        put_u32(&mut w, self.records.len() as u32).map_err(io)?;
        for (name, t) in &self.records {
            put_str(&mut w, name).map_err(io)?;
            put_u32(&mut w, t.rank() as u32).map_err(io)?;
            for &dim in t.shape() {
                put_u32(&mut w, dim as u32).map_err(io)?;
            }
            put_f32s(&mut w, t.data().iter().copied()).map_err(io)?;
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        Ok(read_inner(&mut WireReader::new(r))?)
    }
}

fn read_inner<R: Read>(r: &mut WireReader<R>) -> std::result::Result<Checkpoint, FormatError> {
    let what = || "checkpoint header".to_string();
    let magic: [u8; 4] = r.array(&what)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32(&what)?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let config = r.string(&|| "config block".to_string())?;
    let count = r.u32(&what)?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for i in 0..count {
        let name = r.string(&|| format!("record {i} name"))?;
        let what = || format!("record {i} `{name}`");
        if !seen.insert(name.clone()) {
            return Err(FormatError::Record(format!("duplicate {}", what())));
        }
        let rank = r.u32(&what)?;
        if rank == 0 || rank > MAX_RANK {
            return Err(FormatError::Record(format!("{} has rank {rank}", what())));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.u32(&what)? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| FormatError::Record(format!("{} has an overflowing shape", what())))?;
        let values = r.f32s(len, &what)?;
        let tensor = Tensor::new(shape, values).map_err(|e| FormatError::Record(e.to_string()))?;
        records.push((name, tensor));
    }
    r.expect_eof(&|| format!("after {count} records"))?;
    Ok(Checkpoint { config, records })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::read_from(BufReader::new(file))
}

pub fn write_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    checkpoint.write_to(BufWriter::new(file))
}
