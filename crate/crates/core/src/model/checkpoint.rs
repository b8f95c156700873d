//! Binary checkpoint container.
//!
//! Layout: magic `HCPCKPT\0`, format version (u32 LE), header length (u64 LE),
//! JSON header, then three f64 LE arrays of equal length: parameters, Adam
//! first moments, Adam second moments. All randomness is counter-based, so the
//! seed and step in the header are the complete RNG state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::{ModelConfig, ModelParams, OutputHead, ParamLayout};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HCPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    /// Preprocessing hash; models are comparable only when these agree.
    pub data_hash: String,
    /// Number of completed optimizer steps.
    pub step: u64,
    pub seed: u64,
    pub objective: String,
    pub model: ModelConfig,
    pub head: OutputHead,
    pub adam_updates: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
    pub adam: AdamState,
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        write_f64s(w, &self.params.data)?;
        write_f64s(w, &self.adam.m)?;
        write_f64s(w, &self.adam.v)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b)?;
        let len = u64::from_le_bytes(u64b) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        header.model.validate()?;
        let layout = ParamLayout::new(&header.model);
        let n = layout.total;
        let data = read_f64s(r, n)?;
        let m = read_f64s(r, n)?;
        let v = read_f64s(r, n)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after checkpoint payload".into()));
        }
        Ok(Checkpoint {
            adam: AdamState {
                m,
                v,
                updates: header.adam_updates,
            },
            params: ModelParams { layout, data },
            header,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(|e| Error::Load {
                path: tmp.clone(),
                source: e,
            })?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::read_from(&mut BufReader::new(f))
    }

    /// Refuses a checkpoint produced under a different configuration.
    pub fn ensure_hash(&self, expected: &str) -> Result<()> {
        if self.header.config_hash != expected {
            return Err(Error::HashMismatch {
                expected: expected.to_string(),
                found: self.header.config_hash.clone(),
            });
        }
        Ok(())
    }
}
