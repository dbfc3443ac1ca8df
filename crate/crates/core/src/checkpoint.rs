//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "TTZOCKPT"
//! version  u32      1
//! run_seed u64
//! step     u64
//! manifest u64 byte length, then that many bytes of JSON (registry entries)
//! d        u64
//! w        d x f64 (IEEE-754 bits, little-endian)
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::adapters::{ParamEntry, ParameterRegistry};

const MAGIC: &[u8; 8] = b"TTZOCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("manifest does not match the registry")]
    ManifestMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<ParamEntry>,
    pub w: Vec<f64>,
    pub run_seed: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn capture(reg: &ParameterRegistry, run_seed: u64, step: u64) -> Self {
        Self { entries: reg.entries().to_vec(), w: reg.read_flat(), run_seed, step }
    }

    /// Writes `w` back into a registry with an identical manifest.
    pub fn restore(&self, reg: &mut ParameterRegistry) -> Result<(), CheckpointError> {
        if reg.entries() != self.entries.as_slice() {
            return Err(CheckpointError::ManifestMismatch);
        }
        reg.write_flat(&self.w).map_err(|_| CheckpointError::ManifestMismatch)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), CheckpointError> {
        let manifest = serde_json::to_vec(&self.entries)?;
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&self.run_seed.to_le_bytes())?;
        out.write_all(&self.step.to_le_bytes())?;
        out.write_all(&(manifest.len() as u64).to_le_bytes())?;
        out.write_all(&manifest)?;
        out.write_all(&(self.w.len() as u64).to_le_bytes())?;
        for v in &self.w {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut u64_field = || -> io::Result<u64> {
            let mut b8 = [0u8; 8];
            input.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let run_seed = u64_field()?;
        let step = u64_field()?;
        let manifest_len = u64_field()? as usize;
        let mut manifest = vec![0u8; manifest_len];
        input.read_exact(&mut manifest)?;
        let entries: Vec<ParamEntry> = serde_json::from_slice(&manifest)?;
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b8)?;
        let d = u64::from_le_bytes(b8) as usize;
        let mut w = Vec::with_capacity(d);
        for _ in 0..d {
            input.read_exact(&mut b8)?;
            w.push(f64::from_le_bytes(b8));
        }
        Ok(Self { entries, w, run_seed, step })
    }
}
