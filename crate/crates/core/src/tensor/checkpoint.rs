//! Flat little-endian f32 weight file plus a JSON manifest mapping each
//! parameter name to its shape and byte offset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub offset: u64,
    pub shape: [usize; 2],
}

pub type Manifest = BTreeMap<String, ManifestEntry>;

/// Writes `weights.bin` and `manifest.json` into `dir`, in the given order.
pub fn write_checkpoint<T: Scalar>(dir: &Path, params: &[(&str, &Tensor<T>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut manifest = Manifest::new();
    for (name, t) in params {
        let entry = ManifestEntry {
            offset: bytes.len() as u64,
            shape: [t.rows(), t.cols()],
        };
        if manifest.insert((*name).to_string(), entry).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        for v in t.data() {
            bytes.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    fs::write(dir.join(WEIGHTS_FILE), bytes)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

/// Reads every parameter listed in the manifest.
pub fn read_checkpoint<T: Scalar>(dir: &Path) -> Result<BTreeMap<String, Tensor<T>>> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let bytes = fs::read(dir.join(WEIGHTS_FILE))?;
    let mut out = BTreeMap::new();
    for (name, e) in manifest {
        let n = e.shape[0] * e.shape[1];
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{name}: bytes {start}..{end} past end of {} byte file",
                bytes.len()
            )));
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.insert(name, Tensor::new(e.shape[0], e.shape[1], data)?);
    }
    Ok(out)
}
