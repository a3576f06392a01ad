//! Binary model files.
//!
//! ```text
//! magic      8 bytes   "PGAPMODL"
//! version    u32 LE
//! manifest   u32 LE length + UTF-8 JSON {input_shape, classes, layers}
//! params     u64 LE count + count × f64 LE (layer order, weights then bias)
//! checksum   32 bytes  SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClassifierModel, LayerSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PGAPMODL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    input_shape: (usize, usize, usize),
    classes: usize,
    layers: Vec<LayerSpec>,
}

pub fn write_model(model: &ClassifierModel) -> Vec<u8> {
    let manifest = serde_json::to_vec(&Manifest {
        input_shape: model.input_shape,
        classes: model.classes,
        layers: model.specs(),
    })
    .expect("manifest serializes");
    let params = model.params_flat();
    let mut out = Vec::with_capacity(64 + manifest.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(digest.as_slice());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::ModelFormat(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_model(bytes: &[u8]) -> Result<ClassifierModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::ModelFormat("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported version {version} (expected {MODEL_FORMAT_VERSION})"
        )));
    }
    let len = r.u32("manifest length")? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(len, "manifest")?)
        .map_err(|e| Error::ModelFormat(format!("manifest: {e}")))?;
    let count = r.u64("parameter count")? as usize;
    let blob = r.take(count.checked_mul(8).ok_or_else(|| {
        Error::ModelFormat("parameter count overflows".into())
    })?, "parameters")?;
    let body_end = r.pos;
    let stored = r.take(32, "checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::ModelFormat("trailing bytes after checksum".into()));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != stored {
        return Err(Error::ModelFormat("checksum mismatch".into()));
    }

    let mut model = ClassifierModel::zeros(manifest.input_shape, &manifest.layers)
        .map_err(|e| Error::ModelFormat(format!("inconsistent layer manifest: {e}")))?;
    if model.classes != manifest.classes {
        return Err(Error::ModelFormat(format!(
            "manifest declares {} classes but layers produce {}",
            manifest.classes, model.classes
        )));
    }
    if count != model.param_count() {
        return Err(Error::ModelFormat(format!(
            "layers need {} parameters, blob holds {count}",
            model.param_count()
        )));
    }
    let params: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    model.set_params_flat(&params)?;
    if !model.params_finite() {
        return Err(Error::ModelFormat("non-finite parameter".into()));
    }
    Ok(model)
}

pub fn save_model(model: &ClassifierModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ClassifierModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes)
}
