//! Model file format. Layout:
//!
//! ```text
//! magic "QXM1" (4 bytes)
//! config length, u32 little endian
//! config JSON (ModelConfig)
//! parameters, f32 little endian, canonical tensor order
//! CRC32 of everything above, u32 little endian
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{init_params, Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"QXM1";

/// Size accounting for a saved model, byte-exact:
/// `total_bytes = header_bytes + 4 * param_count + 4`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct SizeReport {
    pub param_count: usize,
    pub bytes_per_param: usize,
    pub header_bytes: usize,
    pub trailer_bytes: usize,
    pub total_bytes: usize,
}

fn header(config: &ModelConfig) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(config)
        .map_err(|e| Error::ModelFile(format!("config encode failed: {e}")))?;
    let mut out = Vec::with_capacity(8 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

pub fn size_report(model: &Model<f32>) -> Result<SizeReport> {
    let header_bytes = header(&model.config)?.len();
    let param_count = model.param_count();
    Ok(SizeReport {
        param_count,
        bytes_per_param: 4,
        header_bytes,
        trailer_bytes: 4,
        total_bytes: header_bytes + 4 * param_count + 4,
    })
}

pub fn save_model(model: &Model<f32>, path: &Path) -> Result<()> {
    let mut bytes = header(&model.config)?;
    for slice in model.all_slices() {
        for &v in slice {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |msg: String| Error::ModelFile(format!("{}: {msg}", path.display()));

    if bytes.len() < 12 {
        return Err(bad("file too short".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic (not a model file)".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(trailer.try_into().unwrap());
    let actual_crc = crc32fast::hash(body);
    if stored_crc != actual_crc {
        return Err(bad(format!(
            "checksum mismatch (stored {stored_crc:08x}, computed {actual_crc:08x})"
        )));
    }

    let json_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let params_start = 8 + json_len;
    if params_start > body.len() {
        return Err(bad("config length exceeds file size".into()));
    }
    let config: ModelConfig = serde_json::from_slice(&body[8..params_start])
        .map_err(|e| bad(format!("config decode failed: {e}")))?;
    config
        .validate()
        .map_err(|e| bad(format!("invalid config: {e}")))?;

    let mut model: Model<f32> = init_params(0, &config)?;
    let expected = model.param_count() * 4;
    let params = &body[params_start..];
    if params.len() != expected {
        return Err(bad(format!(
            "parameter payload is {} bytes, expected {expected}",
            params.len()
        )));
    }
    let mut offset = 0;
    for slice in model.all_slices_mut() {
        for v in slice.iter_mut() {
            *v = f32::from_le_bytes(params[offset..offset + 4].try_into().unwrap());
            offset += 4;
        }
    }
    Ok(model)
}
