//! BFUN checkpoints.
//!
//! ```text
//! "BFUN" | u32 version=1 | u32 length | JSON header
//! repeated until EOF: u16 name length | name | u8 ndim | u32 dims… | f32 data
//! ```

use std::fs;
use std::path::Path;

use nextframe_core::net::{DenoiserModel, ModelArch, Param};
use nextframe_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, put_f32s, Cursor, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"BFUN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub arch: ModelArch,
    /// Free-form training record (epochs, losses, seeds).
    #[serde(default)]
    pub info: serde_json::Value,
}

pub fn encode(model: &DenoiserModel, info: serde_json::Value) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        arch: model.arch(),
        info,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.params() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, p.value.data());
    }
    Ok(out)
}

/// Decodes a checkpoint. When `expected` is given the stored architecture
/// must match it.
pub fn decode(buf: &[u8], expected: Option<ModelArch>) -> Result<(DenoiserModel, Header)> {
    let mut c = Cursor::new(buf);
    if c.take(4, "magic")? != MAGIC {
        return Err(FormatError::Corrupt {
            offset: 0,
            what: "bad magic, expected \"BFUN\"".into(),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(FormatError::Corrupt {
            offset: 4,
            what: format!("unsupported version {version}"),
        });
    }
    let len = c.u32("header length")? as usize;
    let at = c.offset();
    let header: Header = serde_json::from_slice(c.take(len, "header")?).map_err(|e| FormatError::Corrupt {
        offset: at,
        what: format!("header: {e}"),
    })?;
    if let Some(exp) = expected {
        if exp != header.arch {
            return Err(nextframe_core::Error::ArchMismatch {
                expected: format!("{exp:?}"),
                found: format!("{:?}", header.arch),
            }
            .into());
        }
    }
    let mut params = Vec::new();
    while c.remaining() > 0 {
        let n = c.u16("name length")? as usize;
        let at = c.offset();
        let name = std::str::from_utf8(c.take(n, "name")?)
            .map_err(|_| FormatError::Corrupt {
                offset: at,
                what: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = c.u8("ndim")? as usize;
        let shape = (0..ndim)
            .map(|_| c.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| c.corrupt(format!("{name}: shape {shape:?} overflows")))?;
        let data = c.f32s(numel, &name)?;
        params.push(Param {
            name,
            value: Tensor::new(&shape, data)?,
        });
    }
    let model = DenoiserModel::from_params(header.arch, params)?;
    Ok((model, header))
}

pub fn save_model(path: &Path, model: &DenoiserModel, info: serde_json::Value) -> Result<()> {
    let bytes = encode(model, info)?;
    // write-then-rename so an interrupted save never leaves a torn checkpoint
    let tmp = path.with_extension("bfun.tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_model(path: &Path, expected: Option<ModelArch>) -> Result<(DenoiserModel, Header)> {
    let buf = fs::read(path).map_err(io_err(path))?;
    decode(&buf, expected).map_err(|e| match e {
        FormatError::Corrupt { offset, what } => FormatError::Corrupt {
            offset,
            what: format!("{}: {what}", path.display()),
        },
        e => e,
    })
}
