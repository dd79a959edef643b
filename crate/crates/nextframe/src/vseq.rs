//! VSEQ: a flat little-endian container of equally sized grayscale sequences.
//!
//! ```text
//! "VSEQ" | u32 version=1 | u32 n | u32 T | u32 H | u32 W | u8 dtype=1 | 3 reserved
//! n·T·H·W f32, sequence-major
//! [u64 length | JSON metadata]   (optional)
//! ```

use std::fs;
use std::path::Path;

use nextframe_core::leaves::{ImageSequence, SequenceDataset, SequenceSource};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, put_f32s, Cursor, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"VSEQ";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const HEADER_LEN: usize = 4 + 4 * 5 + 4;

/// The JSON block: per-sequence provenance, the held-out split and free-form
/// generator settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    #[serde(default)]
    pub sources: Vec<SequenceSource>,
    #[serde(default)]
    pub test: Option<Vec<usize>>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn encode(sequences: &[ImageSequence], meta: Option<&Metadata>) -> Result<Vec<u8>> {
    let (t, h, w) = match sequences.first() {
        Some(s) => (s.len(), s.height(), s.width()),
        None => (0, 0, 0),
    };
    if let Some((i, s)) = sequences
        .iter()
        .enumerate()
        .find(|(_, s)| (s.len(), s.height(), s.width()) != (t, h, w))
    {
        return Err(FormatError::Core(nextframe_core::Error::InvalidArgument(format!(
            "sequence {i} is {}x{}x{}, container holds {t}x{h}x{w}",
            s.len(),
            s.height(),
            s.width()
        ))));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + sequences.len() * t * h * w * 4);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, sequences.len() as u32, t as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&[DTYPE_F32, 0, 0, 0]);
    for s in sequences {
        put_f32s(&mut out, s.data());
    }
    if let Some(m) = meta {
        let json = serde_json::to_vec(m)?;
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
    }
    Ok(out)
}

pub fn decode(buf: &[u8]) -> Result<(Vec<ImageSequence>, Option<Metadata>)> {
    let mut c = Cursor::new(buf);
    if c.take(4, "magic")? != MAGIC {
        return Err(FormatError::Corrupt {
            offset: 0,
            what: "bad magic, expected \"VSEQ\"".into(),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(FormatError::Corrupt {
            offset: 4,
            what: format!("unsupported version {version}"),
        });
    }
    let n = c.u32("sequence count")? as usize;
    let t = c.u32("frame count")? as usize;
    let h = c.u32("height")? as usize;
    let w = c.u32("width")? as usize;
    let dtype = c.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(FormatError::Corrupt {
            offset: c.offset() - 1,
            what: format!("unsupported dtype {dtype}"),
        });
    }
    c.take(3, "reserved bytes")?;
    let per = t * h * w;
    let mut sequences = Vec::with_capacity(n);
    for i in 0..n {
        let at = c.offset();
        let data = c.f32s(per, "pixel data")?;
        let seq = ImageSequence::new(t, h, w, data, SequenceSource::Unknown).map_err(|e| FormatError::Corrupt {
            offset: at,
            what: format!("sequence {i}: {e}"),
        })?;
        sequences.push(seq);
    }
    let meta = if c.remaining() == 0 {
        None
    } else {
        let len = c.u64("metadata length")? as usize;
        let at = c.offset();
        let json = c.take(len, "metadata")?;
        let m: Metadata = serde_json::from_slice(json).map_err(|e| FormatError::Corrupt {
            offset: at,
            what: format!("metadata: {e}"),
        })?;
        if c.remaining() != 0 {
            return Err(c.corrupt("trailing bytes after metadata"));
        }
        Some(m)
    };
    if let Some(m) = &meta {
        if !m.sources.is_empty() {
            if m.sources.len() != n {
                return Err(FormatError::Corrupt {
                    offset: (HEADER_LEN + n * per * 4) as u64,
                    what: format!("{} sources for {n} sequences", m.sources.len()),
                });
            }
            for (s, src) in sequences.iter_mut().zip(&m.sources) {
                s.source = src.clone();
            }
        }
    }
    Ok((sequences, meta))
}

pub fn write_sequences(path: &Path, sequences: &[ImageSequence], meta: Option<&Metadata>) -> Result<()> {
    let bytes = encode(sequences, meta)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_sequences(path: &Path) -> Result<(Vec<ImageSequence>, Option<Metadata>)> {
    let buf = fs::read(path).map_err(io_err(path))?;
    decode(&buf).map_err(|e| match e {
        FormatError::Corrupt { offset, what } => FormatError::Corrupt {
            offset,
            what: format!("{}: {what}", path.display()),
        },
        e => e,
    })
}

/// Writes the dataset with its provenance and split.
pub fn save_dataset(path: &Path, ds: &SequenceDataset, extra: serde_json::Value) -> Result<()> {
    let meta = Metadata {
        sources: ds.sequences.iter().map(|s| s.source.clone()).collect(),
        test: Some(ds.test.clone()),
        extra,
    };
    write_sequences(path, &ds.sequences, Some(&meta))
}

/// Loads a dataset; files without a stored split get the default 9:1 split.
pub fn load_dataset(path: &Path) -> Result<SequenceDataset> {
    let (sequences, meta) = read_sequences(path)?;
    let n = sequences.len();
    let ds = match meta.and_then(|m| m.test) {
        Some(test) => {
            let train = (0..n).filter(|i| !test.contains(i)).collect();
            SequenceDataset { sequences, train, test }
        }
        None => SequenceDataset::with_split(sequences, 0.1),
    };
    ds.validate()?;
    Ok(ds)
}
