//! Binary PGM (P5) frames and ingestion of frame directories into
//! fixed-size training sequences.

use std::fs;
use std::path::{Path, PathBuf};

use nextframe_core::leaves::{ImageSequence, SequenceDataset, SequenceSource};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, FormatError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities rescaled to [0, 1].
    pub data: Vec<f32>,
}

fn bad(path: &Path, what: impl Into<String>) -> FormatError {
    FormatError::BadFile {
        path: path.to_path_buf(),
        what: what.into(),
    }
}

/// Parses an 8-bit P5 image; `path` is only used in error messages.
pub fn parse_pgm(buf: &[u8], path: &Path) -> Result<GrayImage> {
    if buf.len() < 2 || &buf[..2] != b"P5" {
        return Err(bad(path, "not a binary PGM (P5) file"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // whitespace and comments
        loop {
            match buf.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&buf[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(path, format!("malformed header at byte {start}")))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(bad(
            path,
            format!("unsupported geometry {width}x{height} or maxval {maxval} (8-bit only)"),
        ));
    }
    if !buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad(path, format!("missing whitespace after header at byte {pos}")));
    }
    pos += 1;
    let n = width * height;
    let pixels = buf
        .get(pos..pos + n)
        .ok_or_else(|| bad(path, format!("truncated raster: need {n} bytes at byte {pos}")))?;
    let scale = maxval as f32;
    Ok(GrayImage {
        height,
        width,
        data: pixels.iter().map(|&p| (p as f32 / scale).min(1.0)).collect(),
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let buf = fs::read(path).map_err(io_err(path))?;
    parse_pgm(&buf, path)
}

pub fn encode_pgm(height: usize, width: usize, data: &[f32]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_pgm(path: &Path, height: usize, width: usize, data: &[f32]) -> Result<()> {
    fs::write(path, encode_pgm(height, width, data)).map_err(io_err(path))
}

/// Where crops are cut: a `rows × cols` grid of evenly spaced windows at
/// every integer downscaling factor, over consecutive non-overlapping
/// `frames`-long segments of each clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropGrid {
    pub size: usize,
    pub rows: usize,
    pub cols: usize,
    pub scales: Vec<usize>,
    pub frames: usize,
    pub test_fraction: f64,
}

impl Default for CropGrid {
    fn default() -> Self {
        Self {
            size: 32,
            rows: 3,
            cols: 7,
            scales: vec![1, 2, 3],
            frames: 11,
            test_fraction: 0.1,
        }
    }
}

fn downscale(img: &GrayImage, s: usize) -> GrayImage {
    if s == 1 {
        return img.clone();
    }
    let (h, w) = (img.height / s, img.width / s);
    let norm = 1.0 / (s * s) as f32;
    let mut data = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0f32;
            for dr in 0..s {
                let row = &img.data[(r * s + dr) * img.width + c * s..];
                acc += row[..s].iter().sum::<f32>();
            }
            data[r * w + c] = acc * norm;
        }
    }
    GrayImage { height: h, width: w, data }
}

fn positions(n: usize, extent: usize, size: usize) -> Vec<usize> {
    let span = extent - size;
    if n == 1 {
        return vec![span / 2];
    }
    (0..n)
        .map(|i| ((i * span) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

/// Cuts one clip into sequences.
pub fn crop_clip(clip: &str, frames: &[GrayImage], grid: &CropGrid) -> Result<Vec<ImageSequence>> {
    let first = frames
        .first()
        .ok_or_else(|| bad(Path::new(clip), "clip has no frames"))?;
    if let Some(f) = frames.iter().find(|f| (f.height, f.width) != (first.height, first.width)) {
        return Err(bad(
            Path::new(clip),
            format!(
                "frame size {}x{} differs from {}x{}",
                f.height, f.width, first.height, first.width
            ),
        ));
    }
    let mut out = Vec::new();
    for start in (0..frames.len()).step_by(grid.frames.max(1)) {
        if start + grid.frames > frames.len() {
            break;
        }
        for &scale in &grid.scales {
            let scaled: Vec<GrayImage> = frames[start..start + grid.frames]
                .iter()
                .map(|f| downscale(f, scale))
                .collect();
            let (h, w) = (scaled[0].height, scaled[0].width);
            if h < grid.size || w < grid.size {
                log::warn!("{clip}: scale {scale} gives {h}x{w}, smaller than the {} crop", grid.size);
                continue;
            }
            for &row in &positions(grid.rows, h, grid.size) {
                for &col in &positions(grid.cols, w, grid.size) {
                    let mut data = Vec::with_capacity(grid.frames * grid.size * grid.size);
                    for f in &scaled {
                        for r in row..row + grid.size {
                            data.extend_from_slice(&f.data[r * w + col..r * w + col + grid.size]);
                        }
                    }
                    out.push(ImageSequence::new(
                        grid.frames,
                        grid.size,
                        grid.size,
                        data,
                        SequenceSource::Ingested {
                            clip: clip.to_string(),
                            row,
                            col,
                            scale,
                            start,
                        },
                    )?);
                }
            }
        }
    }
    Ok(out)
}

fn sorted_entries(dir: &Path) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let mut files = Vec::new();
    let mut dirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        if path.is_dir() {
            dirs.push(path);
        } else {
            files.push(path);
        }
    }
    files.sort();
    dirs.sort();
    Ok((files, dirs))
}

/// Ingests a directory of frames. Files directly in `dir` form one clip and
/// every subdirectory forms another; frames are ordered by file name.
pub fn ingest_frames(dir: &Path, grid: &CropGrid) -> Result<SequenceDataset> {
    if grid.size == 0 || grid.frames == 0 || grid.rows == 0 || grid.cols == 0 || grid.scales.contains(&0) {
        return Err(bad(dir, format!("degenerate crop grid {grid:?}")));
    }
    let (files, dirs) = sorted_entries(dir)?;
    let mut clips: Vec<(String, Vec<PathBuf>)> = Vec::new();
    if !files.is_empty() {
        clips.push((dir.file_name().map_or(".".into(), |n| n.to_string_lossy().into_owned()), files));
    }
    for d in dirs {
        let (f, _) = sorted_entries(&d)?;
        clips.push((d.file_name().unwrap().to_string_lossy().into_owned(), f));
    }
    let mut sequences = Vec::new();
    for (name, paths) in clips {
        let frames = paths.iter().map(|p| read_pgm(p)).collect::<Result<Vec<_>>>()?;
        let seqs = crop_clip(&name, &frames, grid)?;
        log::info!("{name}: {} frames -> {} sequences", frames.len(), seqs.len());
        sequences.extend(seqs);
    }
    if sequences.is_empty() {
        return Err(bad(dir, "no sequences could be cut with this crop grid"));
    }
    Ok(SequenceDataset::with_split(sequences, grid.test_fraction))
}
