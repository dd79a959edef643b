//! The moving-leaves dataset: two depth-ordered disks drifting along smooth
//! Gaussian-process paths over a flat background.
//!
//! Both disks share one physical size, so the projected radius is
//! `ref_radius / depth` and the nearer (larger) disk is always painted on top.
//! Path smoothness scales with depth (length-scale `ℓ₀·depth`), which makes
//! far disks move more slowly in the image plane.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeavesConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Projected radius in pixels of a disk at depth 1.
    pub ref_radius: f64,
    /// GP length-scale in frames at depth 1.
    pub gp_lengthscale: f64,
    /// GP marginal standard deviation of each coordinate, in pixels.
    pub gp_amplitude: f64,
    pub gp_jitter: f64,
    /// Minimum luminance difference between any two of background and disks.
    pub min_contrast: f64,
    /// Fraction of the smaller disk that must be hidden in at least one frame.
    pub occlusion_fraction: f64,
    pub supersample: usize,
    pub test_fraction: f64,
}

impl Default for LeavesConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            frames: 11,
            depth_min: 0.75,
            depth_max: 1.5,
            ref_radius: 6.0,
            gp_lengthscale: 3.0,
            gp_amplitude: 6.0,
            gp_jitter: 1e-8,
            min_contrast: 0.1,
            occlusion_fraction: 0.5,
            supersample: 4,
            test_fraction: 0.1,
        }
    }
}

impl LeavesConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("leaves config: {m}")));
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return bad("image size and frame count must be positive");
        }
        if !(self.depth_min > 0.0 && self.depth_min <= self.depth_max) {
            return bad("depth range must satisfy 0 < min <= max");
        }
        if !(self.ref_radius > 0.0 && self.gp_lengthscale > 0.0 && self.gp_amplitude >= 0.0) {
            return bad("radius, length-scale and amplitude must be positive");
        }
        if !(0.0..0.5).contains(&self.min_contrast) {
            return bad("min_contrast must lie in [0, 0.5)");
        }
        if self.supersample == 0 || !(0.0..1.0).contains(&self.test_fraction) {
            return bad("supersample >= 1 and test_fraction in [0, 1)");
        }
        Ok(())
    }

    pub fn radius_at(&self, depth: f64) -> f64 {
        self.ref_radius / depth
    }

    pub fn lengthscale_at(&self, depth: f64) -> f64 {
        self.gp_lengthscale * depth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub depth: f64,
    pub radius: f64,
    pub luminance: f32,
    /// Sub-pixel centers `(x, y)` per frame; pixel `(r, c)` spans `[c, c+1) × [r, r+1)`.
    pub trajectory: Vec<[f64; 2]>,
}

impl Disk {
    fn contains(&self, t: usize, x: f64, y: f64) -> bool {
        let [cx, cy] = self.trajectory[t];
        let (dx, dy) = (x - cx, y - cy);
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiskScene {
    pub disks: [Disk; 2],
    pub background: f32,
    pub height: usize,
    pub width: usize,
}

impl DiskScene {
    pub fn frames(&self) -> usize {
        self.disks[0].trajectory.len()
    }

    /// Indices `(back, front)`; ties put the second disk in front.
    pub fn paint_order(&self) -> (usize, usize) {
        if self.disks[0].radius > self.disks[1].radius {
            (1, 0)
        } else {
            (0, 1)
        }
    }
}

/// Lower Cholesky factor (row-major, n×n) of an RBF covariance over frames
/// `0..n`: `k(i, j) = a² exp(−(i−j)² / (2ℓ²)) + jitter·δ_ij`.
pub fn rbf_cholesky(n: usize, lengthscale: f64, amplitude: f64, jitter: f64) -> Result<Vec<f64>> {
    let cov = rbf_covariance(n, lengthscale, amplitude, jitter);
    cholesky(&cov, n)
}

pub fn rbf_covariance(n: usize, lengthscale: f64, amplitude: f64, jitter: f64) -> Vec<f64> {
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = i as f64 - j as f64;
            k[i * n + j] = amplitude * amplitude * libm::exp(-d * d / (2.0 * lengthscale * lengthscale));
        }
        k[i * n + i] += jitter;
    }
    k
}

fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if !(d > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "covariance not positive definite at pivot {i}"
                    )));
                }
                l[i * n + i] = libm::sqrt(d);
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// One GP path `L z` with `z ~ N(0, I)`.
pub fn sample_gp_path<R: Rng + ?Sized>(chol: &[f64], n: usize, rng: &mut R) -> Vec<f64> {
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    (0..n)
        .map(|i| (0..=i).map(|k| chol[i * n + k] * z[k]).sum())
        .collect()
}

/// Samples a 2D trajectory for a disk at `depth`, centred on the canvas.
pub fn sample_trajectory<R: Rng + ?Sized>(
    rng: &mut R,
    depth: f64,
    cfg: &LeavesConfig,
) -> Result<Vec<[f64; 2]>> {
    let n = cfg.frames;
    let mut jitter = cfg.gp_jitter;
    let chol = loop {
        match rbf_cholesky(n, cfg.lengthscale_at(depth), cfg.gp_amplitude, jitter) {
            Ok(l) => break l,
            Err(e) if jitter > 1e-2 => return Err(e),
            Err(_) => jitter *= 10.0,
        }
    };
    let xs = sample_gp_path(&chol, n, rng);
    let ys = sample_gp_path(&chol, n, rng);
    let (cx, cy) = (cfg.width as f64 / 2.0, cfg.height as f64 / 2.0);
    Ok(xs.iter().zip(&ys).map(|(x, y)| [cx + x, cy + y]).collect())
}

fn sample_luminances<R: Rng + ?Sized>(rng: &mut R, min_contrast: f64) -> [f32; 3] {
    loop {
        let l: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let ok = (0..3).all(|i| {
            (i + 1..3).all(|j| ((l[i] - l[j]).abs() as f64) >= min_contrast)
        });
        if ok {
            return l;
        }
    }
}

pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &LeavesConfig) -> Result<DiskScene> {
    cfg.validate()?;
    let [bg, l0, l1] = sample_luminances(rng, cfg.min_contrast);
    let disk = |lum: f32, rng: &mut R| -> Result<Disk> {
        let depth = rng.random_range(cfg.depth_min..=cfg.depth_max);
        Ok(Disk {
            depth,
            radius: cfg.radius_at(depth),
            luminance: lum,
            trajectory: sample_trajectory(rng, depth, cfg)?,
        })
    };
    let d0 = disk(l0, rng)?;
    let d1 = disk(l1, rng)?;
    Ok(DiskScene {
        disks: [d0, d1],
        background: bg,
        height: cfg.height,
        width: cfg.width,
    })
}

/// Provenance carried alongside a sequence (serialized into file metadata).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SequenceSource {
    Leaves { seed: u64, index: u64, scene: DiskScene },
    Probe { delta_r: f64 },
    Ingested { clip: String, row: usize, col: usize, scale: usize, start: usize },
    Generated,
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSequence {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    pub source: SequenceSource,
}

impl ImageSequence {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>, source: SequenceSource) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || data.len() != frames * height * width {
            return Err(Error::InvalidArgument(format!(
                "sequence {frames}x{height}x{width} with {} values",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel {v} outside [0, 1]")));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
            source,
        })
    }

    /// Builds from `[H, W]` frame tensors, clamping into [0, 1].
    pub fn from_frames(frames: &[Tensor], source: SequenceSource) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty frame list".into()))?;
        let (h, w) = match *first.shape() {
            [h, w] => (h, w),
            ref s => return Err(Error::InvalidArgument(format!("frame shape {s:?}"))),
        };
        let mut data = Vec::with_capacity(frames.len() * h * w);
        for f in frames {
            if f.shape() != [h, w] {
                return Err(Error::InvalidArgument(format!("frame shape {:?}", f.shape())));
            }
            data.extend(f.data().iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }));
        }
        Self::new(frames.len(), h, w, data, source)
    }

    pub fn len(&self) -> usize {
        self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let d = self.height * self.width;
        &self.data[t * d..(t + 1) * d]
    }

    pub fn frame_tensor(&self, t: usize) -> Tensor {
        Tensor::new(&[self.height, self.width], self.frame(t).to_vec())
            .expect("frame dimensions are positive")
    }

    /// Frames `t−1, t−2, …, t−τ` (most recent first) as `[H, W]` tensors.
    pub fn conditioning(&self, t: usize, tau: usize) -> Result<Vec<Tensor>> {
        if t < tau || t >= self.frames {
            return Err(Error::OutOfRange(format!(
                "target {t} with memory {tau} in {} frames",
                self.frames
            )));
        }
        Ok((1..=tau).map(|k| self.frame_tensor(t - k)).collect())
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::OutOfRange(format!(
                "frames {start}..{} of {}",
                start + len,
                self.frames
            )));
        }
        let d = self.height * self.width;
        Ok(Self {
            frames: len,
            height: self.height,
            width: self.width,
            data: self.data[start * d..(start + len) * d].to_vec(),
            source: self.source.clone(),
        })
    }
}

/// Renders with a painter's algorithm (background, smaller disk, larger disk)
/// and `s × s` supersampling per pixel.
pub fn render_sequence(scene: &DiskScene, supersample: usize) -> ImageSequence {
    let (h, w, t_len) = (scene.height, scene.width, scene.frames());
    let s = supersample.max(1);
    let (back, front) = scene.paint_order();
    let lum = [
        scene.background as f64,
        scene.disks[back].luminance as f64,
        scene.disks[front].luminance as f64,
    ];
    let mut data = Vec::with_capacity(t_len * h * w);
    for t in 0..t_len {
        for r in 0..h {
            for c in 0..w {
                let mut counts = [0u32; 3];
                for sy in 0..s {
                    for sx in 0..s {
                        let x = c as f64 + (sx as f64 + 0.5) / s as f64;
                        let y = r as f64 + (sy as f64 + 0.5) / s as f64;
                        let layer = if scene.disks[front].contains(t, x, y) {
                            2
                        } else if scene.disks[back].contains(t, x, y) {
                            1
                        } else {
                            0
                        };
                        counts[layer] += 1;
                    }
                }
                let total = (s * s) as f64;
                let v = counts
                    .iter()
                    .zip(&lum)
                    .map(|(&n, &l)| n as f64 * l)
                    .sum::<f64>()
                    / total;
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    ImageSequence {
        frames: t_len,
        height: h,
        width: w,
        data,
        source: SequenceSource::Unknown,
    }
}

/// Fraction of the smaller disk's on-canvas area covered by the larger disk
/// in frame `t`, measured on boolean masks at `s×` resolution. `None` when
/// the smaller disk is entirely off-canvas.
pub fn occluded_fraction(scene: &DiskScene, t: usize, supersample: usize) -> Option<f64> {
    let s = supersample.max(1);
    let (back, front) = scene.paint_order();
    let (mut inside, mut covered) = (0usize, 0usize);
    for r in 0..scene.height * s {
        for c in 0..scene.width * s {
            let x = (c as f64 + 0.5) / s as f64;
            let y = (r as f64 + 0.5) / s as f64;
            if scene.disks[back].contains(t, x, y) {
                inside += 1;
                if scene.disks[front].contains(t, x, y) {
                    covered += 1;
                }
            }
        }
    }
    (inside > 0).then(|| covered as f64 / inside as f64)
}

pub fn meets_occlusion_predicate(scene: &DiskScene, cfg: &LeavesConfig) -> bool {
    (0..scene.frames()).any(|t| {
        occluded_fraction(scene, t, cfg.supersample).is_some_and(|f| f >= cfg.occlusion_fraction)
    })
}

/// Pixels lying at least `margin` pixels inside both disks whose value is not
/// exactly the front disk's luminance. Empty for a correct rendering.
pub fn depth_order_violations(scene: &DiskScene, seq: &ImageSequence, margin: f64) -> Vec<(usize, usize, usize)> {
    let (_, front) = scene.paint_order();
    let want = scene.disks[front].luminance;
    // a pixel is interior when its farthest corner is `margin` inside the disk
    let reach = core::f64::consts::FRAC_1_SQRT_2 + margin;
    let mut bad = Vec::new();
    for t in 0..scene.frames() {
        let frame = seq.frame(t);
        for r in 0..scene.height {
            for c in 0..scene.width {
                let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                let interior = scene.disks.iter().all(|d| {
                    let [cx, cy] = d.trajectory[t];
                    let dist = libm::sqrt((x - cx) * (x - cx) + (y - cy) * (y - cy));
                    dist + reach <= d.radius
                });
                if interior && frame[r * scene.width + c] != want {
                    bad.push((t, r, c));
                }
            }
        }
    }
    bad
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub sequences: Vec<ImageSequence>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SequenceDataset {
    /// Splits off the last `round(n · test_fraction)` sequences as the test set.
    pub fn with_split(sequences: Vec<ImageSequence>, test_fraction: f64) -> Self {
        let n = sequences.len();
        let n_test = libm::round(n as f64 * test_fraction) as usize;
        let n_test = n_test.min(n.saturating_sub(1));
        Self {
            train: (0..n - n_test).collect(),
            test: (n - n_test..n).collect(),
            sequences,
        }
    }

    pub fn train_sequences(&self) -> impl Iterator<Item = &ImageSequence> {
        self.train.iter().map(move |&i| &self.sequences[i])
    }

    pub fn test_sequences(&self) -> impl Iterator<Item = &ImageSequence> {
        self.test.iter().map(move |&i| &self.sequences[i])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sequences.len();
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.test) {
            if i >= n || seen[i] {
                return Err(Error::InvalidArgument(format!("split index {i} invalid or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("split does not cover every sequence".into()));
        }
        Ok(())
    }
}

/// Per-sequence attempt cap before the configuration is declared pathological.
const MAX_ATTEMPTS_PER_SEQUENCE: usize = 10_000;

/// Generates sequence `index` from its own stream (`seed + index`), rejecting
/// scenes without a sufficiently occluded frame. Returns the sequence and the
/// number of attempts it took.
pub fn generate_sequence(seed: u64, index: u64, cfg: &LeavesConfig) -> Result<(ImageSequence, usize)> {
    cfg.validate()?;
    let mut r = rng::stream(seed, index);
    for attempt in 1..=MAX_ATTEMPTS_PER_SEQUENCE {
        let scene = match sample_scene(&mut r, cfg) {
            Ok(s) => s,
            Err(_) => continue,
        };
        if meets_occlusion_predicate(&scene, cfg) {
            let mut seq = render_sequence(&scene, cfg.supersample);
            seq.source = SequenceSource::Leaves { seed, index, scene };
            return Ok((seq, attempt));
        }
    }
    Err(Error::Pathological {
        attempts: MAX_ATTEMPTS_PER_SEQUENCE,
        rejected: MAX_ATTEMPTS_PER_SEQUENCE,
    })
}

/// Assembles generated sequences into a dataset, failing when more than 99%
/// of all candidate scenes were rejected.
pub fn assemble_dataset(results: Vec<(ImageSequence, usize)>, cfg: &LeavesConfig) -> Result<SequenceDataset> {
    let accepted = results.len();
    let attempts: usize = results.iter().map(|r| r.1).sum();
    if accepted == 0 {
        return Err(Error::InvalidArgument("n_sequences must be >= 1".into()));
    }
    if attempts > 100 * accepted {
        return Err(Error::Pathological {
            attempts,
            rejected: attempts - accepted,
        });
    }
    log::info!("generated {accepted} sequences from {attempts} candidate scenes");
    Ok(SequenceDataset::with_split(
        results.into_iter().map(|r| r.0).collect(),
        cfg.test_fraction,
    ))
}

pub fn generate_dataset(seed: u64, n_sequences: usize, cfg: &LeavesConfig) -> Result<SequenceDataset> {
    if n_sequences == 0 {
        return Err(Error::InvalidArgument("n_sequences must be >= 1".into()));
    }
    let results = (0..n_sequences as u64)
        .map(|i| generate_sequence(seed, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    assemble_dataset(results, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub height: usize,
    pub width: usize,
    pub base_radius: f64,
    pub max_delta_r: f64,
    /// Horizontal speed of each disk, pixels per frame.
    pub speed: f64,
    /// Edge-to-edge gap in the last conditioning frame.
    pub gap: f64,
    pub left_luminance: f32,
    pub right_luminance: f32,
    pub background: f32,
    pub supersample: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            base_radius: 6.0,
            max_delta_r: 4.0,
            speed: 3.0,
            gap: 1.0,
            left_luminance: 0.35,
            right_luminance: 0.85,
            background: 0.1,
            supersample: 4,
        }
    }
}

/// Two disks on a collision course: two conditioning frames plus the hidden
/// target in which they overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub delta_r: f64,
    pub scene: DiskScene,
    /// Conditioning frames 0 and 1 followed by the target frame 2.
    pub sequence: ImageSequence,
    /// Target-frame pixels lying entirely inside both disks.
    pub overlap: Vec<bool>,
    pub left_luminance: f32,
    pub right_luminance: f32,
}

impl Probe {
    /// Ground-truth label: `Some(true)` when the right disk is in front.
    pub fn right_occludes(&self) -> Option<bool> {
        if self.delta_r > 0.0 {
            Some(true)
        } else if self.delta_r < 0.0 {
            Some(false)
        } else {
            None
        }
    }

    /// Conditioning stack for the target, most recent first.
    pub fn conditioning(&self, tau: usize) -> Result<Vec<Tensor>> {
        self.sequence.conditioning(2, tau)
    }

    pub fn target(&self) -> Tensor {
        self.sequence.frame_tensor(2)
    }
}

pub fn make_probe(delta_r: f64, cfg: &ProbeConfig) -> Result<Probe> {
    if delta_r.abs() > cfg.max_delta_r {
        return Err(Error::InfeasibleProbe(format!(
            "|Δr| = {} exceeds {}",
            delta_r.abs(),
            cfg.max_delta_r
        )));
    }
    let r_left = cfg.base_radius - delta_r / 2.0;
    let r_right = cfg.base_radius + delta_r / 2.0;
    if r_left <= 0.5 || r_right <= 0.5 {
        return Err(Error::InfeasibleProbe(format!("radii {r_left}, {r_right} too small")));
    }
    let d1 = r_left + r_right + cfg.gap;
    let d2 = d1 - 2.0 * cfg.speed;
    if d2 >= r_left + r_right || d2 <= (r_right - r_left).abs() {
        return Err(Error::InfeasibleProbe(format!(
            "target separation {d2} gives no partial overlap"
        )));
    }
    let (cx, cy) = (cfg.width as f64 / 2.0, cfg.height as f64 / 2.0);
    let dist = |t: usize| d1 + 2.0 * cfg.speed * (1.0 - t as f64);
    let left: Vec<[f64; 2]> = (0..3).map(|t| [cx - dist(t) / 2.0, cy]).collect();
    let right: Vec<[f64; 2]> = (0..3).map(|t| [cx + dist(t) / 2.0, cy]).collect();
    for t in 0..3 {
        if left[t][0] + r_left < 0.0 || right[t][0] - r_right > cfg.width as f64 {
            return Err(Error::InfeasibleProbe(format!("disk leaves the canvas in frame {t}")));
        }
    }
    let scene = DiskScene {
        disks: [
            Disk {
                depth: cfg.base_radius / r_left,
                radius: r_left,
                luminance: cfg.left_luminance,
                trajectory: left,
            },
            Disk {
                depth: cfg.base_radius / r_right,
                radius: r_right,
                luminance: cfg.right_luminance,
                trajectory: right,
            },
        ],
        background: cfg.background,
        height: cfg.height,
        width: cfg.width,
    };
    let mut sequence = render_sequence(&scene, cfg.supersample);
    sequence.source = SequenceSource::Probe { delta_r };
    let reach = core::f64::consts::FRAC_1_SQRT_2;
    let mut overlap = vec![false; cfg.height * cfg.width];
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            overlap[r * cfg.width + c] = scene.disks.iter().all(|d| {
                let [dx, dy] = d.trajectory[2];
                libm::sqrt((x - dx) * (x - dx) + (y - dy) * (y - dy)) + reach <= d.radius
            });
        }
    }
    if !overlap.iter().any(|&o| o) {
        return Err(Error::InfeasibleProbe("target frame has no interior overlap".into()));
    }
    Ok(Probe {
        delta_r,
        scene,
        sequence,
        overlap,
        left_luminance: cfg.left_luminance,
        right_luminance: cfg.right_luminance,
    })
}
