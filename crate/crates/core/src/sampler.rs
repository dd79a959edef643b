//! Conditional sampling by iterative partial denoising.
//!
//! Starting from noise, each iteration moves the candidate frame a fraction
//! `α_k` along the denoising residual and injects fresh noise of amplitude
//! `γ_k`, chosen so the effective noise level shrinks by the factor
//! `(1 − βα_k)`. The effective level `σ_k` is the RMS of the residual, so the
//! network sets its own annealing schedule.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leaves::{ImageSequence, Probe, SequenceSource};
use crate::net::DenoiserModel;
use crate::oracle::{injected_noise_std, StepRule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Fraction of the removed noise that is not re-injected (1 = deterministic).
    pub beta: f64,
    /// Stop once the effective noise level falls to this value.
    pub sigma0: f64,
    pub alpha_init: f64,
    pub alpha_ratio: f64,
    pub alpha_cap: f64,
    pub max_iters: usize,
    /// Mean and std of the pure-noise initialization.
    pub init_mean: f32,
    pub init_std: f32,
    /// Keep every intermediate `y_k`.
    pub snapshots: bool,
    /// Append one full denoising step after the loop.
    pub final_denoise: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            sigma0: 0.01,
            alpha_init: 0.1,
            alpha_ratio: 1.05,
            alpha_cap: 1.0,
            max_iters: 500,
            init_mean: 0.5,
            init_std: 1.0,
            snapshots: false,
            final_denoise: true,
        }
    }
}

impl SamplerConfig {
    pub fn step_rule(&self) -> StepRule {
        StepRule::Geometric {
            init: self.alpha_init,
            ratio: self.alpha_ratio,
            cap: self.alpha_cap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) || !(self.sigma0 > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "sampler needs beta in [0,1], sigma0 > 0, max_iters >= 1: {self:?}"
            )));
        }
        self.step_rule().validate()
    }
}

/// The running chain: current candidate and the last measured noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub y: Tensor,
    pub sigma: f64,
    pub k: usize,
}

/// Book-keeping of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub frame: Tensor,
    pub steps: Vec<StepRecord>,
    /// `y_0, y_1, …` when snapshots were requested.
    pub snapshots: Vec<Tensor>,
    /// False when `max_iters` ran out (or the chain diverged) with σ_k still
    /// above σ0. `frame` is then built from the lowest-σ candidate visited.
    pub converged: bool,
}

impl SampleResult {
    pub fn sigmas(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.sigma).collect()
    }
}

pub fn init_noise<R: Rng + ?Sized>(shape: &[usize], cfg: &SamplerConfig, rng: &mut R) -> Tensor {
    Tensor::randn(shape, cfg.init_std, rng).map(|v| v + cfg.init_mean)
}

pub enum StepOutcome {
    /// σ_k ≤ σ0; carries the denoiser output at the current candidate.
    Done(Tensor),
    Moved(StepRecord),
}

/// One iteration `y_k = (1 − α_k) y_{k−1} + α_k x̂(y_{k−1}, c) + γ_k z_k`,
/// which is `y_{k−1} + α_k f(y_{k−1}, c) + γ_k z_k` written so that α = 1
/// returns the denoiser output exactly.
pub fn step<R: Rng + ?Sized>(
    model: &DenoiserModel,
    c: &[Tensor],
    state: &mut SamplerState,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    let xhat = model.forward(&state.y, c)?;
    let sigma = xhat.sub(&state.y)?.rms();
    state.sigma = sigma;
    if sigma <= cfg.sigma0 {
        return Ok(StepOutcome::Done(xhat));
    }
    state.k += 1;
    let alpha = cfg.step_rule().alpha(state.k);
    let gamma = injected_noise_std(alpha, cfg.beta, sigma);
    let next = if alpha == 1.0 {
        xhat
    } else {
        let (a, keep) = (alpha as f32, (1.0 - alpha) as f32);
        state.y.zip_map(&xhat, |y, x| keep * y + a * x)?
    };
    state.y = if gamma > 0.0 {
        let g = gamma as f32;
        next.map(|v| v + g * rng.sample::<f32, _>(StandardNormal))
    } else {
        next
    };
    state.y.ensure_finite("sampler step")?;
    Ok(StepOutcome::Moved(StepRecord {
        k: state.k,
        sigma,
        alpha,
        gamma,
    }))
}

/// Runs the chain from a given initial candidate.
pub fn sample_from<R: Rng + ?Sized>(
    model: &DenoiserModel,
    c: &[Tensor],
    y0: Tensor,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleResult> {
    cfg.validate()?;
    if model.is_training() {
        return Err(Error::InvalidArgument("sampler needs an inference-mode model".into()));
    }
    let mut state = SamplerState {
        y: y0,
        sigma: f64::INFINITY,
        k: 0,
    };
    let mut steps = Vec::new();
    let mut snapshots = if cfg.snapshots { vec![state.y.clone()] } else { Vec::new() };
    // lowest-σ candidate seen so far, returned if the chain never gets to σ0
    let mut best: Option<(f64, Tensor)> = None;
    while state.k < cfg.max_iters {
        let prev = state.y.clone();
        match step(model, c, &mut state, cfg, rng) {
            Ok(StepOutcome::Done(xhat)) => {
                let frame = if cfg.final_denoise { xhat } else { state.y };
                if cfg.snapshots {
                    snapshots.push(frame.clone());
                }
                return Ok(SampleResult {
                    frame,
                    steps,
                    snapshots,
                    converged: true,
                });
            }
            Ok(StepOutcome::Moved(rec)) => {
                if best.as_ref().is_none_or(|b| rec.sigma < b.0) {
                    best = Some((rec.sigma, prev));
                }
                steps.push(rec);
                if cfg.snapshots {
                    snapshots.push(state.y.clone());
                }
            }
            // a diverging chain; stop and fall back to the best candidate
            Err(Error::NonFinite(_)) if best.is_some() => break,
            Err(e) => return Err(e),
        }
    }
    let (best_sigma, y) = best.unwrap_or((state.sigma, state.y));
    log::warn!(
        "sampler stopped after {} iterations above sigma0 = {} (lowest effective noise {best_sigma:.4})",
        steps.len(),
        cfg.sigma0
    );
    let frame = if cfg.final_denoise { model.forward(&y, c)? } else { y };
    Ok(SampleResult {
        frame,
        steps,
        snapshots,
        converged: false,
    })
}

/// Draws a probable next frame given the conditioning stack `c` (most recent
/// first), starting from `N(init_mean, init_std²)` noise.
pub fn sample_next_frame<R: Rng + ?Sized>(
    model: &DenoiserModel,
    c: &[Tensor],
    shape: &[usize],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleResult> {
    let y0 = init_noise(shape, cfg, rng);
    sample_from(model, c, y0, cfg, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Iterative partial denoising.
    Sample,
    /// A single denoising step from pure noise (the posterior mean).
    OneStep,
}

/// Generates `n_steps` frames recursively, feeding each new frame back as
/// conditioning. `seed_frames` are in chronological order and must hold at
/// least `τ` frames (and at least one); the result starts with them.
pub fn rollout<R: Rng + ?Sized>(
    model: &DenoiserModel,
    seed_frames: &[Tensor],
    n_steps: usize,
    cfg: &SamplerConfig,
    mode: RolloutMode,
    rng: &mut R,
) -> Result<ImageSequence> {
    let tau = model.arch().tau;
    if seed_frames.len() < tau.max(1) {
        return Err(Error::InvalidArgument(alloc::format!(
            "rollout needs at least {} seed frames, got {}",
            tau.max(1),
            seed_frames.len()
        )));
    }
    let shape = seed_frames[0].shape().to_vec();
    let mut frames: Vec<Tensor> = seed_frames.to_vec();
    for _ in 0..n_steps {
        let c: Vec<Tensor> = frames.iter().rev().take(tau).cloned().collect();
        let next = match mode {
            RolloutMode::Sample => sample_next_frame(model, &c, &shape, cfg, rng)?.frame,
            RolloutMode::OneStep => {
                let y0 = init_noise(&shape, cfg, rng);
                model.forward(&y0, &c)?
            }
        };
        frames.push(next.map(|v| v.clamp(0.0, 1.0)));
    }
    ImageSequence::from_frames(&frames, SequenceSource::Generated)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionOutcome {
    LeftOccludes,
    RightOccludes,
    Undecided,
}

pub const OCCLUSION_TOLERANCE: f32 = 0.1;

/// Classifies a predicted frame by the mean luminance over the probe's
/// overlap region: a disk wins when the mean lies within `tol` of its
/// luminance and not within `tol` of the other's.
pub fn occlusion_outcome(frame: &Tensor, probe: &Probe, tol: f32) -> Result<OcclusionOutcome> {
    if frame.len() != probe.overlap.len() {
        return Err(Error::Shape {
            op: "occlusion_outcome",
            detail: alloc::format!("{} pixels vs mask of {}", frame.len(), probe.overlap.len()),
        });
    }
    let (sum, n) = frame
        .data()
        .iter()
        .zip(&probe.overlap)
        .filter(|(_, &o)| o)
        .fold((0.0f64, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
    if n == 0 {
        return Err(Error::InfeasibleProbe("probe has no overlap region".into()));
    }
    let mean = (sum / n as f64) as f32;
    let near_left = (mean - probe.left_luminance).abs() <= tol;
    let near_right = (mean - probe.right_luminance).abs() <= tol;
    Ok(match (near_left, near_right) {
        (true, false) => OcclusionOutcome::LeftOccludes,
        (false, true) => OcclusionOutcome::RightOccludes,
        _ => OcclusionOutcome::Undecided,
    })
}
