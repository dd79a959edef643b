//! PSNR curves, adaptive filters, cue decomposition and occlusion
//! psychometrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::leaves::{make_probe, Probe, ProbeConfig, SequenceDataset};
use crate::net::DenoiserModel;
use crate::rng;
use crate::sampler::{
    occlusion_outcome, sample_next_frame, OcclusionOutcome, SampleResult, SamplerConfig, OCCLUSION_TOLERANCE,
};
use crate::tensor::Tensor;

/// Value reported for an exact reconstruction.
pub const PSNR_CAP: f64 = 100.0;

pub fn psnr(x: &Tensor, xhat: &Tensor, range: f64) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(Error::Shape {
            op: "psnr",
            detail: format!("{:?} vs {:?}", x.shape(), xhat.shape()),
        });
    }
    psnr_slices(x.data(), xhat.data(), range)
}

pub fn psnr_slices(x: &[f32], xhat: &[f32], range: f64) -> Result<f64> {
    if x.len() != xhat.len() || x.is_empty() {
        return Err(Error::Shape {
            op: "psnr",
            detail: format!("{} vs {} pixels", x.len(), xhat.len()),
        });
    }
    let mse = x
        .iter()
        .zip(xhat)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / x.len() as f64;
    Ok(psnr_from_mse(mse, range))
}

pub fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * libm::log10(range * range / mse)).min(PSNR_CAP)
}

/// Noise std that gives a target input PSNR for unit range.
pub fn sigma_for_psnr(db: f64) -> f64 {
    libm::pow(10.0, -db / 20.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsnrPoint {
    pub sigma: f64,
    pub input_psnr: f64,
    pub output_psnr: f64,
    pub tau: usize,
    pub sequence: usize,
}

/// Denoising performance on the last frame of every held-out sequence, one
/// point per (σ, sequence). Noise draws depend only on `seed`, σ index and
/// sequence, so models compared with the same seed see identical inputs.
pub fn performance_curve(
    model: &DenoiserModel,
    ds: &SequenceDataset,
    sigmas: &[f64],
    seed: u64,
) -> Result<Vec<PsnrPoint>> {
    if ds.test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let tau = model.arch().tau;
    let mut points = Vec::with_capacity(sigmas.len() * ds.test.len());
    for (si, &sigma) in sigmas.iter().enumerate() {
        for &s in &ds.test {
            let seq = &ds.sequences[s];
            let t = seq.len() - 1;
            if t < tau {
                return Err(Error::InvalidArgument(format!("sequence {s} is shorter than memory {tau}")));
            }
            let x = seq.frame_tensor(t);
            let mut r = rng::substream(seed, s as u64, si as u64);
            let y = x.zip_map(&Tensor::randn(x.shape(), sigma as f32, &mut r), |a, z| a + z)?;
            let c = seq.conditioning(t, tau)?;
            let xhat = model.forward(&y, &c)?;
            points.push(PsnrPoint {
                sigma,
                input_psnr: psnr(&x, &y, 1.0)?,
                output_psnr: psnr(&x, &xhat, 1.0)?,
                tau,
                sequence: s,
            });
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub sigma: f64,
    pub input_psnr: f64,
    pub output_psnr: f64,
}

/// Averages PSNR over sequences at each σ, preserving the order of first
/// appearance.
pub fn average_curve(points: &[PsnrPoint]) -> Vec<CurvePoint> {
    let mut out: Vec<(CurvePoint, usize)> = Vec::new();
    for p in points {
        match out.iter_mut().find(|(c, _)| c.sigma == p.sigma) {
            Some((c, n)) => {
                c.input_psnr += p.input_psnr;
                c.output_psnr += p.output_psnr;
                *n += 1;
            }
            None => out.push((
                CurvePoint {
                    sigma: p.sigma,
                    input_psnr: p.input_psnr,
                    output_psnr: p.output_psnr,
                },
                1,
            )),
        }
    }
    out.into_iter()
        .map(|(c, n)| CurvePoint {
            sigma: c.sigma,
            input_psnr: c.input_psnr / n as f64,
            output_psnr: c.output_psnr / n as f64,
        })
        .collect()
}

/// Least-squares line through the points whose x lies in `[lo, hi]`;
/// returns `(slope, intercept)`.
pub fn fit_line(points: &[(f64, f64)], lo: f64, hi: f64) -> Option<(f64, f64)> {
    let sel: Vec<_> = points.iter().filter(|(x, _)| *x >= lo && *x <= hi).collect();
    if sel.len() < 2 {
        return None;
    }
    let n = sel.len() as f64;
    let mx = sel.iter().map(|p| p.0).sum::<f64>() / n;
    let my = sel.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = sel.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = sel.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Effective linear weights of one output pixel: the Jacobian row of
/// `x̂(y, c)[i, j]` split into one map per input frame (`y` first).
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveFilter {
    pub pixel: (usize, usize),
    pub output: f32,
    pub weights: Vec<Tensor>,
}

impl AdaptiveFilter {
    /// Σ inputs·weights, which equals the output for a homogeneous network.
    pub fn reconstruct(&self, y: &Tensor, c: &[Tensor]) -> Result<f64> {
        let mut total = self.weights[0].dot(y)?;
        for (w, frame) in self.weights[1..].iter().zip(c) {
            total += w.dot(frame)?;
        }
        Ok(total)
    }
}

pub fn adaptive_filter(model: &DenoiserModel, y: &Tensor, c: &[Tensor], pixel: (usize, usize)) -> Result<AdaptiveFilter> {
    let (h, w) = match *y.shape() {
        [h, w] => (h, w),
        _ => return Err(Error::Shape { op: "adaptive_filter", detail: format!("frame shape {:?}", y.shape()) }),
    };
    if pixel.0 >= h || pixel.1 >= w {
        return Err(Error::OutOfRange(format!("pixel {pixel:?} outside {h}x{w}")));
    }
    if model.is_training() {
        return Err(Error::InvalidArgument("adaptive filter needs an inference-mode model".into()));
    }
    let input = model.input_tensor(y, c)?;
    let mut g = Graph::new();
    let x = g.leaf(input);
    let fv = model.build(&mut g, x)?;
    let out = g.pick(fv.output, pixel.0 * w + pixel.1)?;
    let output = g.value(out).data()[0];
    g.backward(out)?;
    let grad = g.take_grad(x).ok_or(Error::NonFinite("adaptive filter gradient"))?;
    let d = h * w;
    let weights = grad
        .data()
        .chunks(d)
        .map(|m| Tensor::new(&[h, w], m.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(AdaptiveFilter { pixel, output, weights })
}

/// Split of the estimate into the parts carried by the noisy observation
/// (`x̂_y = J_y·y`) and by the conditioning (`x̂_c = J_c·c`), with the terms
/// of the error partition
/// `‖x−x̂‖² = ‖x−x̂_c‖² + ‖x−x̂_y‖² − ‖x‖² + 2⟨x̂_y, x̂_c⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct CueDecomposition {
    pub xhat: Tensor,
    pub xhat_y: Tensor,
    pub xhat_c: Tensor,
    pub err_c: f64,
    pub err_y: f64,
    pub norm_x: f64,
    pub cross: f64,
    /// ‖x̂_y + x̂_c − x̂‖ / ‖x̂‖.
    pub euler_residual: f64,
    pub eps: f64,
    /// Residual still above tolerance after all retries.
    pub flagged: bool,
}

pub const CUE_EPS: f64 = 1e-3;
pub const EULER_TOLERANCE: f64 = 1e-2;
const CUE_RETRIES: usize = 2;

impl CueDecomposition {
    /// Right-hand side of the partition, which equals `‖x − (x̂_y + x̂_c)‖²`.
    pub fn partition(&self) -> f64 {
        partition_terms(self.err_c, self.err_y, self.norm_x, self.cross)
    }
}

pub fn partition_terms(err_c: f64, err_y: f64, norm_x: f64, cross: f64) -> f64 {
    err_c + err_y - norm_x + 2.0 * cross
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&u, &v)| {
            let d = u as f64 - v as f64;
            d * d
        })
        .sum()
}

pub fn cue_decomposition(model: &DenoiserModel, x: &Tensor, y: &Tensor, c: &[Tensor]) -> Result<CueDecomposition> {
    let xhat = model.forward(y, c)?;
    let xn = libm::sqrt(xhat.sum_sq()).max(f64::MIN_POSITIVE);
    let mut eps = CUE_EPS;
    let mut best: Option<(Tensor, Tensor, f64, f64)> = None;
    for attempt in 0..=CUE_RETRIES {
        let e = eps as f32;
        let (yp, ym) = (y.scale(1.0 + e), y.scale(1.0 - e));
        let xy = model.forward(&yp, c)?.zip_map(&model.forward(&ym, c)?, |a, b| (a - b) / (2.0 * e))?;
        let cp: Vec<Tensor> = c.iter().map(|f| f.scale(1.0 + e)).collect();
        let cm: Vec<Tensor> = c.iter().map(|f| f.scale(1.0 - e)).collect();
        let xc = if c.is_empty() {
            Tensor::zeros(y.shape())
        } else {
            model.forward(y, &cp)?.zip_map(&model.forward(y, &cm)?, |a, b| (a - b) / (2.0 * e))?
        };
        let resid = libm::sqrt(sq_dist(&xy.add(&xc)?.into_data(), xhat.data())) / xn;
        let better = best.as_ref().is_none_or(|b| resid < b.2);
        if better {
            best = Some((xy, xc, resid, eps));
        }
        if resid <= EULER_TOLERANCE {
            break;
        }
        if attempt < CUE_RETRIES {
            log::debug!("cue decomposition residual {resid:.3e} at eps {eps:.1e}; retrying");
            eps /= 10.0;
        }
    }
    let (xhat_y, xhat_c, euler_residual, eps) = best.expect("at least one attempt");
    let zero = vec![0.0f32; x.len()];
    Ok(CueDecomposition {
        err_c: sq_dist(x.data(), xhat_c.data()),
        err_y: sq_dist(x.data(), xhat_y.data()),
        norm_x: sq_dist(x.data(), &zero),
        cross: xhat_y.dot(&xhat_c)?,
        flagged: euler_residual > EULER_TOLERANCE,
        xhat,
        xhat_y,
        xhat_c,
        euler_residual,
        eps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CuePoint {
    pub sigma: f64,
    pub input_psnr: f64,
    pub psnr_full: f64,
    pub psnr_y: f64,
    pub psnr_c: f64,
    pub flagged: usize,
}

/// PSNR of `x̂`, `x̂_y` and `x̂_c` against the clean frame as a function of
/// noise level, averaged over `draws` noise realizations.
pub fn cue_curve(
    model: &DenoiserModel,
    x: &Tensor,
    c: &[Tensor],
    sigmas: &[f64],
    draws: usize,
    seed: u64,
) -> Result<Vec<CuePoint>> {
    let draws = draws.max(1);
    let mut out = Vec::with_capacity(sigmas.len());
    for (si, &sigma) in sigmas.iter().enumerate() {
        let mut p = CuePoint {
            sigma,
            input_psnr: 0.0,
            psnr_full: 0.0,
            psnr_y: 0.0,
            psnr_c: 0.0,
            flagged: 0,
        };
        for d in 0..draws {
            let mut r = rng::substream(seed, si as u64, d as u64);
            let y = x.zip_map(&Tensor::randn(x.shape(), sigma as f32, &mut r), |a, z| a + z)?;
            let cd = cue_decomposition(model, x, &y, c)?;
            p.input_psnr += psnr(x, &y, 1.0)?;
            p.psnr_full += psnr(x, &cd.xhat, 1.0)?;
            p.psnr_y += psnr(x, &cd.xhat_y, 1.0)?;
            p.psnr_c += psnr(x, &cd.xhat_c, 1.0)?;
            p.flagged += cd.flagged as usize;
        }
        let n = draws as f64;
        p.input_psnr /= n;
        p.psnr_full /= n;
        p.psnr_y /= n;
        p.psnr_c /= n;
        out.push(p);
    }
    Ok(out)
}

/// Input PSNR at which the observation-driven estimate overtakes the
/// conditioning-driven one (linear interpolation between grid points).
pub fn cue_crossing(points: &[CuePoint]) -> Option<f64> {
    let mut pts: Vec<&CuePoint> = points.iter().collect();
    pts.sort_by(|a, b| a.input_psnr.total_cmp(&b.input_psnr));
    pts.windows(2).find_map(|w| {
        let (d0, d1) = (w[0].psnr_c - w[0].psnr_y, w[1].psnr_c - w[1].psnr_y);
        if d0 > 0.0 && d1 <= 0.0 {
            let t = d0 / (d0 - d1);
            Some(w[0].input_psnr + t * (w[1].input_psnr - w[0].input_psnr))
        } else {
            None
        }
    })
}

/// Mean gradient magnitude over pixels whose forward-difference gradient
/// exceeds `threshold`; zero when no pixel does.
pub fn edge_sharpness(frame: &[f32], height: usize, width: usize, threshold: f32) -> f64 {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for r in 0..height.saturating_sub(1) {
        for c in 0..width.saturating_sub(1) {
            let v = frame[r * width + c];
            let dx = frame[r * width + c + 1] - v;
            let dy = frame[(r + 1) * width + c] - v;
            let m = libm::sqrtf(dx * dx + dy * dy);
            if m > threshold {
                sum += m as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub const EDGE_THRESHOLD: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChoicePoint {
    pub delta_r: f64,
    pub n: usize,
    pub right: usize,
    pub left: usize,
    pub undecided: usize,
    /// Samples whose chain stopped above σ0 (classified all the same).
    #[serde(default)]
    pub unconverged: usize,
}

impl ChoicePoint {
    pub fn from_outcomes(delta_r: f64, outcomes: &[OcclusionOutcome]) -> Self {
        let count = |o| outcomes.iter().filter(|&&x| x == o).count();
        Self {
            delta_r,
            n: outcomes.len(),
            right: count(OcclusionOutcome::RightOccludes),
            left: count(OcclusionOutcome::LeftOccludes),
            undecided: count(OcclusionOutcome::Undecided),
            unconverged: 0,
        }
    }

    /// Classifies sampler results for one probe.
    pub fn from_samples(delta_r: f64, probe: &Probe, samples: &[SampleResult]) -> Result<Self> {
        let outcomes = samples
            .iter()
            .map(|r| occlusion_outcome(&r.frame, probe, OCCLUSION_TOLERANCE))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            unconverged: samples.iter().filter(|r| !r.converged).count(),
            ..Self::from_outcomes(delta_r, &outcomes)
        })
    }

    /// Right-occlusion frequency over all samples.
    pub fn frequency(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.right as f64 / self.n as f64
        }
    }

    pub fn undecided_fraction(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.undecided as f64 / self.n as f64
        }
    }
}

pub fn logistic(x: f64, mu: f64, s: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-(x - mu) / s))
}

/// Binomial log-likelihood of `(x, successes, trials)` data under the
/// logistic curve.
pub fn logistic_log_likelihood(data: &[(f64, usize, usize)], mu: f64, s: f64) -> f64 {
    data.iter()
        .map(|&(x, k, n)| {
            let p = logistic(x, mu, s).clamp(1e-12, 1.0 - 1e-12);
            k as f64 * libm::log(p) + (n - k) as f64 * libm::log(1.0 - p)
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsychometricFit {
    pub points: Vec<ChoicePoint>,
    pub mu: f64,
    pub s: f64,
    pub log_likelihood: f64,
    /// The optimum is interior to the search box.
    pub converged: bool,
    /// Some Δr had more than 20% undecided outcomes.
    pub flagged: bool,
}

pub const MAX_UNDECIDED: f64 = 0.2;
const S_MIN: f64 = 1e-2;
const S_MAX: f64 = 1e2;

/// Maximum-likelihood logistic fit: coarse grid over (μ, log s), then a
/// shrinking pattern search.
pub fn fit_logistic(data: &[(f64, usize, usize)]) -> Result<(f64, f64, f64, bool)> {
    if data.len() < 2 || data.iter().all(|d| d.2 == 0) {
        return Err(Error::InvalidArgument("logistic fit needs at least two populated points".into()));
    }
    let lo = data.iter().map(|d| d.0).fold(f64::INFINITY, f64::min);
    let hi = data.iter().map(|d| d.0).fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1.0);
    let (mu_lo, mu_hi) = (lo - span, hi + span);
    let (ls_lo, ls_hi) = (libm::log(S_MIN), libm::log(S_MAX));
    let f = |mu: f64, ls: f64| logistic_log_likelihood(data, mu, libm::exp(ls));
    let mut best = (lo, 0.0, f64::NEG_INFINITY);
    let steps = 60;
    for i in 0..=steps {
        let mu = mu_lo + (mu_hi - mu_lo) * i as f64 / steps as f64;
        for j in 0..=steps {
            let ls = ls_lo + (ls_hi - ls_lo) * j as f64 / steps as f64;
            let v = f(mu, ls);
            if v > best.2 {
                best = (mu, ls, v);
            }
        }
    }
    let mut step = ((mu_hi - mu_lo) / steps as f64, (ls_hi - ls_lo) / steps as f64);
    let mut iters = 0;
    while (step.0 > 1e-9 || step.1 > 1e-9) && iters < 10_000 {
        iters += 1;
        let mut moved = false;
        for (dm, dl) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
            let mu = (best.0 + dm * step.0).clamp(mu_lo, mu_hi);
            let ls = (best.1 + dl * step.1).clamp(ls_lo, ls_hi);
            let v = f(mu, ls);
            if v > best.2 {
                best = (mu, ls, v);
                moved = true;
            }
        }
        if !moved {
            step = (step.0 / 2.0, step.1 / 2.0);
        }
    }
    let interior = |v: f64, a: f64, b: f64| v > a + 1e-6 * (b - a) && v < b - 1e-6 * (b - a);
    let converged = interior(best.0, mu_lo, mu_hi) && interior(best.1, ls_lo, ls_hi) && best.2.is_finite();
    Ok((best.0, libm::exp(best.1), best.2, converged))
}

pub fn fit_psychometric(points: Vec<ChoicePoint>) -> Result<PsychometricFit> {
    let data: Vec<(f64, usize, usize)> = points.iter().map(|p| (p.delta_r, p.right, p.n)).collect();
    let (mu, s, log_likelihood, converged) = fit_logistic(&data)?;
    let flagged = points.iter().any(|p| p.undecided_fraction() > MAX_UNDECIDED);
    if flagged {
        log::warn!("more than {:.0}% undecided outcomes at some Δr", MAX_UNDECIDED * 100.0);
    }
    Ok(PsychometricFit {
        points,
        mu,
        s,
        log_likelihood,
        converged,
        flagged,
    })
}

/// True when no later point falls below an earlier one by more than `z`
/// binomial standard errors (pooled over the pair).
pub fn is_monotone_up_to_noise(points: &[ChoicePoint], z: f64) -> bool {
    let mut pts: Vec<&ChoicePoint> = points.iter().filter(|p| p.n > 0).collect();
    pts.sort_by(|a, b| a.delta_r.total_cmp(&b.delta_r));
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let (a, b) = (pts[i], pts[j]);
            let drop = a.frequency() - b.frequency();
            if drop <= 0.0 {
                continue;
            }
            let n = (a.n + b.n) as f64;
            let p = ((a.right + b.right) as f64 / n).clamp(0.5 / n, 1.0 - 0.5 / n);
            let se = libm::sqrt(p * (1.0 - p) * (1.0 / a.n as f64 + 1.0 / b.n as f64));
            if drop > z * se {
                return false;
            }
        }
    }
    true
}

/// Samples `n_samples` next frames for the probe; chain `i` uses stream
/// `seed + i`.
pub fn probe_samples(
    model: &DenoiserModel,
    probe: &Probe,
    n_samples: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<SampleResult>> {
    let c = probe.conditioning(model.arch().tau)?;
    let shape = [probe.sequence.height(), probe.sequence.width()];
    (0..n_samples)
        .map(|i| sample_next_frame(model, &c, &shape, cfg, &mut rng::stream(seed, i as u64)))
        .collect()
}

/// Right-occlusion choice data over a Δr grid with a logistic fit.
pub fn psychometric(
    model: &DenoiserModel,
    deltas: &[f64],
    n_samples: usize,
    probe_cfg: &ProbeConfig,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<PsychometricFit> {
    let mut points = Vec::with_capacity(deltas.len());
    for (k, &dr) in deltas.iter().enumerate() {
        let probe = make_probe(dr, probe_cfg)?;
        let samples = probe_samples(model, &probe, n_samples, cfg, seed.wrapping_add((k as u64) << 32))?;
        points.push(ChoicePoint::from_samples(dr, &probe, &samples)?);
    }
    fit_psychometric(points)
}

/// Choice data drawn from a known logistic, for checking the fit.
pub fn simulate_choices<R: Rng + ?Sized>(deltas: &[f64], n: usize, mu: f64, s: f64, rng: &mut R) -> Vec<ChoicePoint> {
    deltas
        .iter()
        .map(|&x| {
            let p = logistic(x, mu, s);
            let right = (0..n).filter(|_| rng.random::<f64>() < p).count();
            ChoicePoint {
                delta_r: x,
                n,
                right,
                left: n - right,
                undecided: 0,
                unconverged: 0,
            }
        })
        .collect()
}
