//! Closed-form empirical-Bayes ground truth for 1D Gaussian mixtures.
//!
//! A mixture observed through additive Gaussian noise of level `σ` is again a
//! mixture whose component variances grow by `σ²`. That gives exact
//! expressions for the noisy log-density, its score, and the MMSE denoiser,
//! so the identity `E[x|y] = y + σ² ∂_y log p_σ(y)` can be checked to
//! machine precision. Point masses are components with zero spread.
//!
//! Everything here is `f64`; it is the precision reference for the rest of
//! the crate.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma >= 0.0 && sigma.is_finite() {
            Ok(Self(sigma))
        } else {
            Err(Error::InvalidArgument(format!("noise level {sigma} must be >= 0")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture1D {
    weights: Vec<f64>,
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl GaussianMixture1D {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || means.len() != stds.len() {
            return Err(Error::InvalidArgument(format!(
                "mixture needs equal non-empty weights/means/stds, got {}/{}/{}",
                weights.len(),
                means.len(),
                stds.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "mixture weights must be non-negative and sum to 1, sum = {total}"
            )));
        }
        if stds.iter().any(|&s| !(s >= 0.0 && s.is_finite())) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("stds must be >= 0, means finite".into()));
        }
        Ok(Self {
            weights,
            means,
            stds,
        })
    }

    /// Two equal-weight point masses at `-offset` and `+offset`.
    pub fn symmetric_point_masses(offset: f64) -> Self {
        Self {
            weights: alloc::vec![0.5, 0.5],
            means: alloc::vec![-offset, offset],
            stds: alloc::vec![0.0, 0.0],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn has_point_mass(&self) -> bool {
        self.stds.contains(&0.0)
    }

    /// Per-component log(w_i N(y; μ_i, s_i² + σ²)) and the noisy variances.
    fn log_terms(&self, y: f64, sigma: NoiseLevel) -> Result<(Vec<f64>, Vec<f64>)> {
        let s2 = sigma.0 * sigma.0;
        if s2 == 0.0 && self.has_point_mass() {
            return Err(Error::UndefinedDensity(
                "noise-free density of a point mass",
            ));
        }
        let vars: Vec<f64> = self.stds.iter().map(|s| s * s + s2).collect();
        let terms = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&vars)
            .map(|((&w, &m), &v)| {
                let d = y - m;
                libm::log(w) - 0.5 * (LN_2PI + libm::log(v)) - 0.5 * d * d / v
            })
            .collect();
        Ok((terms, vars))
    }

    /// log p_σ(y), evaluated with log-sum-exp.
    pub fn noisy_logpdf(&self, y: f64, sigma: NoiseLevel) -> Result<f64> {
        let (terms, _) = self.log_terms(y, sigma)?;
        Ok(log_sum_exp(&terms))
    }

    /// Posterior responsibilities of each component given the noisy `y`.
    pub fn responsibilities(&self, y: f64, sigma: NoiseLevel) -> Result<Vec<f64>> {
        let (terms, _) = self.log_terms(y, sigma)?;
        let lse = log_sum_exp(&terms);
        Ok(terms.iter().map(|t| libm::exp(t - lse)).collect())
    }

    /// ∂/∂y log p_σ(y) = Σ r_i (μ_i − y) / (s_i² + σ²).
    pub fn noisy_score(&self, y: f64, sigma: NoiseLevel) -> Result<f64> {
        let (terms, vars) = self.log_terms(y, sigma)?;
        let lse = log_sum_exp(&terms);
        Ok(terms
            .iter()
            .zip(&self.means)
            .zip(&vars)
            .map(|((t, m), v)| libm::exp(t - lse) * (m - y) / v)
            .sum())
    }

    /// Posterior mean E[x | y] under noise level σ; the identity at σ = 0.
    pub fn mmse_denoise(&self, y: f64, sigma: NoiseLevel) -> Result<f64> {
        if sigma.0 == 0.0 {
            return Ok(y);
        }
        let (terms, vars) = self.log_terms(y, sigma)?;
        let lse = log_sum_exp(&terms);
        Ok(terms
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .zip(&vars)
            .map(|((t, (m, s)), v)| libm::exp(t - lse) * (m + s * s / v * (y - m)))
            .sum())
    }

    /// Draws one clean sample.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z: f64 = rng.sample(StandardNormal);
        self.means[k] + self.stds[k] * z
    }
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + libm::log(terms.iter().map(|t| libm::exp(t - max)).sum::<f64>())
}

/// A family of mixtures indexed by a discrete conditioning label, standing in
/// for p(x | c) in tests of the conditional identities.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextMixtureFamily {
    members: BTreeMap<u32, GaussianMixture1D>,
}

impl ContextMixtureFamily {
    pub fn new(members: BTreeMap<u32, GaussianMixture1D>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidArgument("empty context family".into()));
        }
        Ok(Self { members })
    }

    pub fn get(&self, context: u32) -> Result<&GaussianMixture1D> {
        self.members
            .get(&context)
            .ok_or_else(|| Error::OutOfRange(format!("unknown context {context}")))
    }

    pub fn contexts(&self) -> impl Iterator<Item = u32> + '_ {
        self.members.keys().copied()
    }

    pub fn noisy_score(&self, context: u32, y: f64, sigma: NoiseLevel) -> Result<f64> {
        self.get(context)?.noisy_score(y, sigma)
    }

    pub fn mmse_denoise(&self, context: u32, y: f64, sigma: NoiseLevel) -> Result<f64> {
        self.get(context)?.mmse_denoise(y, sigma)
    }
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return alloc::vec![lo];
    }
    let (a, b) = (libm::log(lo), libm::log(hi));
    let mut g: Vec<f64> = (0..n)
        .map(|i| libm::exp(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect();
    g[0] = lo;
    g[n - 1] = hi;
    g
}

/// The default MAP grid: 200 log-spaced levels in [1e-3, 3].
pub fn default_sigma_grid() -> Vec<f64> {
    log_grid(1e-3, 3.0, 200)
}

/// Blind denoising with a MAP plug-in noise level under a log-uniform prior
/// p(σ) ∝ 1/σ. Returns the estimate and the selected σ̂.
pub fn blind_denoise_map(
    gm: &GaussianMixture1D,
    y: f64,
    sigma_grid: &[f64],
) -> Result<(f64, NoiseLevel)> {
    let mut best: Option<(f64, f64)> = None;
    for &s in sigma_grid {
        let level = NoiseLevel::new(s)?;
        if s == 0.0 {
            continue;
        }
        let lp = gm.noisy_logpdf(y, level)? - libm::log(s);
        if best.is_none_or(|(b, _)| lp > b) {
            best = Some((lp, s));
        }
    }
    let (_, s) = best.ok_or_else(|| Error::InvalidArgument("empty or all-zero sigma grid".into()))?;
    let level = NoiseLevel(s);
    Ok((gm.mmse_denoise(y, level)?, level))
}

/// Step-size rule shared by the 1D and image samplers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Fixed(f64),
    /// α_k = min(init · ratio^(k−1), cap), k starting at 1.
    Geometric { init: f64, ratio: f64, cap: f64 },
}

impl StepRule {
    pub fn alpha(&self, k: usize) -> f64 {
        match *self {
            StepRule::Fixed(a) => a,
            StepRule::Geometric { init, ratio, cap } => {
                (init * libm::pow(ratio, k.saturating_sub(1) as f64)).min(cap)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepRule::Fixed(a) => a > 0.0 && a <= 1.0,
            StepRule::Geometric { init, ratio, cap } => {
                init > 0.0 && init <= cap && ratio >= 1.0 && cap > 0.0 && cap <= 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("step sizes must lie in (0, 1]: {self:?}")))
        }
    }
}

/// Injected-noise amplitude γ with γ² = ((1 − βα)² − (1 − α)²) σ².
pub fn injected_noise_std(alpha: f64, beta: f64, sigma: f64) -> f64 {
    let g2 = ((1.0 - beta * alpha) * (1.0 - beta * alpha) - (1.0 - alpha) * (1.0 - alpha)) * sigma * sigma;
    libm::sqrt(g2.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory1D {
    /// y_0, y_1, …, followed by the final full-denoise estimate.
    pub points: Vec<f64>,
    /// Effective noise level σ̂(y_{k−1}) at each iteration.
    pub sigmas: Vec<f64>,
    pub converged: bool,
}

impl Trajectory1D {
    pub fn last(&self) -> f64 {
        *self.points.last().expect("trajectory holds y0")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampler1DConfig {
    pub step: StepRule,
    pub beta: f64,
    pub sigma0: f64,
    pub max_iters: usize,
    pub sigma_grid: Vec<f64>,
}

impl Default for Sampler1DConfig {
    fn default() -> Self {
        Self {
            step: StepRule::Fixed(0.5),
            beta: 1.0,
            sigma0: 1e-3,
            max_iters: 200,
            sigma_grid: default_sigma_grid(),
        }
    }
}

/// Iterative partial denoising in one dimension with the blind MAP denoiser:
/// y_k = y_{k−1} + α_k f(y_{k−1}) + γ_k z_k, where f(y) = x̂(y) − y. The
/// effective noise level is the MAP estimate σ̂(y) (a single residual is no
/// noise estimate: it vanishes at the unstable fixed point). Stops once
/// σ̂ ≤ σ0 and then takes one full denoising step; otherwise returns
/// `converged = false` after `max_iters`.
pub fn sample_1d<R: Rng + ?Sized>(
    gm: &GaussianMixture1D,
    y0: f64,
    cfg: &Sampler1DConfig,
    rng: &mut R,
) -> Result<Trajectory1D> {
    cfg.step.validate()?;
    if !(0.0..=1.0).contains(&cfg.beta) || !(cfg.sigma0 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "beta {} must lie in [0,1] and sigma0 {} be positive",
            cfg.beta, cfg.sigma0
        )));
    }
    let mut y = y0;
    let mut points = alloc::vec![y0];
    let mut sigmas = Vec::new();
    for k in 1..=cfg.max_iters {
        let (xhat, level) = blind_denoise_map(gm, y, &cfg.sigma_grid)?;
        let f = xhat - y;
        let sigma = level.get();
        sigmas.push(sigma);
        if sigma <= cfg.sigma0 {
            points.push(xhat);
            return Ok(Trajectory1D {
                points,
                sigmas,
                converged: true,
            });
        }
        let alpha = cfg.step.alpha(k);
        let gamma = injected_noise_std(alpha, cfg.beta, sigma);
        let z: f64 = if gamma > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
        y = y + alpha * f + gamma * z;
        points.push(y);
    }
    Ok(Trajectory1D {
        points,
        sigmas,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn lvl(s: f64) -> NoiseLevel {
        NoiseLevel::new(s).unwrap()
    }

    fn bimodal() -> GaussianMixture1D {
        GaussianMixture1D::symmetric_point_masses(0.5)
    }

    // Independent route: the density of a point-mass mixture smoothed by a
    // Gaussian kernel, written directly as a weighted kernel sum.
    fn kernel_smoothed_pdf(points: &[(f64, f64)], y: f64, sigma: f64) -> f64 {
        points
            .iter()
            .map(|&(w, m)| {
                w * libm::exp(-0.5 * (y - m) * (y - m) / (sigma * sigma))
                    / (sigma * libm::sqrt(2.0 * core::f64::consts::PI))
            })
            .sum()
    }

    #[test]
    fn standard_normal_log_density_at_zero() {
        let gm = GaussianMixture1D::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        let lp = gm.noisy_logpdf(0.0, lvl(0.0)).unwrap();
        assert!((lp + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn point_mass_needs_noise() {
        assert!(matches!(
            bimodal().noisy_logpdf(0.1, lvl(0.0)),
            Err(Error::UndefinedDensity(_))
        ));
        assert_eq!(bimodal().mmse_denoise(0.3, lvl(0.0)).unwrap(), 0.3);
    }

    #[test]
    fn bimodal_density_matches_kernel_smoothing() {
        let pts = [(0.5, -0.5), (0.5, 0.5)];
        for &(y, s) in &[(0.0, 1.0), (0.3, 0.2), (-1.7, 0.6)] {
            let lp = bimodal().noisy_logpdf(y, lvl(s)).unwrap();
            let direct = kernel_smoothed_pdf(&pts, y, s);
            assert!((libm::exp(lp) - direct).abs() < 1e-10, "y={y} s={s}");
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let gm = GaussianMixture1D::new(vec![0.2, 0.5, 0.3], vec![-1.0, 0.5, 2.0], vec![0.0, 0.3, 0.7]).unwrap();
        let (lo, hi, n) = (-15.0, 15.0, 60_001);
        let h = (hi - lo) / (n - 1) as f64;
        let mut total = 0.0;
        for i in 0..n {
            let y = lo + i as f64 * h;
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            total += w * libm::exp(gm.noisy_logpdf(y, lvl(0.4)).unwrap());
        }
        assert!((total * h - 1.0).abs() < 1e-6, "{}", total * h);
    }

    #[test]
    fn gaussian_score_closed_form() {
        let gm = GaussianMixture1D::new(vec![1.0], vec![0.7], vec![0.4]).unwrap();
        let (y, s) = (2.0, 0.3);
        let want = (0.7 - y) / (0.16 + 0.09);
        assert!((gm.noisy_score(y, lvl(s)).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn symmetric_bimodal_has_zero_score_and_denoise_at_origin() {
        assert_eq!(bimodal().noisy_score(0.0, lvl(0.8)).unwrap(), 0.0);
        assert_eq!(bimodal().mmse_denoise(0.0, lvl(0.8)).unwrap(), 0.0);
    }

    #[test]
    fn bimodal_denoiser_is_half_tanh() {
        for &(y, s) in &[(0.2, 0.5), (-1.3, 0.9), (0.05, 0.1)] {
            let want = 0.5 * libm::tanh(y / (2.0 * s * s));
            let got = bimodal().mmse_denoise(y, lvl(s)).unwrap();
            assert!((got - want).abs() < 1e-12, "y={y} s={s}: {got} vs {want}");
        }
    }

    #[test]
    fn mmse_matches_importance_sampling() {
        let gm = GaussianMixture1D::new(vec![0.3, 0.7], vec![-1.0, 1.2], vec![0.5, 0.3]).unwrap();
        let (y, s) = (0.4, 0.6);
        let mut rng = crate::rng::stream(5, 0);
        let n = 1_000_000;
        // proposal = prior, weights = likelihood
        let (mut sw, mut swx, mut swx2, mut sw2) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x = gm.sample(&mut rng);
            let w = libm::exp(-0.5 * (y - x) * (y - x) / (s * s));
            sw += w;
            swx += w * x;
            swx2 += w * x * x;
            sw2 += w * w;
        }
        let mean = swx / sw;
        let var = swx2 / sw - mean * mean;
        let ess = sw * sw / sw2;
        let se = libm::sqrt(var / ess);
        let exact = gm.mmse_denoise(y, lvl(s)).unwrap();
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn map_denoiser_at_point_mass_picks_smallest_sigma() {
        let grid = default_sigma_grid();
        let (x, s) = blind_denoise_map(&bimodal(), 0.5, &grid).unwrap();
        assert_eq!(s.get(), grid[0]);
        assert!((x - 0.5).abs() < 1e-9);
        let (x0, _) = blind_denoise_map(&bimodal(), 0.0, &grid).unwrap();
        assert_eq!(x0, 0.0);
        let (xm2, _) = blind_denoise_map(&bimodal(), -2.0, &grid).unwrap();
        assert!(xm2 - (-2.0) > 0.0);
        assert!(blind_denoise_map(&bimodal(), 0.1, &[]).is_err());
    }

    #[test]
    fn deterministic_sampler_reaches_left_mass() {
        let mut rng = crate::rng::stream(0, 0);
        let t = sample_1d(&bimodal(), -2.0, &Sampler1DConfig::default(), &mut rng).unwrap();
        assert!(t.converged);
        assert!((t.last() + 0.5).abs() < 1e-3, "{}", t.last());
        assert!(t.points.len() <= 202);
    }

    #[test]
    fn sampler_rests_at_unstable_fixed_point() {
        let mut rng = crate::rng::stream(0, 0);
        let t = sample_1d(&bimodal(), 0.0, &Sampler1DConfig::default(), &mut rng).unwrap();
        assert_eq!(t.last(), 0.0);
        assert!(!t.converged);
    }

    #[test]
    fn beta_one_injects_no_noise() {
        for a in [0.01, 0.3, 0.5, 1.0] {
            assert_eq!(injected_noise_std(a, 1.0, 0.7), 0.0);
        }
    }

    #[test]
    fn geometric_schedule_caps_at_one() {
        let r = StepRule::Geometric {
            init: 0.1,
            ratio: 1.05,
            cap: 1.0,
        };
        assert!((r.alpha(1) - 0.1).abs() < 1e-15);
        assert_eq!(r.alpha(1000), 1.0);
        assert!(StepRule::Fixed(1.5).validate().is_err());
    }

    #[test]
    fn context_family_dispatches_by_label() {
        let mut m = BTreeMap::new();
        m.insert(0, bimodal());
        m.insert(1, GaussianMixture1D::new(vec![1.0], vec![2.0], vec![0.0]).unwrap());
        let fam = ContextMixtureFamily::new(m).unwrap();
        assert_eq!(fam.mmse_denoise(1, -3.0, lvl(0.5)).unwrap(), 2.0);
        assert_eq!(fam.noisy_score(0, 0.0, lvl(0.5)).unwrap(), 0.0);
        assert!(fam.get(7).is_err());
        assert!(ContextMixtureFamily::new(BTreeMap::new()).is_err());
    }

    fn mixture() -> impl Strategy<Value = GaussianMixture1D> {
        proptest::collection::vec((0.05f64..1.0, -3.0f64..3.0, 0.0f64..1.5), 1..5).prop_map(|c| {
            let total: f64 = c.iter().map(|t| t.0).sum();
            let mut w: Vec<f64> = c.iter().map(|t| t.0 / total).collect();
            let fix: f64 = w[1..].iter().sum();
            w[0] = 1.0 - fix;
            GaussianMixture1D::new(w, c.iter().map(|t| t.1).collect(), c.iter().map(|t| t.2).collect())
                .unwrap()
        })
    }

    proptest! {
        #[test]
        fn miyasawa_identity(gm in mixture(), y in -5.0f64..5.0, s in 0.05f64..2.0) {
            let l = lvl(s);
            let lhs = gm.mmse_denoise(y, l).unwrap();
            let rhs = y + s * s * gm.noisy_score(y, l).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }

        #[test]
        fn score_is_derivative_of_log_density(gm in mixture(), y in -4.0f64..4.0, s in 0.1f64..2.0) {
            let l = lvl(s);
            let h = 1e-5;
            let fd = (gm.noisy_logpdf(y + h, l).unwrap() - gm.noisy_logpdf(y - h, l).unwrap()) / (2.0 * h);
            let sc = gm.noisy_score(y, l).unwrap();
            prop_assert!((fd - sc).abs() <= 1e-6 * sc.abs().max(1.0));
        }

        #[test]
        fn unimodal_denoiser_shrinks(m in -2.0f64..2.0, sd in 0.0f64..2.0, y in -6.0f64..6.0, s in 0.05f64..2.0) {
            let gm = GaussianMixture1D::new(vec![1.0], vec![m], vec![sd]).unwrap();
            let x = gm.mmse_denoise(y, lvl(s)).unwrap();
            prop_assert!((x - m).abs() <= (y - m).abs() + 1e-12);
        }

        #[test]
        fn symmetric_denoiser_is_odd(a in 0.1f64..2.0, sd in 0.0f64..1.0, y in -4.0f64..4.0, s in 0.05f64..2.0) {
            let gm = GaussianMixture1D::new(vec![0.5, 0.5], vec![-a, a], vec![sd, sd]).unwrap();
            let l = lvl(s);
            let p = gm.mmse_denoise(y, l).unwrap();
            let n = gm.mmse_denoise(-y, l).unwrap();
            prop_assert!((p + n).abs() <= 1e-12);
        }
    }

    #[test]
    fn random_init_splits_between_modes() {
        let cfg = Sampler1DConfig {
            beta: 0.5,
            ..Sampler1DConfig::default()
        };
        let mut right = 0;
        let runs = 400;
        for i in 0..runs {
            let mut rng = crate::rng::StreamRng::seed_from_u64(1000 + i);
            let y0: f64 = rng.sample(StandardNormal);
            let t = sample_1d(&bimodal(), y0, &cfg, &mut rng).unwrap();
            assert!(t.converged);
            assert!((t.last().abs() - 0.5).abs() < 1e-3);
            if t.last() > 0.0 {
                right += 1;
            }
        }
        let frac = right as f64 / runs as f64;
        assert!((0.4..=0.6).contains(&frac), "{frac}");
    }
}
