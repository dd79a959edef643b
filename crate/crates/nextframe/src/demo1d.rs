//! The one-dimensional bimodal example: noisy densities, scores and
//! denoisers on a grid, and sampling trajectories.

use std::fs;
use std::path::Path;

use nextframe_core::oracle::{blind_denoise_map, sample_1d, GaussianMixture1D, NoiseLevel, Sampler1DConfig, StepRule};
use nextframe_core::rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{io_err, Result};
use crate::report::{line_plot, write_csv, write_plot, Series};

pub const DEMO_SIGMAS: [f64; 5] = [0.05, 0.1, 0.2, 0.5, 1.0];

#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub y: f64,
    pub sigma: f64,
    pub noisy_pdf: f64,
    pub score: f64,
    pub denoised: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryRow {
    pub chain: usize,
    pub k: usize,
    pub y: f64,
    pub sigma_hat: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EndpointRow {
    pub chain: usize,
    pub y0: f64,
    pub y_final: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn grid_rows(gm: &GaussianMixture1D) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for &sigma in &DEMO_SIGMAS {
        let s = NoiseLevel::new(sigma)?;
        for i in 0..=400 {
            let y = -2.0 + 0.01 * i as f64;
            rows.push(GridRow {
                y,
                sigma,
                noisy_pdf: gm.noisy_logpdf(y, s)?.exp(),
                score: gm.noisy_score(y, s)?,
                denoised: gm.mmse_denoise(y, s)?,
            });
        }
    }
    Ok(rows)
}

/// Outcome of the symmetric-initialization experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeSplit {
    pub chains: usize,
    pub positive: usize,
    pub negative: usize,
    pub unconverged: usize,
}

impl ModeSplit {
    pub fn positive_fraction(&self) -> f64 {
        self.positive as f64 / self.chains as f64
    }
}

/// Endpoint split, per-chain endpoints and the first few full paths.
pub type ChainRun = (ModeSplit, Vec<EndpointRow>, Vec<(f64, Vec<f64>)>);

/// Runs `chains` stochastic chains from `y0 ~ N(0, 1)`; chain `i` uses
/// stream `seed + i`.
pub fn stochastic_chains(
    gm: &GaussianMixture1D,
    chains: usize,
    beta: f64,
    seed: u64,
) -> Result<ChainRun> {
    let cfg = Sampler1DConfig {
        step: StepRule::Fixed(0.5),
        beta,
        ..Sampler1DConfig::default()
    };
    let mut split = ModeSplit {
        chains,
        positive: 0,
        negative: 0,
        unconverged: 0,
    };
    let mut ends = Vec::with_capacity(chains);
    let mut paths = Vec::new();
    for i in 0..chains {
        let mut r = rng::stream(seed, i as u64);
        let y0: f64 = r.sample(StandardNormal);
        let tr = sample_1d(gm, y0, &cfg, &mut r)?;
        let y = tr.last();
        if y > 0.0 {
            split.positive += 1;
        } else if y < 0.0 {
            split.negative += 1;
        }
        if !tr.converged {
            split.unconverged += 1;
        }
        ends.push(EndpointRow {
            chain: i,
            y0,
            y_final: y,
            iterations: tr.sigmas.len(),
            converged: tr.converged,
        });
        if i < 8 {
            paths.push((y0, tr.points.clone()));
        }
    }
    Ok((split, ends, paths))
}

pub fn run(out: &Path, seed: u64, chains: usize) -> Result<ModeSplit> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let gm = GaussianMixture1D::symmetric_point_masses(0.5);
    let grid = grid_rows(&gm)?;
    write_csv(&out.join("densities.csv"), &grid)?;
    let curves = |f: fn(&GridRow) -> f64| -> Vec<Series> {
        DEMO_SIGMAS
            .iter()
            .map(|&s| Series {
                name: format!("sigma={s}"),
                points: grid.iter().filter(|r| r.sigma == s).map(|r| (r.y, f(r))).collect(),
                dashed: false,
            })
            .collect()
    };
    write_plot(&out.join("noisy_pdf.svg"), &line_plot("Noisy density", "y", "p(y)", &curves(|r| r.noisy_pdf)))?;
    write_plot(&out.join("denoiser.svg"), &line_plot("MMSE denoiser", "y", "E[x|y]", &curves(|r| r.denoised)))?;

    // blind (MAP plug-in) denoiser on the same grid
    let sgrid = nextframe_core::oracle::default_sigma_grid();
    let mut blind = Vec::new();
    for i in 0..=400 {
        let y = -2.0 + 0.01 * i as f64;
        let (x, s) = blind_denoise_map(&gm, y, &sgrid)?;
        blind.push(GridRow {
            y,
            sigma: s.get(),
            noisy_pdf: gm.noisy_logpdf(y, s)?.exp(),
            score: gm.noisy_score(y, s)?,
            denoised: x,
        });
    }
    write_csv(&out.join("blind_denoiser.csv"), &blind)?;

    let det_cfg = Sampler1DConfig::default();
    let mut rows = Vec::new();
    let mut det_series = Vec::new();
    for (c, &y0) in [-2.0, -0.2, 0.0, 0.3, 1.5].iter().enumerate() {
        let tr = sample_1d(&gm, y0, &det_cfg, &mut rng::stream(seed, 0))?;
        for (k, &y) in tr.points.iter().enumerate() {
            rows.push(TrajectoryRow {
                chain: c,
                k,
                y,
                sigma_hat: tr.sigmas.get(k).copied().unwrap_or(f64::NAN),
            });
        }
        det_series.push((y0, tr.points));
    }
    write_csv(&out.join("deterministic_trajectories.csv"), &rows)?;

    let (split, ends, paths) = stochastic_chains(&gm, chains, 0.5, seed)?;
    write_csv(&out.join("stochastic_endpoints.csv"), &ends)?;
    let to_series = |v: &[(f64, Vec<f64>)], dashed: bool| -> Vec<Series> {
        v.iter()
            .map(|(y0, p)| Series {
                name: format!("y0={y0:.2}"),
                points: p.iter().enumerate().map(|(k, &y)| (k as f64, y)).collect(),
                dashed,
            })
            .collect()
    };
    write_plot(
        &out.join("deterministic.svg"),
        &line_plot("Deterministic ascent (beta=1)", "iteration", "y", &to_series(&det_series, false)),
    )?;
    write_plot(
        &out.join("stochastic.svg"),
        &line_plot("Stochastic chains (beta=0.5)", "iteration", "y", &to_series(&paths[..paths.len().min(6)], true)),
    )?;
    log::info!(
        "{} chains: {} at +1/2, {} at -1/2, {} unconverged",
        split.chains,
        split.positive,
        split.negative,
        split.unconverged
    );
    Ok(split)
}
