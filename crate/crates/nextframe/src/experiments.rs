//! Parallel drivers for dataset generation and the trained-model studies.
//! Every work item owns an RNG stream derived from the base seed and its
//! index, so results do not depend on the thread count.

use nextframe_core::analysis::{
    average_curve, cue_crossing, cue_curve, edge_sharpness, fit_psychometric, performance_curve, probe_samples,
    sigma_for_psnr, ChoicePoint, CuePoint, CurvePoint, PsychometricFit, EDGE_THRESHOLD,
};
use nextframe_core::leaves::{generate_sequence, assemble_dataset, make_probe, LeavesConfig, ProbeConfig, SequenceDataset};
use nextframe_core::net::DenoiserModel;
use nextframe_core::rng;
use nextframe_core::sampler::{rollout, RolloutMode, SamplerConfig};
use nextframe_core::{Result, Tensor};
use rayon::prelude::*;
use serde::Serialize;

pub fn generate_leaves(seed: u64, n: usize, cfg: &LeavesConfig) -> Result<SequenceDataset> {
    if n == 0 {
        return Err(nextframe_core::Error::InvalidArgument("n_sequences must be >= 1".into()));
    }
    let results = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_sequence(seed, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    assemble_dataset(results, cfg)
}

/// Input PSNR grid in dB, converted to noise levels.
pub fn psnr_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| sigma_for_psnr(lo + step * i as f64)).collect()
}

/// Held-out curves for several models, parallel over σ.
pub fn curves(models: &[&DenoiserModel], ds: &SequenceDataset, sigmas: &[f64], seed: u64) -> Result<Vec<Vec<CurvePoint>>> {
    models
        .iter()
        .map(|m| {
            let pts = sigmas
                .par_iter()
                .enumerate()
                .map(|(i, &s)| {
                    // same noise draws for every model: the σ index enters the stream
                    performance_curve(m, ds, &[s], seed.wrapping_add(i as u64 * 1_000_003))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(average_curve(&pts.concat()))
        })
        .collect()
}

/// Mean output PSNR over curve points whose input PSNR lies in `[lo, hi]`.
pub fn mean_output_in(curve: &[CurvePoint], lo: f64, hi: f64) -> Option<f64> {
    let v: Vec<f64> = curve
        .iter()
        .filter(|p| p.input_psnr >= lo && p.input_psnr <= hi)
        .map(|p| p.output_psnr)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn psychometric(
    model: &DenoiserModel,
    deltas: &[f64],
    n_samples: usize,
    probe_cfg: &ProbeConfig,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<PsychometricFit> {
    let points = deltas
        .par_iter()
        .enumerate()
        .map(|(k, &dr)| {
            let probe = make_probe(dr, probe_cfg)?;
            let samples = probe_samples(model, &probe, n_samples, cfg, seed.wrapping_add((k as u64) << 32))?;
            ChoicePoint::from_samples(dr, &probe, &samples)
        })
        .collect::<Result<Vec<_>>>()?;
    fit_psychometric(points)
}

#[derive(Debug, Clone, Serialize)]
pub struct RolloutRow {
    pub rollout: usize,
    pub sequence: usize,
    pub step: usize,
    pub one_step_variance: f64,
    pub sample_sharpness: f64,
    pub truth_sharpness: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutStudy {
    pub rows: Vec<RolloutRow>,
    pub rollouts: usize,
    /// One-step rollouts whose last-frame variance fell below 25% of the first.
    pub collapsed: usize,
    /// Sampled rollouts whose every frame kept edge sharpness within 50% of
    /// the ground truth.
    pub sharp: usize,
}

fn variance(frame: &[f32]) -> f64 {
    let n = frame.len() as f64;
    let m = frame.iter().map(|&v| v as f64).sum::<f64>() / n;
    frame.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n
}

/// Rollouts seeded with the first τ frames of held-out sequences (cycled).
pub fn rollout_study(
    model: &DenoiserModel,
    ds: &SequenceDataset,
    rollouts: usize,
    steps: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<RolloutStudy> {
    let tau = model.arch().tau.max(1);
    let pool: &[usize] = if ds.test.is_empty() { &ds.train } else { &ds.test };
    let per = (0..rollouts)
        .into_par_iter()
        .map(|i| {
            let s = pool[i % pool.len()];
            let seq = &ds.sequences[s];
            let seed_frames: Vec<Tensor> = (0..tau).map(|t| seq.frame_tensor(t)).collect();
            let one = rollout(model, &seed_frames, steps, cfg, RolloutMode::OneStep, &mut rng::substream(seed, i as u64, 0))?;
            let smp = rollout(model, &seed_frames, steps, cfg, RolloutMode::Sample, &mut rng::substream(seed, i as u64, 1))?;
            let (h, w) = (seq.height(), seq.width());
            let truth: Vec<f64> = (tau..(tau + steps).min(seq.len()))
                .map(|t| edge_sharpness(seq.frame(t), h, w, EDGE_THRESHOLD))
                .collect();
            let truth_mean = truth.iter().sum::<f64>() / truth.len().max(1) as f64;
            let rows: Vec<RolloutRow> = (0..steps)
                .map(|k| RolloutRow {
                    rollout: i,
                    sequence: s,
                    step: k + 1,
                    one_step_variance: variance(one.frame(tau + k)),
                    sample_sharpness: edge_sharpness(smp.frame(tau + k), h, w, EDGE_THRESHOLD),
                    truth_sharpness: truth_mean,
                })
                .collect();
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut study = RolloutStudy {
        rollouts,
        ..RolloutStudy::default()
    };
    for rows in per {
        if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
            if last.one_step_variance < 0.25 * first.one_step_variance {
                study.collapsed += 1;
            }
        }
        if rows
            .iter()
            .all(|r| (r.sample_sharpness - r.truth_sharpness).abs() <= 0.5 * r.truth_sharpness)
        {
            study.sharp += 1;
        }
        study.rows.extend(rows);
    }
    Ok(study)
}

#[derive(Debug, Clone, Serialize)]
pub struct CueRow {
    pub probe: &'static str,
    pub sigma: f64,
    pub input_psnr: f64,
    pub psnr_full: f64,
    pub psnr_y: f64,
    pub psnr_c: f64,
    pub flagged: usize,
}

#[derive(Debug, Clone)]
pub struct CueStudy {
    pub rows: Vec<CueRow>,
    pub static_crossing: Option<f64>,
    pub moving_crossing: Option<f64>,
}

fn mean_curves(curves: &[Vec<CuePoint>]) -> Vec<CuePoint> {
    let n = curves.len() as f64;
    let mut out = curves[0].clone();
    for (k, p) in out.iter_mut().enumerate() {
        p.input_psnr = curves.iter().map(|c| c[k].input_psnr).sum::<f64>() / n;
        p.psnr_full = curves.iter().map(|c| c[k].psnr_full).sum::<f64>() / n;
        p.psnr_y = curves.iter().map(|c| c[k].psnr_y).sum::<f64>() / n;
        p.psnr_c = curves.iter().map(|c| c[k].psnr_c).sum::<f64>() / n;
        p.flagged = curves.iter().map(|c| c[k].flagged).sum();
    }
    out
}

/// Cue curves on held-out sequences, once with their true past (moving)
/// and once with the target frame repeated as its own past (static).
pub fn cue_study(model: &DenoiserModel, ds: &SequenceDataset, sequences: usize, sigmas: &[f64], seed: u64) -> Result<CueStudy> {
    let tau = model.arch().tau;
    let pool: &[usize] = if ds.test.is_empty() { &ds.train } else { &ds.test };
    let picks: Vec<usize> = pool.iter().copied().take(sequences.max(1)).collect();
    let run = |moving: bool| -> Result<Vec<CuePoint>> {
        let curves = picks
            .par_iter()
            .map(|&s| {
                let seq = &ds.sequences[s];
                let t = seq.len() - 1;
                let x = seq.frame_tensor(t);
                let c = if moving {
                    seq.conditioning(t, tau)?
                } else {
                    vec![x.clone(); tau]
                };
                cue_curve(model, &x, &c, sigmas, 2, seed.wrapping_add(s as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_curves(&curves))
    };
    let stat = run(false)?;
    let mov = run(true)?;
    let mut rows = Vec::new();
    for (name, pts) in [("static", &stat), ("moving", &mov)] {
        rows.extend(pts.iter().map(|p| CueRow {
            probe: name,
            sigma: p.sigma,
            input_psnr: p.input_psnr,
            psnr_full: p.psnr_full,
            psnr_y: p.psnr_y,
            psnr_c: p.psnr_c,
            flagged: p.flagged,
        }));
    }
    Ok(CueStudy {
        rows,
        static_crossing: cue_crossing(&stat),
        moving_crossing: cue_crossing(&mov),
    })
}
