//! Property and oracle checks shared by `selftest` and the acceptance tests.
//! Each returns a [`Check`] carrying the measured quantities.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nextframe_core::analysis::{fit_line, is_monotone_up_to_noise, partition_terms, PsychometricFit};
use nextframe_core::autodiff::{Graph, NormMode, Var};
use nextframe_core::leaves::{
    depth_order_violations, meets_occlusion_predicate, LeavesConfig, ProbeConfig, SequenceDataset, SequenceSource,
};
use nextframe_core::net::{DenoiserModel, ModelArch};
use nextframe_core::oracle::{sample_1d, GaussianMixture1D, NoiseLevel, Sampler1DConfig};
use nextframe_core::rng::{self, StreamRng};
use nextframe_core::sampler::{sample_from, sample_next_frame, SamplerConfig};
use nextframe_core::train::{train, TrainConfig};
use nextframe_core::Tensor;
use rand::Rng;
use serde::Serialize;

use crate::demo1d::stochastic_chains;
use crate::experiments::{cue_study, curves, generate_leaves, mean_output_in, psnr_grid, psychometric, rollout_study};
use crate::{bfun, vseq};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub id: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    pub fn line(&self) -> String {
        format!(
            "criterion {:<4} {}  ({:.1}s) {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.seconds,
            self.detail
        )
    }
}

fn timed(id: &str, f: impl FnOnce() -> anyhow::Result<(bool, String)>) -> Check {
    let t0 = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e:#}")),
    };
    Check {
        id: id.into(),
        passed,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn random_mixture(r: &mut StreamRng) -> GaussianMixture1D {
    let k = r.random_range(1..=4);
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    let means = (0..k).map(|_| r.random_range(-2.0..2.0)).collect();
    let stds = (0..k)
        .map(|_| if r.random::<f64>() < 0.3 { 0.0 } else { r.random_range(0.05..1.0) })
        .collect();
    GaussianMixture1D::new(weights, means, stds).expect("valid mixture")
}

/// Tweedie/Miyasawa: the closed-form posterior mean equals `y + σ²·score`.
pub fn miyasawa(seed: u64, triples: usize) -> Check {
    timed("1", || {
        let mut r = rng::stream(seed, 1);
        let mut worst = 0.0f64;
        for _ in 0..triples {
            let gm = random_mixture(&mut r);
            let y = r.random_range(-3.0..3.0);
            let sigma = NoiseLevel::new(10f64.powf(r.random_range(-2.0..0.3)))?;
            let lhs = gm.mmse_denoise(y, sigma)?;
            let rhs = y + sigma.get() * sigma.get() * gm.noisy_score(y, sigma)?;
            worst = worst.max((lhs - rhs).abs());
        }
        Ok((worst <= 1e-9, format!("{triples} triples, max |mmse - (y + s^2 score)| = {worst:.2e}")))
    })
}

type Build = dyn Fn(&mut Graph, &[Var]) -> nextframe_core::Result<Var>;

fn fd_error(build: &Build, inputs: &[Tensor], r: &mut StreamRng) -> nextframe_core::Result<f64> {
    // loss = <w, op(inputs)>
    let eval_graph = |ins: &[Tensor], w: &Tensor| -> nextframe_core::Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let wv = g.leaf(w.clone());
        let p = g.mul(out, wv)?;
        let l = g.sum(p);
        Ok((g, vars, l))
    };
    let shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let w = Tensor::randn(&shape, 1.0, r);
    let (mut g, vars, loss) = eval_graph(inputs, &w)?;
    g.backward(loss)?;
    let eps = 1e-3f32;
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut diff = 0.0f64;
        let mut nn = 0.0f64;
        for i in 0..inputs[k].len() {
            let at = |d: f32| -> nextframe_core::Result<f64> {
                let mut ins = inputs.to_vec();
                ins[k].data_mut()[i] += d;
                let (g, _, l) = eval_graph(&ins, &w)?;
                Ok(g.value(l).data()[0] as f64)
            };
            let num = (at(eps)? - at(-eps)?) / (2.0 * eps as f64);
            diff += (analytic.data()[i] as f64 - num).powi(2);
            nn += num * num;
        }
        let scale = analytic.sum_sq().sqrt().max(nn.sqrt()).max(1e-6);
        worst = worst.max(diff.sqrt() / scale);
    }
    Ok(worst)
}

fn naive_conv_max_err(x: &Tensor, k: &Tensor, got: &Tensor) -> f64 {
    let s = x.shape();
    let (n, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let cout = k.shape()[0];
    let mut worst = 0.0f64;
    for b in 0..n {
        for o in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0f64;
                    for c in 0..cin {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((b * cin + c) * h + ii as usize) * w + jj as usize] as f64
                                    * k.data()[((o * cin + c) * 3 + di) * 3 + dj] as f64;
                            }
                        }
                    }
                    let v = got.data()[((b * cout + o) * h + i) * w + j] as f64;
                    worst = worst.max((v - acc).abs());
                }
            }
        }
    }
    worst
}

/// Finite-difference checks of every graph op on random shapes, plus the
/// convolution against six nested loops.
pub fn autodiff(seed: u64, trials: usize) -> Check {
    timed("2", || {
        let mut r = rng::stream(seed, 2);
        let mut report = String::new();
        let mut worst_all = 0.0f64;
        for _ in 0..trials {
            let (n, c) = (r.random_range(1..=2), r.random_range(1..=3));
            let (h, w) = (2 * r.random_range(1..=3), 2 * r.random_range(1..=3));
            let x = Tensor::randn(&[n, c, h, w], 1.0, &mut r);
            let y = Tensor::randn(&[n, c, h, w], 1.0, &mut r);
            let k = Tensor::randn(&[r.random_range(1..=3), c, 3, 3], 0.5, &mut r);
            let gain = Tensor::randn(&[c], 1.0, &mut r);
            let running: Vec<f32> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
            let idx = r.random_range(0..x.len());
            let xr = x.map(|v| if v.abs() < 0.05 { v + 0.05 * v.signum() } else { v });
            let cases: Vec<(&str, Box<Build>, Vec<Tensor>)> = vec![
                ("conv2d", Box::new(|g, v| g.conv2d(v[0], v[1])), vec![x.clone(), k.clone()]),
                ("downsample2x", Box::new(|g, v| g.downsample2x(v[0])), vec![x.clone()]),
                ("upsample2x", Box::new(|g, v| g.upsample2x(v[0])), vec![x.clone()]),
                ("relu", Box::new(|g, v| Ok(g.relu(v[0]))), vec![xr]),
                ("bf_norm(batch)", Box::new(|g, v| g.bf_norm(v[0], v[1], NormMode::Batch)), vec![x.clone(), gain.clone()]),
                (
                    "bf_norm(running)",
                    Box::new(move |g, v| g.bf_norm(v[0], v[1], NormMode::Running(&running))),
                    vec![x.clone(), gain.clone()],
                ),
                ("concat", Box::new(|g, v| g.concat_channels(v[0], v[1])), vec![x.clone(), y.clone()]),
                ("add", Box::new(|g, v| g.add(v[0], v[1])), vec![x.clone(), y.clone()]),
                ("sub", Box::new(|g, v| g.sub(v[0], v[1])), vec![x.clone(), y.clone()]),
                ("mul", Box::new(|g, v| g.mul(v[0], v[1])), vec![x.clone(), y.clone()]),
                ("scale", Box::new(|g, v| Ok(g.scale(v[0], -1.7))), vec![x.clone()]),
                ("sum", Box::new(|g, v| Ok(g.sum(v[0]))), vec![x.clone()]),
                ("mse", Box::new(|g, v| g.mse(v[0], v[1])), vec![x.clone(), y.clone()]),
                ("pick", Box::new(move |g, v| g.pick(v[0], idx)), vec![x.clone()]),
            ];
            for (name, build, inputs) in cases {
                let e = fd_error(build.as_ref(), &inputs, &mut r)?;
                if e > 1e-2 {
                    let _ = write!(report, " {name}={e:.2e}");
                }
                worst_all = worst_all.max(e);
            }
        }
        let mut conv_worst = 0.0f64;
        for _ in 0..10 {
            let x = Tensor::randn(&[r.random_range(1..=3), 3, r.random_range(1..=9), r.random_range(1..=9)], 0.5, &mut r);
            let k = Tensor::randn(&[r.random_range(1..=5), 3, 3, 3], 0.3, &mut r);
            let mut g = Graph::new();
            let (xv, kv) = (g.leaf(x.clone()), g.leaf(k.clone()));
            let out = g.conv2d(xv, kv)?;
            conv_worst = conv_worst.max(naive_conv_max_err(&x, &k, g.value(out)));
        }
        let passed = worst_all <= 1e-2 && conv_worst <= 1e-6;
        Ok((
            passed,
            format!("14 ops x {trials} shapes: max FD rel err {worst_all:.2e}{report}; conv vs naive {conv_worst:.2e}"),
        ))
    })
}

/// Degree-1 homogeneity in inference mode at λ ∈ {0.5, 2, 10}.
pub fn homogeneity(models: &[(&str, &DenoiserModel)], seed: u64) -> Check {
    timed("3", || {
        let mut r = rng::stream(seed, 3);
        let mut worst = 0.0f64;
        for (_, m) in models {
            let a = m.arch();
            let x = Tensor::randn(&[2, a.input_channels(), 32, 32], 0.3, &mut r).map(|v| v + 0.5);
            let fx = m.forward_batch(&x)?;
            let peak = fx.data().iter().fold(0.0f32, |a, v| a.max(v.abs())) as f64;
            for lambda in [0.5f32, 2.0, 10.0] {
                let f = m.forward_batch(&x.scale(lambda))?;
                let err = f.max_abs_diff(&fx.scale(lambda))? as f64;
                worst = worst.max(err / (lambda as f64 * peak).max(1e-12));
            }
        }
        let names: Vec<&str> = models.iter().map(|m| m.0).collect();
        Ok((worst <= 1e-4, format!("models {names:?}: max rel deviation {worst:.2e}")))
    })
}

/// Generated sequences: depth order, occlusion predicate, range, shape and
/// bitwise regeneration.
pub fn dataset_invariants(seed: u64, n: usize) -> Check {
    timed("4", || {
        let cfg = LeavesConfig::default();
        let ds = generate_leaves(seed, n, &cfg)?;
        let (mut order, mut occl, mut range, mut shape) = (0, 0, 0, 0);
        for s in &ds.sequences {
            if (s.len(), s.height(), s.width()) != (11, 32, 32) {
                shape += 1;
            }
            if s.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                range += 1;
            }
            match &s.source {
                SequenceSource::Leaves { scene, .. } => {
                    if !depth_order_violations(scene, s, 1.0).is_empty() {
                        order += 1;
                    }
                    if !meets_occlusion_predicate(scene, &cfg) {
                        occl += 1;
                    }
                }
                _ => order += 1,
            }
        }
        let again = generate_leaves(seed, n, &cfg)?;
        let same = again.sequences == ds.sequences;
        let split = ds.test.len();
        let passed = order + occl + range + shape == 0 && same && ds.validate().is_ok();
        Ok((
            passed,
            format!(
                "{n} sequences: depth-order failures {order}, occlusion failures {occl}, range {range}, shape {shape}; regenerated identically: {same}; test split {split}"
            ),
        ))
    })
}

pub fn sampling_1d(seed: u64, chains: usize) -> Check {
    timed("5", || {
        let gm = GaussianMixture1D::symmetric_point_masses(0.5);
        let det = sample_1d(&gm, -2.0, &Sampler1DConfig::default(), &mut rng::stream(seed, 5))?;
        let end = det.last();
        let det_ok = det.converged && (end + 0.5).abs() <= 1e-3 && det.sigmas.len() <= 200;
        let (split, _, _) = stochastic_chains(&gm, chains, 0.5, seed)?;
        let frac = split.positive_fraction();
        let stoch_ok = (0.44..=0.56).contains(&frac);
        Ok((
            det_ok && stoch_ok,
            format!(
                "y0=-2 -> {end:.6} in {} iterations (converged {}); {chains} chains: +1/2 fraction {frac:.3} ({} unconverged)",
                det.sigmas.len(),
                det.converged,
                split.unconverged
            ),
        ))
    })
}

/// Per-iteration schedule algebra, β = 1 noiselessness and the bitwise
/// α = β = 1 single step.
pub fn sampler_algebra(seed: u64) -> Check {
    timed("8", || {
        let m = DenoiserModel::new(ModelArch::new(2, 4), &mut rng::stream(seed, 8))?;
        let mut r = rng::stream(seed, 80);
        let c = vec![Tensor::randn(&[16, 16], 0.2, &mut r).map(|v| v + 0.5), Tensor::full(&[16, 16], 0.3)];
        let mut worst = 0.0f64;
        let mut iters = 0;
        for beta in [0.0, 0.25, 0.5, 0.9] {
            let cfg = SamplerConfig {
                beta,
                max_iters: 60,
                sigma0: 1e-9,
                ..SamplerConfig::default()
            };
            let res = sample_next_frame(&m, &c, &[16, 16], &cfg, &mut r)?;
            for s in &res.steps {
                let lhs = (1.0 - s.alpha).powi(2) * s.sigma * s.sigma + s.gamma * s.gamma;
                let rhs = (1.0 - beta * s.alpha).powi(2) * s.sigma * s.sigma;
                worst = worst.max((lhs - rhs).abs() / rhs.max(f64::MIN_POSITIVE));
                iters += 1;
            }
        }
        let det_cfg = SamplerConfig {
            beta: 1.0,
            max_iters: 40,
            sigma0: 1e-9,
            ..SamplerConfig::default()
        };
        let det = sample_next_frame(&m, &c, &[16, 16], &det_cfg, &mut r)?;
        let beta_one = det.steps.iter().all(|s| s.gamma == 0.0)
            && (1..=100).all(|k| nextframe_core::oracle::injected_noise_std(k as f64 / 100.0, 1.0, 0.7) == 0.0);
        let one_cfg = SamplerConfig {
            beta: 1.0,
            alpha_init: 1.0,
            max_iters: 1,
            sigma0: 1e-12,
            snapshots: true,
            final_denoise: false,
            ..SamplerConfig::default()
        };
        let y0 = Tensor::randn(&[16, 16], 1.0, &mut r).map(|v| v + 0.5);
        let one = sample_from(&m, &c, y0.clone(), &one_cfg, &mut r)?;
        let direct = m.forward(&y0, &c)?;
        let bitwise = one.snapshots[1].data().iter().zip(direct.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        Ok((
            worst <= 1e-12 && beta_one && bitwise,
            format!(
                "{iters} iterations: max rel |(1-a)^2 s^2 + g^2 - (1-ba)^2 s^2| = {worst:.1e}; beta=1 -> gamma=0: {beta_one}; alpha=beta=1 step bitwise equal: {bitwise}"
            ),
        ))
    })
}

/// The error partition as an identity on synthetic float64 vectors.
pub fn partition_identity(seed: u64) -> Check {
    timed("11a", || {
        let mut r = rng::stream(seed, 11);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let d = r.random_range(1..200);
            let mut v = || (0..d).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let (x, a, b) = (v(), v(), v());
            let d2 = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, w)| (u - w).powi(2)).sum::<f64>();
            let xhat: Vec<f64> = a.iter().zip(&b).map(|(u, w)| u + w).collect();
            let lhs = d2(&x, &xhat);
            let rhs = partition_terms(
                d2(&x, &b),
                d2(&x, &a),
                x.iter().map(|u| u * u).sum(),
                a.iter().zip(&b).map(|(u, w)| u * w).sum(),
            );
            worst = worst.max((lhs - rhs).abs() / lhs.max(1.0));
        }
        Ok((worst <= 1e-10, format!("1000 random vector triples: max rel residual {worst:.1e}")))
    })
}

/// VSEQ and BFUN save -> load bit-exactness in `dir`.
pub fn round_trips(seed: u64, dir: &Path) -> Check {
    timed("12", || {
        std::fs::create_dir_all(dir)?;
        let ds = generate_leaves(seed, 10, &LeavesConfig::default())?;
        let vpath = dir.join("roundtrip.vseq");
        vseq::save_dataset(&vpath, &ds, serde_json::json!({"seed": seed}))?;
        let back = vseq::load_dataset(&vpath)?;
        let bits = |s: &SequenceDataset| -> Vec<u32> {
            s.sequences.iter().flat_map(|q| q.data().iter().map(|v| v.to_bits())).collect()
        };
        let v_ok = bits(&ds) == bits(&back) && ds == back;
        let mut m = DenoiserModel::new(ModelArch::new(2, 8), &mut rng::stream(seed, 12))?;
        // perturb the gains and running stds so every record is non-trivial
        let idx: Vec<usize> = (0..m.params().len()).collect();
        for (i, t) in m.params_mut_by(&idx).into_iter().enumerate() {
            *t = t.map(|v| v * (1.0 + 1e-3 * i as f32) + 1e-7);
        }
        let bpath = dir.join("roundtrip.bfun");
        bfun::save_model(&bpath, &m, serde_json::json!({"seed": seed}))?;
        let (m2, _) = bfun::load_model(&bpath, Some(m.arch()))?;
        let b_ok = m.params().iter().zip(m2.params()).all(|(a, b)| {
            a.name == b.name
                && a.value.shape() == b.value.shape()
                && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        let mismatch = bfun::load_model(&bpath, Some(ModelArch::new(1, 8))).is_err();
        Ok((
            v_ok && b_ok && mismatch,
            format!("VSEQ bit-exact: {v_ok}; BFUN bit-exact: {b_ok}; arch mismatch rejected: {mismatch}"),
        ))
    })
}

/// Quick end-to-end training sanity check on a toy dataset.
pub fn training_smoke(seed: u64) -> Check {
    timed("train", || {
        let cfg = LeavesConfig {
            height: 8,
            width: 8,
            ref_radius: 2.0,
            gp_amplitude: 1.5,
            ..LeavesConfig::default()
        };
        let ds = generate_leaves(seed, 8, &cfg)?;
        let ds = SequenceDataset::with_split(ds.sequences, 0.0);
        let mut m = DenoiserModel::new(ModelArch::new(1, 4), &mut rng::stream(seed, 13))?;
        let tc = TrainConfig {
            epochs: 200,
            batch_size: 8,
            lr: 3e-3,
            seed,
            ..TrainConfig::default()
        };
        let rep = train(&mut m, &ds, &tc, |_, _| {})?;
        let first = rep.epochs[0].train_loss;
        let best = rep.epochs.iter().map(|e| e.train_loss).fold(f64::INFINITY, f64::min);
        Ok((best * 10.0 <= first, format!("train MSE {first:.4} -> best {best:.5}")))
    })
}

/// Models and held-out data for the trained-model criteria.
pub struct Trained {
    pub models: [DenoiserModel; 3],
    pub data: SequenceDataset,
}

impl Trained {
    /// Loads `tau0.bfun`, `tau1.bfun`, `tau2.bfun` and `data.vseq` from `dir`.
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let load = |t: usize| -> anyhow::Result<DenoiserModel> {
            let (m, _) = bfun::load_model(&dir.join(format!("tau{t}.bfun")), None)?;
            anyhow::ensure!(m.arch().tau == t, "tau{t}.bfun holds a model with memory {}", m.arch().tau);
            Ok(m)
        };
        Ok(Self {
            models: [load(0)?, load(1)?, load(2)?],
            data: vseq::load_dataset(&dir.join("data.vseq"))?,
        })
    }
}

pub fn conditioning_gain(t: &Trained, seed: u64) -> Check {
    timed("6", || {
        let sigmas = psnr_grid(0.0, 10.0, 2.0);
        let refs: Vec<&DenoiserModel> = t.models.iter().collect();
        let cs = curves(&refs, &t.data, &sigmas, seed)?;
        let o: Vec<f64> = cs
            .iter()
            .map(|c| mean_output_in(c, -0.5, 10.5).unwrap_or(f64::NAN))
            .collect();
        let passed = o[2] >= o[0] + 2.0 && o[0] < o[1] && o[1] < o[2];
        Ok((
            passed,
            format!(
                "mean output PSNR at 0-10 dB input over {} held-out sequences: tau0 {:.2}, tau1 {:.2}, tau2 {:.2} dB",
                t.data.test.len(),
                o[0],
                o[1],
                o[2]
            ),
        ))
    })
}

pub fn unconditional_slope(t: &Trained, seed: u64) -> Check {
    timed("7", || {
        let sigmas = psnr_grid(0.0, 30.0, 2.5);
        let c = &curves(&[&t.models[0]], &t.data, &sigmas, seed)?[0];
        let pts: Vec<(f64, f64)> = c.iter().map(|p| (p.input_psnr, p.output_psnr)).collect();
        let (slope, icpt) = fit_line(&pts, 0.0, 30.0).ok_or_else(|| anyhow::anyhow!("too few curve points"))?;
        Ok((
            (0.35..=0.65).contains(&slope),
            format!("tau0 output-vs-input PSNR slope over [0,30] dB: {slope:.3} (intercept {icpt:.2} dB)"),
        ))
    })
}

pub const PSYCHO_DELTAS: [f64; 9] = [-4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0];

pub fn occlusion_decisions(t: &Trained, seed: u64, samples: usize) -> (Check, Option<PsychometricFit>) {
    let mut fit_out = None;
    let check = timed("9", || {
        let fit = psychometric(
            &t.models[2],
            &PSYCHO_DELTAS,
            samples,
            &ProbeConfig::default(),
            &SamplerConfig::default(),
            seed,
        )?;
        let freq = |d: f64| fit.points.iter().find(|p| p.delta_r == d).map_or(f64::NAN, |p| p.frequency());
        let (pos, zero, neg) = (freq(4.0), freq(0.0), freq(-4.0));
        let mono = is_monotone_up_to_noise(&fit.points, 2.0);
        let passed = pos >= 0.9 && neg <= 0.1 && (0.3..=0.7).contains(&zero) && mono && fit.converged;
        let undecided: Vec<String> = fit.points.iter().map(|p| format!("{:.2}", p.undecided_fraction())).collect();
        let unconverged: usize = fit.points.iter().map(|p| p.unconverged).sum();
        let total: usize = fit.points.iter().map(|p| p.n).sum();
        let detail = format!(
            "right-occlusion frequency at dr=+4 {pos:.3}, 0 {zero:.3}, -4 {neg:.3}; monotone {mono}; logistic mu {:.2} s {:.2} converged {}; undecided by dr {undecided:?}; {unconverged}/{total} chains stopped above sigma0",
            fit.mu, fit.s, fit.converged
        );
        fit_out = Some(fit);
        Ok((passed, detail))
    });
    (check, fit_out)
}

pub fn rollout_coherence(t: &Trained, seed: u64) -> Check {
    timed("10", || {
        let st = rollout_study(&t.models[2], &t.data, 20, 5, &SamplerConfig::default(), seed)?;
        let passed = st.collapsed * 5 >= st.rollouts * 4 && st.sharp * 5 >= st.rollouts * 3;
        Ok((
            passed,
            format!(
                "one-step variance collapse in {}/{} rollouts; sampled edge sharpness within 50% in {}/{}",
                st.collapsed, st.rollouts, st.sharp, st.rollouts
            ),
        ))
    })
}

pub fn cue_crossing_order(t: &Trained, seed: u64) -> Check {
    timed("11b", || {
        let sigmas = psnr_grid(-10.0, 40.0, 2.5);
        let st = cue_study(&t.models[2], &t.data, 8, &sigmas, seed)?;
        let passed = matches!((st.static_crossing, st.moving_crossing), (Some(s), Some(m)) if s > m);
        let flagged: usize = st.rows.iter().map(|r| r.flagged).sum();
        Ok((
            passed,
            format!(
                "x_c/x_y crossing at input PSNR: static {:?}, moving {:?} dB ({flagged} flagged decompositions)",
                st.static_crossing.map(|v| (v * 100.0).round() / 100.0),
                st.moving_crossing.map(|v| (v * 100.0).round() / 100.0)
            ),
        ))
    })
}

/// The always-on suite run by `selftest`.
pub fn selftest(seed: u64, scratch: &Path) -> Vec<Check> {
    let untrained: Vec<DenoiserModel> = (0..3)
        .map(|t| DenoiserModel::new(ModelArch::new(t, 8), &mut rng::stream(seed, 30 + t as u64)).expect("valid arch"))
        .collect();
    let named: Vec<(&str, &DenoiserModel)> = ["tau0", "tau1", "tau2"].into_iter().zip(untrained.iter()).collect();
    vec![
        miyasawa(seed, 1000),
        autodiff(seed, 3),
        homogeneity(&named, seed),
        dataset_invariants(seed, 1000),
        sampling_1d(seed, 2000),
        sampler_algebra(seed),
        partition_identity(seed),
        round_trips(seed, scratch),
        training_smoke(seed),
    ]
}
