use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nextframe::checks;
use nextframe::config::{load_config, Manifest, RunConfig};
use nextframe::experiments::{cue_study, curves, generate_leaves, psnr_grid, psychometric, rollout_study};
use nextframe::pgm::{self, CropGrid};
use nextframe::report::{line_plot, write_csv, write_plot, Series};
use nextframe::{bfun, demo1d, vseq};
use nextframe_core::analysis::{adaptive_filter, fit_line, logistic, psnr, PsnrPoint};
use nextframe_core::leaves::{ImageSequence, LeavesConfig, ProbeConfig, SequenceSource};
use nextframe_core::net::{DenoiserModel, ModelArch};
use nextframe_core::rng;
use nextframe_core::sampler::{rollout, sample_next_frame, RolloutMode, SamplerConfig};
use nextframe_core::train::{train, TrainConfig};
use nextframe_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "nextframe", version, about = "Next-frame prediction by conditional blind denoising")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a moving-leaves dataset.
    GenLeaves(GenLeaves),
    /// Cut a directory of PGM frames into training sequences.
    Ingest(Ingest),
    /// Train a conditional denoiser.
    Train(TrainCmd),
    /// Denoise held-out frames at a fixed noise level and report PSNR.
    Denoise(Denoise),
    /// Draw next-frame samples for one conditioning context.
    Sample(Sample),
    /// Generate several frames recursively.
    Rollout(Rollout),
    /// Performance curves, adaptive filters, cue curves, psychometrics.
    #[command(subcommand)]
    Analyze(Analyze),
    /// The one-dimensional bimodal example.
    Demo1d(Demo1d),
    /// Run the oracle and invariant suite.
    Selftest(Selftest),
}

#[derive(Args)]
struct GenLeaves {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// JSON run configuration whose `params` is a leaves configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct LeavesParams {
    n: usize,
    leaves: LeavesConfig,
}

impl Default for LeavesParams {
    fn default() -> Self {
        Self {
            n: 1000,
            leaves: LeavesConfig::default(),
        }
    }
}

#[derive(Args)]
struct Ingest {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON run configuration whose `params` is a crop grid.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainParams {
    tau: usize,
    base_channels: usize,
    train: TrainConfig,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            tau: 2,
            base_channels: 64,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Args)]
struct Denoise {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV of per-sequence PSNR.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct SamplerArgs {
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    alpha_init: Option<f64>,
    #[arg(long)]
    alpha_ratio: Option<f64>,
}

impl SamplerArgs {
    fn resolve(&self) -> SamplerConfig {
        let d = SamplerConfig::default();
        SamplerConfig {
            beta: self.beta.unwrap_or(d.beta),
            sigma0: self.sigma0.unwrap_or(d.sigma0),
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            alpha_init: self.alpha_init.unwrap_or(d.alpha_init),
            alpha_ratio: self.alpha_ratio.unwrap_or(d.alpha_ratio),
            ..d
        }
    }
}

#[derive(Args)]
struct Sample {
    #[arg(long)]
    model: PathBuf,
    /// Conditioning source as `file.vseq:index`.
    #[arg(long)]
    cond: String,
    /// Frame to predict (default: the last one).
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, default_value_t = 16)]
    n_samples: usize,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write every intermediate frame.
    #[arg(long)]
    snapshots: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sample,
    OneStep,
}

#[derive(Args)]
struct Rollout {
    #[arg(long)]
    model: PathBuf,
    /// Seed frames as `file.vseq:index`; the first τ frames are used.
    #[arg(long)]
    cond: String,
    #[arg(long, default_value_t = 5)]
    steps: usize,
    #[arg(long, value_enum, default_value = "sample")]
    mode: Mode,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output VSEQ file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Analyze {
    /// Input/output PSNR curves on held-out data.
    Curve {
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
        psnr_lo: f64,
        #[arg(long, default_value_t = 45.0)]
        psnr_hi: f64,
        #[arg(long, default_value_t = 2.5)]
        psnr_step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Effective linear weights of one output pixel.
    Filter {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cond: String,
        #[arg(long)]
        t: Option<usize>,
        /// Output pixel as `row,col`.
        #[arg(long, value_parser = parse_pixel)]
        pixel: (usize, usize),
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Observation vs conditioning contributions on static and moving probes.
    Cues {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        sequences: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Occlusion choice frequencies against disk size difference.
    Psycho {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 64)]
        n_samples: usize,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "-4,-3,-2,-1,0,1,2,3,4")]
        deltas: Vec<f64>,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-step collapse vs sampled sharpness over recursive rollouts.
    Rollouts {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        rollouts: usize,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Demo1d {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    chains: usize,
}

#[derive(Args)]
struct Selftest {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for round-trip files (default: a fresh temporary directory).
    #[arg(long)]
    scratch: Option<PathBuf>,
    /// Also run the trained-model criteria on `tau{0,1,2}.bfun` + `data.vseq`.
    #[arg(long)]
    trained_model: Option<PathBuf>,
}

fn parse_pixel(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected row,col")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

fn parse_cond(spec: &str) -> anyhow::Result<(PathBuf, usize)> {
    let (path, idx) = spec
        .rsplit_once(':')
        .with_context(|| format!("--cond {spec:?} is not file.vseq:index"))?;
    Ok((PathBuf::from(path), idx.parse().context("sequence index")?))
}

fn load_sequence(spec: &str) -> anyhow::Result<ImageSequence> {
    let (path, idx) = parse_cond(spec)?;
    let (mut seqs, _) = vseq::read_sequences(&path)?;
    if idx >= seqs.len() {
        bail!("{} holds {} sequences, index {idx} requested", path.display(), seqs.len());
    }
    Ok(seqs.swap_remove(idx))
}

fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

fn ensure_dir(p: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn ensure_parent(p: &Path) -> anyhow::Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => ensure_dir(d),
        _ => Ok(()),
    }
}

fn finish(mut m: Manifest, inputs: &[&Path], outputs: &[&Path], at: &Path) -> anyhow::Result<()> {
    m.inputs = inputs.iter().map(|p| p.display().to_string()).collect();
    m.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
    m.write(&manifest_path(at))?;
    Ok(())
}

fn gen_leaves(a: GenLeaves) -> anyhow::Result<()> {
    let mut cfg: RunConfig<LeavesParams> = load_config(a.config.as_deref())?;
    if let Some(n) = a.n {
        cfg.params.n = n;
    }
    cfg.seed = Some(a.seed.or(cfg.seed).unwrap_or(0));
    let seed = cfg.seed.unwrap();
    cfg.params.leaves.validate()?;
    let ds = generate_leaves(seed, cfg.params.n, &cfg.params.leaves)?;
    ensure_parent(&a.out)?;
    vseq::save_dataset(&a.out, &ds, serde_json::to_value(&cfg)?)?;
    log::info!(
        "wrote {} sequences ({} train / {} test) to {}",
        ds.sequences.len(),
        ds.train.len(),
        ds.test.len(),
        a.out.display()
    );
    finish(Manifest::new("gen-leaves", seed, &cfg)?, &[], &[&a.out], &a.out)
}

fn ingest(a: Ingest) -> anyhow::Result<()> {
    let mut cfg: RunConfig<CropGrid> = load_config(a.config.as_deref())?;
    if let Some(f) = a.frames {
        cfg.params.frames = f;
    }
    if let Some(s) = a.size {
        cfg.params.size = s;
    }
    let ds = pgm::ingest_frames(&a.dir, &cfg.params)?;
    ensure_parent(&a.out)?;
    vseq::save_dataset(&a.out, &ds, serde_json::to_value(&cfg)?)?;
    log::info!("wrote {} sequences to {}", ds.sequences.len(), a.out.display());
    finish(Manifest::new("ingest", cfg.seed.unwrap_or(0), &cfg)?, &[&a.dir], &[&a.out], &a.out)
}

#[derive(Serialize)]
struct LogRow {
    epoch: usize,
    train_loss: f64,
    test_loss: f64,
    lr: f32,
}

fn train_cmd(a: TrainCmd) -> anyhow::Result<()> {
    let mut cfg: RunConfig<TrainParams> = load_config(a.config.as_deref())?;
    let p = &mut cfg.params;
    if let Some(v) = a.tau {
        p.tau = v;
    }
    if let Some(v) = a.epochs {
        p.train.epochs = v;
    }
    if let Some(v) = a.base_channels {
        p.base_channels = v;
    }
    if let Some(v) = a.batch_size {
        p.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        p.train.lr = v;
    }
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    cfg.seed = Some(seed);
    cfg.params.train.seed = seed;
    let params = cfg.params.clone();
    let ds = vseq::load_dataset(&a.data)?;
    ensure_dir(&a.out)?;
    let arch = ModelArch::new(params.tau, params.base_channels);
    let mut model = match &a.init {
        Some(p) => bfun::load_model(p, Some(arch))?.0,
        None => DenoiserModel::new(arch, &mut rng::stream(seed, u64::MAX))?,
    };
    log::info!(
        "training {:?} ({} parameters) on {} sequences",
        arch,
        model.params().iter().map(|p| p.value.len()).sum::<usize>(),
        ds.train.len()
    );
    let ckpt = a.out.join("model.bfun");
    let log_path = a.out.join("train_log.csv");
    let mut rows = Vec::new();
    let mut save_err = None;
    let report = train(&mut model, &ds, &params.train, |st, m| {
        rows.push(LogRow {
            epoch: st.epoch,
            train_loss: st.train_loss,
            test_loss: st.test_loss,
            lr: st.lr,
        });
        let info = serde_json::json!({"epoch": st.epoch, "test_loss": st.test_loss, "seed": seed});
        if let Err(e) = bfun::save_model(&ckpt, m, info).and_then(|_| nextframe::report::write_csv(&log_path, &rows)) {
            save_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = save_err {
        return Err(e.into());
    }
    let last = report.epochs.last().map(|e| e.test_loss).unwrap_or(f64::NAN);
    log::info!("final held-out MSE {last:.6}");
    let mut inputs: Vec<&Path> = vec![&a.data];
    inputs.extend(a.init.as_deref());
    finish(Manifest::new("train", seed, &cfg)?, &inputs, &[&ckpt, &log_path], &a.out)
}

fn denoise(a: Denoise) -> anyhow::Result<()> {
    let (model, _) = bfun::load_model(&a.model, None)?;
    let ds = vseq::load_dataset(&a.data)?;
    let pts: Vec<PsnrPoint> = nextframe_core::analysis::performance_curve(&model, &ds, &[a.sigma], a.seed)?;
    ensure_parent(&a.out)?;
    write_csv(&a.out, &pts)?;
    let n = pts.len() as f64;
    println!(
        "sigma {}: input {:.2} dB -> output {:.2} dB over {} held-out sequences",
        a.sigma,
        pts.iter().map(|p| p.input_psnr).sum::<f64>() / n,
        pts.iter().map(|p| p.output_psnr).sum::<f64>() / n,
        pts.len()
    );
    let cfg = serde_json::json!({"sigma": a.sigma});
    finish(Manifest::new("denoise", a.seed, &cfg)?, &[&a.model, &a.data], &[&a.out], &a.out)
}

#[derive(Serialize)]
struct SampleRow {
    sample: usize,
    iterations: usize,
    converged: bool,
    final_sigma: f64,
    psnr_vs_truth: f64,
}

fn sample_cmd(a: Sample) -> anyhow::Result<()> {
    let (model, _) = bfun::load_model(&a.model, None)?;
    let seq = load_sequence(&a.cond)?;
    let tau = model.arch().tau;
    let t = a.t.unwrap_or(seq.len() - 1);
    if t < tau || t >= seq.len() {
        bail!("target frame {t} needs {tau} predecessors within {} frames", seq.len());
    }
    let c = seq.conditioning(t, tau)?;
    let mut cfg = a.sampler.resolve();
    cfg.snapshots = a.snapshots;
    let shape = [seq.height(), seq.width()];
    let truth = seq.frame_tensor(t);
    ensure_dir(&a.out)?;
    let results = (0..a.n_samples)
        .into_par_iter()
        .map(|i| sample_next_frame(&model, &c, &shape, &cfg, &mut rng::stream(a.seed, i as u64)))
        .collect::<nextframe_core::Result<Vec<_>>>()?;
    let mut frames = Vec::new();
    let mut rows = Vec::new();
    for (i, r) in results.iter().enumerate() {
        if !r.converged {
            log::warn!("sample {i} stopped at max_iters with sigma {:.4}", r.steps.last().map_or(0.0, |s| s.sigma));
        }
        rows.push(SampleRow {
            sample: i,
            iterations: r.steps.len(),
            converged: r.converged,
            final_sigma: r.steps.last().map_or(0.0, |s| s.sigma),
            psnr_vs_truth: psnr(&truth, &r.frame, 1.0)?,
        });
        frames.push(ImageSequence::from_frames(std::slice::from_ref(&r.frame), SequenceSource::Generated)?);
        if a.snapshots {
            let snap = ImageSequence::from_frames(&r.snapshots, SequenceSource::Generated)?;
            vseq::write_sequences(&a.out.join(format!("trajectory_{i:03}.vseq")), &[snap], None)?;
        }
    }
    let samples = a.out.join("samples.vseq");
    vseq::write_sequences(&samples, &frames, None)?;
    let table = a.out.join("samples.csv");
    write_csv(&table, &rows)?;
    let cfg_doc = serde_json::json!({"cond": a.cond, "t": t, "n_samples": a.n_samples, "sampler": cfg});
    let (cond_path, _) = parse_cond(&a.cond)?;
    finish(Manifest::new("sample", a.seed, &cfg_doc)?, &[&a.model, &cond_path], &[&samples, &table], &a.out)
}

fn rollout_cmd(a: Rollout) -> anyhow::Result<()> {
    let (model, _) = bfun::load_model(&a.model, None)?;
    let seq = load_sequence(&a.cond)?;
    let tau = model.arch().tau.max(1);
    let seed_frames: Vec<Tensor> = (0..tau.min(seq.len())).map(|t| seq.frame_tensor(t)).collect();
    let mode = match a.mode {
        Mode::Sample => RolloutMode::Sample,
        Mode::OneStep => RolloutMode::OneStep,
    };
    let cfg = a.sampler.resolve();
    let out = rollout(&model, &seed_frames, a.steps, &cfg, mode, &mut rng::stream(a.seed, 0))?;
    ensure_parent(&a.out)?;
    vseq::write_sequences(&a.out, &[out], None)?;
    let cfg_doc = serde_json::json!({"cond": a.cond, "steps": a.steps, "mode": mode, "sampler": cfg});
    let (cond_path, _) = parse_cond(&a.cond)?;
    finish(Manifest::new("rollout", a.seed, &cfg_doc)?, &[&a.model, &cond_path], &[&a.out], &a.out)
}

#[derive(Serialize)]
struct CurveRow {
    model: String,
    tau: usize,
    sigma: f64,
    input_psnr: f64,
    output_psnr: f64,
}

#[derive(Serialize)]
struct WeightRow {
    frame: usize,
    row: usize,
    col: usize,
    weight: f32,
}

#[derive(Serialize)]
struct ChoiceRow {
    delta_r: f64,
    n: usize,
    right: usize,
    left: usize,
    undecided: usize,
    unconverged: usize,
    frequency: f64,
    fitted: f64,
}

fn analyze(a: Analyze) -> anyhow::Result<()> {
    match a {
        Analyze::Curve {
            model,
            data,
            psnr_lo,
            psnr_hi,
            psnr_step,
            seed,
            out,
        } => {
            ensure_dir(&out)?;
            let ds = vseq::load_dataset(&data)?;
            let models = model
                .iter()
                .map(|p| bfun::load_model(p, None).map(|m| m.0))
                .collect::<nextframe::Result<Vec<_>>>()?;
            let sigmas = psnr_grid(psnr_lo, psnr_hi, psnr_step);
            let refs: Vec<&DenoiserModel> = models.iter().collect();
            let cs = curves(&refs, &ds, &sigmas, seed)?;
            let mut rows = Vec::new();
            let mut series = Vec::new();
            for ((path, m), c) in model.iter().zip(&models).zip(&cs) {
                let name = path.display().to_string();
                let pts: Vec<(f64, f64)> = c.iter().map(|p| (p.input_psnr, p.output_psnr)).collect();
                if let Some((s, _)) = fit_line(&pts, 0.0, 30.0) {
                    println!("{name} (tau={}): slope over [0,30] dB = {s:.3}", m.arch().tau);
                }
                rows.extend(c.iter().map(|p| CurveRow {
                    model: name.clone(),
                    tau: m.arch().tau,
                    sigma: p.sigma,
                    input_psnr: p.input_psnr,
                    output_psnr: p.output_psnr,
                }));
                series.push(Series {
                    name: format!("tau={}", m.arch().tau),
                    points: pts,
                    dashed: false,
                });
            }
            let diag: Vec<(f64, f64)> = [psnr_lo, psnr_hi].iter().map(|&v| (v, v)).collect();
            series.push(Series {
                name: "identity".into(),
                points: diag,
                dashed: true,
            });
            write_csv(&out.join("curve.csv"), &rows)?;
            write_plot(
                &out.join("curve.svg"),
                &line_plot("Denoising performance", "input PSNR (dB)", "output PSNR (dB)", &series),
            )?;
            let cfg = serde_json::json!({"psnr_lo": psnr_lo, "psnr_hi": psnr_hi, "psnr_step": psnr_step});
            let mut ins: Vec<&Path> = model.iter().map(|p| p.as_path()).collect();
            ins.push(&data);
            finish(Manifest::new("analyze curve", seed, &cfg)?, &ins, &[&out.join("curve.csv")], &out)
        }
        Analyze::Filter {
            model,
            cond,
            t,
            pixel,
            sigma,
            seed,
            out,
        } => {
            ensure_dir(&out)?;
            let (m, _) = bfun::load_model(&model, None)?;
            let seq = load_sequence(&cond)?;
            let tau = m.arch().tau;
            let t = t.unwrap_or(seq.len() - 1);
            if t < tau || t >= seq.len() {
                bail!("target frame {t} needs {tau} predecessors within {} frames", seq.len());
            }
            let x = seq.frame_tensor(t);
            let noise = Tensor::randn(x.shape(), sigma as f32, &mut rng::stream(seed, 0));
            let y = x.add(&noise)?;
            let c = seq.conditioning(t, tau)?;
            let af = adaptive_filter(&m, &y, &c, pixel)?;
            let (h, w) = (seq.height(), seq.width());
            let mut rows = Vec::new();
            for (f, wmap) in af.weights.iter().enumerate() {
                for (i, &v) in wmap.data().iter().enumerate() {
                    rows.push(WeightRow {
                        frame: f,
                        row: i / w,
                        col: i % w,
                        weight: v,
                    });
                }
                let peak = wmap.data().iter().fold(0.0f32, |a, v| a.max(v.abs())).max(1e-12);
                let img: Vec<f32> = wmap.data().iter().map(|v| 0.5 + 0.5 * v / peak).collect();
                pgm::write_pgm(&out.join(format!("weights_{f}.pgm")), h, w, &img)?;
            }
            write_csv(&out.join("weights.csv"), &rows)?;
            let recon = af.reconstruct(&y, &c)?;
            println!("output {:.5}, sum of inputs x weights {recon:.5}", af.output);
            let cfg = serde_json::json!({"cond": cond, "t": t, "pixel": pixel, "sigma": sigma});
            finish(Manifest::new("analyze filter", seed, &cfg)?, &[&model], &[&out.join("weights.csv")], &out)
        }
        Analyze::Cues {
            model,
            data,
            sequences,
            seed,
            out,
        } => {
            ensure_dir(&out)?;
            let (m, _) = bfun::load_model(&model, None)?;
            let ds = vseq::load_dataset(&data)?;
            let st = cue_study(&m, &ds, sequences, &psnr_grid(-10.0, 40.0, 2.5), seed)?;
            write_csv(&out.join("cues.csv"), &st.rows)?;
            let mut series = Vec::new();
            for probe in ["static", "moving"] {
                let pts = |f: fn(&nextframe::experiments::CueRow) -> f64| -> Vec<(f64, f64)> {
                    st.rows.iter().filter(|r| r.probe == probe).map(|r| (r.input_psnr, f(r))).collect()
                };
                series.push(Series {
                    name: format!("{probe} x_y"),
                    points: pts(|r| r.psnr_y),
                    dashed: probe == "moving",
                });
                series.push(Series {
                    name: format!("{probe} x_c"),
                    points: pts(|r| r.psnr_c),
                    dashed: probe == "moving",
                });
            }
            write_plot(&out.join("cues.svg"), &line_plot("Cue contributions", "input PSNR (dB)", "PSNR (dB)", &series))?;
            println!(
                "crossing: static {:?} dB, moving {:?} dB",
                st.static_crossing, st.moving_crossing
            );
            let cfg = serde_json::json!({"sequences": sequences});
            finish(Manifest::new("analyze cues", seed, &cfg)?, &[&model, &data], &[&out.join("cues.csv")], &out)
        }
        Analyze::Psycho {
            model,
            n_samples,
            deltas,
            sampler,
            seed,
            out,
        } => {
            ensure_dir(&out)?;
            let (m, _) = bfun::load_model(&model, None)?;
            let cfg = sampler.resolve();
            let fit = psychometric(&m, &deltas, n_samples, &ProbeConfig::default(), &cfg, seed)?;
            let rows: Vec<ChoiceRow> = fit
                .points
                .iter()
                .map(|p| ChoiceRow {
                    delta_r: p.delta_r,
                    n: p.n,
                    right: p.right,
                    left: p.left,
                    undecided: p.undecided,
                    unconverged: p.unconverged,
                    frequency: p.frequency(),
                    fitted: logistic(p.delta_r, fit.mu, fit.s),
                })
                .collect();
            write_csv(&out.join("psychometric.csv"), &rows)?;
            let lo = deltas.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let series = vec![
                Series {
                    name: "observed".into(),
                    points: rows.iter().map(|r| (r.delta_r, r.frequency)).collect(),
                    dashed: false,
                },
                Series {
                    name: "logistic fit".into(),
                    points: (0..=100)
                        .map(|i| {
                            let x = lo + (hi - lo) * i as f64 / 100.0;
                            (x, logistic(x, fit.mu, fit.s))
                        })
                        .collect(),
                    dashed: true,
                },
            ];
            write_plot(
                &out.join("psychometric.svg"),
                &line_plot("Right-disk occlusion", "radius difference (px)", "frequency", &series),
            )?;
            println!(
                "mu {:.3}, s {:.3}, log-likelihood {:.2}, converged {}, flagged {}",
                fit.mu, fit.s, fit.log_likelihood, fit.converged, fit.flagged
            );
            let doc = serde_json::json!({"n_samples": n_samples, "deltas": deltas, "sampler": cfg});
            finish(Manifest::new("analyze psycho", seed, &doc)?, &[&model], &[&out.join("psychometric.csv")], &out)
        }
        Analyze::Rollouts {
            model,
            data,
            rollouts,
            steps,
            seed,
            out,
        } => {
            ensure_dir(&out)?;
            let (m, _) = bfun::load_model(&model, None)?;
            let ds = vseq::load_dataset(&data)?;
            let st = rollout_study(&m, &ds, rollouts, steps, &SamplerConfig::default(), seed)?;
            write_csv(&out.join("rollouts.csv"), &st.rows)?;
            println!(
                "one-step collapse {}/{}; sampled sharpness kept {}/{}",
                st.collapsed, st.rollouts, st.sharp, st.rollouts
            );
            let doc = serde_json::json!({"rollouts": rollouts, "steps": steps});
            finish(Manifest::new("analyze rollouts", seed, &doc)?, &[&model, &data], &[&out.join("rollouts.csv")], &out)
        }
    }
}

fn selftest(a: Selftest) -> anyhow::Result<bool> {
    // a caller-supplied scratch directory is left in place
    let owned = a.scratch.is_none();
    let scratch = a
        .scratch
        .unwrap_or_else(|| std::env::temp_dir().join(format!("nextframe-selftest-{}", std::process::id())));
    let mut results = checks::selftest(a.seed, &scratch);
    if let Some(dir) = &a.trained_model {
        let t = checks::Trained::load(dir)?;
        let named: Vec<(&str, &DenoiserModel)> = ["tau0", "tau1", "tau2"].into_iter().zip(t.models.iter()).collect();
        results.push(checks::homogeneity(&named, a.seed));
        results.push(checks::conditioning_gain(&t, a.seed));
        results.push(checks::unconditional_slope(&t, a.seed));
        results.push(checks::occlusion_decisions(&t, a.seed, 64).0);
        results.push(checks::rollout_coherence(&t, a.seed));
        results.push(checks::cue_crossing_order(&t, a.seed));
    }
    if owned {
        let _ = fs::remove_dir_all(&scratch);
    }
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    Ok(failed == 0)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.cmd {
        Cmd::GenLeaves(a) => gen_leaves(a)?,
        Cmd::Ingest(a) => ingest(a)?,
        Cmd::Train(a) => train_cmd(a)?,
        Cmd::Denoise(a) => denoise(a)?,
        Cmd::Sample(a) => sample_cmd(a)?,
        Cmd::Rollout(a) => rollout_cmd(a)?,
        Cmd::Analyze(a) => analyze(a)?,
        Cmd::Demo1d(a) => {
            let split = demo1d::run(&a.out, a.seed, a.chains)?;
            println!(
                "{} chains: fraction at +1/2 = {:.3} ({} unconverged)",
                split.chains,
                split.positive_fraction(),
                split.unconverged
            );
            let cfg = serde_json::json!({"chains": a.chains});
            finish(Manifest::new("demo1d", a.seed, &cfg)?, &[], &[&a.out], &a.out)?;
        }
        Cmd::Selftest(a) => return selftest(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet { "warn" } else { "info" }))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
