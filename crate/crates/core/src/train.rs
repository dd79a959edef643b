//! Blind conditional denoising objective and training loop.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::leaves::SequenceDataset;
use crate::net::DenoiserModel;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Evaluations without sufficient improvement before the rate is halved.
    pub patience: usize,
    /// Relative improvement of the held-out loss that counts as progress.
    pub plateau_tol: f64,
    /// Momentum of the running-std update.
    pub norm_momentum: f32,
    /// Cap on held-out examples evaluated per epoch (0 = all).
    pub max_eval_examples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 4,
            lr: 3e-4,
            patience: 10,
            plateau_tol: 1e-3,
            norm_momentum: 0.1,
            max_eval_examples: 512,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || self.epochs == 0 {
            return Err(Error::InvalidArgument(format!(
                "batch_size, lr and epochs must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// σ = u² with u ~ U(0, 1): the square root of the noise level is uniform.
pub fn sample_sigma<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    let u: f32 = rng.random();
    u * u
}

/// `(sequence index, target frame)` pairs: every frame with `τ` predecessors.
pub fn prediction_targets(ds: &SequenceDataset, indices: &[usize], tau: usize) -> Vec<(usize, usize)> {
    indices
        .iter()
        .flat_map(|&s| (tau..ds.sequences[s].len()).map(move |t| (s, t)))
        .collect()
}

/// Builds the network input `[B, τ+1, H, W]` and clean target `[B, 1, H, W]`
/// for a batch, adding noise of level σ = u² per example.
pub fn make_batch<R: Rng + ?Sized>(
    ds: &SequenceDataset,
    batch: &[(usize, usize)],
    tau: usize,
    rng: &mut R,
    sigma: Option<f32>,
) -> Result<(Tensor, Tensor)> {
    let first = &ds.sequences[batch[0].0];
    let (h, w) = (first.height(), first.width());
    let d = h * w;
    let mut input = Vec::with_capacity(batch.len() * (tau + 1) * d);
    let mut target = Vec::with_capacity(batch.len() * d);
    for &(s, t) in batch {
        let seq = &ds.sequences[s];
        if (seq.height(), seq.width()) != (h, w) {
            return Err(Error::InvalidArgument("mixed frame sizes in one batch".into()));
        }
        let x = seq.frame(t);
        let level = sigma.unwrap_or_else(|| sample_sigma(rng));
        input.extend(x.iter().map(|&v| {
            let z: f32 = rng.sample(rand_distr::StandardNormal);
            v + level * z
        }));
        for k in 1..=tau {
            input.extend_from_slice(seq.frame(t - k));
        }
        target.extend_from_slice(x);
    }
    Ok((
        Tensor::new(&[batch.len(), tau + 1, h, w], input)?,
        Tensor::new(&[batch.len(), 1, h, w], target)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub lr: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

/// Mean held-out MSE at blind noise levels drawn from a fixed stream.
pub fn evaluate(
    model: &DenoiserModel,
    ds: &SequenceDataset,
    examples: &[(usize, usize)],
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no evaluation examples".into()));
    }
    let mut r = rng::substream(seed, 0, 7);
    let tau = model.arch().tau;
    let mut total = 0.0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let (input, target) = make_batch(ds, chunk, tau, &mut r, None)?;
        let out = model.forward_batch(&input)?;
        total += out.sub(&target)?.sum_sq();
    }
    let d = ds.sequences[examples[0].0].frame(0).len();
    Ok(total / (examples.len() * d) as f64)
}

/// Trains `model` in place. On a non-finite loss the model keeps its last
/// finite parameters and [`Error::Diverged`] is returned.
pub fn train(
    model: &mut DenoiserModel,
    ds: &SequenceDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &DenoiserModel),
) -> Result<TrainReport> {
    cfg.validate()?;
    ds.validate()?;
    let tau = model.arch().tau;
    if let Some(s) = ds.sequences.iter().find(|s| s.len() < tau + 1) {
        return Err(Error::InvalidArgument(format!(
            "sequence of {} frames is too short for memory {tau}",
            s.len()
        )));
    }
    let mut train_ex = prediction_targets(ds, &ds.train, tau);
    let mut eval_ex = prediction_targets(ds, &ds.test, tau);
    if eval_ex.is_empty() {
        eval_ex = train_ex.clone();
    }
    if cfg.max_eval_examples > 0 && eval_ex.len() > cfg.max_eval_examples {
        // spread the evaluation subset over the whole held-out set
        let stride = eval_ex.len() as f64 / cfg.max_eval_examples as f64;
        eval_ex = (0..cfg.max_eval_examples)
            .map(|i| eval_ex[(i as f64 * stride) as usize])
            .collect();
    }
    let trainable = model.trainable_indices();
    let mut adam = {
        let refs: Vec<&Tensor> = trainable.iter().map(|&i| &model.params()[i].value).collect();
        AdamState::new(&refs, cfg.lr)
    };
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        model.set_training(true);
        let mut r = rng::stream(cfg.seed, epoch as u64);
        train_ex.shuffle(&mut r);
        let mut sum = 0.0;
        let mut steps = 0;
        for (step, batch) in train_ex.chunks(cfg.batch_size).enumerate() {
            let (input, target) = make_batch(ds, batch, tau, &mut r, None)?;
            let mut g = Graph::new();
            let x = g.leaf(input);
            let fv = model.build(&mut g, x)?;
            let tv = g.leaf(target);
            let loss = g.mse(fv.output, tv)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                model.set_training(false);
                return Err(Error::Diverged { epoch, step });
            }
            g.backward(loss)?;
            let grads: Vec<Tensor> = fv
                .trainable
                .iter()
                .map(|&v| g.take_grad(v).expect("every parameter feeds the loss"))
                .collect();
            model.update_running_std(&g, &fv.norms, cfg.norm_momentum);
            apply_adam(model, &trainable, &mut adam, &grads).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, step },
                e => e,
            })?;
            sum += lv as f64;
            steps += 1;
        }
        model.set_training(false);
        let test_loss = evaluate(model, ds, &eval_ex, cfg.batch_size.max(8), cfg.seed)?;
        let stats = EpochStats {
            epoch,
            train_loss: sum / steps.max(1) as f64,
            test_loss,
            lr: adam.lr,
        };
        log::info!(
            "epoch {epoch}: train {:.6} test {:.6} lr {:.2e}",
            stats.train_loss,
            stats.test_loss,
            stats.lr
        );
        on_epoch(&stats, model);
        report.epochs.push(stats);
        if test_loss < best * (1.0 - cfg.plateau_tol) {
            best = test_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                adam.lr *= 0.5;
                stale = 0;
                log::info!("held-out loss plateaued; learning rate halved to {:.2e}", adam.lr);
            }
        }
    }
    Ok(report)
}

fn apply_adam(
    model: &mut DenoiserModel,
    trainable: &[usize],
    adam: &mut AdamState,
    grads: &[Tensor],
) -> Result<()> {
    let mut params = model.params_mut_by(trainable);
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    adam.step(&mut params, &grad_refs)
}
