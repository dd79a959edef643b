//! Bias-free conditional U-net.
//!
//! Input channel 0 is the noisy observation `y`; channels `1..=τ` are the
//! conditioning frames, most recent first. Three spatial scales, two
//! `conv → bf_norm → relu` blocks per scale, average-pool down, nearest up,
//! channel concatenation for skips, and a final 3×3 convolution that emits the
//! clean-frame estimate directly. No layer adds a constant, so in inference
//! mode the whole map is positively homogeneous of degree 1.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NormMode, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const SCALES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    /// Number of conditioning frames.
    pub tau: usize,
    pub scales: usize,
    /// Channels at the finest scale; doubled at each coarser one.
    pub base_channels: usize,
}

impl ModelArch {
    pub fn new(tau: usize, base_channels: usize) -> Self {
        Self {
            tau,
            scales: SCALES,
            base_channels,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.tau + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales != SCALES || self.base_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "architecture needs {SCALES} scales and base_channels >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `(name, cin, cout)` for every conv block in evaluation order, then the
    /// final projection.
    fn blocks(&self) -> Vec<(String, usize, usize)> {
        let c = self.base_channels;
        let mut b = Vec::new();
        let mut push = |scale: &str, cin: usize, mid: usize, cout: usize| {
            b.push((format!("{scale}.0"), cin, mid));
            b.push((format!("{scale}.1"), mid, cout));
        };
        push("enc0", self.input_channels(), c, c);
        push("enc1", c, 2 * c, 2 * c);
        push("enc2", 2 * c, 4 * c, 4 * c);
        push("dec2", 4 * c, 4 * c, 2 * c);
        push("dec1", 4 * c, 2 * c, c);
        push("dec0", 2 * c, c, c);
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    NormGain,
    NormRunningStd,
}

impl ParamKind {
    pub fn of(name: &str) -> Option<Self> {
        if name.ends_with(".weight") {
            Some(Self::ConvWeight)
        } else if name.ends_with(".gain") {
            Some(Self::NormGain)
        } else if name.ends_with(".running_std") {
            Some(Self::NormRunningStd)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Handles produced by [`DenoiserModel::build`].
#[derive(Debug)]
pub struct ForwardVars {
    pub output: Var,
    /// One leaf per trainable parameter (conv weights and gains), in
    /// [`DenoiserModel::trainable_indices`] order.
    pub trainable: Vec<Var>,
    /// `(running-std parameter index, bf_norm node)` pairs.
    pub norms: Vec<(usize, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: ModelArch,
    params: Vec<Param>,
    training: bool,
}

impl DenoiserModel {
    /// Kaiming-normal conv weights, unit gains, unit running std.
    pub fn new<R: Rng + ?Sized>(arch: ModelArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = Vec::new();
        for (name, cin, cout) in arch.blocks() {
            let std = libm::sqrtf(2.0 / (cin * 9) as f32);
            params.push(Param {
                name: format!("{name}.conv.weight"),
                value: Tensor::randn(&[cout, cin, 3, 3], std, rng),
            });
            params.push(Param {
                name: format!("{name}.norm.gain"),
                value: Tensor::full(&[cout], 1.0),
            });
            params.push(Param {
                name: format!("{name}.norm.running_std"),
                value: Tensor::full(&[cout], 1.0),
            });
        }
        let c = arch.base_channels;
        params.push(Param {
            name: "final.conv.weight".into(),
            value: Tensor::randn(&[1, c, 3, 3], libm::sqrtf(1.0 / (c * 9) as f32), rng),
        });
        Ok(Self {
            arch,
            params,
            training: false,
        })
    }

    /// Reassembles a model from named parameters, checking the census
    /// against `arch`.
    pub fn from_params(arch: ModelArch, params: Vec<Param>) -> Result<Self> {
        arch.validate()?;
        let template = Self::new(arch, &mut crate::rng::stream(0, 0))?;
        if template.params.len() != params.len() {
            return Err(Error::ArchMismatch {
                expected: format!("{} parameters for {arch:?}", template.params.len()),
                found: format!("{} parameters", params.len()),
            });
        }
        for (t, p) in template.params.iter().zip(&params) {
            if t.name != p.name || t.value.shape() != p.value.shape() {
                return Err(Error::ArchMismatch {
                    expected: format!("{} {:?}", t.name, t.value.shape()),
                    found: format!("{} {:?}", p.name, p.value.shape()),
                });
            }
        }
        Ok(Self {
            arch,
            params,
            training: false,
        })
    }

    pub fn arch(&self) -> ModelArch {
        self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    /// Indices of conv weights and norm gains (everything Adam updates).
    pub fn trainable_indices(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| ParamKind::of(&p.name) != Some(ParamKind::NormRunningStd))
            .map(|(i, _)| i)
            .collect()
    }

    /// Mutable views of the parameters at ascending `indices`.
    pub fn params_mut_by(&mut self, indices: &[usize]) -> Vec<&mut Tensor> {
        let mut want = indices.iter().peekable();
        self.params
            .iter_mut()
            .enumerate()
            .filter_map(|(i, p)| {
                if want.peek() == Some(&&i) {
                    want.next();
                    Some(&mut p.value)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn param_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].value
    }

    /// Stacks `y` and the conditioning frames into `[1, τ+1, H, W]`.
    pub fn input_tensor(&self, y: &Tensor, c: &[Tensor]) -> Result<Tensor> {
        if c.len() != self.arch.tau {
            return Err(shape_err(
                "forward",
                format!("expected {} conditioning frames, got {}", self.arch.tau, c.len()),
            ));
        }
        let mut frames: Vec<&Tensor> = vec![y];
        frames.extend(c.iter());
        let stacked = Tensor::stack(&frames)?;
        let s = stacked.shape().to_vec();
        if s.len() != 3 {
            return Err(shape_err("forward", format!("frames must be [H, W], got {:?}", &s[1..])));
        }
        stacked.reshape(&[1, s[0], s[1], s[2]])
    }

    /// Records the network on `g` with `input: [N, τ+1, H, W]`.
    pub fn build(&self, g: &mut Graph, input: Var) -> Result<ForwardVars> {
        let shape = g.value(input).shape().to_vec();
        match shape[..] {
            [_, c, h, w] if c == self.arch.input_channels() => {
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::SpatialSize {
                        op: "forward",
                        h,
                        w,
                        by: 4,
                    });
                }
            }
            _ => {
                return Err(shape_err(
                    "forward",
                    format!(
                        "expected [N, {}, H, W], got {shape:?}",
                        self.arch.input_channels()
                    ),
                ))
            }
        }
        let mut trainable = Vec::new();
        let mut norms = Vec::new();
        let mut idx = 0;
        let mut block = |g: &mut Graph, x: Var, idx: &mut usize| -> Result<Var> {
            let k = g.leaf(self.params[*idx].value.clone());
            let gain = g.leaf(self.params[*idx + 1].value.clone());
            trainable.push(k);
            trainable.push(gain);
            let y = g.conv2d(x, k)?;
            let mode = if self.training {
                NormMode::Batch
            } else {
                NormMode::Running(self.params[*idx + 2].value.data())
            };
            let y = g.bf_norm(y, gain, mode)?;
            norms.push((*idx + 2, y));
            *idx += 3;
            Ok(g.relu(y))
        };
        let x = block(g, input, &mut idx)?;
        let skip0 = block(g, x, &mut idx)?;
        let x = g.downsample2x(skip0)?;
        let x = block(g, x, &mut idx)?;
        let skip1 = block(g, x, &mut idx)?;
        let x = g.downsample2x(skip1)?;
        let x = block(g, x, &mut idx)?;
        let x = block(g, x, &mut idx)?;
        let x = block(g, x, &mut idx)?;
        let x = block(g, x, &mut idx)?;
        let x = g.upsample2x(x)?;
        let x = g.concat_channels(x, skip1)?;
        let x = block(g, x, &mut idx)?;
        let x = block(g, x, &mut idx)?;
        let x = g.upsample2x(x)?;
        let x = g.concat_channels(x, skip0)?;
        let x = block(g, x, &mut idx)?;
        let x = block(g, x, &mut idx)?;
        let k = g.leaf(self.params[idx].value.clone());
        trainable.push(k);
        let output = g.conv2d(x, k)?;
        Ok(ForwardVars {
            output,
            trainable,
            norms,
        })
    }

    /// Batched forward pass: `[N, τ+1, H, W] -> [N, 1, H, W]`.
    pub fn forward_batch(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let fv = self.build(&mut g, x)?;
        let out = g.value(fv.output).clone();
        out.ensure_finite("forward")?;
        Ok(out)
    }

    /// x̂(y, c) for one frame; `y` and each `c[i]` are `[H, W]`.
    pub fn forward(&self, y: &Tensor, c: &[Tensor]) -> Result<Tensor> {
        let input = self.input_tensor(y, c)?;
        let out = self.forward_batch(&input)?;
        out.reshape(y.shape())
    }

    /// Denoising residual f(y, c) = x̂(y, c) − y.
    pub fn residual(&self, y: &Tensor, c: &[Tensor]) -> Result<Tensor> {
        self.forward(y, c)?.sub(y)
    }

    /// Folds batch statistics into the running std with momentum `m`.
    pub fn update_running_std(&mut self, g: &Graph, norms: &[(usize, Var)], momentum: f32) {
        for &(pi, v) in norms {
            if let Some(batch) = g.batch_std(v) {
                for (r, &b) in self.params[pi].value.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(tau: usize, c: usize) -> DenoiserModel {
        DenoiserModel::new(ModelArch::new(tau, c), &mut crate::rng::stream(1, 0)).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let m = model(2, 8);
        let z = Tensor::zeros(&[16, 16]);
        let out = m.forward(&z, &[z.clone(), z.clone()]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_has_frame_shape() {
        let m = model(0, 8);
        let y = Tensor::randn(&[32, 32], 1.0, &mut crate::rng::stream(2, 0));
        let out = m.forward(&y, &[]).unwrap();
        assert_eq!(out.shape(), &[32, 32]);
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_sizes_not_divisible_by_four() {
        let m = model(0, 4);
        let y = Tensor::zeros(&[30, 32]);
        assert!(matches!(m.forward(&y, &[]), Err(Error::SpatialSize { by: 4, .. })));
        assert!(m.forward(&Tensor::zeros(&[32, 32]), &[Tensor::zeros(&[32, 32])]).is_err());
    }

    #[test]
    fn census_has_no_bias_and_covers_six_scales() {
        let m = model(2, 64);
        for p in m.params() {
            assert!(!p.name.contains("bias"), "{}", p.name);
            assert!(ParamKind::of(&p.name).is_some(), "{}", p.name);
        }
        for scale in ["enc0", "enc1", "enc2", "dec2", "dec1", "dec0"] {
            let n = m.params().iter().filter(|p| p.name.starts_with(scale)).count();
            assert_eq!(n, 6, "{scale}");
        }
        assert_eq!(m.params().last().unwrap().name, "final.conv.weight");
        assert_eq!(m.params().len(), 6 * 6 + 1);
        // first conv sees τ+1 = 3 channels, widths 64/128/256
        assert_eq!(m.params()[0].value.shape(), &[64, 3, 3, 3]);
        let widths: Vec<usize> = m
            .params()
            .iter()
            .filter(|p| p.name.ends_with("gain"))
            .map(|p| p.value.len())
            .collect();
        assert_eq!(widths, [64, 64, 128, 128, 256, 256, 256, 128, 128, 64, 64, 64]);
    }

    #[test]
    fn inference_is_positively_homogeneous() {
        let m = model(2, 8);
        let mut r = crate::rng::stream(4, 0);
        let y = Tensor::randn(&[16, 16], 1.0, &mut r);
        let c: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[16, 16], 0.5, &mut r)).collect();
        let base = m.forward(&y, &c).unwrap();
        let scale = base.rms() as f32;
        for lambda in [0.5f32, 2.0, 10.0] {
            let cs: Vec<Tensor> = c.iter().map(|t| t.scale(lambda)).collect();
            let out = m.forward(&y.scale(lambda), &cs).unwrap();
            let err = out.max_abs_diff(&base.scale(lambda)).unwrap();
            assert!(err <= 1e-4 * lambda * scale, "λ={lambda}: {err}");
        }
    }

    #[test]
    fn from_params_rejects_wrong_census() {
        let m2 = model(2, 4);
        let err = DenoiserModel::from_params(ModelArch::new(3, 4), m2.params().to_vec());
        assert!(matches!(err, Err(Error::ArchMismatch { .. })));
        let ok = DenoiserModel::from_params(m2.arch(), m2.params().to_vec()).unwrap();
        assert_eq!(ok, m2);
    }
}
