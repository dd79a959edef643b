//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: each node keeps its forward
//! value, and [`Graph::backward`] walks the tape in reverse. Nodes are only
//! ever appended, so the tape is acyclic by construction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::conv;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Smallest divisor used by the bias-free normalization.
pub const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How [`Graph::bf_norm`] obtains its per-channel divisor.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Standard deviation of the current batch over `(N, H, W)`.
    Batch,
    /// Stored running standard deviation (a fixed diagonal scaling).
    Running(&'a [f32]),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
    },
    AvgPool(Var),
    Upsample(Var),
    Relu(Var),
    BfNorm {
        input: Var,
        gain: Var,
        divisor: Vec<f32>,
        // per-channel mean and unclamped std when batch statistics were used
        batch: Option<(Vec<f32>, Vec<f32>)>,
    },
    Concat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Mse(Var, Var),
    Pick(Var, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    clamp_warnings: usize,
}

fn nchw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(shape_err(op, format!("expected [N,C,H,W], got {s:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of times a normalization divisor had to be clamped at [`NORM_EPS`].
    pub fn clamp_warnings(&self) -> usize {
        self.clamp_warnings
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input or parameter. Every leaf receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    /// Per-channel batch standard deviation recorded by a batch-mode `bf_norm`.
    pub fn batch_std(&self, v: Var) -> Option<&[f32]> {
        match &self.nodes[v.0].op {
            Op::BfNorm {
                batch: Some((_, std)),
                ..
            } => Some(std),
            _ => None,
        }
    }

    /// 3x3 cross-correlation with zero padding 1 and no bias term.
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (n, cin, h, w) = nchw(self.value(input), "conv2d")?;
        let ks = self.value(kernel).shape();
        let cout = match *ks {
            [co, ci, 3, 3] if ci == cin => co,
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel {ks:?} incompatible with input channels {cin}"),
                ))
            }
        };
        let out = conv::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            n,
            cin,
            cout,
            h,
            w,
        );
        let value = Tensor::new(&[n, cout, h, w], out)?;
        Ok(self.push(Op::Conv2d { input, kernel }, value))
    }

    /// 2x2 average pooling.
    pub fn downsample2x(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(input), "downsample2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::SpatialSize {
                op: "downsample2x",
                h,
                w,
                by: 2,
            });
        }
        let out = conv::avg_pool2(self.value(input).data(), n * c, h, w);
        let value = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        Ok(self.push(Op::AvgPool(input), value))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(input), "upsample2x")?;
        let out = conv::upsample2(self.value(input).data(), n * c, h, w);
        let value = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(Op::Upsample(input), value))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(0.0));
        self.push(Op::Relu(input), value)
    }

    /// Bias-free normalization: each channel is divided by a standard
    /// deviation and multiplied by its gain. There is no mean subtraction and
    /// no additive shift.
    pub fn bf_norm(&mut self, input: Var, gain: Var, mode: NormMode<'_>) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(input), "bf_norm")?;
        if self.value(gain).shape() != [c] {
            return Err(shape_err(
                "bf_norm",
                format!("gain {:?} for {c} channels", self.value(gain).shape()),
            ));
        }
        let hw = h * w;
        let x = self.nodes[input.0].value.data();
        let (divisor, batch) = match mode {
            NormMode::Running(std) => {
                if std.len() != c {
                    return Err(shape_err(
                        "bf_norm",
                        format!("running std of length {} for {c} channels", std.len()),
                    ));
                }
                (std.to_vec(), None)
            }
            NormMode::Batch => {
                let count = (n * hw) as f64;
                let mut mean = vec![0.0f32; c];
                let mut std = vec![0.0f32; c];
                for ch in 0..c {
                    let plane = |b: usize| &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    let m: f64 = (0..n)
                        .flat_map(|b| plane(b).iter())
                        .map(|&v| v as f64)
                        .sum::<f64>()
                        / count;
                    let var: f64 = (0..n)
                        .flat_map(|b| plane(b).iter())
                        .map(|&v| {
                            let d = v as f64 - m;
                            d * d
                        })
                        .sum::<f64>()
                        / count;
                    mean[ch] = m as f32;
                    std[ch] = libm::sqrt(var) as f32;
                }
                (std.clone(), Some((mean, std)))
            }
        };
        let mut clamped = 0;
        let divisor: Vec<f32> = divisor
            .into_iter()
            .map(|d| {
                if d < NORM_EPS {
                    clamped += 1;
                    NORM_EPS
                } else {
                    d
                }
            })
            .collect();
        let g = self.value(gain).data();
        let mut out = x.to_vec();
        for b in 0..n {
            for ch in 0..c {
                let k = g[ch] / divisor[ch];
                for v in &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    *v *= k;
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        if clamped > 0 {
            self.clamp_warnings += clamped;
            log::warn!("bf_norm: clamped {clamped} channel divisor(s) at {NORM_EPS}");
        }
        Ok(self.push(
            Op::BfNorm {
                input,
                gain,
                divisor,
                batch,
            },
            value,
        ))
    }

    /// Concatenation along the channel axis of two `[N,C,H,W]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = nchw(self.value(a), "concat")?;
        let (nb, cb, hb, wb) = nchw(self.value(b), "concat")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err(
                "concat",
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let hw = h * w;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&xa[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&xb[i * cb * hw..(i + 1) * cb * hw]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out)?;
        Ok(self.push(Op::Concat(a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let value = self.value(a).scale(k);
        self.push(Op::Scale(a, k), value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    /// Mean squared error `mean((a - b)^2)` as a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.check_same_shape(tb, "mse")?;
        let d = ta.len() as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let e = (x - y) as f64;
                e * e
            })
            .sum();
        let value = Tensor::scalar((s / d) as f32);
        Ok(self.push(Op::Mse(a, b), value))
    }

    /// Selects one entry (flat row-major index) as a scalar node.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        if index >= t.len() {
            return Err(Error::OutOfRange(format!(
                "pick index {index} in tensor of {} entries",
                t.len()
            )));
        }
        let value = Tensor::scalar(t.data()[index]);
        Ok(self.push(Op::Pick(a, index), value))
    }

    /// Back-propagates from a scalar node, filling gradients for every node
    /// that the loss depends on. Previous gradients are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        lv.ensure_finite("loss")?;
        let seed = Tensor::full(lv.shape(), 1.0);
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) -> Result<()> {
        match &mut self.nodes[v.0].grad {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<()> {
        let node = &self.nodes[i];
        match node.op {
            Op::Leaf => Ok(()),
            Op::Conv2d { input, kernel } => {
                let x = self.value(input);
                let (n, cin, h, w) = nchw(x, "conv2d")?;
                let k = self.value(kernel);
                let cout = k.shape()[0];
                let (gi, gk) =
                    conv::conv2d_backward(x.data(), k.data(), g.data(), n, cin, cout, h, w);
                let gi = Tensor::new(x.shape(), gi)?;
                let gk = Tensor::new(k.shape(), gk)?;
                self.accumulate(input, gi)?;
                self.accumulate(kernel, gk)
            }
            Op::AvgPool(input) => {
                let x = self.value(input);
                let (n, c, h, w) = nchw(x, "downsample2x")?;
                let gi = Tensor::new(x.shape(), conv::avg_pool2_backward(g.data(), n * c, h, w))?;
                self.accumulate(input, gi)
            }
            Op::Upsample(input) => {
                let x = self.value(input);
                let (n, c, h, w) = nchw(x, "upsample2x")?;
                let gi = Tensor::new(x.shape(), conv::upsample2_backward(g.data(), n * c, h, w))?;
                self.accumulate(input, gi)
            }
            Op::Relu(input) => {
                let gi = self
                    .value(input)
                    .zip_map(g, |x, d| if x > 0.0 { d } else { 0.0 })?;
                self.accumulate(input, gi)
            }
            Op::BfNorm {
                input,
                gain,
                ref divisor,
                ref batch,
            } => {
                let (gi, gg) = bf_norm_backward(
                    self.value(input),
                    self.value(gain).data(),
                    divisor,
                    batch.as_ref(),
                    g,
                )?;
                let gg = Tensor::new(&[gg.len()], gg)?;
                self.accumulate(input, gi)?;
                self.accumulate(gain, gg)
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = nchw(self.value(a), "concat")?;
                let cb = self.value(b).shape()[1];
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                let d = g.data();
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    ga.extend_from_slice(&d[base..base + ca * hw]);
                    gb.extend_from_slice(&d[base + ca * hw..base + (ca + cb) * hw]);
                }
                let ga = Tensor::new(&[n, ca, h, w], ga)?;
                let gb = Tensor::new(&[n, cb, h, w], gb)?;
                self.accumulate(a, ga)?;
                self.accumulate(b, gb)
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone())?;
                self.accumulate(b, g.clone())
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone())?;
                self.accumulate(b, g.scale(-1.0))
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(b), |d, y| d * y)?;
                let gb = g.zip_map(self.value(a), |d, x| d * x)?;
                self.accumulate(a, ga)?;
                self.accumulate(b, gb)
            }
            Op::Scale(a, k) => self.accumulate(a, g.scale(k)),
            Op::Sum(a) => {
                let gi = Tensor::full(self.value(a).shape(), g.data()[0]);
                self.accumulate(a, gi)
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let k = 2.0 * g.data()[0] / ta.len() as f32;
                let ga = ta.zip_map(tb, |x, y| k * (x - y))?;
                let gb = ga.scale(-1.0);
                self.accumulate(a, ga)?;
                self.accumulate(b, gb)
            }
            Op::Pick(a, index) => {
                let mut gi = Tensor::zeros(self.value(a).shape());
                gi.data_mut()[index] = g.data()[0];
                self.accumulate(a, gi)
            }
        }
    }
}

/// Gradient of `y = gain * x / s` where `s` is either a constant divisor or
/// the (possibly clamped) batch standard deviation of the channel.
fn bf_norm_backward(
    x: &Tensor,
    gain: &[f32],
    divisor: &[f32],
    batch: Option<&(Vec<f32>, Vec<f32>)>,
    g: &Tensor,
) -> Result<(Tensor, Vec<f32>)> {
    let (n, c, h, w) = nchw(x, "bf_norm")?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let xd = x.data();
    let gd = g.data();
    let mut gi = vec![0.0f32; xd.len()];
    let mut gg = vec![0.0f32; c];
    for ch in 0..c {
        let s = divisor[ch] as f64;
        // sum_j dy_j * x_j over the channel
        let mut gx: f64 = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for k in 0..hw {
                gx += gd[off + k] as f64 * xd[off + k] as f64;
            }
        }
        gg[ch] = (gx / s) as f32;
        let gain_c = gain[ch] as f64;
        // ds/dx_i = (x_i - mean) / (count * s) when s is the live batch std
        let live = batch.and_then(|(mean, std)| {
            (std[ch] >= crate::autodiff::NORM_EPS).then_some(mean[ch] as f64)
        });
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for k in 0..hw {
                let mut v = gain_c * gd[off + k] as f64 / s;
                if let Some(mean) = live {
                    let ds = (xd[off + k] as f64 - mean) / (count * s);
                    v -= gain_c * gx / (s * s) * ds;
                }
                gi[off + k] = v as f32;
            }
        }
    }
    Ok((Tensor::new(x.shape(), gi)?, gg))
}
