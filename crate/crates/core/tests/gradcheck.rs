use nextframe_core::autodiff::{Graph, NormMode, Var};
use nextframe_core::rng::{self, StreamRng};
use nextframe_core::{Result, Tensor};
use rand::Rng;

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Scalar loss ⟨w, op(inputs)⟩ with fixed random weights `w`.
fn loss_of(build: &Build, inputs: &[Tensor], w: &Tensor) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let wv = g.leaf(w.clone());
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod);
    (g, vars, loss)
}

fn output_shape(build: &Build, inputs: &[Tensor]) -> Vec<usize> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    g.value(out).shape().to_vec()
}

/// Compares reverse-mode gradients with central differences (f64 accumulation
/// of the f32 loss) and returns the worst norm-relative error.
fn check(name: &str, build: &Build, inputs: Vec<Tensor>, r: &mut StreamRng) -> f64 {
    let shape = output_shape(build, &inputs);
    let w = Tensor::randn(&shape, 1.0, r);
    let (mut g, vars, loss) = loss_of(build, &inputs, &w);
    g.backward(loss).unwrap();
    let eps = 1e-3f32;
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut num = vec![0.0f64; inputs[k].len()];
        for (i, slot) in num.iter_mut().enumerate() {
            let eval = |delta: f32| {
                let mut ins = inputs.clone();
                ins[k].data_mut()[i] += delta;
                let (g, _, l) = loss_of(build, &ins, &w);
                g.value(l).data()[0] as f64
            };
            *slot = (eval(eps) - eval(-eps)) / (2.0 * eps as f64);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&num)
            .map(|(&a, &n)| (a as f64 - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic.sum_sq().sqrt().max(num.iter().map(|n| n * n).sum::<f64>().sqrt()).max(1e-6);
        let rel = diff / scale;
        assert!(rel <= 1e-2, "{name}: input {k} rel err {rel:.3e}");
        worst = worst.max(rel);
    }
    worst
}

fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

fn dims(r: &mut StreamRng) -> (usize, usize, usize, usize) {
    (
        r.random_range(1..=2),
        r.random_range(1..=3),
        2 * r.random_range(1..=3),
        2 * r.random_range(1..=3),
    )
}

#[test]
fn every_op_matches_finite_differences() {
    let mut r = rng::stream(2024, 0);
    for _ in 0..3 {
        let (n, c, h, w) = dims(&mut r);
        let x = Tensor::randn(&[n, c, h, w], 1.0, &mut r);
        let y = Tensor::randn(&[n, c, h, w], 1.0, &mut r);
        let cout = r.random_range(1..=3);
        let k = Tensor::randn(&[cout, c, 3, 3], 0.5, &mut r);
        let gain = Tensor::randn(&[c], 1.0, &mut r);
        let running: Vec<f32> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
        let idx = r.random_range(0..x.len());

        check("conv2d", &|g, v| g.conv2d(v[0], v[1]), vec![x.clone(), k.clone()], &mut r);
        check("downsample2x", &|g, v| g.downsample2x(v[0]), vec![x.clone()], &mut r);
        check("upsample2x", &|g, v| g.upsample2x(v[0]), vec![x.clone()], &mut r);
        check("relu", &|g, v| Ok(g.relu(v[0])), vec![away_from_zero(x.clone())], &mut r);
        check("bf_norm batch", &|g, v| g.bf_norm(v[0], v[1], NormMode::Batch), vec![x.clone(), gain.clone()], &mut r);
        let rs = running.clone();
        check(
            "bf_norm running",
            &move |g, v| g.bf_norm(v[0], v[1], NormMode::Running(&rs)),
            vec![x.clone(), gain.clone()],
            &mut r,
        );
        check("concat", &|g, v| g.concat_channels(v[0], v[1]), vec![x.clone(), y.clone()], &mut r);
        check("add", &|g, v| g.add(v[0], v[1]), vec![x.clone(), y.clone()], &mut r);
        check("sub", &|g, v| g.sub(v[0], v[1]), vec![x.clone(), y.clone()], &mut r);
        check("mul", &|g, v| g.mul(v[0], v[1]), vec![x.clone(), y.clone()], &mut r);
        check("scale", &|g, v| Ok(g.scale(v[0], -1.7)), vec![x.clone()], &mut r);
        check("sum", &|g, v| Ok(g.sum(v[0])), vec![x.clone()], &mut r);
        check("mse", &|g, v| g.mse(v[0], v[1]), vec![x.clone(), y.clone()], &mut r);
        check("pick", &move |g, v| g.pick(v[0], idx), vec![x.clone()], &mut r);
    }
}

#[test]
fn composed_block_matches_finite_differences() {
    let mut r = rng::stream(7, 0);
    let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut r);
    let k1 = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
    let k2 = Tensor::randn(&[2, 6, 3, 3], 0.5, &mut r);
    let gain = Tensor::full(&[3], 1.0);
    check(
        "conv-norm-relu-pool-up-concat-conv",
        &|g, v| {
            let a = g.conv2d(v[0], v[1])?;
            let a = g.bf_norm(a, v[3], NormMode::Batch)?;
            let a = g.relu(a);
            let d = g.downsample2x(a)?;
            let u = g.upsample2x(d)?;
            let cat = g.concat_channels(a, u)?;
            g.conv2d(cat, v[2])
        },
        vec![x, k1, k2, gain],
        &mut r,
    );
}

/// Six nested loops, zero padding 1.
fn naive_conv(x: &Tensor, k: &Tensor) -> Vec<f64> {
    let [n, cin, h, w] = x.shape().try_into().unwrap();
    let cout = k.shape()[0];
    let mut out = vec![0.0f64; n * cout * h * w];
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
                                let xv = x.data()[((b * cin + c) * h + ii as usize) * w + jj as usize];
                                let kv = k.data()[((o * cin + c) * 3 + di) * 3 + dj];
                                acc += xv as f64 * kv as f64;
                            }
                        }
                    }
                    out[((b * cout + o) * h + i) * w + j] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_naive_loops() {
    let mut r = rng::stream(99, 0);
    for _ in 0..10 {
        let n = r.random_range(1..=3);
        let cin = r.random_range(1..=5);
        let cout = r.random_range(1..=5);
        let h = r.random_range(1..=9);
        let w = r.random_range(1..=9);
        let x = Tensor::randn(&[n, cin, h, w], 0.5, &mut r);
        let k = Tensor::randn(&[cout, cin, 3, 3], 0.3, &mut r);
        let mut g = Graph::new();
        let (xv, kv) = (g.leaf(x.clone()), g.leaf(k.clone()));
        let out = g.conv2d(xv, kv).unwrap();
        let expect = naive_conv(&x, &k);
        for (a, b) in g.value(out).data().iter().zip(&expect) {
            assert!((*a as f64 - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}
