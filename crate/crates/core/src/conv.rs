//! Raw kernels behind the differentiable spatial operators.
//!
//! Convolutions are 3x3, stride 1, zero padding 1, lowered to GEMM through
//! an im2col buffer of shape `[cin * 9, h * w]`.

use alloc::vec;
use alloc::vec::Vec;

pub(crate) const K: usize = 3;
const KK: usize = K * K;

fn im2col(src: &[f32], cin: usize, h: usize, w: usize, cols: &mut [f32]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &src[c * hw..(c + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = (c * KK + ky * K + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    let out_row = &mut dst[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let in_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - 1;
                        *o = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            in_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f32], cin: usize, h: usize, w: usize, dst: &mut [f32]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut dst[c * hw..(c + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = (c * KK + ky * K + kx) * hw;
                let src = &cols[row..row + hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            plane[iy * w + ix as usize] += src[oy * w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m,n] = alpha * a[m,k] b[k,n] + beta * c[m,n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers sized for the requested strides; indices
    // never exceed (m-1)*rs + (k-1)*cs within each slice.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(
    input: &[f32],
    kernel: &[f32],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> Vec<f32> {
    let hw = h * w;
    let ck = cin * KK;
    let mut out = vec![0.0; n * cout * hw];
    let mut cols = vec![0.0; ck * hw];
    for b in 0..n {
        im2col(&input[b * cin * hw..(b + 1) * cin * hw], cin, h, w, &mut cols);
        gemm(
            cout,
            ck,
            hw,
            kernel,
            (ck as isize, 1),
            &cols,
            (hw as isize, 1),
            0.0,
            &mut out[b * cout * hw..(b + 1) * cout * hw],
        );
    }
    out
}

/// Returns `(grad_input, grad_kernel)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> (Vec<f32>, Vec<f32>) {
    let hw = h * w;
    let ck = cin * KK;
    let mut grad_in = vec![0.0; n * cin * hw];
    let mut grad_k = vec![0.0; cout * ck];
    let mut cols = vec![0.0; ck * hw];
    let mut dcols = vec![0.0; ck * hw];
    for b in 0..n {
        let go = &grad_out[b * cout * hw..(b + 1) * cout * hw];
        im2col(&input[b * cin * hw..(b + 1) * cin * hw], cin, h, w, &mut cols);
        // dK[cout, ck] += dOut[cout, hw] * cols^T[hw, ck]
        gemm(
            cout,
            hw,
            ck,
            go,
            (hw as isize, 1),
            &cols,
            (1, hw as isize),
            1.0,
            &mut grad_k,
        );
        // dCols[ck, hw] = K^T[ck, cout] * dOut[cout, hw]
        gemm(
            ck,
            cout,
            hw,
            kernel,
            (1, ck as isize),
            go,
            (hw as isize, 1),
            0.0,
            &mut dcols,
        );
        col2im_add(&dcols, cin, h, w, &mut grad_in[b * cin * hw..(b + 1) * cin * hw]);
    }
    (grad_in, grad_k)
}

/// 2x2 average pooling over `planes` planes of `h x w`.
pub(crate) fn avg_pool2(input: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * w + 2 * x;
                dst[y * ow + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

/// Gradient of [`avg_pool2`]; `grad_out` is `planes x h/2 x w/2`.
pub(crate) fn avg_pool2_backward(grad_out: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut grad = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut grad[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = 0.25 * src[(y / 2) * ow + x / 2];
            }
        }
    }
    grad
}

/// Nearest-neighbour 2x upsampling; `h, w` are the input sizes.
pub(crate) fn upsample2(input: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(grad_out: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut grad = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut grad[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    grad
}
