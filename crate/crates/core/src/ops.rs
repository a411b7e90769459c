//! Forward and backward kernels for the layers the network is built from.
//!
//! Every kernel works on NCHW [`Tensor`]s and is deterministic: loops run in
//! a fixed order and GEMM is single-threaded.

use crate::tensor::{gemm, Element, MatRef, Tensor};

/// Label value excluded from the loss (used for padded pixels).
pub const IGNORE_LABEL: u8 = 255;

pub const BN_EPS: f64 = 1e-5;

#[inline]
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel larger than padded input");
    (input + 2 * pad - kernel) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * p;
                let dst = &mut col[row..row + p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * p;
                let src = &col[row..row + p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(kh: usize, kw: usize, stride: usize, pad: usize) -> bool {
    kh == 1 && kw == 1 && stride == 1 && pad == 0
}

/// 2-D convolution. `weight` is `[out, in, kh, kw]`, `bias` is `[1, out, 1, 1]`.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let [o, ci, kh, kw] = weight.shape();
    assert_eq!(c, ci, "conv input channels {c} != weight channels {ci}");
    let (ho, wo) = (conv_out_dim(h, kh, stride, pad), conv_out_dim(w, kw, stride, pad));
    let (k, p) = (c * kh * kw, ho * wo);
    let mut out = Tensor::zeros([n, o, ho, wo]);
    let pointwise = is_pointwise(kh, kw, stride, pad);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    for s in 0..n {
        let xs = &x.data()[s * c * h * w..(s + 1) * c * h * w];
        let cols: &[T] = if pointwise {
            xs
        } else {
            im2col(xs, c, h, w, kh, kw, stride, pad, ho, wo, &mut col);
            &col
        };
        let ys = &mut out.data_mut()[s * o * p..(s + 1) * o * p];
        if let Some(b) = bias {
            for (oc, chunk) in ys.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[oc]);
            }
            gemm(MatRef::new(weight.data(), o, k), MatRef::new(cols, k, p), T::one(), ys);
        } else {
            gemm(MatRef::new(weight.data(), o, k), MatRef::new(cols, k, p), T::zero(), ys);
        }
    }
    out
}

/// Gradients of [`conv2d`]: `(dx, dweight, dbias)`. `dx` is skipped when not needed.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.shape();
    let [o, _, kh, kw] = weight.shape();
    let [_, _, ho, wo] = dy.shape();
    let (k, p) = (c * kh * kw, ho * wo);
    let pointwise = is_pointwise(kh, kw, stride, pad);
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros([1, o, 1, 1]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcol = if pointwise || !need_dx { Vec::new() } else { vec![T::zero(); k * p] };
    for s in 0..n {
        let xs = &x.data()[s * c * h * w..(s + 1) * c * h * w];
        let dys = &dy.data()[s * o * p..(s + 1) * o * p];
        for (oc, chunk) in dys.chunks(p).enumerate() {
            let acc = chunk.iter().fold(T::zero(), |a, &v| a + v);
            db.data_mut()[oc] = db.data()[oc] + acc;
        }
        let cols: &[T] = if pointwise {
            xs
        } else {
            im2col(xs, c, h, w, kh, kw, stride, pad, ho, wo, &mut col);
            &col
        };
        // dW[o, k] += dY[o, p] * col[k, p]^T
        gemm(MatRef::new(dys, o, p), MatRef::new(cols, k, p).t(), T::one(), dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * c * h * w..(s + 1) * c * h * w];
            if pointwise {
                gemm(MatRef::new(weight.data(), o, k).t(), MatRef::new(dys, o, p), T::one(), dxs);
            } else {
                gemm(MatRef::new(weight.data(), o, k).t(), MatRef::new(dys, o, p), T::zero(), &mut dcol);
                col2im(&dcol, c, h, w, kh, kw, stride, pad, ho, wo, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// Max pooling with implicit `-inf` padding. Returns values and the flat
/// input index of each selected element (first maximum wins).
pub fn max_pool<T: Element>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (conv_out_dim(h, k, stride, pad), conv_out_dim(w, k, stride, pad));
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let data = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..ho {
            let y0 = (oy * stride) as isize - pad as isize;
            let ys = y0.max(0) as usize;
            let ye = ((y0 + k as isize).min(h as isize)) as usize;
            for ox in 0..wo {
                let x0 = (ox * stride) as isize - pad as isize;
                let xs = x0.max(0) as usize;
                let xe = ((x0 + k as isize).min(w as isize)) as usize;
                let mut best = T::neg_infinity();
                let mut best_i = base + ys * w + xs;
                for yy in ys..ye {
                    for xx in xs..xe {
                        let i = base + yy * w + xx;
                        if data[i] > best {
                            best = data[i];
                            best_i = i;
                        }
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                out.data_mut()[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

/// Scatter gradients back through recorded argmax indices.
pub fn scatter_argmax<T: Element>(input_shape: [usize; 4], arg: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in arg.iter().zip(dy.data()) {
        d[i as usize] = d[i as usize] + g;
    }
    dx
}

/// Per-channel spatial maximum, `[n, c, 1, 1]`.
pub fn global_max_pool<T: Element>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros([n, c, 1, 1]);
    let mut arg = Vec::with_capacity(n * c);
    for (p, plane) in x.data().chunks(hw).enumerate() {
        let (mut bi, mut bv) = (0, plane[0]);
        for (i, &v) in plane.iter().enumerate().skip(1) {
            if v > bv {
                bv = v;
                bi = i;
            }
        }
        out.data_mut()[p] = bv;
        arg.push((p * hw + bi) as u32);
    }
    (out, arg)
}

/// Per-channel spatial mean, `[n, c, 1, 1]`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let inv = T::one() / T::lit((h * w) as f64);
    let data = x.data().chunks(h * w).map(|pl| pl.iter().fold(T::zero(), |a, &v| a + v) * inv).collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Element>(input_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let inv = T::one() / T::lit((h * w) as f64);
    let mut dx = Tensor::zeros(input_shape);
    for (p, plane) in dx.data_mut().chunks_mut(h * w).enumerate() {
        let g = dy.data()[p] * inv;
        plane.iter_mut().for_each(|v| *v = g);
    }
    debug_assert_eq!(dy.len(), n * c);
    dx
}

/// Maximum across channels at each pixel, `[n, 1, h, w]`.
pub fn channel_max<T: Element>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros([n, 1, h, w]);
    let mut arg = vec![0u32; n * hw];
    let d = x.data();
    for s in 0..n {
        for i in 0..hw {
            let mut bi = s * c * hw + i;
            let mut bv = d[bi];
            for ch in 1..c {
                let j = (s * c + ch) * hw + i;
                if d[j] > bv {
                    bv = d[j];
                    bi = j;
                }
            }
            out.data_mut()[s * hw + i] = bv;
            arg[s * hw + i] = bi as u32;
        }
    }
    (out, arg)
}

/// Mean across channels at each pixel, `[n, 1, h, w]`.
pub fn channel_mean<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let inv = T::one() / T::lit(c as f64);
    let mut out = Tensor::zeros([n, 1, h, w]);
    let d = x.data();
    for s in 0..n {
        let o = &mut out.data_mut()[s * hw..(s + 1) * hw];
        for ch in 0..c {
            let plane = &d[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            for (a, &b) in o.iter_mut().zip(plane) {
                *a = *a + b;
            }
        }
        o.iter_mut().for_each(|v| *v = *v * inv);
    }
    out
}

pub fn channel_mean_backward<T: Element>(input_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let hw = h * w;
    let inv = T::one() / T::lit(c as f64);
    let mut dx = Tensor::zeros(input_shape);
    for s in 0..n {
        let g = &dy.data()[s * hw..(s + 1) * hw];
        for ch in 0..c {
            let plane = &mut dx.data_mut()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            for (a, &b) in plane.iter_mut().zip(g) {
                *a = b * inv;
            }
        }
    }
    dx
}

/// Source taps for linear interpolation along one axis (half-pixel centers,
/// edge-clamped).
fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize to `(out_h, out_w)`.
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ty = linear_taps(h, out_h);
    let tx: Vec<(usize, usize, T)> =
        linear_taps(w, out_w).into_iter().map(|(a, b, f)| (a, b, T::lit(f))).collect();
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                dst[oy * out_w + ox] = top + (bot - top) * fy;
            }
        }
    }
    out
}

pub fn bilinear_resize_backward<T: Element>(input_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let [_, _, out_h, out_w] = dy.shape();
    if (h, w) == (out_h, out_w) {
        return dy.clone();
    }
    let ty = linear_taps(h, out_h);
    let tx: Vec<(usize, usize, T)> =
        linear_taps(w, out_w).into_iter().map(|(a, b, f)| (a, b, T::lit(f))).collect();
    let mut dx = Tensor::zeros(input_shape);
    for p in 0..n * c {
        let g = &dy.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
        let d = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                d[y0 * w + x0] = d[y0 * w + x0] + top * (T::one() - fx);
                d[y0 * w + x1] = d[y0 * w + x1] + top * fx;
                d[y1 * w + x0] = d[y1 * w + x0] + bot * (T::one() - fx);
                d[y1 * w + x1] = d[y1 * w + x1] + bot * fx;
            }
        }
    }
    dx
}

/// Per-channel batch statistics: `(mean, biased variance)`.
pub fn channel_stats<T: Element>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let m = T::lit((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s = s + x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().fold(T::zero(), |a, &v| a + v);
        }
        let mu = s / m;
        let mut q = T::zero();
        for b in 0..n {
            q = q + x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mu) * (v - mu));
        }
        mean[ch] = mu;
        var[ch] = q / m;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel.
pub fn batch_norm_apply<T: Element>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            for (o, &v) in out.data_mut()[r.clone()].iter_mut().zip(&x.data()[r]) {
                *o = v * scale + shift;
            }
        }
    }
    out
}

/// Gradients of batch norm: `(dx, dgamma, dbeta)`. With `batch_stats` the
/// mean and variance are treated as functions of `x`.
pub fn batch_norm_backward<T: Element>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    dy: &Tensor<T>,
    batch_stats: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let m = T::lit((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (&xv, &g) in x.data()[r.clone()].iter().zip(&dy.data()[r]) {
                dbeta[ch] = dbeta[ch] + g;
                dgamma[ch] = dgamma[ch] + g * (xv - mean[ch]) * inv_std[ch];
            }
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let k = gamma[ch] * inv_std[ch];
            let out = &mut dx.data_mut()[r.clone()];
            let xs = &x.data()[r.clone()];
            let gs = &dy.data()[r];
            if batch_stats {
                for i in 0..hw {
                    let xhat = (xs[i] - mean[ch]) * inv_std[ch];
                    out[i] = k * (gs[i] - dbeta[ch] / m - xhat * dgamma[ch] / m);
                }
            } else {
                for i in 0..hw {
                    out[i] = k * gs[i];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Mean two-class softmax cross-entropy over non-ignored pixels. Returns the
/// loss and the number of contributing pixels.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[u8]) -> (T, usize) {
    let [n, c, h, w] = logits.shape();
    assert_eq!(c, 2, "two-class logits expected");
    assert_eq!(labels.len(), n * h * w, "label count mismatch");
    let hw = h * w;
    let d = logits.data();
    let mut total = T::zero();
    let mut count = 0usize;
    for s in 0..n {
        for i in 0..hw {
            let lab = labels[s * hw + i];
            if lab == IGNORE_LABEL {
                continue;
            }
            let (z0, z1) = (d[s * 2 * hw + i], d[s * 2 * hw + hw + i]);
            let mx = z0.max(z1);
            let lse = mx + ((z0 - mx).exp() + (z1 - mx).exp()).ln();
            let zt = if lab == 1 { z1 } else { z0 };
            total = total + (lse - zt);
            count += 1;
        }
    }
    if count == 0 {
        return (T::zero(), 0);
    }
    (total / T::lit(count as f64), count)
}

pub fn softmax_cross_entropy_backward<T: Element>(
    logits: &Tensor<T>,
    labels: &[u8],
    count: usize,
    upstream: T,
) -> Tensor<T> {
    let [n, _, h, w] = logits.shape();
    let hw = h * w;
    let mut dx = Tensor::zeros(logits.shape());
    if count == 0 {
        return dx;
    }
    let scale = upstream / T::lit(count as f64);
    let d = logits.data();
    for s in 0..n {
        for i in 0..hw {
            let lab = labels[s * hw + i];
            if lab == IGNORE_LABEL {
                continue;
            }
            let (i0, i1) = (s * 2 * hw + i, s * 2 * hw + hw + i);
            let p1 = sigmoid(d[i1] - d[i0]);
            let p0 = T::one() - p1;
            let t1 = if lab == 1 { T::one() } else { T::zero() };
            dx.data_mut()[i0] = (p0 - (T::one() - t1)) * scale;
            dx.data_mut()[i1] = (p1 - t1) * scale;
        }
    }
    dx
}

/// Per-pixel foreground probability from two-class logits, `[n, 1, h, w]`.
pub fn foreground_probability<T: Element>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = logits.shape();
    assert_eq!(c, 2, "two-class logits expected");
    let hw = h * w;
    let d = logits.data();
    let mut out = Tensor::zeros([n, 1, h, w]);
    for s in 0..n {
        for i in 0..hw {
            out.data_mut()[s * hw + i] = sigmoid(d[s * 2 * hw + hw + i] - d[s * 2 * hw + i]);
        }
    }
    out
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
