//! Layer primitives with explicit forward and backward passes. Activations
//! are (n, c, d0, d1, d2) with d2 contiguous; conv weights are
//! (c_out, c_in, k, k, k); transposed-conv weights (c_in, c_out, 2, 2, 2).
//!
//! All loops are sequential and deterministic for a fixed input.

use crate::scalar::Real;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

#[inline]
fn at5(shape: &[usize], a: usize, b: usize, c: usize, d: usize, e: usize) -> usize {
    (((a * shape[1] + b) * shape[2] + c) * shape[3] + d) * shape[4] + e
}

/// Dot product with four independent accumulator chains so the reduction
/// vectorizes; the summation order is fixed, keeping results deterministic.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let m = n / 4 * 4;
    let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
    let mut j = 0;
    while j < m {
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
        j += 4;
    }
    let mut tail = T::zero();
    for jj in m..n {
        tail += a[jj] * b[jj];
    }
    ((s0 + s1) + (s2 + s3)) + tail
}

pub fn conv_out_extent(d: usize, kernel: usize, pad: usize, stride: usize) -> usize {
    (d + 2 * pad - kernel) / stride + 1
}

/// 3D convolution, cubic kernel, pad = (kernel-1)/2.
///
/// The stride-1 kernel-3 path keeps one output row per channel hot while
/// streaming the nine source rows, with the three k2 taps fused into a
/// single vectorizable pass per row.
pub fn conv3d<T: Real>(input: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize) -> Tensor<T> {
    let (n, ci) = (input.shape[0], input.shape[1]);
    let (d0, d1, d2) = (input.shape[2], input.shape[3], input.shape[4]);
    let co = w.shape[0];
    debug_assert_eq!(w.shape[1], ci);
    let k = w.shape[2];
    let pad = (k - 1) / 2;
    let (o0, o1, o2) = (
        conv_out_extent(d0, k, pad, stride),
        conv_out_extent(d1, k, pad, stride),
        conv_out_extent(d2, k, pad, stride),
    );
    let mut out = Tensor::zeros(&[n, co, o0, o1, o2]);
    let osh = out.shape.clone();
    let ish = input.shape.clone();

    if stride == 1 && k == 3 && d2 >= 2 {
        for ni in 0..n {
            for c_out in 0..co {
                let base = at5(&osh, ni, c_out, 0, 0, 0);
                out.data[base..base + o0 * o1 * o2].fill(b.data[c_out]);
            }
            for i0 in 0..o0 {
                for i1 in 0..o1 {
                    for c_in in 0..ci {
                        for k0 in 0..3 {
                            let s0 = i0 + k0;
                            if s0 < 1 || s0 - 1 >= d0 {
                                continue;
                            }
                            let s0 = s0 - 1;
                            for k1 in 0..3 {
                                let s1 = i1 + k1;
                                if s1 < 1 || s1 - 1 >= d1 {
                                    continue;
                                }
                                let s1 = s1 - 1;
                                let irow = at5(&ish, ni, c_in, s0, s1, 0);
                                let src = &input.data[irow..irow + d2];
                                for c_out in 0..co {
                                    let wbase = (((c_out * ci + c_in) * 3 + k0) * 3 + k1) * 3;
                                    let (w0, w1, w2) =
                                        (w.data[wbase], w.data[wbase + 1], w.data[wbase + 2]);
                                    let orow = at5(&osh, ni, c_out, i0, i1, 0);
                                    let dst = &mut out.data[orow..orow + d2];
                                    dst[0] += w1 * src[0] + w2 * src[1];
                                    for j in 1..d2 - 1 {
                                        dst[j] +=
                                            w0 * src[j - 1] + w1 * src[j] + w2 * src[j + 1];
                                    }
                                    dst[d2 - 1] += w0 * src[d2 - 2] + w1 * src[d2 - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
        return out;
    }

    if stride == 2 && k == 3 && d2 >= 4 && d2 % 2 == 0 {
        for ni in 0..n {
            for c_out in 0..co {
                let base = at5(&osh, ni, c_out, 0, 0, 0);
                out.data[base..base + o0 * o1 * o2].fill(b.data[c_out]);
            }
            for i0 in 0..o0 {
                for i1 in 0..o1 {
                    for c_in in 0..ci {
                        for k0 in 0..3 {
                            let s0 = 2 * i0 + k0;
                            if s0 < 1 || s0 - 1 >= d0 {
                                continue;
                            }
                            let s0 = s0 - 1;
                            for k1 in 0..3 {
                                let s1 = 2 * i1 + k1;
                                if s1 < 1 || s1 - 1 >= d1 {
                                    continue;
                                }
                                let s1 = s1 - 1;
                                let irow = at5(&ish, ni, c_in, s0, s1, 0);
                                let src = &input.data[irow..irow + d2];
                                for c_out in 0..co {
                                    let wbase = (((c_out * ci + c_in) * 3 + k0) * 3 + k1) * 3;
                                    let (w0, w1, w2) =
                                        (w.data[wbase], w.data[wbase + 1], w.data[wbase + 2]);
                                    let orow = at5(&osh, ni, c_out, i0, i1, 0);
                                    let dst = &mut out.data[orow..orow + o2];
                                    dst[0] += w1 * src[0] + w2 * src[1];
                                    for j in 1..o2 {
                                        let s2 = 2 * j;
                                        dst[j] +=
                                            w0 * src[s2 - 1] + w1 * src[s2] + w2 * src[s2 + 1];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        return out;
    }

    for ni in 0..n {
        for c_out in 0..co {
            let bias = b.data[c_out];
            let base = at5(&osh, ni, c_out, 0, 0, 0);
            out.data[base..base + o0 * o1 * o2].fill(bias);
            for c_in in 0..ci {
                for k0 in 0..k {
                    for k1 in 0..k {
                        for k2 in 0..k {
                            let wv = w.data[(((c_out * ci + c_in) * k + k0) * k + k1) * k + k2];
                            if stride == 1 {
                                // valid output range so the source stays in bounds
                                let i0_lo = pad.saturating_sub(k0);
                                let i0_hi = (d0 + pad - k0).min(o0);
                                let i1_lo = pad.saturating_sub(k1);
                                let i1_hi = (d1 + pad - k1).min(o1);
                                let i2_lo = pad.saturating_sub(k2);
                                let i2_hi = (d2 + pad - k2).min(o2);
                                if i0_lo >= i0_hi || i1_lo >= i1_hi || i2_lo >= i2_hi {
                                    continue;
                                }
                                for i0 in i0_lo..i0_hi {
                                    let s0 = i0 + k0 - pad;
                                    for i1 in i1_lo..i1_hi {
                                        let s1 = i1 + k1 - pad;
                                        let orow = at5(&osh, ni, c_out, i0, i1, i2_lo);
                                        let irow =
                                            at5(&ish, ni, c_in, s0, s1, i2_lo + k2 - pad);
                                        let len = i2_hi - i2_lo;
                                        let (dst, src) = (
                                            &mut out.data[orow..orow + len],
                                            &input.data[irow..irow + len],
                                        );
                                        for (o, s) in dst.iter_mut().zip(src.iter()) {
                                            *o += wv * *s;
                                        }
                                    }
                                }
                            } else {
                                for i0 in 0..o0 {
                                    let s0 = i0 * stride + k0;
                                    if s0 < pad || s0 - pad >= d0 {
                                        continue;
                                    }
                                    let s0 = s0 - pad;
                                    for i1 in 0..o1 {
                                        let s1 = i1 * stride + k1;
                                        if s1 < pad || s1 - pad >= d1 {
                                            continue;
                                        }
                                        let s1 = s1 - pad;
                                        for i2 in 0..o2 {
                                            let s2 = i2 * stride + k2;
                                            if s2 < pad || s2 - pad >= d2 {
                                                continue;
                                            }
                                            let s2 = s2 - pad;
                                            out.data[at5(&osh, ni, c_out, i0, i1, i2)] +=
                                                wv * input.data[at5(&ish, ni, c_in, s0, s1, s2)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv3d`]: gradients w.r.t. input, weight, and bias.
pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    g_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    conv3d_backward_ext(input, w, stride, g_out, true)
}

/// As [`conv3d_backward`], optionally skipping the input gradient (the first
/// encoder block's input grads are never consumed).
pub fn conv3d_backward_ext<T: Real>(
    input: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    g_out: &Tensor<T>,
    need_input: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, ci) = (input.shape[0], input.shape[1]);
    let (d0, d1, d2) = (input.shape[2], input.shape[3], input.shape[4]);
    let co = w.shape[0];
    let k = w.shape[2];
    let pad = (k - 1) / 2;
    let (o0, o1, o2) = (g_out.shape[2], g_out.shape[3], g_out.shape[4]);

    let mut g_in = Tensor::zeros(&input.shape);
    let mut g_w = Tensor::zeros(&w.shape);
    let mut g_b = Tensor::zeros(&[co]);
    let osh = g_out.shape.clone();
    let ish = input.shape.clone();

    if stride == 1 && k == 3 && d2 >= 2 {
        for ni in 0..n {
            for c_out in 0..co {
                let gbase = at5(&osh, ni, c_out, 0, 0, 0);
                let mut acc = T::zero();
                for &g in &g_out.data[gbase..gbase + o0 * o1 * o2] {
                    acc += g;
                }
                g_b.data[c_out] += acc;
            }
            for i0 in 0..o0 {
                for i1 in 0..o1 {
                    for c_in in 0..ci {
                        for k0 in 0..3 {
                            let s0 = i0 + k0;
                            if s0 < 1 || s0 - 1 >= d0 {
                                continue;
                            }
                            let s0 = s0 - 1;
                            for k1 in 0..3 {
                                let s1 = i1 + k1;
                                if s1 < 1 || s1 - 1 >= d1 {
                                    continue;
                                }
                                let s1 = s1 - 1;
                                let irow = at5(&ish, ni, c_in, s0, s1, 0);
                                for c_out in 0..co {
                                    let grow = at5(&osh, ni, c_out, i0, i1, 0);
                                    let gs = &g_out.data[grow..grow + d2];
                                    let xs = &input.data[irow..irow + d2];
                                    // weight taps: gw[k2] = sum_j g[j] * x[j + k2 - 1]
                                    let gw0 = dot(&gs[1..], &xs[..d2 - 1]);
                                    let gw1 = dot(gs, xs);
                                    let gw2 = dot(&gs[..d2 - 1], &xs[1..]);
                                    let wbase = (((c_out * ci + c_in) * 3 + k0) * 3 + k1) * 3;
                                    g_w.data[wbase] += gw0;
                                    g_w.data[wbase + 1] += gw1;
                                    g_w.data[wbase + 2] += gw2;
                                    // input grads: correlation with flipped taps
                                    if need_input {
                                        let (w0, w1, w2) =
                                            (w.data[wbase], w.data[wbase + 1], w.data[wbase + 2]);
                                        let gi = &mut g_in.data[irow..irow + d2];
                                        gi[0] += w1 * gs[0] + w0 * gs[1];
                                        for j in 1..d2 - 1 {
                                            gi[j] += w2 * gs[j - 1] + w1 * gs[j] + w0 * gs[j + 1];
                                        }
                                        gi[d2 - 1] += w2 * gs[d2 - 2] + w1 * gs[d2 - 1];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        return (g_in, g_w, g_b);
    }

    if stride == 2 && k == 3 && d2 >= 4 && d2 % 2 == 0 {
        for ni in 0..n {
            for c_out in 0..co {
                let gbase = at5(&osh, ni, c_out, 0, 0, 0);
                let mut acc = T::zero();
                for &g in &g_out.data[gbase..gbase + o0 * o1 * o2] {
                    acc += g;
                }
                g_b.data[c_out] += acc;
            }
            for i0 in 0..o0 {
                for i1 in 0..o1 {
                    for c_in in 0..ci {
                        for k0 in 0..3 {
                            let s0 = 2 * i0 + k0;
                            if s0 < 1 || s0 - 1 >= d0 {
                                continue;
                            }
                            let s0 = s0 - 1;
                            for k1 in 0..3 {
                                let s1 = 2 * i1 + k1;
                                if s1 < 1 || s1 - 1 >= d1 {
                                    continue;
                                }
                                let s1 = s1 - 1;
                                let irow = at5(&ish, ni, c_in, s0, s1, 0);
                                for c_out in 0..co {
                                    let grow = at5(&osh, ni, c_out, i0, i1, 0);
                                    let gs = &g_out.data[grow..grow + o2];
                                    let xs = &input.data[irow..irow + d2];
                                    let wbase = (((c_out * ci + c_in) * 3 + k0) * 3 + k1) * 3;
                                    let (w0, w1, w2) =
                                        (w.data[wbase], w.data[wbase + 1], w.data[wbase + 2]);
                                    let mut gw0 = T::zero();
                                    let mut gw1 = gs[0] * xs[0];
                                    let mut gw2 = gs[0] * xs[1];
                                    let gi = &mut g_in.data[irow..irow + d2];
                                    gi[0] += w1 * gs[0];
                                    gi[1] += w2 * gs[0];
                                    for j in 1..o2 {
                                        let s2 = 2 * j;
                                        let g = gs[j];
                                        gw0 += g * xs[s2 - 1];
                                        gw1 += g * xs[s2];
                                        gw2 += g * xs[s2 + 1];
                                        gi[s2 - 1] += w0 * g;
                                        gi[s2] += w1 * g;
                                        gi[s2 + 1] += w2 * g;
                                    }
                                    g_w.data[wbase] += gw0;
                                    g_w.data[wbase + 1] += gw1;
                                    g_w.data[wbase + 2] += gw2;
                                }
                            }
                        }
                    }
                }
            }
        }
        return (g_in, g_w, g_b);
    }

    for ni in 0..n {
        for c_out in 0..co {
            let gbase = at5(&osh, ni, c_out, 0, 0, 0);
            let mut acc = T::zero();
            for &g in &g_out.data[gbase..gbase + o0 * o1 * o2] {
                acc += g;
            }
            g_b.data[c_out] += acc;

            for c_in in 0..ci {
                for k0 in 0..k {
                    for k1 in 0..k {
                        for k2 in 0..k {
                            let widx = (((c_out * ci + c_in) * k + k0) * k + k1) * k + k2;
                            let wv = w.data[widx];
                            let mut gw_acc = T::zero();
                            if stride == 1 {
                                let i0_lo = pad.saturating_sub(k0);
                                let i0_hi = (d0 + pad - k0).min(o0);
                                let i1_lo = pad.saturating_sub(k1);
                                let i1_hi = (d1 + pad - k1).min(o1);
                                let i2_lo = pad.saturating_sub(k2);
                                let i2_hi = (d2 + pad - k2).min(o2);
                                if i0_lo >= i0_hi || i1_lo >= i1_hi || i2_lo >= i2_hi {
                                    continue;
                                }
                                for i0 in i0_lo..i0_hi {
                                    let s0 = i0 + k0 - pad;
                                    for i1 in i1_lo..i1_hi {
                                        let s1 = i1 + k1 - pad;
                                        let orow = at5(&osh, ni, c_out, i0, i1, i2_lo);
                                        let irow =
                                            at5(&ish, ni, c_in, s0, s1, i2_lo + k2 - pad);
                                        let len = i2_hi - i2_lo;
                                        let gs = &g_out.data[orow..orow + len];
                                        let xs = &input.data[irow..irow + len];
                                        let gi = &mut g_in.data[irow..irow + len];
                                        for idx in 0..len {
                                            gw_acc += gs[idx] * xs[idx];
                                            gi[idx] += wv * gs[idx];
                                        }
                                    }
                                }
                            } else {
                                for i0 in 0..o0 {
                                    let s0 = i0 * stride + k0;
                                    if s0 < pad || s0 - pad >= d0 {
                                        continue;
                                    }
                                    let s0 = s0 - pad;
                                    for i1 in 0..o1 {
                                        let s1 = i1 * stride + k1;
                                        if s1 < pad || s1 - pad >= d1 {
                                            continue;
                                        }
                                        let s1 = s1 - pad;
                                        for i2 in 0..o2 {
                                            let s2 = i2 * stride + k2;
                                            if s2 < pad || s2 - pad >= d2 {
                                                continue;
                                            }
                                            let s2 = s2 - pad;
                                            let g = g_out.data[at5(&osh, ni, c_out, i0, i1, i2)];
                                            let iidx = at5(&ish, ni, c_in, s0, s1, s2);
                                            gw_acc += g * input.data[iidx];
                                            g_in.data[iidx] += wv * g;
                                        }
                                    }
                                }
                            }
                            g_w.data[widx] += gw_acc;
                        }
                    }
                }
            }
        }
    }
    (g_in, g_w, g_b)
}

/// Transposed convolution, kernel 2, stride 2 (doubles each spatial extent).
pub fn tconv3d<T: Real>(input: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ci) = (input.shape[0], input.shape[1]);
    let (d0, d1, d2) = (input.shape[2], input.shape[3], input.shape[4]);
    let co = w.shape[1];
    debug_assert_eq!(w.shape[0], ci);
    let mut out = Tensor::zeros(&[n, co, 2 * d0, 2 * d1, 2 * d2]);
    let osh = out.shape.clone();
    let ish = input.shape.clone();

    for ni in 0..n {
        for c_out in 0..co {
            let base = at5(&osh, ni, c_out, 0, 0, 0);
            out.data[base..base + 8 * d0 * d1 * d2].fill(b.data[c_out]);
            for c_in in 0..ci {
                for k0 in 0..2 {
                    for k1 in 0..2 {
                        for k2 in 0..2 {
                            let wv =
                                w.data[(((c_in * co + c_out) * 2 + k0) * 2 + k1) * 2 + k2];
                            for i0 in 0..d0 {
                                for i1 in 0..d1 {
                                    let irow = at5(&ish, ni, c_in, i0, i1, 0);
                                    let orow =
                                        at5(&osh, ni, c_out, 2 * i0 + k0, 2 * i1 + k1, k2);
                                    for i2 in 0..d2 {
                                        out.data[orow + 2 * i2] += wv * input.data[irow + i2];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`tconv3d`].
pub fn tconv3d_backward<T: Real>(
    input: &Tensor<T>,
    w: &Tensor<T>,
    g_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, ci) = (input.shape[0], input.shape[1]);
    let (d0, d1, d2) = (input.shape[2], input.shape[3], input.shape[4]);
    let co = w.shape[1];
    let mut g_in = Tensor::zeros(&input.shape);
    let mut g_w = Tensor::zeros(&w.shape);
    let mut g_b = Tensor::zeros(&[co]);
    let osh = g_out.shape.clone();
    let ish = input.shape.clone();

    for ni in 0..n {
        for c_out in 0..co {
            let gbase = at5(&osh, ni, c_out, 0, 0, 0);
            let mut acc = T::zero();
            for &g in &g_out.data[gbase..gbase + 8 * d0 * d1 * d2] {
                acc += g;
            }
            g_b.data[c_out] += acc;
            for c_in in 0..ci {
                for k0 in 0..2 {
                    for k1 in 0..2 {
                        for k2 in 0..2 {
                            let widx = (((c_in * co + c_out) * 2 + k0) * 2 + k1) * 2 + k2;
                            let wv = w.data[widx];
                            let mut gw_acc = T::zero();
                            for i0 in 0..d0 {
                                for i1 in 0..d1 {
                                    let irow = at5(&ish, ni, c_in, i0, i1, 0);
                                    let orow =
                                        at5(&osh, ni, c_out, 2 * i0 + k0, 2 * i1 + k1, k2);
                                    for i2 in 0..d2 {
                                        let g = g_out.data[orow + 2 * i2];
                                        gw_acc += g * input.data[irow + i2];
                                        g_in.data[irow + i2] += wv * g;
                                    }
                                }
                            }
                            g_w.data[widx] += gw_acc;
                        }
                    }
                }
            }
        }
    }
    (g_in, g_w, g_b)
}

/// Per-(sample, channel) statistics cached for the backward pass.
pub struct NormCache<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Instance normalization: per (n, c), normalize over the spatial extent,
/// then scale/shift by gamma/beta.
pub fn instance_norm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, NormCache<T>) {
    let (n, c) = (input.shape[0], input.shape[1]);
    let m = input.spatial();
    let mf = T::of(m as f64);
    let eps = T::of(NORM_EPS);
    let mut out = Tensor::zeros(&input.shape);
    let mut cache = NormCache { mean: vec![T::zero(); n * c], inv_std: vec![T::zero(); n * c] };
    for ni in 0..n {
        for cc in 0..c {
            let base = (ni * c + cc) * m;
            let xs = &input.data[base..base + m];
            let mut mean = T::zero();
            for &x in xs {
                mean += x;
            }
            mean /= mf;
            let mut var = T::zero();
            for &x in xs {
                let d = x - mean;
                var += d * d;
            }
            var /= mf;
            let inv_std = (var + eps).sqrt().recip();
            cache.mean[ni * c + cc] = mean;
            cache.inv_std[ni * c + cc] = inv_std;
            let (g, bta) = (gamma.data[cc], beta.data[cc]);
            for (o, &x) in out.data[base..base + m].iter_mut().zip(xs.iter()) {
                *o = g * ((x - mean) * inv_std) + bta;
            }
        }
    }
    (out, cache)
}

/// Backward of [`instance_norm`].
pub fn instance_norm_backward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
    g_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c) = (input.shape[0], input.shape[1]);
    let m = input.spatial();
    let mf = T::of(m as f64);
    let mut g_in = Tensor::zeros(&input.shape);
    let mut g_gamma = Tensor::zeros(&[c]);
    let mut g_beta = Tensor::zeros(&[c]);
    for ni in 0..n {
        for cc in 0..c {
            let base = (ni * c + cc) * m;
            let mean = cache.mean[ni * c + cc];
            let inv_std = cache.inv_std[ni * c + cc];
            let g = gamma.data[cc];
            let xs = &input.data[base..base + m];
            let gs = &g_out.data[base..base + m];
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for (&go, &x) in gs.iter().zip(xs.iter()) {
                let xhat = (x - mean) * inv_std;
                sum_g += go;
                sum_gx += go * xhat;
            }
            g_beta.data[cc] += sum_g;
            g_gamma.data[cc] += sum_gx;
            // dx = gamma * inv_std / m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
            let k = g * inv_std / mf;
            for (gi, (&go, &x)) in
                g_in.data[base..base + m].iter_mut().zip(gs.iter().zip(xs.iter()))
            {
                let xhat = (x - mean) * inv_std;
                *gi = k * (mf * go - sum_g - xhat * sum_gx);
            }
        }
    }
    (g_in, g_gamma, g_beta)
}

pub fn leaky_relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let alpha = T::of(LEAKY_SLOPE);
    Tensor {
        shape: input.shape.clone(),
        data: input
            .data
            .iter()
            .map(|&x| if x > T::zero() { x } else { alpha * x })
            .collect(),
    }
}

pub fn leaky_relu_backward<T: Real>(pre_act: &Tensor<T>, g_out: &Tensor<T>) -> Tensor<T> {
    let alpha = T::of(LEAKY_SLOPE);
    Tensor {
        shape: pre_act.shape.clone(),
        data: pre_act
            .data
            .iter()
            .zip(g_out.data.iter())
            .map(|(&x, &g)| if x > T::zero() { g } else { alpha * g })
            .collect(),
    }
}

/// Concatenate two activations along the channel dim.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let n = a.shape[0];
    debug_assert_eq!(a.shape[2..], b.shape[2..]);
    let (ca, cb) = (a.shape[1], b.shape[1]);
    let m = a.spatial();
    let mut out = Tensor::zeros(&[n, ca + cb, a.shape[2], a.shape[3], a.shape[4]]);
    for ni in 0..n {
        let dst = ni * (ca + cb) * m;
        out.data[dst..dst + ca * m].copy_from_slice(&a.data[ni * ca * m..(ni + 1) * ca * m]);
        out.data[dst + ca * m..dst + (ca + cb) * m]
            .copy_from_slice(&b.data[ni * cb * m..(ni + 1) * cb * m]);
    }
    out
}

/// Split a concat gradient back into the two channel groups.
pub fn split_channels<T: Real>(g: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let n = g.shape[0];
    let c = g.shape[1];
    let cb = c - ca;
    let m = g.spatial();
    let mut ga = Tensor::zeros(&[n, ca, g.shape[2], g.shape[3], g.shape[4]]);
    let mut gb = Tensor::zeros(&[n, cb, g.shape[2], g.shape[3], g.shape[4]]);
    for ni in 0..n {
        let src = ni * c * m;
        ga.data[ni * ca * m..(ni + 1) * ca * m].copy_from_slice(&g.data[src..src + ca * m]);
        gb.data[ni * cb * m..(ni + 1) * cb * m]
            .copy_from_slice(&g.data[src + ca * m..src + c * m]);
    }
    (ga, gb)
}

/// Channel softmax at every voxel (numerically stabilized).
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let (n, c) = (logits.shape[0], logits.shape[1]);
    let m = logits.spatial();
    let mut out = Tensor::zeros(&logits.shape);
    for ni in 0..n {
        for v in 0..m {
            let mut mx = T::neg_infinity();
            for cc in 0..c {
                mx = mx.max(logits.data[(ni * c + cc) * m + v]);
            }
            let mut z = T::zero();
            for cc in 0..c {
                let e = (logits.data[(ni * c + cc) * m + v] - mx).exp();
                out.data[(ni * c + cc) * m + v] = e;
                z += e;
            }
            for cc in 0..c {
                out.data[(ni * c + cc) * m + v] /= z;
            }
        }
    }
    out
}

/// Backward of softmax given dL/dprobs: dz_i = p_i (g_i - sum_j g_j p_j).
pub fn softmax_backward<T: Real>(probs: &Tensor<T>, g_probs: &Tensor<T>) -> Tensor<T> {
    let (n, c) = (probs.shape[0], probs.shape[1]);
    let m = probs.spatial();
    let mut g_z = Tensor::zeros(&probs.shape);
    for ni in 0..n {
        for v in 0..m {
            let mut dot = T::zero();
            for cc in 0..c {
                let idx = (ni * c + cc) * m + v;
                dot += g_probs.data[idx] * probs.data[idx];
            }
            for cc in 0..c {
                let idx = (ni * c + cc) * m + v;
                g_z.data[idx] = probs.data[idx] * (g_probs.data[idx] - dot);
            }
        }
    }
    g_z
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor_from(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(f).collect())
    }

    /// Naive convolution oracle (direct sum over the kernel support).
    fn conv_naive(input: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
        let (n, ci) = (input.shape[0], input.shape[1]);
        let (d0, d1, d2) = (input.shape[2], input.shape[3], input.shape[4]);
        let co = w.shape[0];
        let k = w.shape[2];
        let pad = (k - 1) / 2;
        let o = |d: usize| conv_out_extent(d, k, pad, stride);
        let (o0, o1, o2) = (o(d0), o(d1), o(d2));
        let mut out = Tensor::zeros(&[n, co, o0, o1, o2]);
        for ni in 0..n {
            for cc in 0..co {
                for i0 in 0..o0 {
                    for i1 in 0..o1 {
                        for i2 in 0..o2 {
                            let mut acc = b.data[cc];
                            for cin in 0..ci {
                                for k0 in 0..k {
                                    for k1 in 0..k {
                                        for k2 in 0..k {
                                            let s0 = (i0 * stride + k0) as isize - pad as isize;
                                            let s1 = (i1 * stride + k1) as isize - pad as isize;
                                            let s2 = (i2 * stride + k2) as isize - pad as isize;
                                            if s0 < 0 || s1 < 0 || s2 < 0 {
                                                continue;
                                            }
                                            let (s0, s1, s2) =
                                                (s0 as usize, s1 as usize, s2 as usize);
                                            if s0 >= d0 || s1 >= d1 || s2 >= d2 {
                                                continue;
                                            }
                                            acc += w.data
                                                [(((cc * ci + cin) * k + k0) * k + k1) * k + k2]
                                                * input.data
                                                    [at5(&input.shape, ni, cin, s0, s1, s2)];
                                        }
                                    }
                                }
                            }
                            out.data[at5(&out.shape, ni, cc, i0, i1, i2)] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn test_conv3d_matches_naive_oracle() {
        for (k, stride) in [(3usize, 1usize), (3, 2), (1, 1), (1, 2)] {
            let input = tensor_from(&[2, 3, 5, 4, 6], |i| ((i * 37 + 11) % 19) as f64 * 0.1 - 0.9);
            let w = tensor_from(&[4, 3, k, k, k], |i| ((i * 23 + 7) % 17) as f64 * 0.05 - 0.4);
            let b = tensor_from(&[4], |i| i as f64 * 0.3 - 0.5);
            let fast = conv3d(&input, &w, &b, stride);
            let slow = conv_naive(&input, &w, &b, stride);
            assert_eq!(fast.shape, slow.shape, "k={k} stride={stride}");
            for (a, bb) in fast.data.iter().zip(slow.data.iter()) {
                assert!((a - bb).abs() < 1e-12, "k={k} stride={stride}");
            }
        }
    }

    #[test]
    fn test_stride2_halves_even_extents() {
        let input = tensor_from(&[1, 2, 8, 8, 8], |i| i as f64);
        let w = tensor_from(&[3, 2, 3, 3, 3], |_| 0.1);
        let b = Tensor::zeros(&[3]);
        let out = conv3d(&input, &w, &b, 2);
        assert_eq!(out.shape, vec![1, 3, 4, 4, 4]);
    }

    #[test]
    fn test_tconv_doubles_extents_and_scatters() {
        let input = tensor_from(&[1, 2, 3, 3, 3], |i| (i % 5) as f64);
        let w = tensor_from(&[2, 4, 2, 2, 2], |i| ((i % 7) as f64) * 0.1);
        let b = tensor_from(&[4], |i| i as f64 * 0.01);
        let out = tconv3d(&input, &w, &b);
        assert_eq!(out.shape, vec![1, 4, 6, 6, 6]);
        // spot-check one output voxel against the scatter definition
        let (i0, i1, i2, k0, k1, k2) = (1usize, 2usize, 0usize, 1usize, 0usize, 1usize);
        let c_out = 3usize;
        let mut want = b.data[c_out];
        for c_in in 0..2 {
            want += w.data[(((c_in * 4 + c_out) * 2 + k0) * 2 + k1) * 2 + k2]
                * input.data[at5(&input.shape, 0, c_in, i0, i1, i2)];
        }
        let got = out.data[at5(&out.shape, 0, c_out, 2 * i0 + k0, 2 * i1 + k1, 2 * i2 + k2)];
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn test_instance_norm_zero_mean_unit_var() {
        let input = tensor_from(&[2, 3, 4, 4, 4], |i| ((i * 31 + 5) % 29) as f64);
        let gamma = Tensor::from_vec(&[3], vec![1.0; 3]);
        let beta = Tensor::zeros(&[3]);
        let (out, _) = instance_norm(&input, &gamma, &beta);
        let m = 64;
        for nc in 0..6 {
            let xs = &out.data[nc * m..(nc + 1) * m];
            let mean: f64 = xs.iter().sum::<f64>() / m as f64;
            let var: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3); // eps-deflated
        }
    }

    #[test]
    fn test_softmax_sums_to_one() {
        let logits = tensor_from(&[1, 4, 2, 2, 2], |i| ((i * 13 + 3) % 11) as f64 - 5.0);
        let p = softmax_channels(&logits);
        for v in 0..8 {
            let s: f64 = (0..4).map(|c| p.data[c * 8 + v]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn test_concat_split_roundtrip() {
        let a = tensor_from(&[2, 3, 2, 2, 2], |i| i as f64);
        let b = tensor_from(&[2, 2, 2, 2, 2], |i| -(i as f64));
        let c = concat_channels(&a, &b);
        assert_eq!(c.shape, vec![2, 5, 2, 2, 2]);
        let (ga, gb) = split_channels(&c, 3);
        assert_eq!(ga.data, a.data);
        assert_eq!(gb.data, b.data);
    }

    /// Finite differences on a scalar functional of each op's output.
    #[test]
    fn test_op_backward_matches_finite_difference() {
        let weigh = |t: &Tensor<f64>| -> Vec<f64> {
            (0..t.numel()).map(|i| ((i * 7 + 3) % 13) as f64 * 0.1 - 0.6).collect()
        };
        let loss_of = |t: &Tensor<f64>, ws: &[f64]| -> f64 {
            t.data.iter().zip(ws.iter()).map(|(a, w)| a * w).sum()
        };

        // conv3d, both strides
        for stride in [1usize, 2] {
            let input = tensor_from(&[1, 2, 4, 4, 4], |i| ((i * 11 + 1) % 9) as f64 * 0.2 - 0.8);
            let w = tensor_from(&[3, 2, 3, 3, 3], |i| ((i * 5 + 2) % 11) as f64 * 0.1 - 0.5);
            let b = tensor_from(&[3], |i| 0.1 * i as f64);
            let out = conv3d(&input, &w, &b, stride);
            let ws = weigh(&out);
            let g_out = Tensor::from_vec(&out.shape, ws.clone());
            let (g_in, g_w, g_b) = conv3d_backward(&input, &w, stride, &g_out);
            let h = 1e-6;
            for probe in [0usize, 7, 19] {
                let mut ip = input.clone();
                ip.data[probe] += h;
                let up = loss_of(&conv3d(&ip, &w, &b, stride), &ws);
                ip.data[probe] -= 2.0 * h;
                let dn = loss_of(&conv3d(&ip, &w, &b, stride), &ws);
                assert!(((up - dn) / (2.0 * h) - g_in.data[probe]).abs() < 1e-6);
            }
            for probe in [0usize, 31, 100] {
                let mut wp = w.clone();
                wp.data[probe] += h;
                let up = loss_of(&conv3d(&input, &wp, &b, stride), &ws);
                wp.data[probe] -= 2.0 * h;
                let dn = loss_of(&conv3d(&input, &wp, &b, stride), &ws);
                assert!(((up - dn) / (2.0 * h) - g_w.data[probe]).abs() < 1e-6);
            }
            let mut bp = b.clone();
            bp.data[1] += h;
            let up = loss_of(&conv3d(&input, &w, &bp, stride), &ws);
            bp.data[1] -= 2.0 * h;
            let dn = loss_of(&conv3d(&input, &w, &bp, stride), &ws);
            assert!(((up - dn) / (2.0 * h) - g_b.data[1]).abs() < 1e-6);
        }

        // instance norm
        let input = tensor_from(&[2, 2, 3, 3, 3], |i| ((i * 17 + 5) % 23) as f64 * 0.3);
        let gamma = tensor_from(&[2], |i| 1.0 + 0.2 * i as f64);
        let beta = tensor_from(&[2], |i| 0.1 * i as f64);
        let (out, cache) = instance_norm(&input, &gamma, &beta);
        let ws = weigh(&out);
        let g_out = Tensor::from_vec(&out.shape, ws.clone());
        let (g_in, g_gamma, g_beta) = instance_norm_backward(&input, &gamma, &cache, &g_out);
        let h = 1e-6;
        for probe in [0usize, 13, 40] {
            let mut ip = input.clone();
            ip.data[probe] += h;
            let up = loss_of(&instance_norm(&ip, &gamma, &beta).0, &ws);
            ip.data[probe] -= 2.0 * h;
            let dn = loss_of(&instance_norm(&ip, &gamma, &beta).0, &ws);
            assert!(((up - dn) / (2.0 * h) - g_in.data[probe]).abs() < 1e-5);
        }
        for probe in [0usize, 1] {
            let mut gp = gamma.clone();
            gp.data[probe] += h;
            let up = loss_of(&instance_norm(&input, &gp, &beta).0, &ws);
            gp.data[probe] -= 2.0 * h;
            let dn = loss_of(&instance_norm(&input, &gp, &beta).0, &ws);
            assert!(((up - dn) / (2.0 * h) - g_gamma.data[probe]).abs() < 1e-5);
            let mut bp = beta.clone();
            bp.data[probe] += h;
            let up = loss_of(&instance_norm(&input, &gamma, &bp).0, &ws);
            bp.data[probe] -= 2.0 * h;
            let dn = loss_of(&instance_norm(&input, &gamma, &bp).0, &ws);
            assert!(((up - dn) / (2.0 * h) - g_beta.data[probe]).abs() < 1e-5);
        }

        // tconv
        let input = tensor_from(&[1, 2, 2, 2, 2], |i| ((i * 3 + 1) % 7) as f64 * 0.25);
        let w = tensor_from(&[2, 3, 2, 2, 2], |i| ((i * 9 + 4) % 13) as f64 * 0.1 - 0.6);
        let b = tensor_from(&[3], |i| 0.05 * i as f64);
        let out = tconv3d(&input, &w, &b);
        let ws = weigh(&out);
        let g_out = Tensor::from_vec(&out.shape, ws.clone());
        let (g_in, g_w, g_b) = tconv3d_backward(&input, &w, &g_out);
        for probe in [0usize, 9, 15] {
            let mut ip = input.clone();
            ip.data[probe] += h;
            let up = loss_of(&tconv3d(&ip, &w, &b), &ws);
            ip.data[probe] -= 2.0 * h;
            let dn = loss_of(&tconv3d(&ip, &w, &b), &ws);
            assert!(((up - dn) / (2.0 * h) - g_in.data[probe]).abs() < 1e-6);
        }
        for probe in [0usize, 23, 47] {
            let mut wp = w.clone();
            wp.data[probe] += h;
            let up = loss_of(&tconv3d(&input, &wp, &b), &ws);
            wp.data[probe] -= 2.0 * h;
            let dn = loss_of(&tconv3d(&input, &wp, &b), &ws);
            assert!(((up - dn) / (2.0 * h) - g_w.data[probe]).abs() < 1e-6);
        }
        let mut bp = b.clone();
        bp.data[2] += h;
        let up = loss_of(&tconv3d(&input, &w, &bp), &ws);
        bp.data[2] -= 2.0 * h;
        let dn = loss_of(&tconv3d(&input, &w, &bp), &ws);
        assert!(((up - dn) / (2.0 * h) - g_b.data[2]).abs() < 1e-6);
    }
}
