//! Direct CPU kernels for stride-1 "same" convolution, 2×2 max pooling and
//! fully connected layers, with their backward passes. All buffers are
//! channel-major `C×H×W`.

use crate::scalar::Scalar;

/// Dot product with eight independent accumulators so the loop vectorizes;
/// the summation order is fixed, so results are reproducible.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Valid output range `[lo, hi)` along one axis for a tap offset `d`.
#[inline]
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

/// Unfolds a zero-padded `c×h×w` input into rows of `h·w` values, one row
/// per `(channel, ky, kx)` tap.
pub fn im2col<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ic in 0..c {
        let plane = &input[ic * hw..(ic + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = tap_range(dy, h);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = tap_range(dx, w);
                let row = &mut cols[((ic * k + ky) * k + kx) * hw..][..hw];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    row[y * w + x0..y * w + x1].copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters tap rows back onto the input grid.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ic in 0..c {
        let plane = &mut out[ic * hw..(ic + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = tap_range(dy, h);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = tap_range(dx, w);
                let row = &cols[((ic * k + ky) * k + kx) * hw..][..hw];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (d, &v) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    c_out: usize,
    k: usize,
    out: &mut [T],
) {
    let hw = h * w;
    let taps = c_in * k * k;
    let cols = im2col(input, c_in, h, w, k);
    for oc in 0..c_out {
        let out_plane = &mut out[oc * hw..(oc + 1) * hw];
        out_plane.fill(bias[oc]);
        for (j, &wv) in weight[oc * taps..(oc + 1) * taps].iter().enumerate() {
            axpy(wv, &cols[j * hw..(j + 1) * hw], out_plane);
        }
    }
}

/// Accumulates `dweight`, `dbias` and (optionally) `dinput` from `dout`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[T],
    c_out: usize,
    k: usize,
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    dinput: Option<&mut [T]>,
) {
    let hw = h * w;
    let taps = c_in * k * k;
    let cols = im2col(input, c_in, h, w, k);
    let mut dcols = dinput.is_some().then(|| vec![T::zero(); taps * hw]);
    for oc in 0..c_out {
        let d_plane = &dout[oc * hw..(oc + 1) * hw];
        dbias[oc] += d_plane.iter().copied().sum::<T>();
        let wrow = &weight[oc * taps..(oc + 1) * taps];
        let dwrow = &mut dweight[oc * taps..(oc + 1) * taps];
        for j in 0..taps {
            dwrow[j] += dot(d_plane, &cols[j * hw..(j + 1) * hw]);
            if let Some(dc) = dcols.as_mut() {
                axpy(wrow[j], d_plane, &mut dc[j * hw..(j + 1) * hw]);
            }
        }
    }
    if let (Some(dc), Some(din)) = (dcols, dinput) {
        col2im(&dc, c_in, h, w, k, din);
    }
}

/// 2×2 stride-2 max pooling (floor). Returns pooled values and, per output,
/// the flat index of the winning input within its plane.
pub fn maxpool2_forward<T: Scalar>(input: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let base = 2 * y * w + 2 * x;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if plane[cand] > plane[best] {
                        best = cand;
                    }
                }
                out.push(plane[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward<T: Scalar>(dout: &[T], idx: &[u32], c: usize, h: usize, w: usize) -> Vec<T> {
    let mut din = vec![T::zero(); c * h * w];
    let per = dout.len() / c.max(1);
    for ch in 0..c {
        let plane = &mut din[ch * h * w..(ch + 1) * h * w];
        for j in 0..per {
            plane[idx[ch * per + j] as usize] += dout[ch * per + j];
        }
    }
    din
}

pub fn linear_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], out_dim: usize) -> Vec<T> {
    let in_dim = x.len();
    (0..out_dim)
        .map(|o| {
            let row = &weight[o * in_dim..(o + 1) * in_dim];
            bias[o] + dot(row, x)
        })
        .collect()
}

/// Accumulates weight/bias gradients; returns `dx`.
pub fn linear_backward<T: Scalar>(x: &[T], weight: &[T], dout: &[T], dweight: &mut [T], dbias: &mut [T]) -> Vec<T> {
    let in_dim = x.len();
    let mut dx = vec![T::zero(); in_dim];
    for (o, &d) in dout.iter().enumerate() {
        dbias[o] += d;
        if d == T::zero() {
            continue;
        }
        let row = &weight[o * in_dim..(o + 1) * in_dim];
        let drow = &mut dweight[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            drow[i] += d * x[i];
            dx[i] += row[i] * d;
        }
    }
    dx
}

pub fn relu_in_place<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `grad` where the ReLU output was not positive.
pub fn relu_backward_in_place<T: Scalar>(activated: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    logits.iter().map(|&v| v - lse).collect()
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    log_softmax(logits).into_iter().map(|v| v.exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive zero-padded convolution used as the oracle for the sliced kernel.
    fn conv_naive(input: &[f64], c_in: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], c_out: usize, k: usize) -> Vec<f64> {
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; c_out * h * w];
        for oc in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[oc];
                    for ic in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = x as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += weight[((oc * c_in + ic) * k + ky) * k + kx]
                                    * input[ic * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out[oc * h * w + y * w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(11);
        let (c_in, c_out, h, w, k) = (3, 4, 5, 7, 3);
        let input: Vec<f64> = (0..c_in * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weight: Vec<f64> = (0..c_out * c_in * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; c_out * h * w];
        conv2d_forward(&input, c_in, h, w, &weight, &bias, c_out, k, &mut out);
        let expect = conv_naive(&input, c_in, h, w, &weight, &bias, c_out, k);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x and w; check dinput and dweight via the adjoint identity.
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(12);
        let (c_in, c_out, h, w, k) = (2, 3, 4, 6, 3);
        let x: Vec<f64> = (0..c_in * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wt: Vec<f64> = (0..c_out * c_in * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..c_out * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zero_b = vec![0.0; c_out];
        let mut out = vec![0.0; c_out * h * w];
        conv2d_forward(&x, c_in, h, w, &wt, &zero_b, c_out, k, &mut out);
        let lhs: f64 = out.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; c_out];
        let mut dx = vec![0.0; x.len()];
        conv2d_backward(&x, c_in, h, w, &wt, c_out, k, &g, &mut dw, &mut db, Some(&mut dx));
        let via_x: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.iter().zip(&wt).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
        assert!((db.iter().sum::<f64>() - g.iter().sum::<f64>()).abs() < 1e-10);
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let x = vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0, -1.0];
        // 3x3 -> 1x1 window over the top-left 2x2
        let (out, idx) = maxpool2_forward(&x, 1, 3, 3);
        assert_eq!(out, vec![5.0]);
        assert_eq!(idx, vec![1]);
        let d = maxpool2_backward(&[2.0], &idx, 1, 3, 3);
        assert_eq!(d[1], 2.0);
        assert_eq!(d.iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = softmax(&[1.0f64, 2.0, -3.0]);
        let b = softmax(&[101.0f64, 102.0, 97.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-7);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
