//! Forward/backward kernels shared by the tape and the pure entry points.

use super::softmax::softmax_in_place;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Scaled dot-product attention over `heads` column groups of `q`, `k`, `v`
/// (`[T, d]` each). `mask[i*T + j]` allows query `i` to see key `j`; masked
/// scores are set to `-inf` before the row softmax.
pub fn masked_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &[bool],
    heads: usize,
) -> Result<Tensor<T>> {
    attention_forward(q, k, v, mask, heads).map(|(out, _)| out)
}

pub(crate) fn check_mask(mask: &[bool], t: usize) -> Result<()> {
    if mask.len() != t * t {
        return Err(Error::Shape(format!(
            "mask has {} entries, expected {}",
            mask.len(),
            t * t
        )));
    }
    for i in 0..t {
        if !mask[i * t..(i + 1) * t].iter().any(|&m| m) {
            return Err(Error::EmptyAttentionRow(i));
        }
    }
    Ok(())
}

/// Returns the output and the per-head attention probabilities `[heads, T, T]`.
pub(crate) fn attention_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &[bool],
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (t, d) = (q.rows(), q.cols());
    if k.shape != q.shape || v.shape != q.shape {
        return Err(Error::Shape(format!(
            "attention q{:?} k{:?} v{:?}",
            q.shape, k.shape, v.shape
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("{d} columns not divisible by {heads} heads")));
    }
    check_mask(mask, t)?;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut probs = vec![T::zero(); heads * t * t];
    let mut out = vec![T::zero(); t * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let row = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            let qi = &q.data[i * d + off..i * d + off + dh];
            for j in 0..t {
                row[j] = if mask[i * t + j] {
                    let kj = &k.data[j * d + off..j * d + off + dh];
                    qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale
                } else {
                    T::neg_infinity()
                };
            }
            softmax_in_place(row);
            let orow = &mut out[i * d + off..i * d + off + dh];
            for j in 0..t {
                let p = row[j];
                if p == T::zero() {
                    continue;
                }
                let vj = &v.data[j * d + off..j * d + off + dh];
                for (o, &x) in orow.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
        }
    }
    Ok((Tensor::new(vec![t, d], out), probs))
}

/// Accumulates attention input gradients given the saved probabilities.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    heads: usize,
    g: &[T],
    gq: &mut [T],
    gk: &mut [T],
    gv: &mut [T],
) {
    let (t, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dp = vec![T::zero(); t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let p = &probs[(h * t + i) * t..(h * t + i + 1) * t];
            let gi = &g[i * d + off..i * d + off + dh];
            let mut dot = T::zero();
            for j in 0..t {
                if p[j] == T::zero() {
                    dp[j] = T::zero();
                    continue;
                }
                let vj = &v.data[j * d + off..j * d + off + dh];
                dp[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                dot += dp[j] * p[j];
                let gvj = &mut gv[j * d + off..j * d + off + dh];
                for (o, &x) in gvj.iter_mut().zip(gi) {
                    *o += p[j] * x;
                }
            }
            for j in 0..t {
                if p[j] == T::zero() {
                    continue;
                }
                let ds = p[j] * (dp[j] - dot) * scale;
                for c in 0..dh {
                    gq[i * d + off + c] += ds * k.data[j * d + off + c];
                    gk[j * d + off + c] += ds * q.data[i * d + off + c];
                }
            }
        }
    }
}

/// Per-channel 1-D convolution of `x` (`[T, d]`) with `kernel` (`[k, d]`),
/// zero padding of `(k−1)/2` on both ends so the output keeps length `T`.
pub fn depthwise_conv1d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let t = x.rows();
    let k = kernel.rows();
    if k % 2 == 1 && k > 2 * t + 1 {
        return Err(Error::Shape(format!("kernel {k} wider than 2T+1 for T={t}")));
    }
    let ranges = vec![(0, t); t];
    conv_forward(x, kernel, &ranges)
}

/// Depthwise convolution where output frame `t` may only read input frames
/// in `ranges[t] = [lo, hi)`; everything outside reads as zero.
pub fn conv_forward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    ranges: &[(usize, usize)],
) -> Result<Tensor<T>> {
    let (t, d) = (x.rows(), x.cols());
    let k = kernel.rows();
    if k % 2 == 0 {
        return Err(Error::EvenKernel(k));
    }
    if kernel.cols() != d {
        return Err(Error::Shape(format!(
            "kernel {:?} does not match {d} channels",
            kernel.shape
        )));
    }
    if ranges.len() != t {
        return Err(Error::Shape(format!("{} visibility ranges for {t} frames", ranges.len())));
    }
    let half = (k - 1) / 2;
    let mut out = vec![T::zero(); t * d];
    for (ti, &(lo, hi)) in ranges.iter().enumerate() {
        let orow = &mut out[ti * d..(ti + 1) * d];
        for j in 0..k {
            let src = ti as isize + j as isize - half as isize;
            if src < lo as isize || src >= hi as isize {
                continue;
            }
            let xr = &x.data[src as usize * d..(src as usize + 1) * d];
            let kr = &kernel.data[j * d..(j + 1) * d];
            for c in 0..d {
                orow[c] += kr[c] * xr[c];
            }
        }
    }
    Ok(Tensor::new(vec![t, d], out))
}

pub(crate) fn conv_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    ranges: &[(usize, usize)],
    g: &[T],
    gx: &mut [T],
    gk: &mut [T],
) {
    let d = x.cols();
    let k = kernel.rows();
    let half = (k - 1) / 2;
    for (ti, &(lo, hi)) in ranges.iter().enumerate() {
        let gr = &g[ti * d..(ti + 1) * d];
        for j in 0..k {
            let src = ti as isize + j as isize - half as isize;
            if src < lo as isize || src >= hi as isize {
                continue;
            }
            let s = src as usize;
            for c in 0..d {
                gx[s * d + c] += kernel.data[j * d + c] * gr[c];
                gk[j * d + c] += x.data[s * d + c] * gr[c];
            }
        }
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm; returns `(out, xhat, rstd)`.
pub(crate) fn layer_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (m, n) = (x.rows(), x.cols());
    let nf = T::of(n as f64);
    let eps = T::of(LN_EPS);
    let mut out = vec![T::zero(); m * n];
    let mut xhat = vec![T::zero(); m * n];
    let mut rstds = vec![T::zero(); m];
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let rstd = T::one() / (var + eps).sqrt();
        rstds[i] = rstd;
        for j in 0..n {
            let h = (row[j] - mean) * rstd;
            xhat[i * n + j] = h;
            out[i * n + j] = h * gamma[j] + beta[j];
        }
    }
    (Tensor::new(vec![m, n], out), xhat, rstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Real>(
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    g: &[T],
    m: usize,
    n: usize,
    gx: &mut [T],
    ggamma: &mut [T],
    gbeta: &mut [T],
) {
    let nf = T::of(n as f64);
    for i in 0..m {
        let h = &xhat[i * n..(i + 1) * n];
        let gr = &g[i * n..(i + 1) * n];
        let mut sum_dh = T::zero();
        let mut sum_dh_h = T::zero();
        for j in 0..n {
            let dh = gr[j] * gamma[j];
            sum_dh += dh;
            sum_dh_h += dh * h[j];
            ggamma[j] += gr[j] * h[j];
            gbeta[j] += gr[j];
        }
        for j in 0..n {
            let dh = gr[j] * gamma[j];
            gx[i * n + j] += rstd[i] * (dh - sum_dh / nf - h[j] * sum_dh_h / nf);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data)
    }

    #[test]
    fn identity_mask_returns_values() {
        let t = 3;
        let q = t2(t, 4, (0..12).map(|x| x as f64 * 0.1).collect());
        let k = t2(t, 4, (0..12).map(|x| (x as f64).sin()).collect());
        let v = t2(t, 4, (0..12).map(|x| x as f64).collect());
        let mask: Vec<bool> = (0..t * t).map(|i| i / t == i % t).collect();
        let out = masked_attention(&q, &k, &v, &mask, 2).unwrap();
        assert_eq!(out.data, v.data);
    }

    #[test]
    fn all_false_row_is_rejected() {
        let q = t2(2, 2, vec![0.0; 4]);
        let mask = vec![true, false, false, false];
        let err = masked_attention(&q, &q, &q, &mask, 1).unwrap_err();
        assert!(matches!(err, Error::EmptyAttentionRow(1)));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t2(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let kernel = t2(3, 2, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(depthwise_conv1d(&x, &kernel).unwrap().data, x.data);
    }

    #[test]
    fn conv_box_kernel_matches_loop() {
        // naive loop: y[t] = x[t-1] + x[t] + x[t+1] with zeros outside
        let x = t2(3, 1, vec![1.0, 2.0, 3.0]);
        let kernel = t2(3, 1, vec![1.0, 1.0, 1.0]);
        let mut want = vec![0.0; 3];
        for t in 0..3i32 {
            for j in -1..=1 {
                let s = t + j;
                if (0..3).contains(&s) {
                    want[t as usize] += x.data[s as usize];
                }
            }
        }
        assert_eq!(want, vec![3.0, 6.0, 5.0]);
        assert_eq!(depthwise_conv1d(&x, &kernel).unwrap().data, want);
    }

    #[test]
    fn even_kernel_rejected() {
        let x = t2(3, 1, vec![1.0, 2.0, 3.0]);
        let kernel = t2(2, 1, vec![1.0, 1.0]);
        assert!(matches!(
            depthwise_conv1d(&x, &kernel),
            Err(Error::EvenKernel(2))
        ));
    }
}
