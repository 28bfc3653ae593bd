//! Slice-level forward and backward kernels shared by the tape and by the
//! plain numeric API.

use super::{gemm, Scalar};

pub const RMS_EPS: f64 = 1e-6;
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `ln(1 + e^x)` via `max(x, 0) + ln(1 + e^{-|x|})`.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv<T: Scalar>(y: T) -> T {
    // y + ln(1 - e^{-y}) avoids overflow for large y
    y + (-(-y).exp()).ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Learnable Fourier features: for each row value `x`,
/// `[cos(x f + p) ..., sin(x f + p) ...]`.
pub fn fourier<T: Scalar>(x: &[T], freqs: &[T], phases: &[T]) -> Vec<T> {
    let f = freqs.len();
    let mut out = vec![T::zero(); x.len() * 2 * f];
    for (r, &xv) in x.iter().enumerate() {
        let row = &mut out[r * 2 * f..(r + 1) * 2 * f];
        for j in 0..f {
            let theta = xv * freqs[j] + phases[j];
            row[j] = theta.cos();
            row[f + j] = theta.sin();
        }
    }
    out
}

/// Returns `(dx, dfreqs, dphases)`.
pub fn fourier_backward<T: Scalar>(
    x: &[T],
    freqs: &[T],
    phases: &[T],
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let f = freqs.len();
    let mut dx = vec![T::zero(); x.len()];
    let mut df = vec![T::zero(); f];
    let mut dp = vec![T::zero(); f];
    for (r, &xv) in x.iter().enumerate() {
        let grow = &g[r * 2 * f..(r + 1) * 2 * f];
        for j in 0..f {
            let theta = xv * freqs[j] + phases[j];
            let dtheta = -theta.sin() * grow[j] + theta.cos() * grow[f + j];
            dx[r] += dtheta * freqs[j];
            df[j] += dtheta * xv;
            dp[j] += dtheta;
        }
    }
    (dx, df, dp)
}

/// Depthwise causal convolution over sequences of length `seq_len` packed
/// row-wise in `x` (`rows × d`). Kernel row `c` holds `k` taps, the last tap
/// multiplying the current step.
pub fn causal_conv<T: Scalar>(x: &[T], d: usize, kernels: &[T], k: usize, seq_len: usize) -> Vec<T> {
    let rows = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let t = r % seq_len;
        let orow = &mut out[r * d..(r + 1) * d];
        for s in 0..k {
            let back = k - 1 - s;
            if back > t {
                continue;
            }
            let src = &x[(r - back) * d..(r - back + 1) * d];
            for c in 0..d {
                orow[c] += kernels[c * k + s] * src[c];
            }
        }
    }
    out
}

/// Returns `(dx, dkernels)`.
pub fn causal_conv_backward<T: Scalar>(
    x: &[T],
    d: usize,
    kernels: &[T],
    k: usize,
    seq_len: usize,
    g: &[T],
) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernels.len()];
    for r in 0..rows {
        let t = r % seq_len;
        let grow = &g[r * d..(r + 1) * d];
        for s in 0..k {
            let back = k - 1 - s;
            if back > t {
                continue;
            }
            let src = (r - back) * d;
            for c in 0..d {
                dx[src + c] += kernels[c * k + s] * grow[c];
                dk[c * k + s] += x[src + c] * grow[c];
            }
        }
    }
    (dx, dk)
}

/// Row-wise RMS normalization. Returns the output and per-row `1/rms`.
pub fn rmsnorm<T: Scalar>(x: &[T], gain: &[T]) -> (Vec<T>, Vec<T>) {
    let d = gain.len();
    let rows = x.len() / d;
    let eps = T::of(RMS_EPS);
    let dn = T::of(d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().map(|&v| v * v).sum::<T>() / dn;
        let ir = T::one() / (ms + eps).sqrt();
        inv[r] = ir;
        for c in 0..d {
            out[r * d + c] = xr[c] * ir * gain[c];
        }
    }
    (out, inv)
}

/// Returns `(dx, dgain)`.
pub fn rmsnorm_backward<T: Scalar>(x: &[T], gain: &[T], inv: &[T], g: &[T]) -> (Vec<T>, Vec<T>) {
    let d = gain.len();
    let dn = T::of(d as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgain = vec![T::zero(); d];
    for (r, &ir) in inv.iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        let gr = &g[r * d..(r + 1) * d];
        let mut dot = T::zero();
        for c in 0..d {
            dot += gr[c] * gain[c] * xr[c];
            dgain[c] += gr[c] * xr[c] * ir;
        }
        let k = ir * ir * ir * dot / dn;
        for c in 0..d {
            dx[r * d + c] = ir * gr[c] * gain[c] - k * xr[c];
        }
    }
    (dx, dgain)
}

/// Row-wise layer normalization. Returns output, normalized input, `1/std`.
pub fn layernorm<T: Scalar>(x: &[T], gain: &[T], bias: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gain.len();
    let rows = x.len() / d;
    let dn = T::of(d as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + eps).sqrt();
        inv[r] = is;
        for c in 0..d {
            let h = (xr[c] - mean) * is;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gain[c] + bias[c];
        }
    }
    (out, xhat, inv)
}

/// Returns `(dx, dgain, dbias)`.
pub fn layernorm_backward<T: Scalar>(
    xhat: &[T],
    gain: &[T],
    inv: &[T],
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gain.len();
    let dn = T::of(d as f64);
    let mut dx = vec![T::zero(); xhat.len()];
    let mut dgain = vec![T::zero(); d];
    let mut dbias = vec![T::zero(); d];
    for (r, &is) in inv.iter().enumerate() {
        let hr = &xhat[r * d..(r + 1) * d];
        let gr = &g[r * d..(r + 1) * d];
        let mut mean_dh = T::zero();
        let mut mean_dh_h = T::zero();
        for c in 0..d {
            let dh = gr[c] * gain[c];
            mean_dh += dh;
            mean_dh_h += dh * hr[c];
            dgain[c] += gr[c] * hr[c];
            dbias[c] += gr[c];
        }
        mean_dh = mean_dh / dn;
        mean_dh_h = mean_dh_h / dn;
        for c in 0..d {
            let dh = gr[c] * gain[c];
            dx[r * d + c] = is * (dh - mean_dh - hr[c] * mean_dh_h);
        }
    }
    (dx, dgain, dbias)
}

/// Layout of a packed batch: `batch` sequences of `seq_len` rows each, of
/// which the first `lens[b]` are valid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub seq_len: usize,
    pub lens: Vec<usize>,
}

impl SeqLayout {
    pub fn single(n: usize) -> Self {
        Self {
            seq_len: n,
            lens: vec![n],
        }
    }

    pub fn padded(lens: Vec<usize>) -> Self {
        let seq_len = lens.iter().copied().max().unwrap_or(0);
        Self { seq_len, lens }
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn rows(&self) -> usize {
        self.seq_len * self.lens.len()
    }
}

fn copy_head<T: Scalar>(src: &[T], d: usize, row0: usize, n: usize, col0: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * dh);
    for r in 0..n {
        let base = (row0 + r) * d + col0;
        out.extend_from_slice(&src[base..base + dh]);
    }
    out
}

fn add_head<T: Scalar>(dst: &mut [T], d: usize, row0: usize, n: usize, col0: usize, dh: usize, src: &[T]) {
    for r in 0..n {
        let base = (row0 + r) * d + col0;
        for c in 0..dh {
            dst[base + c] += src[r * dh + c];
        }
    }
}

/// Multi-head scaled dot-product attention on pre-projected `q, k, v`
/// (`rows × d`). Keys at positions `>= lens[b]` are masked out.
/// Returns the head outputs (`rows × d`) and the attention weights
/// (`batch × heads × seq_len × seq_len`).
pub fn attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    heads: usize,
    layout: &SeqLayout,
) -> (Vec<T>, Vec<T>) {
    let n = layout.seq_len;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); layout.batch() * heads * n * n];
    let mut scores = vec![T::zero(); n * n];
    for (b, &len) in layout.lens.iter().enumerate() {
        let row0 = b * n;
        for h in 0..heads {
            let qh = copy_head(q, d, row0, n, h * dh, dh);
            let kh = copy_head(k, d, row0, n, h * dh, dh);
            let vh = copy_head(v, d, row0, n, h * dh, dh);
            gemm(n, dh, n, &qh, false, &kh, true, &mut scores, false);
            let p = &mut probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
            for i in 0..n {
                let srow = &scores[i * n..(i + 1) * n];
                let prow = &mut p[i * n..(i + 1) * n];
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(srow[j] * scale);
                }
                let mut z = T::zero();
                for j in 0..len {
                    let e = (srow[j] * scale - mx).exp();
                    prow[j] = e;
                    z += e;
                }
                for pj in prow.iter_mut().take(len) {
                    *pj = *pj / z;
                }
            }
            let mut oh = vec![T::zero(); n * dh];
            gemm(n, n, dh, p, false, &vh, false, &mut oh, false);
            add_head(&mut out, d, row0, n, h * dh, dh, &oh);
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d: usize,
    heads: usize,
    layout: &SeqLayout,
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = layout.seq_len;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); n * n];
    let mut buf = vec![T::zero(); n * dh];
    for b in 0..layout.batch() {
        let row0 = b * n;
        for h in 0..heads {
            let p = &probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
            let qh = copy_head(q, d, row0, n, h * dh, dh);
            let kh = copy_head(k, d, row0, n, h * dh, dh);
            let vh = copy_head(v, d, row0, n, h * dh, dh);
            let gh = copy_head(g, d, row0, n, h * dh, dh);
            // dV = P^T dO
            gemm(n, n, dh, p, true, &gh, false, &mut buf, false);
            add_head(&mut dv, d, row0, n, h * dh, dh, &buf);
            // dP = dO V^T
            gemm(n, dh, n, &gh, false, &vh, true, &mut dp, false);
            for i in 0..n {
                let prow = &p[i * n..(i + 1) * n];
                let drow = &mut dp[i * n..(i + 1) * n];
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    drow[j] = prow[j] * (drow[j] - dot) * scale;
                }
            }
            gemm(n, n, dh, &dp, false, &kh, false, &mut buf, false);
            add_head(&mut dq, d, row0, n, h * dh, dh, &buf);
            gemm(n, n, dh, &dp, true, &qh, false, &mut buf, false);
            add_head(&mut dk, d, row0, n, h * dh, dh, &buf);
        }
    }
    (dq, dk, dv)
}

/// Masked mean over the valid rows of each sequence: `batch × d`.
pub fn mean_pool<T: Scalar>(x: &[T], d: usize, layout: &SeqLayout) -> Vec<T> {
    let n = layout.seq_len;
    let mut out = vec![T::zero(); layout.batch() * d];
    for (b, &len) in layout.lens.iter().enumerate() {
        let orow = &mut out[b * d..(b + 1) * d];
        for t in 0..len {
            let xr = &x[(b * n + t) * d..(b * n + t + 1) * d];
            for c in 0..d {
                orow[c] += xr[c];
            }
        }
        let inv = T::one() / T::of(len.max(1) as f64);
        orow.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub fn mean_pool_backward<T: Scalar>(g: &[T], d: usize, layout: &SeqLayout) -> Vec<T> {
    let n = layout.seq_len;
    let mut dx = vec![T::zero(); layout.rows() * d];
    for (b, &len) in layout.lens.iter().enumerate() {
        let inv = T::one() / T::of(len.max(1) as f64);
        let grow = &g[b * d..(b + 1) * d];
        for t in 0..len {
            let dr = &mut dx[(b * n + t) * d..(b * n + t + 1) * d];
            for c in 0..d {
                dr[c] = grow[c] * inv;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_closed_forms() {
        assert_eq!(silu(0.0f64), 0.0);
        assert!((silu(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-6);
        assert!((silu(-1.0f64) + 0.268_941_421_369_995_1).abs() < 1e-6);
    }

    #[test]
    fn softplus_stable_branch() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((softplus(50.0f64) - 50.0).abs() < 1e-9);
        let small = softplus(-50.0f64);
        assert!(small > 0.0);
        assert!((small - (-50.0f64).exp()).abs() < 1e-30);
        assert!(softplus(1000.0f32).is_finite());
        assert!((softplus_inv(softplus(0.3f64)) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn conv_identity_and_delay_taps() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 + 1.0).collect(); // 5 rows, 2 channels
        let ident = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(causal_conv(&x, 2, &ident, 4, 5), x);
        let delay = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let y = causal_conv(&x, 2, &delay, 4, 5);
        assert_eq!(&y[..2], &[0.0, 0.0]);
        assert_eq!(&y[2..], &x[..8]);
    }

    #[test]
    fn conv_respects_sequence_boundaries() {
        let x = vec![1.0f64; 6]; // two sequences of 3 rows, 1 channel
        let delay = [0.0, 0.0, 1.0, 0.0];
        let y = causal_conv(&x, 1, &delay, 4, 3);
        assert_eq!(y, vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn attention_rows_are_stochastic_and_masked() {
        let d = 4;
        let layout = SeqLayout {
            seq_len: 3,
            lens: vec![2],
        };
        let q: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let k: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        let (_, p) = attention(&q, &k, &q, d, 2, &layout);
        for row in p.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert_eq!(row[2], 0.0);
        }
    }
}
