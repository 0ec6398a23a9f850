//! Row-major kernels with explicit backward passes. Activations are
//! `rows × dim` slices; weights are `in × out`.

use super::Real;

pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b`.
pub fn linear_forward<T: Real>(x: &[T], rows: usize, w: &[T], b: &[T], in_dim: usize, out_dim: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), rows * in_dim);
    debug_assert_eq!(w.len(), in_dim * out_dim);
    let mut y = Vec::with_capacity(rows * out_dim);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let yr = &mut y[r * out_dim..(r + 1) * out_dim];
        for (i, xi) in xr.iter().enumerate() {
            if *xi == T::zero() {
                continue;
            }
            let wi = &w[i * out_dim..(i + 1) * out_dim];
            for (yv, wv) in yr.iter_mut().zip(wi) {
                *yv += *xi * *wv;
            }
        }
    }
    y
}

/// Accumulates `dW += xᵀ dy`, `db += Σ dy` and returns `dx = dy Wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    rows: usize,
    w: &[T],
    dy: &[T],
    in_dim: usize,
    out_dim: usize,
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * in_dim];
    for r in 0..rows {
        let dyr = &dy[r * out_dim..(r + 1) * out_dim];
        for (acc, g) in db.iter_mut().zip(dyr) {
            *acc += *g;
        }
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
        for i in 0..in_dim {
            let wi = &w[i * out_dim..(i + 1) * out_dim];
            let dwi = &mut dw[i * out_dim..(i + 1) * out_dim];
            let xi = xr[i];
            for (dwv, g) in dwi.iter_mut().zip(dyr) {
                *dwv += xi * *g;
            }
            dxr[i] = dot(wi, dyr);
        }
    }
    dx
}

/// Dot product with eight independent accumulators so the reduction
/// vectorizes; the summation order is fixed.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub struct LayerNormCache<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layernorm_forward<T: Real>(x: &[T], rows: usize, dim: usize, gamma: &[T], beta: &[T]) -> (Vec<T>, LayerNormCache<T>) {
    let mut y = vec![T::zero(); rows * dim];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    let n = T::of(dim as f64);
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mu = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|v| (*v - mu) * (*v - mu)).sum::<T>() / n;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        for j in 0..dim {
            y[r * dim + j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
        }
        mean.push(mu);
        rstd.push(rs);
    }
    (y, LayerNormCache { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<T: Real>(
    dy: &[T],
    x: &[T],
    cache: &LayerNormCache<T>,
    gamma: &[T],
    rows: usize,
    dim: usize,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * dim];
    let n = T::of(dim as f64);
    let mut xhat = vec![T::zero(); dim];
    let mut dnorm = vec![T::zero(); dim];
    for r in 0..rows {
        let (mu, rs) = (cache.mean[r], cache.rstd[r]);
        let mut mean_dnorm = T::zero();
        let mut mean_dnorm_xhat = T::zero();
        for j in 0..dim {
            xhat[j] = (x[r * dim + j] - mu) * rs;
            let g = dy[r * dim + j];
            dnorm[j] = g * gamma[j];
            dgamma[j] += g * xhat[j];
            dbeta[j] += g;
            mean_dnorm += dnorm[j];
            mean_dnorm_xhat += dnorm[j] * xhat[j];
        }
        mean_dnorm /= n;
        mean_dnorm_xhat /= n;
        for j in 0..dim {
            dx[r * dim + j] = rs * (dnorm[j] - mean_dnorm - xhat[j] * mean_dnorm_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let inner = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let x3 = x * x * x;
    let t = (c * (x + T::of(0.044715) * x3)).tanh();
    let sech2 = T::one() - t * t;
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * sech2 * c * (T::one() + T::of(3.0 * 0.044715) * x * x)
}

/// Causal multi-head attention over one sequence. `qkv` rows are
/// `[q | k | v]`, each `dim` wide. Returns the merged head outputs and the
/// attention probabilities `heads × len × len` (zero above the diagonal).
pub fn attention_forward<T: Real>(qkv: &[T], len: usize, dim: usize, heads: usize) -> (Vec<T>, Vec<T>) {
    let hd = dim / heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let stride = 3 * dim;
    let mut y = vec![T::zero(); len * dim];
    let mut att = vec![T::zero(); heads * len * len];
    for h in 0..heads {
        for t in 0..len {
            let q = &qkv[t * stride + h * hd..t * stride + (h + 1) * hd];
            let row = &mut att[(h * len + t) * len..(h * len + t + 1) * len];
            let mut max = T::neg_infinity();
            for s in 0..=t {
                let k = &qkv[s * stride + dim + h * hd..s * stride + dim + (h + 1) * hd];
                let score = q.iter().zip(k).map(|(a, b)| *a * *b).sum::<T>() * scale;
                row[s] = score;
                max = max.max(score);
            }
            let mut total = T::zero();
            for v in row.iter_mut().take(t + 1) {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut().take(t + 1) {
                *v /= total;
            }
            let yt = &mut y[t * dim + h * hd..t * dim + (h + 1) * hd];
            for s in 0..=t {
                let p = row[s];
                let v = &qkv[s * stride + 2 * dim + h * hd..s * stride + 2 * dim + (h + 1) * hd];
                for (o, vv) in yt.iter_mut().zip(v) {
                    *o += p * *vv;
                }
            }
        }
    }
    (y, att)
}

pub fn attention_backward<T: Real>(dy: &[T], qkv: &[T], att: &[T], len: usize, dim: usize, heads: usize) -> Vec<T> {
    let hd = dim / heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let stride = 3 * dim;
    let mut dqkv = vec![T::zero(); len * stride];
    let mut datt = vec![T::zero(); len];
    for h in 0..heads {
        for t in 0..len {
            let row = &att[(h * len + t) * len..(h * len + t + 1) * len];
            let dyt = &dy[t * dim + h * hd..t * dim + (h + 1) * hd];
            let mut weighted = T::zero();
            for s in 0..=t {
                let voff = s * stride + 2 * dim + h * hd;
                let mut d = T::zero();
                for i in 0..hd {
                    d += dyt[i] * qkv[voff + i];
                    dqkv[voff + i] += row[s] * dyt[i];
                }
                datt[s] = d;
                weighted += row[s] * d;
            }
            let qoff = t * stride + h * hd;
            for s in 0..=t {
                let dscore = row[s] * (datt[s] - weighted) * scale;
                if dscore == T::zero() {
                    continue;
                }
                let koff = s * stride + dim + h * hd;
                for i in 0..hd {
                    let (qi, ki) = (qkv[qoff + i], qkv[koff + i]);
                    dqkv[qoff + i] += dscore * ki;
                    dqkv[koff + i] += dscore * qi;
                }
            }
        }
    }
    dqkv
}
