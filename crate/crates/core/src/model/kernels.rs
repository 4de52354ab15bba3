//! Dense row-major kernels. Every reduction runs in a fixed order so results are bit-stable.

use core::f64::consts::{FRAC_1_SQRT_2, PI};

pub const LN_EPS: f64 = 1e-12;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[n, m] = x[n, k] · w[k, m] + b[m]`
pub fn linear(x: &[f64], w: &[f64], b: &[f64], rows: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), rows * k);
    debug_assert_eq!(w.len(), k * m);
    for i in 0..rows {
        let o = &mut out[i * m..(i + 1) * m];
        o.copy_from_slice(b);
        for (kk, &xv) in x[i * k..(i + 1) * k].iter().enumerate() {
            if xv != 0.0 {
                axpy(xv, &w[kk * m..(kk + 1) * m], o);
            }
        }
    }
}

/// Backward of [`linear`]: accumulates `dw += xᵀ·dy`, `db += Σ dy` and, when asked, writes
/// `dx = dy·wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    rows: usize,
    k: usize,
    m: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    for i in 0..rows {
        let dyi = &dy[i * m..(i + 1) * m];
        axpy(1.0, dyi, db);
        for (kk, &xv) in x[i * k..(i + 1) * k].iter().enumerate() {
            if xv != 0.0 {
                axpy(xv, dyi, &mut dw[kk * m..(kk + 1) * m]);
            }
        }
    }
    if let Some(dx) = dx {
        for i in 0..rows {
            let dyi = &dy[i * m..(i + 1) * m];
            for kk in 0..k {
                dx[i * k + kk] = dot(dyi, &w[kk * m..(kk + 1) * m]);
            }
        }
    }
}

/// Per-row normalization statistics kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct NormCache {
    pub normalized: alloc::vec::Vec<f64>,
    pub inv_std: alloc::vec::Vec<f64>,
}

/// Layer normalization over rows of width `dim`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], dim: usize, out: &mut [f64]) -> NormCache {
    let rows = x.len() / dim;
    let mut cache = NormCache {
        normalized: alloc::vec![0.0; x.len()],
        inv_std: alloc::vec![0.0; rows],
    };
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let inv_std = 1.0 / libm::sqrt(var + LN_EPS);
        cache.inv_std[r] = inv_std;
        for c in 0..dim {
            let xhat = (row[c] - mean) * inv_std;
            cache.normalized[r * dim + c] = xhat;
            out[r * dim + c] = xhat * gain[c] + bias[c];
        }
    }
    cache
}

/// Backward of [`layer_norm`]; overwrites `dx`.
pub fn layer_norm_backward(
    cache: &NormCache,
    gain: &[f64],
    dy: &[f64],
    dim: usize,
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
) {
    let rows = dy.len() / dim;
    let n = dim as f64;
    for r in 0..rows {
        let span = r * dim..(r + 1) * dim;
        let xhat = &cache.normalized[span.clone()];
        let dyr = &dy[span.clone()];
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for c in 0..dim {
            dgain[c] += dyr[c] * xhat[c];
            dbias[c] += dyr[c];
            let d = dyr[c] * gain[c];
            sum_d += d;
            sum_dx += d * xhat[c];
        }
        let inv_std = cache.inv_std[r];
        let dxr = &mut dx[span];
        for c in 0..dim {
            let d = dyr[c] * gain[c];
            dxr[c] = inv_std * (d - sum_d / n - xhat[c] * sum_dx / n);
        }
    }
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * PI);
    cdf + x * pdf
}

/// In-place softmax; returns the log of the normalizer.
pub fn softmax_in_place(v: &mut [f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    max + libm::log(sum)
}
