//! Raw slice kernels shared by the tape ops and the instrumented forward.
//!
//! Matrix kernels work on `batch` stacked row-major matrices. Each output
//! element is accumulated in increasing index order of the contracted
//! dimension regardless of threading.

use crate::counter;
use crate::par;
use crate::scalar::Scalar;

/// `out[b] = a[b] (rows x inner) * b[b] (inner x cols)`.
pub fn matmul_nn<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    rows: usize,
    inner: usize,
    cols: usize,
) -> Vec<T> {
    counter::record_macs((batch * rows * inner * cols) as u64);
    let mut out = vec![T::zero(); batch * rows * cols];
    par::for_each_chunk(&mut out, cols, |row_idx, out_row| {
        let bi = row_idx / rows;
        let a_row = &a[row_idx * inner..(row_idx + 1) * inner];
        let b_mat = &b[bi * inner * cols..(bi + 1) * inner * cols];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b_mat[p * cols..(p + 1) * cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// `out[b] = a[b] (rows x inner) * bt[b]^T` where `bt[b]` is `cols x inner`.
pub fn matmul_nt<T: Scalar>(
    a: &[T],
    bt: &[T],
    batch: usize,
    rows: usize,
    inner: usize,
    cols: usize,
) -> Vec<T> {
    counter::record_macs((batch * rows * inner * cols) as u64);
    let mut out = vec![T::zero(); batch * rows * cols];
    par::for_each_chunk(&mut out, cols, |row_idx, out_row| {
        let bi = row_idx / rows;
        let a_row = &a[row_idx * inner..(row_idx + 1) * inner];
        let b_mat = &bt[bi * cols * inner..(bi + 1) * cols * inner];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b_mat[j * inner..(j + 1) * inner];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            *o = acc;
        }
    });
    out
}

/// `out[b] = a[b]^T * c[b]` where `a[b]` is `rows x inner` and `c[b]` is
/// `rows x cols`; the result is `inner x cols`.
pub fn matmul_tn<T: Scalar>(
    a: &[T],
    c: &[T],
    batch: usize,
    rows: usize,
    inner: usize,
    cols: usize,
) -> Vec<T> {
    counter::record_macs((batch * rows * inner * cols) as u64);
    let mut out = vec![T::zero(); batch * inner * cols];
    par::for_each_chunk(&mut out, cols, |row_idx, out_row| {
        let bi = row_idx / inner;
        let p = row_idx % inner;
        let a_mat = &a[bi * rows * inner..(bi + 1) * rows * inner];
        let c_mat = &c[bi * rows * cols..(bi + 1) * rows * cols];
        for i in 0..rows {
            let av = a_mat[i * inner + p];
            let c_row = &c_mat[i * cols..(i + 1) * cols];
            for (o, &cv) in out_row.iter_mut().zip(c_row) {
                *o = *o + av * cv;
            }
        }
    });
    out
}

/// Row softmax with max subtraction; rows have length `cols`.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    counter::record_overhead(3 * x.len() as u64);
    let mut out = x.to_vec();
    par::for_each_chunk(&mut out, cols, |_, row| {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    });
    out
}

/// Softmax vector-Jacobian product: `dx = y * (dy - sum(dy * y))` per row.
pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    par::for_each_chunk(&mut out, cols, |r, dx| {
        let yr = &y[r * cols..(r + 1) * cols];
        let gr = &dy[r * cols..(r + 1) * cols];
        let dot = yr
            .iter()
            .zip(gr)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((o, &yv), &gv) in dx.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    });
    out
}

/// Saved forward state of a channel layer norm.
pub struct LayerNormSaved<T> {
    pub normalized: Vec<T>,
    /// One `1/sqrt(var + eps)` per (batch, position).
    pub inv_std: Vec<T>,
}

/// Normalize over the channel axis of an NCHW buffer at every (n, y, x).
pub fn layer_norm<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, LayerNormSaved<T>) {
    counter::record_overhead(6 * x.len() as u64);
    let mut normalized = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); n * plane];
    let inv_c = T::one() / T::of(c as f64);
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut mean = T::zero();
            for ch in 0..c {
                mean = mean + x[base + ch * plane + p];
            }
            mean = mean * inv_c;
            let mut var = T::zero();
            for ch in 0..c {
                let d = x[base + ch * plane + p] - mean;
                var = var + d * d;
            }
            var = var * inv_c;
            let is = T::one() / (var + eps).sqrt();
            inv_std[b * plane + p] = is;
            for ch in 0..c {
                let i = base + ch * plane + p;
                normalized[i] = (x[i] - mean) * is;
            }
        }
    }
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for p in 0..plane {
                y[off + p] = gamma[ch] * normalized[off + p] + beta[ch];
            }
        }
    }
    (y, LayerNormSaved { normalized, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    saved: &LayerNormSaved<T>,
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let xhat = &saved.normalized;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let inv_c = T::one() / T::of(c as f64);
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for ch in 0..c {
                let i = base + ch * plane + p;
                let g = dy[i] * gamma[ch];
                mean_g = mean_g + g;
                mean_gx = mean_gx + g * xhat[i];
            }
            mean_g = mean_g * inv_c;
            mean_gx = mean_gx * inv_c;
            let is = saved.inv_std[b * plane + p];
            for ch in 0..c {
                let i = base + ch * plane + p;
                let g = dy[i] * gamma[ch];
                dx[i] = is * (g - mean_g - xhat[i] * mean_gx);
            }
        }
        for ch in 0..c {
            let off = base + ch * plane;
            for p in 0..plane {
                dgamma[ch] = dgamma[ch] + dy[off + p] * xhat[off + p];
                dbeta[ch] = dbeta[ch] + dy[off + p];
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                for p in 0..k {
                    out[i * c + j] += a[i * k + p] * b[p * c + j];
                }
            }
        }
        out
    }

    #[test]
    fn transposed_variants_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let want = naive(&a, &b, 2, 3, 4);
        assert_eq!(matmul_nn(&a, &b, 1, 2, 3, 4), want);
        let mut bt = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        let nt = matmul_nt(&a, &bt, 1, 2, 3, 4);
        for (x, y) in nt.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }
        // a^T c with a 2x3, c = want (2x4) -> 3x4
        let tn = matmul_tn(&a, &want, 1, 2, 3, 4);
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for p in 0..3 {
                at[p * 2 + i] = a[i * 3 + p];
            }
        }
        let want_tn = naive(&at, &want, 3, 2, 4);
        for (x, y) in tn.iter().zip(&want_tn) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
