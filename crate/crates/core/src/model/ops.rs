//! Dense kernels used by the transformer: strided GEMM, linear layers,
//! layer norm and GELU, each with its backward pass.

/// A strided 2-D view into a flat buffer: element `(i, j)` lives at
/// `offset + i*rs + j*cs`.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub const fn rows(offset: usize, row_stride: usize) -> Self {
        View {
            offset,
            rs: row_stride,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix with the given row stride.
    pub const fn transposed(offset: usize, row_stride: usize) -> Self {
        View {
            offset,
            rs: 1,
            cs: row_stride,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `C = alpha·A·B + beta·C` with `A: m×k`, `B: k×n`, `C: m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.rs + j * cv.cs;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(av.last_index(m, k) < a.len(), "gemm: A view out of bounds");
    assert!(bv.last_index(k, n) < b.len(), "gemm: B view out of bounds");
    assert!(cv.last_index(m, n) < c.len(), "gemm: C view out of bounds");
    // SAFETY: the three views were bounds-checked above, strides are
    // non-negative, and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// `y[n, out] = x[n, in] · w[in, out] + b[out]`
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, d_in: usize, d_out: usize, y: &mut [f64]) {
    for row in y[..n * d_out].chunks_exact_mut(d_out) {
        row.copy_from_slice(b);
    }
    gemm(n, d_in, d_out, 1.0, x, View::rows(0, d_in), w, View::rows(0, d_out), 1.0, y, View::rows(0, d_out));
}

/// Accumulates `dw += xᵀ·dy`, `db += Σ dy` and `dx += dy·wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    d_in: usize,
    d_out: usize,
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    gemm(d_in, n, d_out, 1.0, x, View::transposed(0, d_in), dy, View::rows(0, d_out), 1.0, dw, View::rows(0, d_out));
    for row in dy[..n * d_out].chunks_exact(d_out) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    gemm(n, d_out, d_in, 1.0, dy, View::rows(0, d_out), w, View::transposed(0, d_out), 1.0, dx, View::rows(0, d_in));
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm; records per-row mean and reciprocal std for backward.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    n: usize,
    d: usize,
    y: &mut [f64],
    mean: &mut [f64],
    rstd: &mut [f64],
) {
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        mean[r] = mu;
        rstd[r] = rs;
        let out = &mut y[r * d..(r + 1) * d];
        for i in 0..d {
            out[i] = (row[i] - mu) * rs * gain[i] + bias[i];
        }
    }
}

/// Accumulates into `dx`, `dgain` and `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward(
    x: &[f64],
    gain: &[f64],
    mean: &[f64],
    rstd: &[f64],
    dy: &[f64],
    n: usize,
    d: usize,
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        let (mu, rs) = (mean[r], rstd[r]);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            let xhat = (row[i] - mu) * rs;
            let dxhat = g[i] * gain[i];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
            dgain[i] += g[i] * xhat;
            dbias[i] += g[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let out = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let xhat = (row[i] - mu) * rs;
            out[i] += rs * (g[i] * gain[i] - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_including_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &a, View::rows(0, k), &b, View::rows(0, n), 0.0, &mut c, View::rows(0, n));
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // Bᵀ stored as n×k, read back through a transposed view
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &a, View::rows(0, k), &bt, View::transposed(0, k), 0.0, &mut c2, View::rows(0, n));
        assert_eq!(c, c2);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layernorm_normalizes_rows() {
        let x = [1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 8.0];
        let (g, b) = ([1.0; 4], [0.0; 4]);
        let mut y = [0.0; 8];
        let (mut mu, mut rs) = ([0.0; 2], [0.0; 2]);
        layernorm_forward(&x, &g, &b, 2, 4, &mut y, &mut mu, &mut rs);
        for r in 0..2 {
            let row = &y[r * 4..r * 4 + 4];
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
