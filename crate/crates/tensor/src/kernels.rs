//! Dense loops shared by forward and backward rules.

/// `c += a · b` for row/column-strided operands; `a` is `n×k`, `b` is `k×m`,
/// `c` is a dense row-major `n×m` block. The summation order over `k` for each
/// output element depends only on `k`, so a row's result does not change with
/// the number of rows computed alongside it.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    c: &mut [f64],
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    n: usize,
    k: usize,
    m: usize,
) {
    assert!(c.len() >= n * m && a.len() >= n * k && b.len() >= k * m);
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the strides can reach:
    // a[i*rsa + p*csa] < n*k, b[p*rsb + j*csb] < k*m, c[i*m + j] < n*m.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `c[n,m] += a[n,k] · b[k,m]`
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    gemm_acc(c, a, (k as isize, 1), b, (m as isize, 1), n, k, m);
}

/// `c[k,m] += a[n,k]ᵀ · g[n,m]`
pub fn matmul_tn_acc(c: &mut [f64], a: &[f64], g: &[f64], n: usize, k: usize, m: usize) {
    gemm_acc(c, a, (1, k as isize), g, (m as isize, 1), k, n, m);
}

/// `c[n,k] += g[n,m] · b[k,m]ᵀ`
pub fn matmul_nt_acc(c: &mut [f64], g: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    gemm_acc(c, g, (m as isize, 1), b, (1, m as isize), n, m, k);
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            z += *y;
        }
        for y in yr.iter_mut() {
            *y /= z;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each element of `out_shape` (row-major), the flat index into a tensor
/// whose per-axis strides (in output axis order) are `src_strides`.
pub fn gather_index(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    if n == 0 {
        return idx;
    }
    let rank = out_shape.len();
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        idx.push(offset);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    idx
}
