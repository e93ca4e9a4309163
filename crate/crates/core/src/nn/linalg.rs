//! Dense matrix kernels over row-major slices.
//!
//! Each output row is produced by exactly one task with a fixed summation
//! order, so results do not depend on the thread count.

use crate::exec;

/// `c[i][j] = sum_p a[i][p] * b[j][p] (+ bias[j])` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &[f64], b: &[f64], bias: Option<&[f64]>, m: usize, n: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    if n == 0 {
        return c;
    }
    exec::for_each_chunk_mut(&mut c, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, out) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut s = bias.map_or(0.0, |bb| bb[j]);
            s += dot(ar, br);
            *out = s;
        }
    });
    c
}

/// `dw[j][p] += sum_i dy[i][j] * x[i][p]` for `dy: m×n`, `x: m×k`, `dw: n×k`.
pub fn accumulate_outer(dy: &[f64], x: &[f64], dw: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(dw.len(), n * k);
    if k == 0 {
        return;
    }
    exec::for_each_chunk_mut(dw, k, |j, row| {
        for i in 0..m {
            let g = dy[i * n + j];
            if g != 0.0 {
                axpy(g, &x[i * k..(i + 1) * k], row);
            }
        }
    });
}

/// `dx[i][p] = sum_j dy[i][j] * w[j][p]` for `dy: m×n`, `w: n×k`.
pub fn matmul_nn(dy: &[f64], w: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(w.len(), n * k);
    let mut dx = vec![0.0; m * k];
    if k == 0 {
        return dx;
    }
    exec::for_each_chunk_mut(&mut dx, k, |i, row| {
        for j in 0..n {
            let g = dy[i * n + j];
            if g != 0.0 {
                axpy(g, &w[j * k..(j + 1) * k], row);
            }
        }
    });
    dx
}

/// Column sums of an `m×n` matrix added into `db`.
pub fn accumulate_column_sums(dy: &[f64], db: &mut [f64], m: usize, n: usize) {
    for i in 0..m {
        for (d, g) in db.iter_mut().zip(&dy[i * n..(i + 1) * n]) {
            *d += g;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // a = [[1,2],[3,4]], b rows = [[1,0],[1,1],[0,2]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 0.0, 1.0, 1.0, 0.0, 2.0];
        let c = matmul_nt(&a, &b, Some(&[0.5, 0.0, 0.0]), 2, 3, 2);
        assert_eq!(c, vec![1.5, 3.0, 4.0, 3.5, 7.0, 8.0]);
        let dx = matmul_nn(&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0], &b, 2, 3, 2);
        assert_eq!(dx, vec![1.0, 2.0, 1.0, 1.0]);
        let mut dw = vec![0.0; 6];
        accumulate_outer(&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0], &a, &mut dw, 2, 3, 2);
        assert_eq!(dw, vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0]);
    }
}
