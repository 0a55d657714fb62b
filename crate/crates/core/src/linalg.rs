//! Thin helpers over `faer` for the dense kernels used throughout.

use faer::linalg::matmul::triangular::{self, BlockStructure};
use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::linalg::triangular_solve::solve_lower_triangular_in_place;
use faer::{Accum, ColRef, Mat, MatRef, Par, Side};

use crate::error::{Error, Result};

pub use faer::linalg::solvers::Llt;

/// Parallelism used for a single dense kernel.
///
/// Inside a replication worker the kernels run sequentially; the outer
/// replication loop already saturates the pool.
pub fn par() -> Par {
    #[cfg(feature = "parallel")]
    {
        if rayon::current_thread_index().is_none() {
            return Par::rayon(0);
        }
    }
    Par::Seq
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// `X v`
pub fn mat_vec(x: MatRef<'_, f64>, v: &[f64]) -> Vec<f64> {
    assert_eq!(x.ncols(), v.len());
    let mut out = vec![0.0; x.nrows()];
    for (j, &vj) in v.iter().enumerate() {
        if vj == 0.0 {
            continue;
        }
        let col = x.col(j);
        for (o, xi) in out.iter_mut().zip(col.iter()) {
            *o += xi * vj;
        }
    }
    out
}

/// `Xᵀ v`
pub fn mat_t_vec(x: MatRef<'_, f64>, v: &[f64]) -> Vec<f64> {
    assert_eq!(x.nrows(), v.len());
    (0..x.ncols())
        .map(|j| x.col(j).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Column `j` of `X` as a contiguous slice (faer matrices are column-major).
pub fn col(x: MatRef<'_, f64>, j: usize) -> &[f64] {
    x.col(j).try_as_col_major().expect("column-major storage").as_slice()
}

/// `XᵀX` with only the lower half computed, then mirrored.
pub fn gram(x: MatRef<'_, f64>) -> Mat<f64> {
    let p = x.ncols();
    let mut g = Mat::<f64>::zeros(p, p);
    triangular::matmul(
        g.as_mut(),
        BlockStructure::TriangularLower,
        Accum::Replace,
        x.transpose(),
        BlockStructure::Rectangular,
        x,
        BlockStructure::Rectangular,
        1.0,
        par(),
    );
    symmetrize_from_lower(&mut g);
    g
}

/// `X Xᵀ` (n×n).
pub fn outer_gram(x: MatRef<'_, f64>) -> Mat<f64> {
    gram(x.transpose())
}

/// `Xᵀ diag(w) X` for nonnegative weights.
pub fn weighted_gram(x: MatRef<'_, f64>, w: &[f64]) -> Mat<f64> {
    assert_eq!(x.nrows(), w.len());
    let sw: Vec<f64> = w.iter().map(|v| v.max(0.0).sqrt()).collect();
    let scaled = Mat::<f64>::from_fn(x.nrows(), x.ncols(), |i, j| sw[i] * x[(i, j)]);
    gram(scaled.as_ref())
}

pub fn symmetrize_from_lower(m: &mut Mat<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            m[(i, j)] = m[(j, i)];
        }
    }
}

pub fn cholesky(m: MatRef<'_, f64>, what: &str) -> Result<Llt<f64>> {
    m.llt(Side::Lower)
        .map_err(|_| Error::NotPositiveDefinite(what.to_string()))
}

/// Solves `A x = b` given the Cholesky factor of `A`.
pub fn chol_solve(llt: &Llt<f64>, b: &[f64]) -> Vec<f64> {
    let mut rhs = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
    llt.solve_in_place(rhs.as_mut());
    (0..b.len()).map(|i| rhs[(i, 0)]).collect()
}

pub fn chol_inverse(llt: &Llt<f64>) -> Mat<f64> {
    llt.inverse()
}

/// `L⁻¹ B` for the lower Cholesky factor `L`.
pub fn lower_solve(llt: &Llt<f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = b.to_owned();
    solve_lower_triangular_in_place(llt.L(), out.as_mut(), par());
    out
}

/// Squared Frobenius norm of `L⁻¹`, i.e. `trace[A⁻¹]`.
pub fn chol_trace_inverse(llt: &Llt<f64>) -> f64 {
    let n = llt.L().nrows();
    let inv_l = lower_solve(llt, Mat::<f64>::identity(n, n).as_ref());
    frob_sq(inv_l.as_ref())
}

pub fn frob_sq(m: MatRef<'_, f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..m.ncols() {
        for v in m.col(j).iter() {
            s += v * v;
        }
    }
    s
}

pub fn mat_mul(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::<f64>::zeros(a.nrows(), b.ncols());
    faer::linalg::matmul::matmul(out.as_mut(), Accum::Replace, a, b, 1.0, par());
    out
}

pub fn col_ref(v: &[f64]) -> ColRef<'_, f64> {
    ColRef::from_slice(v)
}

/// Largest eigenvalue of a symmetric PSD operator given by `apply`, by power iteration.
pub fn power_iteration(dim: usize, iters: usize, mut apply: impl FnMut(&[f64]) -> Vec<f64>) -> f64 {
    if dim == 0 {
        return 0.0;
    }
    let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64).collect();
    let nv = norm_sq(&v).sqrt();
    v.iter_mut().for_each(|x| *x /= nv);
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = apply(&v);
        let nw = norm_sq(&w).sqrt();
        if nw == 0.0 {
            return 0.0;
        }
        lambda = dot(&v, &w);
        v = w.into_iter().map(|x| x / nw).collect();
    }
    lambda.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Mat<f64> {
        Mat::from_fn(5, 3, |i, j| ((i * 3 + j * 5) % 7) as f64 - 3.0 + (i == j) as u8 as f64)
    }

    #[test]
    fn gram_matches_naive() {
        let x = small();
        let g = gram(x.as_ref());
        for a in 0..3 {
            for b in 0..3 {
                let naive: f64 = (0..5).map(|i| x[(i, a)] * x[(i, b)]).sum();
                assert!((g[(a, b)] - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weighted_gram_and_solve() {
        let x = small();
        let w = [1.0, 2.0, 0.5, 0.0, 3.0];
        let g = weighted_gram(x.as_ref(), &w);
        for a in 0..3 {
            for b in 0..3 {
                let naive: f64 = (0..5).map(|i| w[i] * x[(i, a)] * x[(i, b)]).sum();
                assert!((g[(a, b)] - naive).abs() < 1e-12);
            }
        }
        let llt = cholesky(g.as_ref(), "test").unwrap();
        let b = [1.0, -2.0, 0.5];
        let sol = chol_solve(&llt, &b);
        let back = mat_vec(g.as_ref(), &sol);
        for (u, v) in back.iter().zip(b) {
            assert!((u - v).abs() < 1e-10);
        }
        let inv = chol_inverse(&llt);
        let tr: f64 = (0..3).map(|i| inv[(i, i)]).sum();
        assert!((tr - chol_trace_inverse(&llt)).abs() < 1e-10);
    }

    #[test]
    fn power_iteration_diag() {
        let d = [1.0, 4.0, 2.0];
        let l = power_iteration(3, 200, |v| v.iter().zip(d).map(|(a, b)| a * b).collect());
        assert!((l - 4.0).abs() < 1e-8);
    }
}
