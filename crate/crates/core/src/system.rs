//! The curvature system `H = (1/n) X_Sᵀ D X_S + diag(c_S)` on a coordinate subset.
//!
//! Newton steps solve with `H`, and the derivative matrix of the estimator is
//! `Â = H⁻¹/n` on the same subset (zero elsewhere). When `|S| > n` and the
//! curvature is positive the system is factored through the `n × n` matrix
//! `M = I + W C⁻¹ Wᵀ` with `W = (D/n)^{1/2} X_S`.

use std::sync::Arc;

use faer::Mat;

use crate::error::{Error, Result};
use crate::linalg::{self, Llt};
use crate::model::{Covariance, Design};

#[derive(Debug)]
enum Factor {
    Empty,
    Dense(Llt<f64>),
    Woodbury { inv_c: Vec<f64>, m: Llt<f64> },
}

#[derive(Debug)]
pub struct CurvatureSystem {
    design: Arc<Design>,
    /// `None` means all coordinates.
    coords: Option<Vec<usize>>,
    /// `(dᵢ/n)^{1/2}`
    sqrt_w: Vec<f64>,
    diag: Vec<f64>,
    factor: Factor,
}

impl CurvatureSystem {
    /// Factors `H + shift·I`. `d` is the loss curvature per observation and
    /// `diag` the penalty curvature per selected coordinate.
    pub fn build(design: Arc<Design>, d: &[f64], coords: Option<Vec<usize>>, diag: Vec<f64>, shift: f64) -> Result<Self> {
        let n = design.n();
        let k = coords.as_ref().map_or(design.p(), |c| c.len());
        assert_eq!(d.len(), n);
        assert_eq!(diag.len(), k);
        let nf = n as f64;
        let sqrt_w: Vec<f64> = d.iter().map(|v| (v.max(0.0) / nf).sqrt()).collect();
        let diag: Vec<f64> = diag.into_iter().map(|c| c + shift).collect();
        let mut sys = Self { design, coords, sqrt_w, diag, factor: Factor::Empty };
        if k == 0 {
            return Ok(sys);
        }
        let min_c = sys.diag.iter().copied().fold(f64::INFINITY, f64::min);
        sys.factor = if k > n && min_c > 0.0 {
            let inv_c: Vec<f64> = sys.diag.iter().map(|c| 1.0 / c).collect();
            let m = sys.woodbury_core(&inv_c);
            let llt = linalg::cholesky(m.as_ref(), "I + W C⁻¹ Wᵀ").map_err(|_| Error::Singular("woodbury core".into()))?;
            Factor::Woodbury { inv_c, m: llt }
        } else {
            let w = sys.weighted_columns();
            let mut h = linalg::gram(w.as_ref());
            for a in 0..k {
                h[(a, a)] += sys.diag[a];
            }
            let llt = linalg::cholesky(h.as_ref(), "curvature system").map_err(|_| {
                Error::Singular(format!("Xᵀ D X + n·curvature is singular on {k} coordinates"))
            })?;
            Factor::Dense(llt)
        };
        Ok(sys)
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn coords(&self) -> Option<&[usize]> {
        self.coords.as_deref()
    }

    pub fn is_woodbury(&self) -> bool {
        matches!(self.factor, Factor::Woodbury { .. })
    }

    /// `W = (D/n)^{1/2} X_S` (n × k).
    fn weighted_columns(&self) -> Mat<f64> {
        let x = self.design.x();
        let n = x.nrows();
        match &self.coords {
            None => Mat::from_fn(n, x.ncols(), |i, j| self.sqrt_w[i] * x[(i, j)]),
            Some(c) => Mat::from_fn(n, c.len(), |i, a| self.sqrt_w[i] * x[(i, c[a])]),
        }
    }

    fn uniform_inv_c(inv_c: &[f64]) -> Option<f64> {
        let first = *inv_c.first()?;
        inv_c.iter().all(|v| *v == first).then_some(first)
    }

    fn woodbury_core(&self, inv_c: &[f64]) -> Mat<f64> {
        let n = self.design.n();
        let mut m = match (Self::uniform_inv_c(inv_c), &self.coords) {
            // reuse X Xᵀ: M = I + (1/c) diag(√w) X Xᵀ diag(√w)
            (Some(ic), None) => {
                let outer = self.design.outer_gram();
                Mat::from_fn(n, n, |i, j| ic * self.sqrt_w[i] * outer[(i, j)] * self.sqrt_w[j])
            }
            _ => {
                let mut w = self.weighted_columns();
                for (a, ic) in inv_c.iter().enumerate() {
                    let s = ic.sqrt();
                    for i in 0..n {
                        w[(i, a)] *= s;
                    }
                }
                linalg::outer_gram(w.as_ref())
            }
        };
        for i in 0..n {
            m[(i, i)] += 1.0;
        }
        m
    }

    /// `X_S v`
    fn x_s(&self, v: &[f64]) -> Vec<f64> {
        let x = self.design.x();
        match &self.coords {
            None => linalg::mat_vec(x, v),
            Some(c) => {
                let mut out = vec![0.0; x.nrows()];
                for (a, &j) in c.iter().enumerate() {
                    if v[a] != 0.0 {
                        for (o, xi) in out.iter_mut().zip(linalg::col(x, j)) {
                            *o += xi * v[a];
                        }
                    }
                }
                out
            }
        }
    }

    /// `X_Sᵀ u`
    fn x_s_t(&self, u: &[f64]) -> Vec<f64> {
        let x = self.design.x();
        match &self.coords {
            None => linalg::mat_t_vec(x, u),
            Some(c) => c.iter().map(|&j| linalg::dot(linalg::col(x, j), u)).collect(),
        }
    }

    /// `H⁻¹ v`
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim());
        match &self.factor {
            Factor::Empty => Vec::new(),
            Factor::Dense(llt) => linalg::chol_solve(llt, v),
            Factor::Woodbury { inv_c, m } => {
                let cv: Vec<f64> = v.iter().zip(inv_c).map(|(a, b)| a * b).collect();
                let wv: Vec<f64> = self.x_s(&cv).iter().zip(&self.sqrt_w).map(|(a, b)| a * b).collect();
                let z = linalg::chol_solve(m, &wv);
                let wz: Vec<f64> = z.iter().zip(&self.sqrt_w).map(|(a, b)| a * b).collect();
                let back = self.x_s_t(&wz);
                cv.iter().zip(back.iter().zip(inv_c)).map(|(c, (b, ic))| c - ic * b).collect()
            }
        }
    }

    /// `hᵢ = (W H⁻¹ Wᵀ)ᵢᵢ`, so that `df̂ = Σ hᵢ` and `tr[DXÂXᵀD] = Σ dᵢhᵢ`.
    pub fn leverages(&self) -> Vec<f64> {
        let n = self.design.n();
        match &self.factor {
            Factor::Empty => vec![0.0; n],
            Factor::Dense(llt) => {
                let wt = self.weighted_columns().transpose().to_owned();
                let z = linalg::lower_solve(llt, wt.as_ref());
                (0..n).map(|i| z.col(i).iter().map(|v| v * v).sum()).collect()
            }
            Factor::Woodbury { m, .. } => {
                // W H⁻¹ Wᵀ = I − M⁻¹
                let inv = linalg::lower_solve(m, Mat::<f64>::identity(n, n).as_ref());
                (0..n).map(|i| 1.0 - inv.col(i).iter().map(|v| v * v).sum::<f64>()).collect()
            }
        }
    }

    /// `H⁻¹` as a dense `k × k` matrix.
    pub fn inverse(&self) -> Mat<f64> {
        let k = self.dim();
        match &self.factor {
            Factor::Dense(llt) => linalg::chol_inverse(llt),
            _ => {
                let mut out = Mat::<f64>::zeros(k, k);
                let mut e = vec![0.0; k];
                for a in 0..k {
                    e[a] = 1.0;
                    let col = self.solve(&e);
                    e[a] = 0.0;
                    for b in 0..k {
                        out[(b, a)] = col[b];
                    }
                }
                out
            }
        }
    }

    /// `tr[Σ_SS H⁻¹]`
    pub fn trace_sigma_inverse(&self, cov: &Covariance) -> f64 {
        let k = self.dim();
        if k == 0 {
            return 0.0;
        }
        if let Some(s) = cov.isotropic_scale() {
            let tr = match &self.factor {
                Factor::Empty => 0.0,
                Factor::Dense(llt) => linalg::chol_trace_inverse(llt),
                Factor::Woodbury { inv_c, m } => {
                    // tr[C⁻¹] − ‖L_M⁻¹ W C⁻¹‖²_F
                    let mut g = self.weighted_columns();
                    for (a, ic) in inv_c.iter().enumerate() {
                        for i in 0..g.nrows() {
                            g[(i, a)] *= ic;
                        }
                    }
                    inv_c.iter().sum::<f64>() - linalg::frob_sq(linalg::lower_solve(m, g.as_ref()).as_ref())
                }
            };
            return s * tr;
        }
        let full = cov.matrix();
        let sigma_ss = match &self.coords {
            None => full,
            Some(c) => Mat::from_fn(k, k, |a, b| full[(c[a], c[b])]),
        };
        let inv = self.inverse();
        let mut tr = 0.0;
        for a in 0..k {
            for b in 0..k {
                tr += sigma_ss[(a, b)] * inv[(b, a)];
            }
        }
        tr
    }

    /// Largest eigenvalue of `H⁻¹`.
    pub fn inverse_op_norm(&self) -> f64 {
        linalg::power_iteration(self.dim(), 200, |v| self.solve(v))
    }
}
