//! Gaussian designs and single-index responses.
//!
//! Rows of the design are iid `N(0, Σ)`; the response depends on a row only
//! through the index `xᵢᵀw` and an independent latent variable.

use std::sync::{Arc, OnceLock};

use faer::{Mat, MatRef};
use rand::Rng as _;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Llt};
use crate::rng::{rng_from_seed, Rng};

/// Covariance of the design rows, stored together with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct Covariance {
    p: usize,
    kind: CovKind,
}

#[derive(Debug, Clone)]
enum CovKind {
    /// `Σ = c I_p`
    Scaled(f64),
    Explicit {
        sigma: Mat<f64>,
        chol: Arc<Llt<f64>>,
        /// diagonal of Σ⁻¹
        omega_diag: Vec<f64>,
        op_norm: f64,
    },
}

impl Covariance {
    pub fn identity_scaled(p: usize, c: f64) -> Result<Self> {
        if p == 0 || !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "identity-scaled covariance needs p ≥ 1 and c > 0 (p = {p}, c = {c})"
            )));
        }
        Ok(Self { p, kind: CovKind::Scaled(c) })
    }

    pub fn identity(p: usize) -> Self {
        Self { p, kind: CovKind::Scaled(1.0) }
    }

    pub fn explicit(sigma: Mat<f64>) -> Result<Self> {
        let p = sigma.nrows();
        if p == 0 || sigma.ncols() != p {
            return Err(Error::NotPositiveDefinite("covariance must be square and nonempty".into()));
        }
        let scale = (0..p).fold(0.0f64, |m, i| m.max(sigma[(i, i)].abs())).max(1.0);
        for j in 0..p {
            for i in 0..j {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::NotPositiveDefinite(format!(
                        "covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let chol = linalg::cholesky(sigma.as_ref(), "covariance")?;
        let inv = linalg::chol_inverse(&chol);
        let omega_diag = (0..p).map(|j| inv[(j, j)]).collect();
        let op_norm = linalg::power_iteration(p, 500, |v| linalg::mat_vec(sigma.as_ref(), v));
        Ok(Self {
            p,
            kind: CovKind::Explicit { sigma, chol: Arc::new(chol), omega_diag, op_norm },
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// `Some(c)` when `Σ = c I`.
    pub fn isotropic_scale(&self) -> Option<f64> {
        match self.kind {
            CovKind::Scaled(c) => Some(c),
            CovKind::Explicit { .. } => None,
        }
    }

    pub fn matrix(&self) -> Mat<f64> {
        match &self.kind {
            CovKind::Scaled(c) => Mat::from_fn(self.p, self.p, |i, j| if i == j { *c } else { 0.0 }),
            CovKind::Explicit { sigma, .. } => sigma.clone(),
        }
    }

    /// `Σ b`
    pub fn apply(&self, b: &[f64]) -> Vec<f64> {
        match &self.kind {
            CovKind::Scaled(c) => b.iter().map(|v| c * v).collect(),
            CovKind::Explicit { sigma, .. } => linalg::mat_vec(sigma.as_ref(), b),
        }
    }

    /// `Σ⁻¹ u`
    pub fn solve(&self, u: &[f64]) -> Vec<f64> {
        match &self.kind {
            CovKind::Scaled(c) => u.iter().map(|v| v / c).collect(),
            CovKind::Explicit { chol, .. } => linalg::chol_solve(chol, u),
        }
    }

    /// `bᵀ Σ b = ‖Σ^{1/2} b‖²`
    pub fn quad(&self, b: &[f64]) -> f64 {
        linalg::dot(b, &self.apply(b))
    }

    /// `uᵀ Σ⁻¹ u = ‖Σ^{-1/2} u‖²`
    pub fn inv_quad(&self, u: &[f64]) -> f64 {
        linalg::dot(u, &self.solve(u))
    }

    /// `Ω_jj = (Σ⁻¹)_jj`
    pub fn omega_jj(&self, j: usize) -> f64 {
        match &self.kind {
            CovKind::Scaled(c) => 1.0 / c,
            CovKind::Explicit { omega_diag, .. } => omega_diag[j],
        }
    }

    pub fn op_norm(&self) -> f64 {
        match &self.kind {
            CovKind::Scaled(c) => *c,
            CovKind::Explicit { op_norm, .. } => *op_norm,
        }
    }

    /// `L⁻ᵀ v` with `Σ = L Lᵀ`; maps whitened coordinates back to the original ones.
    pub fn unwhiten_t(&self, v: &[f64]) -> Vec<f64> {
        match &self.kind {
            CovKind::Scaled(c) => v.iter().map(|x| x / c.sqrt()).collect(),
            CovKind::Explicit { chol, .. } => {
                let l = chol.L();
                let p = self.p;
                let mut out = v.to_vec();
                for i in (0..p).rev() {
                    let mut s = out[i];
                    for k in i + 1..p {
                        s -= l[(k, i)] * out[k];
                    }
                    out[i] = s / l[(i, i)];
                }
                out
            }
        }
    }

    /// `L⁻¹ v` with `Σ = L Lᵀ`.
    pub fn whiten(&self, v: &[f64]) -> Vec<f64> {
        match &self.kind {
            CovKind::Scaled(c) => v.iter().map(|x| x / c.sqrt()).collect(),
            CovKind::Explicit { chol, .. } => {
                let l = chol.L();
                let p = self.p;
                let mut out = v.to_vec();
                for i in 0..p {
                    let mut s = out[i];
                    for k in 0..i {
                        s -= l[(i, k)] * out[k];
                    }
                    out[i] = s / l[(i, i)];
                }
                out
            }
        }
    }

    fn cholesky_lower(&self) -> Option<MatRef<'_, f64>> {
        match &self.kind {
            CovKind::Scaled(_) => None,
            CovKind::Explicit { chol, .. } => Some(chol.L()),
        }
    }
}

/// Index `w` normalized so that `wᵀΣw = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexVector(Vec<f64>);

impl IndexVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Entries that are exactly zero.
    pub fn nulls(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&j| self.0[j] == 0.0).collect()
    }

    pub fn flipped(&self) -> Self {
        Self(self.0.iter().map(|v| -v).collect())
    }
}

pub fn normalize_index(raw: &[f64], cov: &Covariance) -> Result<IndexVector> {
    if raw.len() != cov.p() {
        return Err(Error::DimensionMismatch { what: "index length", expected: cov.p(), got: raw.len() });
    }
    let q = cov.quad(raw);
    if !(q > 0.0) || raw.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroIndex);
    }
    let s = q.sqrt();
    Ok(IndexVector(raw.iter().map(|v| v / s).collect()))
}

/// How many nonzero entries an index recipe gets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupportSize {
    Fixed(usize),
    FractionOfP(f64),
}

impl SupportSize {
    pub fn resolve(self, p: usize) -> usize {
        let s = match self {
            SupportSize::Fixed(s) => s,
            SupportSize::FractionOfP(f) => (f * p as f64).round() as usize,
        };
        s.clamp(1, p)
    }
}

/// Deterministic constructions of the index used by the experiment presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum IndexRecipe {
    /// First `support` entries equal, rest zero.
    SparseEqual { support: SupportSize },
    /// First `support` entries equispaced in `[low, high]`, rest zero.
    Equispaced { support: SupportSize, low: f64, high: f64 },
    /// All entries equal.
    Dense,
}

impl IndexRecipe {
    pub fn build(&self, cov: &Covariance) -> Result<IndexVector> {
        let p = cov.p();
        let raw: Vec<f64> = match *self {
            IndexRecipe::SparseEqual { support } => {
                let s = support.resolve(p);
                (0..p).map(|j| if j < s { 1.0 } else { 0.0 }).collect()
            }
            IndexRecipe::Equispaced { support, low, high } => {
                let s = support.resolve(p);
                (0..p)
                    .map(|j| {
                        if j >= s {
                            0.0
                        } else if s == 1 {
                            low
                        } else {
                            low + (high - low) * j as f64 / (s - 1) as f64
                        }
                    })
                    .collect()
            }
            IndexRecipe::Dense => vec![1.0; p],
        };
        normalize_index(&raw, cov)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Noise {
    Gaussian { sd: f64 },
    /// Standard Cauchy scaled by `scale`.
    Cauchy { scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelEncoding {
    /// `y ∈ {0, 1}`
    ZeroOne,
    /// `y ∈ {−1, +1}`
    PlusMinus,
}

/// Link `F(xᵀw, U)` of the single-index model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LinkSpec {
    /// `y = signal·xᵀw + ε`
    Linear { signal: f64, noise: Noise },
    /// `P(y = 1) = sigmoid(signal·xᵀw)`
    Logistic { signal: f64, encoding: LabelEncoding },
    /// `y = u·sign(xᵀw)` with `P(u = −1) = flip_prob`
    OneBit { flip_prob: f64 },
    /// `y ~ Poisson(exp(xᵀw))`
    Poisson,
    /// `y ~ Binomial(q, sigmoid(signal·xᵀw))`
    Binomial { q: u32, signal: f64 },
}

impl LinkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        match *self {
            LinkSpec::Linear { signal, noise } => {
                if !signal.is_finite() {
                    return bad("linear signal must be finite".into());
                }
                match noise {
                    Noise::Gaussian { sd } if !(sd >= 0.0) => bad(format!("noise sd {sd} < 0")),
                    Noise::Cauchy { scale } if !(scale >= 0.0) => bad(format!("cauchy scale {scale} < 0")),
                    _ => Ok(()),
                }
            }
            LinkSpec::Logistic { signal, .. } | LinkSpec::Binomial { signal, .. } if !signal.is_finite() => {
                bad("signal must be finite".into())
            }
            LinkSpec::Binomial { q: 0, .. } => bad("binomial q must be ≥ 1".into()),
            LinkSpec::OneBit { flip_prob } if !(0.0..1.0).contains(&flip_prob) => {
                bad(format!("flip probability {flip_prob} outside [0, 1)"))
            }
            _ => Ok(()),
        }
    }

    /// Signal strength `‖Σ^{1/2}β*‖` for links that carry one.
    pub fn signal(&self) -> Option<f64> {
        match *self {
            LinkSpec::Linear { signal, .. }
            | LinkSpec::Logistic { signal, .. }
            | LinkSpec::Binomial { signal, .. } => Some(signal),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            LinkSpec::Linear { .. } => "linear".into(),
            LinkSpec::Logistic { .. } => "logistic".into(),
            LinkSpec::OneBit { .. } => "one-bit".into(),
            LinkSpec::Poisson => "poisson".into(),
            LinkSpec::Binomial { q, .. } => format!("binomial-q{q}"),
        }
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `n × p` design with iid `N(0, Σ)` rows, reproducible from `seed`.
pub fn sample_design(cov: &Covariance, n: usize, seed: u64) -> Result<Mat<f64>> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be ≥ 1".into()));
    }
    let p = cov.p();
    let mut rng = rng_from_seed(seed);
    let mut z = Mat::<f64>::zeros(n, p);
    for j in 0..p {
        for i in 0..n {
            z[(i, j)] = rng.sample(StandardNormal);
        }
    }
    match cov.cholesky_lower() {
        None => {
            let s = cov.isotropic_scale().unwrap_or(1.0).sqrt();
            if s != 1.0 {
                for j in 0..p {
                    for i in 0..n {
                        z[(i, j)] *= s;
                    }
                }
            }
            Ok(z)
        }
        // rows xᵢ = L zᵢ, i.e. X = Z Lᵀ
        Some(l) => Ok(linalg::mat_mul(z.as_ref(), l.transpose())),
    }
}

fn sample_latent(link: &LinkSpec, index: f64, rng: &mut Rng) -> f64 {
    match *link {
        LinkSpec::Linear { signal, noise } => {
            let eps = match noise {
                Noise::Gaussian { sd } => sd * rng.sample::<f64, _>(StandardNormal),
                Noise::Cauchy { scale } => {
                    let u: f64 = rng.gen();
                    scale * (std::f64::consts::PI * (u - 0.5)).tan()
                }
            };
            signal * index + eps
        }
        LinkSpec::Logistic { signal, encoding } => {
            let u: f64 = rng.gen();
            let success = u < sigmoid(signal * index);
            match (encoding, success) {
                (LabelEncoding::ZeroOne, true) => 1.0,
                (LabelEncoding::ZeroOne, false) => 0.0,
                (LabelEncoding::PlusMinus, true) => 1.0,
                (LabelEncoding::PlusMinus, false) => -1.0,
            }
        }
        LinkSpec::OneBit { flip_prob } => {
            let u: f64 = rng.gen();
            let s = if index >= 0.0 { 1.0 } else { -1.0 };
            if u < flip_prob {
                -s
            } else {
                s
            }
        }
        LinkSpec::Poisson => {
            let rate = index.exp();
            if rate <= 0.0 {
                0.0
            } else {
                Poisson::new(rate).map(|d| d.sample(rng)).unwrap_or(0.0)
            }
        }
        LinkSpec::Binomial { q, signal } => {
            let prob = sigmoid(signal * index);
            Binomial::new(q as u64, prob).map(|d| d.sample(rng) as f64).unwrap_or(0.0)
        }
    }
}

/// Responses `yᵢ = F(xᵢᵀw, Uᵢ)`.
pub fn sample_response(x: MatRef<'_, f64>, w: &IndexVector, link: &LinkSpec, seed: u64) -> Result<Vec<f64>> {
    if x.ncols() != w.len() {
        return Err(Error::DimensionMismatch { what: "index length vs design columns", expected: x.ncols(), got: w.len() });
    }
    link.validate()?;
    let index = linalg::mat_vec(x, w.as_slice());
    let mut rng = rng_from_seed(seed);
    Ok(index.iter().map(|&u| sample_latent(link, u, &mut rng)).collect())
}

/// Design matrix with a lazily computed Gram matrix, shareable between datasets.
#[derive(Debug)]
pub struct Design {
    x: Mat<f64>,
    gram: OnceLock<Mat<f64>>,
    gram_chol: OnceLock<Option<Llt<f64>>>,
    outer: OnceLock<Mat<f64>>,
}

impl Design {
    pub fn new(x: Mat<f64>) -> Self {
        Self { x, gram: OnceLock::new(), gram_chol: OnceLock::new(), outer: OnceLock::new() }
    }

    pub fn x(&self) -> MatRef<'_, f64> {
        self.x.as_ref()
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// `XᵀX`, computed once.
    pub fn gram(&self) -> &Mat<f64> {
        self.gram.get_or_init(|| linalg::gram(self.x.as_ref()))
    }

    /// Cholesky factor of `XᵀX`, computed once.
    pub fn gram_cholesky(&self) -> Result<&Llt<f64>> {
        self.gram_chol
            .get_or_init(|| linalg::cholesky(self.gram().as_ref(), "XᵀX").ok())
            .as_ref()
            .ok_or_else(|| Error::Singular("XᵀX is rank deficient".into()))
    }

    /// `XXᵀ`, computed once.
    pub fn outer_gram(&self) -> &Mat<f64> {
        self.outer.get_or_init(|| linalg::outer_gram(self.x.as_ref()))
    }
}

/// Ground truth attached to simulated data.
#[derive(Debug, Clone)]
pub struct Truth {
    pub w: IndexVector,
    pub cov: Arc<Covariance>,
    pub signal: Option<f64>,
}

impl Truth {
    /// `β* = signal · w` when the link carries a signal strength.
    pub fn beta_star(&self) -> Option<Vec<f64>> {
        self.signal.map(|s| self.w.as_slice().iter().map(|v| s * v).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub design: Arc<Design>,
    pub y: Vec<f64>,
    pub truth: Option<Truth>,
}

impl Dataset {
    pub fn new(x: Mat<f64>, y: Vec<f64>) -> Result<Self> {
        Self::from_design(Arc::new(Design::new(x)), y, None)
    }

    /// Design given as `n` rows of length `p`.
    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>, truth: Option<Truth>) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || p == 0 {
            return Err(Error::InvalidInput("design must have at least one row and one column".into()));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != p) {
            return Err(Error::DimensionMismatch { what: "design row length", expected: p, got: r.len() });
        }
        Self::from_design(Arc::new(Design::new(Mat::from_fn(rows.len(), p, |i, j| rows[i][j]))), y, truth)
    }

    pub fn from_design(design: Arc<Design>, y: Vec<f64>, truth: Option<Truth>) -> Result<Self> {
        if design.n() != y.len() {
            return Err(Error::DimensionMismatch { what: "response length", expected: design.n(), got: y.len() });
        }
        if let Some(t) = &truth {
            if t.w.len() != design.p() || t.cov.p() != design.p() {
                return Err(Error::DimensionMismatch { what: "truth dimension", expected: design.p(), got: t.w.len() });
            }
        }
        Ok(Self { design, y, truth })
    }

    /// Simulates `(X, y)` with truth attached.
    pub fn simulate(cov: Arc<Covariance>, w: IndexVector, link: &LinkSpec, n: usize, design_seed: u64, response_seed: u64) -> Result<Self> {
        let x = sample_design(&cov, n, design_seed)?;
        let design = Arc::new(Design::new(x));
        Self::simulate_on(design, cov, w, link, response_seed)
    }

    pub fn simulate_on(design: Arc<Design>, cov: Arc<Covariance>, w: IndexVector, link: &LinkSpec, response_seed: u64) -> Result<Self> {
        let y = sample_response(design.x(), &w, link, response_seed)?;
        let truth = Truth { w, cov, signal: link.signal() };
        Self::from_design(design, y, Some(truth))
    }

    pub fn x(&self) -> MatRef<'_, f64> {
        self.design.x()
    }

    pub fn n(&self) -> usize {
        self.design.n()
    }

    pub fn p(&self) -> usize {
        self.design.p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_design_shape_and_determinism() {
        let cov = Covariance::identity(2);
        let a = sample_design(&cov, 3, 11).unwrap();
        let b = sample_design(&cov, 3, 11).unwrap();
        assert_eq!((a.nrows(), a.ncols()), (3, 2));
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(a[(i, j)].to_bits(), b[(i, j)].to_bits());
                assert!(a[(i, j)].abs() < 10.0);
            }
        }
    }

    #[test]
    fn scaled_identity_column_variances() {
        // Σ = (1/p) I, p = 2400: each sample variance of a column is c·χ²_n/n,
        // with sd c·√(2/n); the pooled mean over p columns has sd c·√(2/(np)).
        let p = 2400;
        let n = 200;
        let c = 1.0 / p as f64;
        let cov = Covariance::identity_scaled(p, c).unwrap();
        let x = sample_design(&cov, n, 3).unwrap();
        let mut mean_var = 0.0;
        for j in 0..p {
            let v: f64 = (0..n).map(|i| x[(i, j)] * x[(i, j)]).sum::<f64>() / n as f64;
            assert!((v - c).abs() < 5.0 * c * (2.0 / n as f64).sqrt() + 1e-300);
            mean_var += v / p as f64;
        }
        assert!((mean_var - c).abs() < 5.0 * c * (2.0 / (n * p) as f64).sqrt());
    }

    #[test]
    fn explicit_non_symmetric_rejected() {
        let m = Mat::from_fn(2, 2, |i, j| if i == j { 1.0 } else if i < j { 0.3 } else { 0.1 });
        assert!(matches!(Covariance::explicit(m), Err(Error::NotPositiveDefinite(_))));
        let not_pd = Mat::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 2.0 });
        assert!(Covariance::explicit(not_pd).is_err());
    }

    #[test]
    fn explicit_design_covariance() {
        let rho: f64 = 0.5;
        let p = 3;
        let sigma = Mat::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()));
        let cov = Covariance::explicit(sigma.clone()).unwrap();
        let n = 20000;
        let x = sample_design(&cov, n, 5).unwrap();
        let g = linalg::gram(x.as_ref());
        for i in 0..p {
            for j in 0..p {
                let s = g[(i, j)] / n as f64;
                assert!((s - sigma[(i, j)]).abs() < 0.05, "{i},{j}: {s}");
            }
        }
        let u = [0.3, -1.0, 2.0];
        let back = cov.apply(&cov.solve(&u));
        for (a, b) in back.iter().zip(u) {
            assert!((a - b).abs() < 1e-12);
        }
        let wz = cov.whiten(&u);
        assert!((linalg::norm_sq(&wz) - cov.inv_quad(&u)).abs() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let cov = Covariance::identity(2);
        assert_eq!(normalize_index(&[2.0, 0.0], &cov).unwrap().as_slice(), &[1.0, 0.0]);
        let p = 50;
        let cov = Covariance::identity_scaled(p, 1.0 / p as f64).unwrap();
        let w = normalize_index(&vec![1.0; p], &cov).unwrap();
        assert!(w.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(matches!(normalize_index(&[0.0, 0.0], &Covariance::identity(2)), Err(Error::ZeroIndex)));
    }

    #[test]
    fn equispaced_recipe_signal() {
        // β⁰ with p/20 equispaced nonzeros in [0.5, 4]; β* = 1.1 β⁰/‖Σ^{1/2}β⁰‖
        let p = 400;
        let cov = Covariance::identity(p);
        let w = IndexRecipe::Equispaced { support: SupportSize::FractionOfP(0.05), low: 0.5, high: 4.0 }
            .build(&cov)
            .unwrap();
        assert!((cov.quad(w.as_slice()) - 1.0).abs() < 1e-10);
        let beta: Vec<f64> = w.as_slice().iter().map(|v| 1.1 * v).collect();
        assert!((cov.quad(&beta).sqrt() - 1.1).abs() < 1e-12);
        assert_eq!(w.as_slice().iter().filter(|v| **v != 0.0).count(), 20);
        let ratio = w.as_slice()[19] / w.as_slice()[0];
        assert!((ratio - 8.0).abs() < 1e-12);
    }

    #[test]
    fn one_bit_and_linear_noiseless() {
        let cov = Covariance::identity(4);
        let x = sample_design(&cov, 50, 1).unwrap();
        let w = normalize_index(&[1.0, -1.0, 0.5, 0.0], &cov).unwrap();
        let idx = linalg::mat_vec(x.as_ref(), w.as_slice());
        let y = sample_response(x.as_ref(), &w, &LinkSpec::OneBit { flip_prob: 0.0 }, 2).unwrap();
        for (a, b) in y.iter().zip(&idx) {
            assert_eq!(*a, b.signum());
        }
        let lin = LinkSpec::Linear { signal: 2.0, noise: Noise::Gaussian { sd: 0.0 } };
        let y = sample_response(x.as_ref(), &w, &lin, 2).unwrap();
        for (a, b) in y.iter().zip(&idx) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn one_bit_flip_fraction() {
        let n = 3000;
        let cov = Covariance::identity(3);
        let x = sample_design(&cov, n, 9).unwrap();
        let w = normalize_index(&[1.0, 1.0, 1.0], &cov).unwrap();
        let idx = linalg::mat_vec(x.as_ref(), w.as_slice());
        let y = sample_response(x.as_ref(), &w, &LinkSpec::OneBit { flip_prob: 0.2 }, 4).unwrap();
        let flipped = y.iter().zip(&idx).filter(|(a, b)| **a != b.signum()).count() as f64 / n as f64;
        assert!((flipped - 0.2).abs() <= 3.0 * (0.2f64 * 0.8 / n as f64).sqrt());
    }

    #[test]
    fn response_sets() {
        let cov = Covariance::identity(2);
        let x = sample_design(&cov, 200, 1).unwrap();
        let w = normalize_index(&[1.0, 0.0], &cov).unwrap();
        let y = sample_response(x.as_ref(), &w, &LinkSpec::Logistic { signal: 1.0, encoding: LabelEncoding::ZeroOne }, 1).unwrap();
        assert!(y.iter().all(|v| *v == 0.0 || *v == 1.0));
        let y = sample_response(x.as_ref(), &w, &LinkSpec::Logistic { signal: 1.0, encoding: LabelEncoding::PlusMinus }, 1).unwrap();
        assert!(y.iter().all(|v| *v == -1.0 || *v == 1.0));
        let y = sample_response(x.as_ref(), &w, &LinkSpec::Binomial { q: 4, signal: 1.0 }, 1).unwrap();
        assert!(y.iter().all(|v| *v >= 0.0 && *v <= 4.0 && v.fract() == 0.0));
        let y = sample_response(x.as_ref(), &w, &LinkSpec::Poisson, 1).unwrap();
        assert!(y.iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let cov = Covariance::identity(3);
        let x = sample_design(&cov, 5, 1).unwrap();
        let w = normalize_index(&[1.0, 0.0], &Covariance::identity(2)).unwrap();
        assert!(sample_response(x.as_ref(), &w, &LinkSpec::Poisson, 1).is_err());
    }
}
