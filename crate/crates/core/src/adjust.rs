//! Derivative matrix `Â`, traces and the observable adjustments.
//!
//! With `H = (1/n) X_SᵀDX_S + diag(c_S)` on the relevant coordinates `S`,
//! `Â = H⁻¹/n` on `S × S` and zero elsewhere. Then `df̂ = tr[XÂXᵀD]`,
//! `V = D − DXÂXᵀD`, and the adjustments follow from `(df̂, tr V, ψ̂, Xβ̂)`.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::FitResult;
use crate::linalg;
use crate::model::{Covariance, Dataset};
use crate::penalty::PenaltyFamily;
use crate::system::CurvatureSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AhatKind {
    FullInverse,
    ActiveSet,
}

#[derive(Debug)]
pub struct AhatRepresentation {
    pub kind: AhatKind,
    pub source: &'static str,
    n: usize,
    p: usize,
    system: CurvatureSystem,
}

impl AhatRepresentation {
    pub fn p(&self) -> usize {
        self.p
    }

    /// Coordinates carrying `Â`; all of them for the full inverse.
    pub fn coords(&self) -> Vec<usize> {
        self.system.coords().map_or_else(|| (0..self.p).collect(), <[usize]>::to_vec)
    }

    /// `Â v`
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.p);
        let nf = self.n as f64;
        match self.system.coords() {
            None => self.system.solve(v).into_iter().map(|a| a / nf).collect(),
            Some(c) => {
                let sub: Vec<f64> = c.iter().map(|&j| v[j]).collect();
                let mut out = vec![0.0; self.p];
                for (a, z) in c.iter().zip(self.system.solve(&sub)) {
                    out[*a] = z / nf;
                }
                out
            }
        }
    }

    /// Dense `p × p` matrix of `Â`.
    pub fn to_dense(&self) -> Mat<f64> {
        let inv = self.system.inverse();
        let nf = self.n as f64;
        let coords = self.coords();
        let mut out = Mat::<f64>::zeros(self.p, self.p);
        for (a, &j) in coords.iter().enumerate() {
            for (b, &k) in coords.iter().enumerate() {
                out[(j, k)] = inv[(a, b)] / nf;
            }
        }
        out
    }

    /// `hᵢ = (D^{1/2} X Â Xᵀ D^{1/2})ᵢᵢ`
    pub fn leverages(&self) -> Vec<f64> {
        self.system.leverages()
    }

    /// `γ* = tr[ΣÂ]`
    pub fn trace_sigma(&self, cov: &Covariance) -> f64 {
        self.system.trace_sigma_inverse(cov) / self.n as f64
    }

    /// `‖Â‖_op`
    pub fn op_norm(&self) -> f64 {
        self.system.inverse_op_norm() / self.n as f64
    }
}

/// `∂β̂/∂x_ij = Â(eⱼψ̂ᵢ − XᵀDeᵢβ̂ⱼ)`
pub fn d_beta_d_x(ahat: &AhatRepresentation, fit: &FitResult, data: &Dataset, i: usize, j: usize) -> Vec<f64> {
    let x = data.x();
    let mut u: Vec<f64> = (0..data.p()).map(|k| -x[(i, k)] * fit.d[i] * fit.beta[j]).collect();
    u[j] += fit.psi[i];
    ahat.apply(&u)
}

/// `∂ψ̂/∂x_ij = −DXÂeⱼψ̂ᵢ − Veᵢβ̂ⱼ` with `V = D − DXÂXᵀD`.
pub fn d_psi_d_x(ahat: &AhatRepresentation, fit: &FitResult, data: &Dataset, i: usize, j: usize) -> Vec<f64> {
    let x = data.x();
    let mut ej = vec![0.0; data.p()];
    ej[j] = 1.0;
    let xa_j = linalg::mat_vec(x, &ahat.apply(&ej));
    let xd_i: Vec<f64> = (0..data.p()).map(|k| x[(i, k)] * fit.d[i]).collect();
    let x_axd = linalg::mat_vec(x, &ahat.apply(&xd_i));
    (0..data.n())
        .map(|l| {
            let ve = if l == i { fit.d[l] } else { 0.0 } - fit.d[l] * x_axd[l];
            -fit.d[l] * xa_j[l] * fit.psi[i] - ve * fit.beta[j]
        })
        .collect()
}

/// Builds `Â` for a converged fit.
pub fn compute_ahat(fit: &FitResult, data: &Dataset) -> Result<AhatRepresentation> {
    if fit.guard_active {
        return Err(Error::Degenerate("the coercive guard is active; Â of the unmodified problem is undefined".into()));
    }
    let (n, p) = (data.n(), data.p());
    if fit.beta.len() != p || fit.psi.len() != n {
        return Err(Error::DimensionMismatch { what: "fit vs dataset", expected: p, got: fit.beta.len() });
    }
    let pen = &fit.resolved;
    let source = fit.penalty.name();
    if let PenaltyFamily::None = fit.penalty {
        if p >= n {
            return Err(Error::Singular(format!("unpenalized Â needs p < n (p = {p}, n = {n})")));
        }
    }
    let degenerate_gap: f64 = fit.psi.iter().zip(fit.d.iter().zip(&fit.xb)).map(|(s, (d, u))| (s - d * u).powi(2)).sum();
    if degenerate_gap <= 1e-20 * linalg::norm_sq(&fit.psi).max(1e-300) {
        log::warn!("ψ̂ = D X β̂ up to rounding; the trace bounds hold only in their weaker form");
    }
    let (kind, coords, diag) = if pen.has_l1() {
        let diag = fit.active.iter().map(|&j| pen.curvature[j]).collect();
        (AhatKind::ActiveSet, Some(fit.active.clone()), diag)
    } else {
        (AhatKind::FullInverse, None, pen.curvature.clone())
    };
    let system = CurvatureSystem::build(data.design.clone(), &fit.d, coords, diag, 0.0).map_err(|e| match e {
        Error::Singular(m) => Error::Singular(format!("{m}; X_Ŝ must have full column rank")),
        e => e,
    })?;
    let ahat = AhatRepresentation { kind, source, n, p, system };
    let min_c = pen.min_curvature();
    if min_c > 0.0 && ahat.system.dim() > 0 {
        // ‖Â‖_op ≤ 1/(n·min c)
        let bound = 1.0 / (n as f64 * min_c);
        let norm = ahat.op_norm();
        if norm > bound * (1.0 + 1e-6) {
            return Err(Error::Degenerate(format!("‖Â‖op = {norm:.6e} exceeds 1/(nτ) = {bound:.6e}")));
        }
    }
    Ok(ahat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Traces {
    /// `df̂ = tr[XÂXᵀD]`
    pub df: f64,
    /// `tr[V] = tr[D] − tr[DXÂXᵀD]`
    pub tr_v: f64,
    pub tr_d: f64,
}

impl Traces {
    /// Exact traces of unpenalized least squares: `df̂ = p`, `tr V = n − p`.
    pub fn least_squares(n: usize, p: usize) -> Self {
        Self { df: p as f64, tr_v: (n - p) as f64, tr_d: n as f64 }
    }
}

pub fn compute_traces(ahat: &AhatRepresentation, fit: &FitResult) -> Traces {
    let h = ahat.leverages();
    let tr_d: f64 = fit.d.iter().sum();
    let df: f64 = h.iter().sum();
    let tr_dxaxd: f64 = h.iter().zip(&fit.d).map(|(a, b)| a * b).sum();
    Traces { df, tr_v: tr_d - tr_dxaxd, tr_d }
}

/// How `Σ` enters the adjustments.
#[derive(Debug, Clone, Copy)]
pub enum SigmaInfo<'a> {
    Known(&'a Covariance),
    /// `Σ̂ = XᵀX/n`, requires `p < n`.
    PlugIn,
    Unknown,
}

impl<'a> SigmaInfo<'a> {
    pub fn from_truth(data: &'a Dataset) -> Self {
        match &data.truth {
            Some(t) => SigmaInfo::Known(&t.cov),
            None => SigmaInfo::Unknown,
        }
    }

    /// `Σ⁻¹u`
    pub fn solve(&self, data: &Dataset, u: &[f64], what: &'static str) -> Result<Vec<f64>> {
        match self {
            SigmaInfo::Known(c) => Ok(c.solve(u)),
            SigmaInfo::PlugIn => {
                if data.p() >= data.n() {
                    return Err(Error::MissingCovariance(what));
                }
                let nf = data.n() as f64;
                Ok(linalg::chol_solve(data.design.gram_cholesky()?, u).into_iter().map(|v| nf * v).collect())
            }
            SigmaInfo::Unknown => Err(Error::MissingCovariance(what)),
        }
    }

    /// `uᵀΣ⁻¹u`
    fn inv_quad(&self, data: &Dataset, u: &[f64], what: &'static str) -> Result<f64> {
        match self {
            SigmaInfo::Known(c) => Ok(c.inv_quad(u)),
            SigmaInfo::PlugIn => {
                if data.p() >= data.n() {
                    return Err(Error::MissingCovariance(what));
                }
                let llt = data.design.gram_cholesky()?;
                Ok(data.n() as f64 * linalg::dot(u, &linalg::chol_solve(llt, u)))
            }
            SigmaInfo::Unknown => Err(Error::MissingCovariance(what)),
        }
    }

    /// `bᵀΣb`
    fn quad(&self, data: &Dataset, b: &[f64], what: &'static str) -> Result<f64> {
        match self {
            SigmaInfo::Known(c) => Ok(c.quad(b)),
            SigmaInfo::PlugIn => Ok(linalg::norm_sq(&linalg::mat_vec(data.x(), b)) / data.n() as f64),
            SigmaInfo::Unknown => Err(Error::MissingCovariance(what)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// `(t̂², â², σ̂²)` from `‖Xβ̂ − γ̂ψ̂‖²/n` and `γ̂`.
    General,
    /// `‖Σ^{1/2}β̂‖²` and `γ*` in place of `‖Xβ̂ − γ̂ψ̂‖²/n` and `γ̂`.
    Tilde,
    /// Closed forms when `Xᵀψ̂ = 0`.
    Unregularized,
    /// `v̂ = 1 − df̂/n`.
    SquareLoss,
    /// `v̂ = (n̂ − df̂)/n` with `n̂` the residuals in `[−1, 1]`.
    Huber,
    /// Ridge with `Σ = I/p`, expressed through `‖β̂‖²/p` and `v̂ + λ`.
    RidgeSimplified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adjustments {
    pub variant: Variant,
    pub n: usize,
    pub p: usize,
    pub df: f64,
    pub v: f64,
    pub r2: f64,
    pub gamma: f64,
    pub t2: f64,
    pub a2: f64,
    pub sigma2: f64,
}

impl Adjustments {
    /// `t̂ = max(0, t̂²)^{1/2}`
    pub fn t(&self) -> f64 {
        self.t2.max(0.0).sqrt()
    }

    /// `â = max(0, â²)^{1/2}`
    pub fn a(&self) -> f64 {
        self.a2.max(0.0).sqrt()
    }

    pub fn r(&self) -> f64 {
        self.r2.sqrt()
    }
}

/// Inputs shared by the variants.
struct Scalars {
    n: f64,
    p: f64,
    r2: f64,
    /// `ψ̂ᵀXβ̂/n`
    psi_xb: f64,
    /// `‖Xβ̂‖²/n`
    xb2: f64,
    /// `‖ψ̂‖²/n` is `r2`; `Xβ̂ᵀψ̂` is `n·psi_xb`
    penalized: bool,
}

impl Scalars {
    /// `‖Xβ̂ − γψ̂‖²/n`
    fn q(&self, gamma: f64) -> f64 {
        self.xb2 - 2.0 * gamma * self.psi_xb + gamma * gamma * self.r2
    }
}

/// `(t², a², σ²)` from `T1 = ‖Σ^{-1/2}Xᵀψ̂‖²/n²` and a squared-norm term `b`.
fn t_a_sigma(s: &Scalars, v: f64, gamma: f64, t1: f64, b: f64) -> (f64, f64, f64) {
    let t2 = t1 + 2.0 * v * s.psi_xb + v * v * b - s.p / s.n * s.r2;
    let num = v * b + s.psi_xb - gamma * s.r2;
    // β̂ = 0 gives num = 0 exactly; keep â² = 0 even when t̂² vanishes too
    let a2 = if num == 0.0 { 0.0 } else { num * num / t2 };
    (t2, a2, b - a2)
}

fn unregularized(s: &Scalars, v: f64) -> (f64, f64, f64, f64) {
    let ratio = s.p / s.n;
    let gamma = ratio / v;
    let a2 = s.xb2 - ratio * (1.0 - ratio) * s.r2 / (v * v);
    (gamma, a2 * v * v, a2, ratio * s.r2 / (v * v))
}

/// Computes the adjustments for `variant`. `gamma_star` is required by
/// [`Variant::Tilde`] only.
pub fn compute_adjustments(
    fit: &FitResult,
    data: &Dataset,
    traces: &Traces,
    sigma: SigmaInfo<'_>,
    variant: Variant,
    gamma_star: Option<f64>,
) -> Result<Adjustments> {
    let (n, p) = (data.n(), data.p());
    let nf = n as f64;
    let r2 = linalg::norm_sq(&fit.psi) / nf;
    if !(r2 > 0.0) {
        return Err(Error::Degenerate("r̂ = 0: ψ̂ vanishes".into()));
    }
    let s = Scalars {
        n: nf,
        p: p as f64,
        r2,
        psi_xb: linalg::dot(&fit.psi, &fit.xb) / nf,
        xb2: linalg::norm_sq(&fit.xb) / nf,
        penalized: !fit.resolved.is_zero(),
    };
    let df = traces.df;
    let done = |v: f64, gamma: f64, (t2, a2, sigma2): (f64, f64, f64)| -> Result<Adjustments> {
        if !(v != 0.0 && v.is_finite()) {
            return Err(Error::Degenerate(format!("v̂ = {v}")));
        }
        Ok(Adjustments { variant, n, p, df, v, r2, gamma, t2, a2, sigma2 })
    };
    let general_with = |v: f64, gamma: f64| -> Result<Adjustments> {
        if !s.penalized {
            let (g, t2, a2, sigma2) = unregularized(&s, v);
            return done(v, g, (t2, a2, sigma2));
        }
        let u: Vec<f64> = fit.score(data);
        let t1 = sigma.inv_quad(data, &u, "‖Σ^{-1/2}Xᵀψ̂‖² in t̂²")?;
        done(v, gamma, t_a_sigma(&s, v, gamma, t1, s.q(gamma)))
    };
    match variant {
        Variant::General => {
            let v = traces.tr_v / nf;
            general_with(v, df / traces.tr_v)
        }
        Variant::SquareLoss => {
            if !fit.loss.is_square() {
                return Err(Error::InvalidInput("square-loss adjustments need the square loss".into()));
            }
            general_with(1.0 - df / nf, df / (nf - df))
        }
        Variant::Huber => {
            if !matches!(fit.loss, crate::loss::LossFamily::Huber) {
                return Err(Error::InvalidInput("Huber adjustments need the Huber loss".into()));
            }
            let n_hat = fit.d.iter().filter(|d| **d > 0.0).count() as f64;
            general_with((n_hat - df) / nf, df / (n_hat - df))
        }
        Variant::Unregularized => {
            if s.penalized {
                return Err(Error::InvalidInput("unregularized adjustments need penalty none".into()));
            }
            let v = traces.tr_v / nf;
            let (gamma, t2, a2, sigma2) = unregularized(&s, v);
            done(v, gamma, (t2, a2, sigma2))
        }
        Variant::Tilde => {
            let gs = gamma_star.ok_or(Error::MissingTruth("γ* in the alternative adjustments"))?;
            let v = traces.tr_v / nf;
            let b = sigma.quad(data, &fit.beta, "‖Σ^{1/2}β̂‖² in the alternative adjustments")?;
            let t1 = if s.penalized { sigma.inv_quad(data, &fit.score(data), "‖Σ^{-1/2}Xᵀψ̂‖²")? } else { 0.0 };
            done(v, gs, t_a_sigma(&s, v, gs, t1, b))
        }
        Variant::RidgeSimplified => {
            let lam = ridge_lambda_eff(fit, sigma)?;
            let v = traces.tr_v / nf;
            let b2 = linalg::norm_sq(&fit.beta) / s.p;
            let vl = v + lam;
            let ratio = s.p / nf;
            let t2 = vl * vl * b2 - ratio * r2;
            let a2 = b2 - ratio * r2 / (vl * vl);
            let sigma2 = ratio * r2 / (vl * vl);
            done(v, df / traces.tr_v, (t2, a2, sigma2))
        }
    }
}

/// `λ` of the simplified ridge forms: `p·c` for `Σ = I/p` and curvature `c`.
pub fn ridge_lambda_eff(fit: &FitResult, sigma: SigmaInfo<'_>) -> Result<f64> {
    let p = fit.p();
    let PenaltyFamily::Ridge { .. } = fit.penalty else {
        return Err(Error::ConventionMismatch(format!("ridge forms need a ridge penalty, got {}", fit.penalty.name())));
    };
    match sigma {
        SigmaInfo::Known(c) if c.isotropic_scale().is_some_and(|s| (s * p as f64 - 1.0).abs() < 1e-12) => {}
        _ => return Err(Error::ConventionMismatch("ridge forms assume Σ = I/p".into())),
    }
    Ok(fit.resolved.curvature[0] * p as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleQuantities {
    /// `wᵀΣβ̂`
    pub a_star: f64,
    /// `‖Σ^{1/2}β̂‖² − a*²`
    pub sigma_star2: f64,
    /// `tr[ΣÂ]`
    pub gamma_star: Option<f64>,
    /// `wᵀ(tr[V]Σβ̂ + Xᵀψ̂)/n`
    pub t_star: Option<f64>,
}

impl OracleQuantities {
    /// Sign used to resolve `±` for regularized fits.
    pub fn sign_t(&self) -> Option<f64> {
        self.t_star.map(|t| if t < 0.0 { -1.0 } else { 1.0 })
    }

    pub fn sign_a(&self) -> f64 {
        if self.a_star < 0.0 {
            -1.0
        } else {
            1.0
        }
    }
}

pub fn compute_oracle(fit: &FitResult, data: &Dataset, ahat: Option<&AhatRepresentation>, traces: Option<&Traces>) -> Result<OracleQuantities> {
    let truth = data.truth.as_ref().ok_or(Error::MissingTruth("oracle quantities"))?;
    let sb = truth.cov.apply(&fit.beta);
    let w = truth.w.as_slice();
    let a_star = linalg::dot(w, &sb);
    let norm2 = linalg::dot(&fit.beta, &sb);
    let sigma_star2 = (norm2 - a_star * a_star).max(0.0);
    let gamma_star = ahat.map(|a| a.trace_sigma(&truth.cov));
    let t_star = traces.map(|t| {
        let xt_psi = linalg::mat_t_vec(data.x(), &fit.psi);
        (t.tr_v * a_star + linalg::dot(w, &xt_psi)) / data.n() as f64
    });
    Ok(OracleQuantities { a_star, sigma_star2, gamma_star, t_star })
}

/// `Ω̂ⱼⱼ = (n − p + 1)/‖(I − P₋ⱼ)Xeⱼ‖² = (n − p + 1)·((XᵀX)⁻¹)ⱼⱼ`.
pub fn estimate_omega_jj(data: &Dataset, j: usize) -> Result<f64> {
    let (n, p) = (data.n(), data.p());
    if j >= p {
        return Err(Error::InvalidInput(format!("coordinate {j} out of range (p = {p})")));
    }
    if p >= n {
        return Err(Error::Singular(format!("Ω̂ needs p < n (p = {p}, n = {n})")));
    }
    let llt = data.design.gram_cholesky()?;
    let mut e = vec![0.0; p];
    e[j] = 1.0;
    Ok((n - p + 1) as f64 * linalg::chol_solve(llt, &e)[j])
}

/// `Ω̂ⱼⱼ` for every coordinate.
pub fn estimate_omega_diag(data: &Dataset) -> Result<Vec<f64>> {
    let (n, p) = (data.n(), data.p());
    if p >= n {
        return Err(Error::Singular(format!("Ω̂ needs p < n (p = {p}, n = {n})")));
    }
    let inv = linalg::chol_inverse(data.design.gram_cholesky()?);
    Ok((0..p).map(|j| (n - p + 1) as f64 * inv[(j, j)]).collect())
}

/// `Ωⱼⱼ` from known `Σ`, or estimated when unknown.
pub fn omega_diag(data: &Dataset, sigma: SigmaInfo<'_>) -> Result<Vec<f64>> {
    match sigma {
        SigmaInfo::Known(c) => Ok((0..data.p()).map(|j| c.omega_jj(j)).collect()),
        _ => estimate_omega_diag(data),
    }
}

/// `ĉ = ‖D^{1/2}XΣ^{-1/2}‖²_op/(nτ)`
pub fn c_hat(fit: &FitResult, data: &Dataset, cov: &Covariance) -> f64 {
    let tau = fit.resolved.tau(cov.op_norm());
    if !(tau > 0.0) {
        return f64::INFINITY;
    }
    let x = data.x();
    let sd: Vec<f64> = fit.d.iter().map(|v| v.max(0.0).sqrt()).collect();
    // λmax of L⁻¹XᵀDXL⁻ᵀ with Σ = LLᵀ
    let op = linalg::power_iteration(data.p(), 300, |v| {
        let z = cov.unwhiten_t(v);
        let xz: Vec<f64> = linalg::mat_vec(x, &z).iter().zip(&sd).map(|(a, s)| a * s * s).collect();
        cov.whiten(&linalg::mat_t_vec(x, &xz))
    });
    op / (data.n() as f64 * tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{fit, fit_from, SolverConfig};
    use crate::loss::LossFamily;
    use crate::model::{normalize_index, LabelEncoding, LinkSpec, Noise};
    use crate::penalty::{L1Scaling, RidgeScaling};
    use crate::rng::rng_from_seed;
    use rand::Rng as _;
    use std::sync::Arc;

    const LOGIT: LossFamily = LossFamily::Logistic { encoding: LabelEncoding::ZeroOne };

    fn sim(n: usize, p: usize, scale: f64, link: LinkSpec, seed: u64) -> Dataset {
        let cov = Arc::new(Covariance::identity_scaled(p, scale).unwrap());
        let raw: Vec<f64> = (0..p).map(|j| if j < p.div_ceil(4) { 1.0 } else { 0.0 }).collect();
        let w = normalize_index(&raw, &cov).unwrap();
        Dataset::simulate(cov, w, &link, n, seed, seed ^ 0x55).unwrap()
    }

    fn logit_link() -> LinkSpec {
        LinkSpec::Logistic { signal: 2.0, encoding: LabelEncoding::ZeroOne }
    }

    #[test]
    fn unregularized_square_loss_ahat_is_inverse_gram() {
        let data = sim(40, 6, 1.0, LinkSpec::Linear { signal: 1.0, noise: Noise::Gaussian { sd: 1.0 } }, 1);
        let f = fit(&data, &LossFamily::Square, &PenaltyFamily::None, &SolverConfig::default()).unwrap();
        let ahat = compute_ahat(&f, &data).unwrap();
        let g = linalg::gram(data.x());
        let prod = linalg::mat_mul(ahat.to_dense().as_ref(), g.as_ref());
        for i in 0..6 {
            for j in 0..6 {
                assert!((prod[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
        let tr = compute_traces(&ahat, &f);
        assert!((tr.df - 6.0).abs() < 1e-8);
        assert!((tr.tr_v - 34.0).abs() < 1e-8);
    }

    #[test]
    fn l1_all_inactive_gives_zero() {
        let data = sim(50, 8, 1.0, logit_link(), 2);
        let pen = PenaltyFamily::L1 { lambda: 100.0, scaling: L1Scaling::PerSqrtN };
        let f = fit(&data, &LOGIT, &pen, &SolverConfig::default()).unwrap();
        let ahat = compute_ahat(&f, &data).unwrap();
        assert_eq!(ahat.kind, AhatKind::ActiveSet);
        assert!(ahat.to_dense().col_iter().all(|c| c.iter().all(|v| *v == 0.0)));
        let tr = compute_traces(&ahat, &f);
        assert_eq!(tr.df, 0.0);
        // β̂ = 0 ⇒ numerator ψ̂ᵀXβ̂/n = 0 and â² = 0
        let adj = compute_adjustments(&f, &data, &tr, SigmaInfo::from_truth(&data), Variant::General, None).unwrap();
        assert_eq!(adj.a2, 0.0);
    }

    /// `∂β̂/∂x_ij` and `∂ψ̂/∂x_ij` by central differences against the closed forms.
    fn derivative_check(pen: PenaltyFamily, seed: u64) {
        let (n, p) = (40, 8);
        let data = sim(n, p, 1.0 / p as f64, logit_link(), seed);
        let cfg = SolverConfig::default().with_tol(1e-13);
        let f = fit(&data, &LOGIT, &pen, &cfg).unwrap();
        let ahat = compute_ahat(&f, &data).unwrap();
        let x = data.x();
        let mut rng = rng_from_seed(seed);
        let h = 1e-5;
        for _ in 0..20 {
            let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..p));
            let solve = |delta: f64| {
                let mut xp = x.to_owned();
                xp[(i, j)] += delta;
                let d = Dataset::new(xp, data.y.clone()).unwrap();
                fit_from(&d, &LOGIT, &pen, &cfg, Some(&f.beta)).unwrap()
            };
            let (fp, fm) = (solve(h), solve(-h));
            let dbeta = d_beta_d_x(&ahat, &f, &data, i, j);
            let fd: Vec<f64> = (0..p).map(|k| (fp.beta[k] - fm.beta[k]) / (2.0 * h)).collect();
            let scale = linalg::norm_inf(&dbeta).max(1e-3);
            for k in 0..p {
                assert!((fd[k] - dbeta[k]).abs() <= 1e-4 * scale, "β̂ ({i},{j}) k={k}: {} vs {}", fd[k], dbeta[k]);
            }
            let dpsi = d_psi_d_x(&ahat, &f, &data, i, j);
            let fdp: Vec<f64> = (0..n).map(|l| (fp.psi[l] - fm.psi[l]) / (2.0 * h)).collect();
            let scale = linalg::norm_inf(&dpsi).max(1e-3);
            for l in 0..n {
                assert!((fdp[l] - dpsi[l]).abs() <= 1e-4 * scale, "ψ̂ ({i},{j}) l={l}: {} vs {}", fdp[l], dpsi[l]);
            }
        }
    }

    #[test]
    fn derivatives_ridge_logistic() {
        derivative_check(PenaltyFamily::Ridge { lambda: 0.1, scaling: RidgeScaling::PerP }, 3);
    }

    #[test]
    fn derivatives_elastic_net_logistic() {
        derivative_check(PenaltyFamily::ElasticNet { l1: 0.02, l2: 0.05 }, 4);
    }

    #[test]
    fn square_loss_least_squares_identity() {
        let (n, p) = (200, 50);
        let link = LinkSpec::Logistic { signal: 1.0, encoding: LabelEncoding::PlusMinus };
        let data = sim(n, p, 1.0, link, 5);
        let f = fit(&data, &LossFamily::Square, &PenaltyFamily::None, &SolverConfig::default()).unwrap();
        let tr = Traces::least_squares(n, p);
        let adj = compute_adjustments(&f, &data, &tr, SigmaInfo::Unknown, Variant::Unregularized, None).unwrap();
        let resid2: f64 = data.y.iter().zip(&f.xb).map(|(y, u)| (y - u).powi(2)).sum();
        let rhs = linalg::norm_sq(&f.xb) / resid2 - p as f64 / (n - p) as f64;
        assert!((adj.a2 / adj.r2 - rhs).abs() < 1e-10);
        assert!((adj.t2 / (adj.r2 * adj.v * adj.v) - rhs).abs() < 1e-10);
        assert!((adj.v - (1.0 - p as f64 / n as f64)).abs() < 1e-15);
        // General formulas coincide when Xᵀψ̂ = 0
        let gen = compute_adjustments(&f, &data, &tr, SigmaInfo::from_truth(&data), Variant::General, None).unwrap();
        let sq = compute_adjustments(&f, &data, &tr, SigmaInfo::Unknown, Variant::SquareLoss, None).unwrap();
        for other in [gen, sq] {
            assert!((other.a2 - adj.a2).abs() < 1e-10);
            assert!((other.gamma - adj.gamma).abs() < 1e-10);
        }
    }

    #[test]
    fn unregularized_logistic_eq7_matches_closed_forms() {
        let (n, p) = (400, 20);
        let data = sim(n, p, 1.0, logit_link(), 6);
        let f = fit(&data, &LOGIT, &PenaltyFamily::None, &SolverConfig::default().with_tol(1e-12)).unwrap();
        let ahat = compute_ahat(&f, &data).unwrap();
        let tr = compute_traces(&ahat, &f);
        assert!((tr.df - p as f64).abs() < 1e-8);
        let closed = compute_adjustments(&f, &data, &tr, SigmaInfo::Unknown, Variant::Unregularized, None).unwrap();
        // force the Eq. (7) route with T1 computed from the (tiny) score
        let s = Scalars {
            n: n as f64,
            p: p as f64,
            r2: closed.r2,
            psi_xb: linalg::dot(&f.psi, &f.xb) / n as f64,
            xb2: linalg::norm_sq(&f.xb) / n as f64,
            penalized: true,
        };
        let gamma = tr.df / tr.tr_v;
        let t1 = data.truth.as_ref().unwrap().cov.inv_quad(&f.score(&data));
        let (t2, a2, sigma2) = t_a_sigma(&s, closed.v, gamma, t1, s.q(gamma));
        assert!((gamma - closed.gamma).abs() < 1e-9);
        assert!((t2 - closed.t2).abs() < 1e-8, "{t2} vs {}", closed.t2);
        assert!((a2 - closed.a2).abs() < 1e-8);
        assert!((sigma2 - closed.sigma2).abs() < 1e-8);
    }

    #[test]
    fn square_and_huber_closed_form_v() {
        let (n, p) = (150, 60);
        let link = LinkSpec::Linear { signal: 1.0, noise: Noise::Cauchy { scale: 1.0 } };
        let data = sim(n, p, 1.0, link, 7);
        let pen = PenaltyFamily::ElasticNet { l1: 0.05, l2: 0.1 };
        for loss in [LossFamily::Square, LossFamily::Huber] {
            let f = fit(&data, &loss, &pen, &SolverConfig::default().with_tol(1e-12)).unwrap();
            let ahat = compute_ahat(&f, &data).unwrap();
            let tr = compute_traces(&ahat, &f);
            let n_hat = f.d.iter().filter(|d| **d > 0.0).count() as f64;
            assert!((tr.tr_v - (n_hat - tr.df)).abs() < 1e-8);
            let variant = if loss.is_square() { Variant::SquareLoss } else { Variant::Huber };
            let closed = compute_adjustments(&f, &data, &tr, SigmaInfo::from_truth(&data), variant, None).unwrap();
            let gen = compute_adjustments(&f, &data, &tr, SigmaInfo::from_truth(&data), Variant::General, None).unwrap();
            assert!((closed.v - gen.v).abs() < 1e-10);
            assert!((closed.gamma - gen.gamma).abs() < 1e-8);
        }
    }

    #[test]
    fn l1_df_is_support_size_and_sandwich_holds() {
        let (n, p) = (200, 100);
        let data = sim(n, p, 1.0, logit_link(), 8);
        let pen = PenaltyFamily::L1 { lambda: 0.5, scaling: L1Scaling::PerSqrtN };
        let f = fit(&data, &LOGIT, &pen, &SolverConfig::default().with_tol(1e-12)).unwrap();
        let tr = compute_traces(&compute_ahat(&f, &data).unwrap(), &f);
        assert!((tr.df - f.active.len() as f64).abs() < 1e-8);
        let ridge = PenaltyFamily::Ridge { lambda: 0.5, scaling: RidgeScaling::PerP };
        let f = fit(&data, &LOGIT, &ridge, &SolverConfig::default()).unwrap();
        let tr = compute_traces(&compute_ahat(&f, &data).unwrap(), &f);
        let c = c_hat(&f, &data, &data.truth.as_ref().unwrap().cov);
        assert!(tr.tr_v >= tr.tr_d / (1.0 + c) - 4.0 * c - 1e-9);
        assert!(tr.tr_v <= tr.tr_d + 4.0 * c + 1e-9);
        assert!(tr.df >= -c && tr.df <= n as f64 + c);
    }

    #[test]
    fn missing_sigma_and_degenerate() {
        let (n, p) = (120, 150);
        let data = sim(n, p, 1.0 / p as f64, logit_link(), 9);
        let pen = PenaltyFamily::Ridge { lambda: 1.0, scaling: RidgeScaling::PerP };
        let f = fit(&data, &LOGIT, &pen, &SolverConfig::default()).unwrap();
        let tr = compute_traces(&compute_ahat(&f, &data).unwrap(), &f);
        let r = compute_adjustments(&f, &data, &tr, SigmaInfo::Unknown, Variant::General, None);
        assert!(matches!(r, Err(Error::MissingCovariance(_))));
        let r = compute_adjustments(&f, &data, &tr, SigmaInfo::PlugIn, Variant::General, None);
        assert!(matches!(r, Err(Error::MissingCovariance(_))));
        let mut g = f.clone();
        g.psi.iter_mut().for_each(|v| *v = 0.0);
        assert!(matches!(
            compute_adjustments(&g, &data, &tr, SigmaInfo::from_truth(&data), Variant::General, None),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn ridge_forms_match_general_under_kkt() {
        // with Σ = I/p the general T1 and ψ̂ᵀXβ̂/n reduce exactly to λ²‖β̂‖²/p and λ‖β̂‖²/p
        let (n, p) = (300, 150);
        let data = sim(n, p, 1.0 / p as f64, logit_link(), 10);
        let lam = 0.4;
        for scaling in [RidgeScaling::PerP, RidgeScaling::PerPAlt, RidgeScaling::PerN] {
            let pen = PenaltyFamily::Ridge { lambda: lam, scaling };
            let f = fit(&data, &LOGIT, &pen, &SolverConfig::default().with_tol(1e-12)).unwrap();
            let ahat = compute_ahat(&f, &data).unwrap();
            let tr = compute_traces(&ahat, &f);
            let sig = SigmaInfo::from_truth(&data);
            let gs = ahat.trace_sigma(&data.truth.as_ref().unwrap().cov);
            let tilde = compute_adjustments(&f, &data, &tr, sig, Variant::Tilde, Some(gs)).unwrap();
            let simp = compute_adjustments(&f, &data, &tr, sig, Variant::RidgeSimplified, None).unwrap();
            assert!((tilde.t2 - simp.t2).abs() < 1e-9, "{scaling:?}: {} vs {}", tilde.t2, simp.t2);
            // n λ γ* + df̂ = p
            let le = ridge_lambda_eff(&f, sig).unwrap();
            assert!((n as f64 * (le / p as f64) * gs * p as f64 + tr.df - p as f64).abs() < 1e-6 * p as f64);
        }
        let wrong = Covariance::identity(p);
        let pen = PenaltyFamily::Ridge { lambda: lam, scaling: RidgeScaling::PerP };
        let f = fit(&data, &LOGIT, &pen, &SolverConfig::default()).unwrap();
        let tr = Traces { df: 1.0, tr_v: 1.0, tr_d: 1.0 };
        assert!(matches!(
            compute_adjustments(&f, &data, &tr, SigmaInfo::Known(&wrong), Variant::RidgeSimplified, None),
            Err(Error::ConventionMismatch(_))
        ));
    }

    #[test]
    fn oracle_on_w_direction() {
        let data = sim(30, 5, 1.0, logit_link(), 11);
        let mut f = fit(&data, &LOGIT, &PenaltyFamily::None, &SolverConfig::default()).unwrap();
        let w = data.truth.as_ref().unwrap().w.as_slice().to_vec();
        f.beta = w.iter().map(|v| 3.0 * v).collect();
        let o = compute_oracle(&f, &data, None, None).unwrap();
        assert!((o.a_star - 3.0).abs() < 1e-12);
        assert!(o.sigma_star2.abs() < 1e-12);
        let plain = Dataset::new(data.x().to_owned(), data.y.clone()).unwrap();
        assert!(matches!(compute_oracle(&f, &plain, None, None), Err(Error::MissingTruth(_))));
    }

    #[test]
    fn omega_estimates() {
        let (n, p) = (400, 50);
        let data = sim(n, p, 1.0, logit_link(), 12);
        let dof = (n - p + 1) as f64;
        for j in [0, 7, 49] {
            let o = estimate_omega_jj(&data, j).unwrap();
            assert!((o - 1.0).abs() <= 4.0 / dof.sqrt(), "{o}");
        }
        // diagonal Σ with Σ_jj = 4
        let diag4 = Covariance::identity_scaled(3, 4.0).unwrap();
        assert_eq!(diag4.omega_jj(1), 0.25);
        // residual-norm oracle for one coordinate
        let x = data.x();
        let others: Vec<usize> = (1..p).collect();
        let sub = Mat::from_fn(n, p - 1, |i, a| x[(i, others[a])]);
        let llt = linalg::cholesky(linalg::gram(sub.as_ref()).as_ref(), "sub").unwrap();
        let x0: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
        let coef = linalg::chol_solve(&llt, &linalg::mat_t_vec(sub.as_ref(), &x0));
        let fitted = linalg::mat_vec(sub.as_ref(), &coef);
        let resid2: f64 = x0.iter().zip(&fitted).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((estimate_omega_jj(&data, 0).unwrap() - dof / resid2).abs() < 1e-9);
        let wide = sim(20, 30, 1.0, logit_link(), 1);
        assert!(estimate_omega_jj(&wide, 0).is_err());
    }

    #[test]
    fn ar1_omega_estimate_tracks_inverse() {
        let (n, p) = (300, 20);
        let rho: f64 = 0.6;
        let sigma = Mat::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()));
        let cov = Arc::new(Covariance::explicit(sigma).unwrap());
        let w = normalize_index(&vec![1.0; p], &cov).unwrap();
        let mut rel = 0.0;
        let reps = 50;
        for r in 0..reps {
            let data = Dataset::simulate(cov.clone(), w.clone(), &logit_link(), n, 100 + r, 200 + r).unwrap();
            let est = estimate_omega_diag(&data).unwrap();
            rel += (est[5] - cov.omega_jj(5)).abs() / cov.omega_jj(5);
        }
        assert!(rel / reps as f64 <= 10.0 / ((n - p) as f64).sqrt());
    }
}
