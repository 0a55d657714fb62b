//! Debiased coordinates, confidence intervals, tests, pivots and
//! proximal-representation diagnostics.
//!
//! The sign `±` in front of `w` is not identifiable from data. Pivots that
//! involve `w` take it from the oracle: `sign(t*)` for penalized fits and
//! `sign(a*)` for unpenalized ones.

use serde::{Deserialize, Serialize};

use crate::adjust::{ridge_lambda_eff, Adjustments, OracleQuantities, SigmaInfo};
use crate::error::{Error, Result};
use crate::estimator::FitResult;
use crate::linalg;
use crate::model::{Dataset, Truth};
use crate::rng::rng_from_seed;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaSource {
    Exact,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasedEstimate {
    pub beta: Vec<f64>,
    /// `β̂ + v̂⁻¹(nΣ)⁻¹Xᵀψ̂`
    pub beta_d: Vec<f64>,
    pub source: OmegaSource,
}

/// `β̂^(d) = β̂ + v̂⁻¹(nΣ)⁻¹Xᵀψ̂`. Unpenalized fits return `β̂` unchanged.
pub fn debias(fit: &FitResult, data: &Dataset, adj: &Adjustments, sigma: SigmaInfo<'_>) -> Result<DebiasedEstimate> {
    if !(adj.v != 0.0 && adj.v.is_finite()) {
        return Err(Error::Degenerate(format!("v̂ = {} in the debiased estimate", adj.v)));
    }
    let source = match sigma {
        SigmaInfo::Known(_) => OmegaSource::Exact,
        _ => OmegaSource::Estimated,
    };
    if fit.resolved.is_zero() {
        return Ok(DebiasedEstimate { beta: fit.beta.clone(), beta_d: fit.beta.clone(), source });
    }
    let corr = sigma.solve(data, &fit.score(data), "(nΣ)⁻¹Xᵀψ̂ in the debiased estimate")?;
    let beta_d = fit.beta.iter().zip(&corr).map(|(b, c)| b + c / adj.v).collect();
    Ok(DebiasedEstimate { beta: fit.beta.clone(), beta_d, source })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCI {
    pub j: usize,
    pub center: f64,
    pub half_width: f64,
    pub lo: f64,
    pub hi: f64,
    pub alpha: f64,
}

impl CoordinateCI {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

fn check_omega(omega: &[f64], p: usize) -> Result<()> {
    if omega.len() != p {
        return Err(Error::DimensionMismatch { what: "Ω diagonal", expected: p, got: omega.len() });
    }
    if let Some(o) = omega.iter().find(|o| !(**o > 0.0 && o.is_finite())) {
        return Err(Error::InvalidInput(format!("Ω_jj = {o} must be positive")));
    }
    Ok(())
}

/// Intervals for `±wⱼ`: center `(v̂/t̂)β̂^(d)ⱼ`, half-width `(r̂/t̂)(z/√n)Ω_jj^{1/2}`.
pub fn confidence_intervals(deb: &DebiasedEstimate, adj: &Adjustments, alpha: f64, omega: &[f64]) -> Result<Vec<CoordinateCI>> {
    check_omega(omega, deb.beta_d.len())?;
    let z = stats::z_two_sided(alpha)?;
    let t = adj.t();
    if !(t > 0.0) {
        return Err(Error::NoSignal);
    }
    let scale = adj.r() / t * z / (adj.n as f64).sqrt();
    Ok(deb
        .beta_d
        .iter()
        .zip(omega)
        .enumerate()
        .map(|(j, (b, o))| {
            let center = adj.v / t * b;
            let half_width = scale * o.sqrt();
            CoordinateCI { j, center, half_width, lo: center - half_width, hi: center + half_width, alpha }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestDecision {
    pub j: usize,
    /// `(v̂/r̂)√n|β̂^(d)ⱼ|/Ω_jj^{1/2}`
    pub statistic: f64,
    pub z: f64,
    pub reject: bool,
}

/// Tests `H₀: wⱼ = 0`, rejecting when `(v̂/r̂)√n|β̂^(d)ⱼ| > z_{α/2}Ω_jj^{1/2}`.
pub fn test_null(deb: &DebiasedEstimate, adj: &Adjustments, j: usize, alpha: f64, omega_jj: f64) -> Result<TestDecision> {
    if j >= deb.beta_d.len() {
        return Err(Error::InvalidInput(format!("coordinate {j} out of range")));
    }
    check_omega(&[omega_jj], 1)?;
    if !(adj.r2 > 0.0) {
        return Err(Error::Degenerate("r̂ = 0 in the test".into()));
    }
    let z = stats::z_two_sided(alpha)?;
    let statistic = adj.v / adj.r() * (adj.n as f64).sqrt() * deb.beta_d[j].abs() / omega_jj.sqrt();
    Ok(TestDecision { j, statistic, z, reject: statistic > z })
}

/// One row per coordinate; CI columns are `None` when `t̂ = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceRow {
    pub j: usize,
    pub beta: f64,
    pub beta_d: f64,
    pub center: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub stat: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub alpha: f64,
    pub z: f64,
    pub source: OmegaSource,
    pub rows: Vec<InferenceRow>,
    pub warning: Option<String>,
}

pub fn infer(deb: &DebiasedEstimate, adj: &Adjustments, alpha: f64, omega: &[f64]) -> Result<InferenceReport> {
    check_omega(omega, deb.beta_d.len())?;
    let z = stats::z_two_sided(alpha)?;
    let (cis, warning) = match confidence_intervals(deb, adj, alpha, omega) {
        Ok(c) => (Some(c), None),
        Err(Error::NoSignal) => {
            let msg = "t̂ = 0: confidence intervals are undefined, only tests are reported".to_string();
            log::warn!("{msg}");
            (None, Some(msg))
        }
        Err(e) => return Err(e),
    };
    let rows = (0..deb.beta_d.len())
        .map(|j| {
            let test = test_null(deb, adj, j, alpha, omega[j])?;
            let ci = cis.as_ref().map(|c| c[j]);
            Ok(InferenceRow {
                j,
                beta: deb.beta[j],
                beta_d: deb.beta_d[j],
                center: ci.map(|c| c.center),
                lo: ci.map(|c| c.lo),
                hi: ci.map(|c| c.hi),
                stat: test.statistic,
                reject: test.reject,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InferenceReport { alpha, z, source: deb.source, rows, warning })
}

/// Pivot values with the null/non-null split of the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotVector {
    pub values: Vec<f64>,
    pub null: Vec<bool>,
}

impl PivotVector {
    fn new(values: Vec<f64>, truth: &Truth) -> Result<Self> {
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!("non-finite pivot at coordinate {j}")));
        }
        let null = truth.w.as_slice().iter().map(|w| *w == 0.0).collect();
        Ok(Self { values, null })
    }

    pub fn null_values(&self) -> Vec<f64> {
        self.values.iter().zip(&self.null).filter(|(_, n)| **n).map(|(v, _)| *v).collect()
    }

    pub fn nonnull_values(&self) -> Vec<f64> {
        self.values.iter().zip(&self.null).filter(|(_, n)| !**n).map(|(v, _)| *v).collect()
    }
}

fn truth<'a>(data: &'a Dataset, what: &'static str) -> Result<&'a Truth> {
    data.truth.as_ref().ok_or(Error::MissingTruth(what))
}

/// `sign(t*)` for penalized fits, `sign(a*)` otherwise.
pub fn evaluation_sign(fit: &FitResult, oracle: &OracleQuantities) -> Result<f64> {
    if fit.resolved.is_zero() {
        Ok(oracle.sign_a())
    } else {
        oracle.sign_t().ok_or(Error::MissingTruth("t* for the sign of the pivot"))
    }
}

/// `(√n/Ω_jj^{1/2})((v̂/r̂)β̂^(d)ⱼ − (±t̂/r̂)wⱼ)`
pub fn pivot(data: &Dataset, deb: &DebiasedEstimate, adj: &Adjustments, omega: &[f64], sign: f64) -> Result<PivotVector> {
    let truth = truth(data, "the pivot")?;
    check_omega(omega, deb.beta_d.len())?;
    if !(adj.r2 > 0.0) {
        return Err(Error::Degenerate("r̂ = 0 in the pivot".into()));
    }
    let (r, sn) = (adj.r(), (adj.n as f64).sqrt());
    let t = sign * adj.t();
    let values = deb
        .beta_d
        .iter()
        .zip(truth.w.as_slice())
        .zip(omega)
        .map(|((b, w), o)| sn / o.sqrt() * (adj.v / r * b - t / r * w))
        .collect();
    PivotVector::new(values, truth)
}

/// Least-squares pivot
/// `((n−p)/Ω_jj^{1/2})[β̂ⱼ/‖y−Xβ̂‖ − (±wⱼ/√n)(‖Xβ̂‖²/‖Xβ̂−y‖² − p/(n−p))₊^{1/2}]`
/// with `± = sign(a*)`.
pub fn pivot_ls(fit: &FitResult, data: &Dataset, omega: &[f64], sign: f64) -> Result<PivotVector> {
    let truth = truth(data, "the least-squares pivot")?;
    let (n, p) = (data.n(), data.p());
    if !fit.loss.is_square() || !fit.resolved.is_zero() {
        return Err(Error::InvalidInput("the least-squares pivot needs an unpenalized square-loss fit".into()));
    }
    if p >= n {
        return Err(Error::InvalidInput(format!("the least-squares pivot needs p < n (p = {p}, n = {n})")));
    }
    check_omega(omega, p)?;
    let res2: f64 = data.y.iter().zip(&fit.xb).map(|(y, u)| (y - u).powi(2)).sum();
    if !(res2 > 1e-24 * linalg::norm_sq(&data.y)) {
        return Err(Error::Degenerate("‖y − Xβ̂‖ = 0 in the least-squares pivot".into()));
    }
    let res = res2.sqrt();
    let dof = (n - p) as f64;
    let a = (linalg::norm_sq(&fit.xb) / res2 - p as f64 / dof).max(0.0).sqrt();
    let sn = (n as f64).sqrt();
    let values = fit
        .beta
        .iter()
        .zip(truth.w.as_slice())
        .zip(omega)
        .map(|((b, w), o)| dof / o.sqrt() * (b / res - sign * w / sn * a))
        .collect();
    PivotVector::new(values, truth)
}

/// Ridge pivot `(√(n/p)/r̂)[(v̂+λ)β̂ⱼ − ±t̂wⱼ]` for `Σ = I/p`.
pub fn pivot_ridge(fit: &FitResult, data: &Dataset, adj: &Adjustments, sign: f64) -> Result<PivotVector> {
    let truth = truth(data, "the ridge pivot")?;
    let lam = ridge_lambda_eff(fit, SigmaInfo::Known(&truth.cov))?;
    if !(adj.r2 > 0.0) {
        return Err(Error::Degenerate("r̂ = 0 in the ridge pivot".into()));
    }
    let scale = (data.n() as f64 / data.p() as f64).sqrt() / adj.r();
    let t = sign * adj.t();
    let values = fit.beta.iter().zip(truth.w.as_slice()).map(|(b, w)| scale * ((adj.v + lam) * b - t * w)).collect();
    PivotVector::new(values, truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxResidualBeta {
    /// `maxⱼ |β̂ⱼ − prox[gⱼ/v̂](β̂^(d)ⱼ)|`, zero up to the KKT tolerance.
    pub exact_gap: f64,
    /// `(√n/Ω_jj^{1/2})(v̂/r̂)(β̂^(d)ⱼ − (±t̂/v̂)wⱼ)`, approximately `N(0,1)`.
    pub distributional: PivotVector,
}

/// Proximal representation of `β̂` for isotropic `Σ = cI`.
///
/// KKT gives `Xᵀψ̂/n ∈ ∂g(β̂)` and `β̂^(d) = β̂ + Xᵀψ̂/(n c v̂)`, hence
/// `β̂ = prox[g/(c v̂)](β̂^(d))` exactly.
pub fn prox_residual_beta(fit: &FitResult, data: &Dataset, deb: &DebiasedEstimate, adj: &Adjustments, sign: f64) -> Result<ProxResidualBeta> {
    let truth = truth(data, "the proximal representation of β̂")?;
    let c = truth
        .cov
        .isotropic_scale()
        .ok_or_else(|| Error::ConventionMismatch("the proximal representation needs isotropic Σ".into()))?;
    if !(adj.v > 0.0) {
        return Err(Error::Degenerate(format!("v̂ = {} in the proximal representation", adj.v)));
    }
    let s = 1.0 / (c * adj.v);
    let exact_gap = (0..fit.p())
        .map(|j| (fit.beta[j] - fit.resolved.prox_coord(j, s, deb.beta_d[j])).abs())
        .fold(0.0, f64::max);
    let omega = vec![1.0 / c; fit.p()];
    let distributional = pivot(data, deb, adj, &omega, sign)?;
    Ok(ProxResidualBeta { exact_gap, distributional })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxResidualPredicted {
    /// `xᵢᵀβ̂ + γ*ℓ'_{yᵢ}(xᵢᵀβ̂) − a*Uᵢ`, approximately `σ*Zᵢ`.
    pub residual: Vec<f64>,
    /// Empirical variance of `residual` divided by `σ*²`.
    pub variance_ratio: f64,
    /// `prox[γ*ℓ_{yᵢ}](a*Uᵢ + σ*Zᵢ)` with seeded `Zᵢ`, for distributional comparison with `Xβ̂`.
    pub simulated: Vec<f64>,
}

pub fn prox_residual_predicted(fit: &FitResult, data: &Dataset, oracle: &OracleQuantities, seed: u64) -> Result<ProxResidualPredicted> {
    use rand_distr::{Distribution, StandardNormal};
    let truth = truth(data, "the proximal representation of Xβ̂")?;
    let gs = oracle.gamma_star.ok_or(Error::MissingTruth("γ* in the proximal representation"))?;
    if !(gs > 0.0) {
        return Err(Error::Degenerate(format!("γ* = {gs} must be positive")));
    }
    let u = linalg::mat_vec(data.x(), truth.w.as_slice());
    let residual: Vec<f64> = (0..data.n())
        .map(|i| fit.xb[i] + gs * fit.loss.d1(data.y[i], fit.xb[i]) - oracle.a_star * u[i])
        .collect();
    let nf = residual.len() as f64;
    let mean = residual.iter().sum::<f64>() / nf;
    let var = residual.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / nf;
    let variance_ratio = var / oracle.sigma_star2;
    let mut rng = rng_from_seed(seed);
    let sd = oracle.sigma_star2.sqrt();
    let simulated = (0..data.n())
        .map(|i| {
            let z: f64 = StandardNormal.sample(&mut rng);
            fit.loss.prox(data.y[i], gs, oracle.a_star * u[i] + sd * z)
        })
        .collect();
    Ok(ProxResidualPredicted { residual, variance_ratio, simulated })
}

/// `t̂/v̂`, an estimate of `‖Σ^{1/2}β*‖` in linear models.
pub fn signal_strength(adj: &Adjustments) -> Result<f64> {
    if !(adj.v > 0.0) {
        return Err(Error::Degenerate(format!("v̂ = {} must be positive for the signal strength", adj.v)));
    }
    Ok(adj.t() / adj.v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjust::{compute_adjustments, compute_ahat, compute_oracle, compute_traces, Traces, Variant};
    use crate::estimator::{fit, SolverConfig};
    use crate::loss::LossFamily;
    use crate::model::{normalize_index, Covariance, LabelEncoding, LinkSpec, Noise};
    use crate::penalty::{L1Scaling, PenaltyFamily, RidgeScaling};
    use std::sync::Arc;

    const LOGIT: LossFamily = LossFamily::Logistic { encoding: LabelEncoding::ZeroOne };

    fn sim(n: usize, p: usize, scale: f64, link: LinkSpec, seed: u64) -> Dataset {
        let cov = Arc::new(Covariance::identity_scaled(p, scale).unwrap());
        let raw: Vec<f64> = (0..p).map(|j| if j < p.div_ceil(5) { 1.0 } else { 0.0 }).collect();
        let w = normalize_index(&raw, &cov).unwrap();
        Dataset::simulate(cov, w, &link, n, seed, seed + 1).unwrap()
    }

    fn logit() -> LinkSpec {
        LinkSpec::Logistic { signal: 2.0, encoding: LabelEncoding::ZeroOne }
    }

    fn pipeline(data: &Dataset, loss: &LossFamily, pen: &PenaltyFamily) -> (FitResult, Adjustments, Traces) {
        let f = fit(data, loss, pen, &SolverConfig::default().with_tol(1e-11)).unwrap();
        let ahat = compute_ahat(&f, data).unwrap();
        let tr = compute_traces(&ahat, &f);
        let adj = compute_adjustments(&f, data, &tr, SigmaInfo::from_truth(data), Variant::General, None).unwrap();
        (f, adj, tr)
    }

    #[test]
    fn unregularized_debias_is_identity() {
        let data = sim(200, 20, 1.0, logit(), 1);
        let (f, adj, _) = pipeline(&data, &LOGIT, &PenaltyFamily::None);
        let deb = debias(&f, &data, &adj, SigmaInfo::Unknown).unwrap();
        assert_eq!(deb.beta_d, f.beta);
    }

    #[test]
    fn ridge_debias_closed_form() {
        let (n, p) = (150, 100);
        let data = sim(n, p, 1.0 / p as f64, logit(), 2);
        let lam = 0.3;
        let (f, adj, _) = pipeline(&data, &LOGIT, &PenaltyFamily::Ridge { lambda: lam, scaling: RidgeScaling::PerP });
        let deb = debias(&f, &data, &adj, SigmaInfo::from_truth(&data)).unwrap();
        for j in 0..p {
            let want = f.beta[j] * (1.0 + lam / adj.v);
            assert!((deb.beta_d[j] - want).abs() <= 1e-8 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn l1_inactive_coordinate_gets_moved() {
        let (n, p) = (200, 60);
        let data = sim(n, p, 1.0 / n as f64, logit(), 3);
        let pen = PenaltyFamily::L1 { lambda: 0.02, scaling: L1Scaling::PerSqrtN };
        let (f, adj, _) = pipeline(&data, &LOGIT, &pen);
        let deb = debias(&f, &data, &adj, SigmaInfo::from_truth(&data)).unwrap();
        let j = (0..p).find(|j| f.beta[*j] == 0.0).expect("some inactive coordinate");
        // direct evaluation: v̂⁻¹ eⱼᵀ(nΣ)⁻¹Xᵀψ̂ with nΣ = I
        let direct: f64 = (0..n).map(|i| data.x()[(i, j)] * f.psi[i]).sum::<f64>() / adj.v;
        assert!((deb.beta_d[j] - direct).abs() < 1e-10);
        assert!(direct != 0.0);
        // prox-KKT identity
        let pr = prox_residual_beta(&f, &data, &deb, &adj, 1.0).unwrap();
        assert!(pr.exact_gap <= 1e-6, "{}", pr.exact_gap);
    }

    #[test]
    fn ci_test_duality_and_no_signal() {
        let (n, p) = (300, 150);
        let data = sim(n, p, 1.0 / p as f64, logit(), 4);
        let (f, adj, _) = pipeline(&data, &LOGIT, &PenaltyFamily::Ridge { lambda: 0.1, scaling: RidgeScaling::PerP });
        let deb = debias(&f, &data, &adj, SigmaInfo::from_truth(&data)).unwrap();
        let omega = vec![p as f64; p];
        let cis = confidence_intervals(&deb, &adj, 0.05, &omega).unwrap();
        for (j, ci) in cis.iter().enumerate() {
            assert_eq!(ci.lo, ci.center - ci.half_width);
            let t = test_null(&deb, &adj, j, 0.05, omega[j]).unwrap();
            assert_eq!(t.reject, !ci.contains(0.0), "j = {j}");
        }
        let mut zero = adj;
        zero.t2 = -1.0;
        assert!(matches!(confidence_intervals(&deb, &zero, 0.05, &omega), Err(Error::NoSignal)));
        let rep = infer(&deb, &zero, 0.05, &omega).unwrap();
        assert!(rep.warning.is_some() && rep.rows.iter().all(|r| r.lo.is_none()));
        let mut d0 = deb.clone();
        d0.beta_d[0] = 0.0;
        assert!(!test_null(&d0, &adj, 0, 0.05, 1.0).unwrap().reject);
    }

    #[test]
    fn pivot_sign_flip_invariance() {
        let (n, p) = (300, 150);
        let data = sim(n, p, 1.0 / p as f64, logit(), 5);
        let pen = PenaltyFamily::Ridge { lambda: 0.5, scaling: RidgeScaling::PerP };
        let (f, adj, tr) = pipeline(&data, &LOGIT, &pen);
        let deb = debias(&f, &data, &adj, SigmaInfo::from_truth(&data)).unwrap();
        let oracle = compute_oracle(&f, &data, None, Some(&tr)).unwrap();
        let s = evaluation_sign(&f, &oracle).unwrap();
        let omega = vec![p as f64; p];
        let a = pivot(&data, &deb, &adj, &omega, s).unwrap();
        let t = data.truth.clone().unwrap();
        let flipped = Dataset::from_design(data.design.clone(), data.y.clone(), Some(Truth { w: t.w.flipped(), ..t })).unwrap();
        let oracle_f = compute_oracle(&f, &flipped, None, Some(&tr)).unwrap();
        let sf = evaluation_sign(&f, &oracle_f).unwrap();
        assert_eq!(sf, -s);
        let b = pivot(&flipped, &deb, &adj, &omega, sf).unwrap();
        assert_eq!(a.values, b.values);
        // the ridge pivot is the same quantity written through the KKT identity
        let r = pivot_ridge(&f, &data, &adj, s).unwrap();
        for (u, v) in a.values.iter().zip(&r.values) {
            assert!((u - v).abs() < 1e-7 * (1.0 + u.abs()));
        }
        for (j, v) in r.null_values().iter().enumerate() {
            let jj = (0..p).filter(|k| t.w.as_slice()[*k] == 0.0).nth(j).unwrap();
            let want = (n as f64 / p as f64).sqrt() / adj.r() * (adj.v + 0.5) * f.beta[jj];
            assert!((v - want).abs() < 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn ridge_prox_closed_form() {
        let (n, p) = (120, 40);
        let data = sim(n, p, 1.0 / n as f64, logit(), 6);
        let pen = PenaltyFamily::Ridge { lambda: 0.8, scaling: RidgeScaling::PerN };
        let (f, adj, _) = pipeline(&data, &LOGIT, &pen);
        let deb = debias(&f, &data, &adj, SigmaInfo::from_truth(&data)).unwrap();
        // g = λ‖b‖²/(2n) ⇒ gⱼ = λb²/2 on the 1/n scale, prox[gⱼ/v̂](x) = x/(1 + λ/v̂)
        for j in 0..p {
            let closed = deb.beta_d[j] / (1.0 + 0.8 / adj.v);
            let general = f.resolved.prox_coord(j, n as f64 / adj.v, deb.beta_d[j]);
            assert!((closed - general).abs() < 1e-12 * (1.0 + closed.abs()));
            assert!((closed - f.beta[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn ls_pivot_degenerate_and_signal_strength() {
        let (n, p) = (30, 5);
        let link = LinkSpec::Linear { signal: 1.0, noise: Noise::Gaussian { sd: 0.0 } };
        let data = sim(n, p, 1.0, link, 7);
        let f = fit(&data, &LossFamily::Square, &PenaltyFamily::None, &SolverConfig::default()).unwrap();
        let r = pivot_ls(&f, &data, &vec![1.0; p], 1.0);
        assert!(matches!(r, Err(Error::Degenerate(_))), "{r:?}");
        let adj = Adjustments {
            variant: Variant::General,
            n,
            p,
            df: 0.0,
            v: 0.5,
            r2: 1.0,
            gamma: 0.0,
            t2: -0.2,
            a2: 0.0,
            sigma2: 0.0,
        };
        assert_eq!(signal_strength(&adj).unwrap(), 0.0);
        assert!(signal_strength(&Adjustments { v: 0.0, ..adj }).is_err());
    }

    #[test]
    fn zero_estimator_signal_strength_reduces_to_null_form() {
        // β̂ = 0 ⇒ ψ̂ = −ℓ'(0), df̂ = 0 and t̂² = ‖Σ^{-1/2}Xᵀψ̂‖²/n² + v̂²·0 − (p/n)r̂²
        let (n, p) = (200, 50);
        let link = LinkSpec::Linear { signal: 1.0, noise: Noise::Gaussian { sd: 1.0 } };
        let data = sim(n, p, 1.0, link, 8);
        let pen = PenaltyFamily::L1 { lambda: 1e3, scaling: L1Scaling::PerSqrtN };
        let (f, adj, _) = pipeline(&data, &LossFamily::Square, &pen);
        assert!(f.active.is_empty());
        let xty = linalg::mat_t_vec(data.x(), &data.y);
        let want = linalg::norm_sq(&xty) / (n * n) as f64 - p as f64 / n as f64 * linalg::norm_sq(&data.y) / n as f64;
        assert!((adj.t2 - want).abs() < 1e-10);
        assert_eq!(adj.v, 1.0);
        assert!((signal_strength(&adj).unwrap() - want.max(0.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn predicted_prox_square_loss_closed_form() {
        let (n, p) = (100, 30);
        let link = LinkSpec::Linear { signal: 1.0, noise: Noise::Gaussian { sd: 1.0 } };
        let data = sim(n, p, 1.0 / p as f64, link, 9);
        let pen = PenaltyFamily::Ridge { lambda: 1.0, scaling: RidgeScaling::PerP };
        let f = fit(&data, &LossFamily::Square, &pen, &SolverConfig::default()).unwrap();
        let ahat = compute_ahat(&f, &data).unwrap();
        let tr = compute_traces(&ahat, &f);
        let o = compute_oracle(&f, &data, Some(&ahat), Some(&tr)).unwrap();
        let pr = prox_residual_predicted(&f, &data, &o, 1).unwrap();
        let gs = o.gamma_star.unwrap();
        let u = linalg::mat_vec(data.x(), data.truth.as_ref().unwrap().w.as_slice());
        for i in 0..n {
            let want = f.xb[i] + gs * (f.xb[i] - data.y[i]) - o.a_star * u[i];
            assert!((pr.residual[i] - want).abs() < 1e-12);
        }
        let bad = OracleQuantities { gamma_star: Some(0.0), ..o };
        assert!(prox_residual_predicted(&f, &data, &bad, 1).is_err());
    }
}
