//! Solvers for `min_b (1/n) Σᵢ ℓ_{yᵢ}(xᵢᵀb) + g(b)`.
//!
//! Smooth penalties go through damped Newton. Penalties with an L1 part use a
//! proximal Newton outer loop whose quadratic model is minimized by cyclic
//! coordinate descent on a working set, followed by a Newton polish on the
//! active set with signs held fixed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::loss::LossFamily;
use crate::model::{Dataset, LabelEncoding};
use crate::penalty::{soft_threshold, PenaltyFamily, ResolvedPenalty};
use crate::system::CurvatureSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Newton for smooth penalties, coordinate descent otherwise.
    #[default]
    Auto,
    Newton,
    ProxGradient,
    CoordinateDescent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub algorithm: Algorithm,
    pub max_iters: usize,
    /// Relative KKT tolerance, see [`kkt_residual`].
    pub kkt_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Step shrink factor for backtracking.
    pub backtrack: f64,
    /// Threshold `K` of the coercive guard; only valid without a penalty.
    pub coercive_k: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { algorithm: Algorithm::Auto, max_iters: 1000, kkt_tol: 1e-8, armijo: 1e-4, backtrack: 0.5, coercive_k: None }
    }
}

impl SolverConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.kkt_tol = tol;
        self
    }

    pub fn with_algorithm(mut self, algorithm: Algorithm) -> Self {
        self.algorithm = algorithm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.kkt_tol > 0.0) {
            errs.push(format!("kkt_tol = {} must be > 0", self.kkt_tol));
        }
        if self.max_iters == 0 {
            errs.push("max_iters must be ≥ 1".into());
        }
        if !(self.armijo > 0.0 && self.armijo < 0.5) {
            errs.push(format!("armijo = {} must lie in (0, 0.5)", self.armijo));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            errs.push(format!("backtrack = {} must lie in (0, 1)", self.backtrack));
        }
        if let Some(k) = self.coercive_k {
            if !(k > 0.0 && k.is_finite()) {
                errs.push(format!("coercive K = {k} must be positive"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: Vec<f64>,
    /// `Xβ̂`
    pub xb: Vec<f64>,
    /// `ψ̂ = −ℓ'_y(Xβ̂)`
    pub psi: Vec<f64>,
    /// `D = ℓ''_y(Xβ̂)`
    pub d: Vec<f64>,
    /// `{j : β̂ⱼ ≠ 0}`
    pub active: Vec<usize>,
    pub kkt_residual: f64,
    pub converged: bool,
    pub guard_active: bool,
    pub guard_k: Option<f64>,
    pub iterations: usize,
    pub objective: f64,
    /// KKT residual after each outer iteration.
    pub trace: Vec<f64>,
    pub loss: LossFamily,
    pub penalty: PenaltyFamily,
    pub resolved: ResolvedPenalty,
}

impl FitResult {
    pub fn n(&self) -> usize {
        self.psi.len()
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    /// `Xᵀψ̂/n`
    pub fn score(&self, data: &Dataset) -> Vec<f64> {
        let n = self.n() as f64;
        linalg::mat_t_vec(data.x(), &self.psi).into_iter().map(|v| v / n).collect()
    }
}

/// Coercive guard `H` with `H' = h`, `h(t) = 3t² − 2t³` on `[0, 1]`, `0` below and `1` above.
pub fn guard_h_integral(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t <= 1.0 {
        t * t * t - 0.5 * t * t * t * t
    } else {
        0.5 + (t - 1.0)
    }
}

pub fn guard_h(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t <= 1.0 {
        3.0 * t * t - 2.0 * t * t * t
    } else {
        1.0
    }
}

pub fn guard_h_prime(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        0.0
    } else {
        6.0 * t - 6.0 * t * t
    }
}

/// Armijo test that tolerates objective rounding once the predicted decrease
/// is below machine precision.
fn sufficient_decrease(f_new: f64, f_old: f64, step: f64, slope: f64, armijo: f64) -> bool {
    let scale = f_old.abs().max(1.0);
    if f_new <= f_old + armijo * step * slope {
        return true;
    }
    step == 1.0 && -slope <= 1e-12 * scale && f_new <= f_old + 1e-14 * scale
}

fn capped(mut trace: Vec<f64>) -> Vec<f64> {
    const KEEP: usize = 64;
    if trace.len() > KEEP {
        trace.drain(..trace.len() - KEEP);
    }
    trace
}

struct Problem<'a> {
    data: &'a Dataset,
    loss: LossFamily,
    pen: &'a ResolvedPenalty,
    guard: Option<f64>,
    n: f64,
}

struct Iterate {
    beta: Vec<f64>,
    iterations: usize,
    trace: Vec<f64>,
    converged: bool,
}

impl Problem<'_> {
    fn y(&self) -> &[f64] {
        &self.data.y
    }

    fn guard_arg(&self, eta: &[f64]) -> Option<(f64, f64)> {
        self.guard.map(|k| (k, 0.5 * (linalg::norm_sq(eta) / self.n - k)))
    }

    fn loss_value(&self, eta: &[f64]) -> f64 {
        self.y().iter().zip(eta).map(|(&y, &u)| self.loss.value(y, u)).sum::<f64>() / self.n
    }

    fn objective(&self, beta: &[f64], eta: &[f64]) -> f64 {
        let mut f = self.loss_value(eta) + self.pen.value(beta);
        if let Some((_, s)) = self.guard_arg(eta) {
            f += guard_h_integral(s);
        }
        f
    }

    fn d1(&self, eta: &[f64]) -> Vec<f64> {
        self.y().iter().zip(eta).map(|(&y, &u)| self.loss.d1(y, u)).collect()
    }

    fn d2(&self, eta: &[f64]) -> Vec<f64> {
        self.y().iter().zip(eta).map(|(&y, &u)| self.loss.d2(y, u)).collect()
    }

    /// `u = Xᵀψ/n`, including the guard contribution when active.
    fn score(&self, eta: &[f64], d1: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = d1.iter().map(|g| -g).collect();
        if let Some((_, s)) = self.guard_arg(eta) {
            let h = guard_h(s);
            if h != 0.0 {
                v.iter_mut().zip(eta).for_each(|(a, e)| *a -= h * e);
            }
        }
        linalg::mat_t_vec(self.data.x(), &v).into_iter().map(|a| a / self.n).collect()
    }

    fn kkt(&self, beta: &[f64], u: &[f64]) -> f64 {
        let scale = linalg::norm_inf(u).max(1.0);
        self.pen.max_subgrad_distance(beta, u) / scale
    }

    /// Certificate that the unregularized minimizer does not exist: the current
    /// iterate strictly separates the labels.
    fn separated(&self, eta: &[f64]) -> bool {
        if !self.pen.is_zero() || self.guard.is_some() {
            return false;
        }
        let margin = |y: f64, u: f64| -> Option<f64> {
            match self.loss {
                LossFamily::Logistic { encoding: LabelEncoding::ZeroOne } => Some((2.0 * y - 1.0) * u),
                LossFamily::Logistic { encoding: LabelEncoding::PlusMinus } => Some(y * u),
                LossFamily::BinomialLogistic { q } => {
                    if y == 0.0 {
                        Some(-u)
                    } else if y == q as f64 {
                        Some(u)
                    } else {
                        None
                    }
                }
                _ => None,
            }
        };
        self.y().iter().zip(eta).all(|(&y, &u)| margin(y, u).is_some_and(|m| m > 0.0))
    }

    fn diverging(&self, eta: &[f64]) -> bool {
        self.pen.is_zero() && self.guard.is_none() && linalg::norm_sq(eta) / self.n > 1e8
    }
}

/// Fits `β̂`; with `cfg.coercive_k` set this is [`fit_coercive`].
pub fn fit(data: &Dataset, loss: &LossFamily, penalty: &PenaltyFamily, cfg: &SolverConfig) -> Result<FitResult> {
    fit_from(data, loss, penalty, cfg, None)
}

/// Same as [`fit`] starting from `init` instead of zero.
pub fn fit_from(
    data: &Dataset,
    loss: &LossFamily,
    penalty: &PenaltyFamily,
    cfg: &SolverConfig,
    init: Option<&[f64]>,
) -> Result<FitResult> {
    cfg.validate()?;
    loss.check_responses(&data.y)?;
    let (n, p) = (data.n(), data.p());
    let pen = penalty.resolve(n, p)?;
    if let Some(b) = init {
        if b.len() != p {
            return Err(Error::DimensionMismatch { what: "initial β length", expected: p, got: b.len() });
        }
    }
    if let Some(k) = cfg.coercive_k {
        if !pen.is_zero() {
            return Err(Error::UnsupportedPenalty("the coercive guard is only defined without a penalty".into()));
        }
        return fit_coercive_impl(data, loss, k, cfg, init);
    }
    let prob = Problem { data, loss: *loss, pen: &pen, guard: None, n: n as f64 };
    let algorithm = match cfg.algorithm {
        Algorithm::Auto if pen.has_l1() => Algorithm::CoordinateDescent,
        Algorithm::Auto => Algorithm::Newton,
        Algorithm::Newton if pen.has_l1() => {
            return Err(Error::UnsupportedPenalty(format!(
                "newton needs a smooth penalty, '{}' has an L1 part (use coordinate-descent)",
                penalty.name()
            )))
        }
        a => a,
    };
    let it = if pen.is_zero() && loss.is_square() && init.is_none() {
        least_squares(&prob)?
    } else {
        match algorithm {
            Algorithm::Newton => newton(&prob, cfg, init)?,
            Algorithm::CoordinateDescent => prox_newton(&prob, cfg, init)?,
            Algorithm::ProxGradient => fista(&prob, cfg, init)?,
            Algorithm::Auto => unreachable!(),
        }
    };
    finish(&prob, penalty, it, cfg)
}

/// Minimizes `Σℓ + nH(½(‖Xb‖²/n − K))`; requires `p < n`.
pub fn fit_coercive(data: &Dataset, loss: &LossFamily, k: f64, cfg: &SolverConfig) -> Result<FitResult> {
    let mut cfg = cfg.clone();
    cfg.coercive_k = Some(k);
    fit(data, loss, &PenaltyFamily::None, &cfg)
}

/// Rebuilds the fit at a stored `β̂` without iterating; fails unless the KKT
/// conditions hold to `cfg.kkt_tol`.
pub fn evaluate_at(data: &Dataset, loss: &LossFamily, penalty: &PenaltyFamily, cfg: &SolverConfig, beta: &[f64]) -> Result<FitResult> {
    cfg.validate()?;
    loss.check_responses(&data.y)?;
    if beta.len() != data.p() {
        return Err(Error::DimensionMismatch { what: "β length", expected: data.p(), got: beta.len() });
    }
    let pen = penalty.resolve(data.n(), data.p())?;
    let prob = Problem { data, loss: *loss, pen: &pen, guard: cfg.coercive_k, n: data.n() as f64 };
    let it = Iterate { beta: beta.to_vec(), iterations: 0, trace: Vec::new(), converged: false };
    finish(&prob, penalty, it, cfg)
}

fn fit_coercive_impl(data: &Dataset, loss: &LossFamily, k: f64, cfg: &SolverConfig, init: Option<&[f64]>) -> Result<FitResult> {
    if data.p() >= data.n() {
        return Err(Error::InvalidInput(format!("the coercive fit needs p < n (p = {}, n = {})", data.p(), data.n())));
    }
    let pen = PenaltyFamily::None.resolve(data.n(), data.p())?;
    let prob = Problem { data, loss: *loss, pen: &pen, guard: Some(k), n: data.n() as f64 };
    let it = newton(&prob, cfg, init)?;
    finish(&prob, &PenaltyFamily::None, it, cfg)
}

fn finish(prob: &Problem<'_>, penalty: &PenaltyFamily, it: Iterate, cfg: &SolverConfig) -> Result<FitResult> {
    let x = prob.data.x();
    let xb = linalg::mat_vec(x, &it.beta);
    let d1 = prob.d1(&xb);
    let u = prob.score(&xb, &d1);
    let kkt = prob.kkt(&it.beta, &u);
    let converged = it.converged || kkt <= cfg.kkt_tol;
    if !converged {
        return Err(Error::NonConvergence { iterations: it.iterations, kkt_residual: kkt, trace: capped(it.trace) });
    }
    let objective = prob.objective(&it.beta, &xb);
    let guard_active = prob.guard_arg(&xb).is_some_and(|(_, s)| s > 0.0);
    let psi: Vec<f64> = d1.iter().map(|g| -g).collect();
    let d = prob.d2(&xb);
    let active = (0..it.beta.len()).filter(|&j| it.beta[j] != 0.0).collect();
    Ok(FitResult {
        beta: it.beta,
        xb,
        psi,
        d,
        active,
        kkt_residual: kkt,
        converged,
        guard_active,
        guard_k: prob.guard,
        iterations: it.iterations,
        objective,
        trace: it.trace,
        loss: prob.loss,
        penalty: penalty.clone(),
        resolved: prob.pen.clone(),
    })
}

fn least_squares(prob: &Problem<'_>) -> Result<Iterate> {
    let design = &prob.data.design;
    if design.p() >= design.n() {
        return Err(Error::Singular(format!(
            "unpenalized least squares needs p < n (p = {}, n = {})",
            design.p(),
            design.n()
        )));
    }
    let llt = design.gram_cholesky()?;
    let x = design.x();
    let mut beta = linalg::chol_solve(llt, &linalg::mat_t_vec(x, &prob.data.y));
    // one step of iterative refinement
    let r: Vec<f64> = prob.data.y.iter().zip(linalg::mat_vec(x, &beta)).map(|(y, f)| y - f).collect();
    let corr = linalg::chol_solve(llt, &linalg::mat_t_vec(x, &r));
    beta.iter_mut().zip(corr).for_each(|(b, c)| *b += c);
    Ok(Iterate { beta, iterations: 1, trace: Vec::new(), converged: true })
}

fn newton(prob: &Problem<'_>, cfg: &SolverConfig, init: Option<&[f64]>) -> Result<Iterate> {
    let data = prob.data;
    let x = data.x();
    let p = data.p();
    let mut beta = init.map_or_else(|| vec![0.0; p], <[f64]>::to_vec);
    let mut eta = linalg::mat_vec(x, &beta);
    let mut obj = prob.objective(&beta, &eta);
    let mut trace = Vec::new();
    for iter in 0..cfg.max_iters {
        let d1 = prob.d1(&eta);
        let u = prob.score(&eta, &d1);
        let kkt = prob.kkt(&beta, &u);
        trace.push(kkt);
        if kkt <= cfg.kkt_tol {
            return Ok(Iterate { beta, iterations: iter, trace, converged: true });
        }
        if prob.separated(&eta) || prob.diverging(&eta) {
            return Err(Error::Separable);
        }
        // gradient of the smooth objective
        let grad: Vec<f64> = (0..p).map(|j| prob.pen.curvature[j] * beta[j] - u[j]).collect();
        let mut dd = prob.d2(&eta);
        let mut rank_one = None;
        if let Some((_, s)) = prob.guard_arg(&eta) {
            let h = guard_h(s);
            dd.iter_mut().for_each(|v| *v += h);
            let hp = guard_h_prime(s);
            if hp > 0.0 {
                let g: Vec<f64> = linalg::mat_t_vec(x, &eta).into_iter().map(|v| v / prob.n).collect();
                rank_one = Some((hp, g));
            }
        }
        let sys = damped_system(prob, &dd)?;
        let mut dir = sys.solve(&grad);
        if let Some((hp, g)) = &rank_one {
            let ag = sys.solve(g);
            let coef = hp * linalg::dot(g, &dir) / (1.0 + hp * linalg::dot(g, &ag));
            dir.iter_mut().zip(&ag).for_each(|(d, a)| *d -= coef * a);
        }
        dir.iter_mut().for_each(|d| *d = -*d);
        let slope = linalg::dot(&grad, &dir);
        if !(slope < 0.0) {
            break;
        }
        let xd = linalg::mat_vec(x, &dir);
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-14 {
            let b_new: Vec<f64> = beta.iter().zip(&dir).map(|(b, d)| b + step * d).collect();
            let eta_new: Vec<f64> = eta.iter().zip(&xd).map(|(e, d)| e + step * d).collect();
            let f_new = prob.objective(&b_new, &eta_new);
            if sufficient_decrease(f_new, obj, step, slope, cfg.armijo) {
                beta = b_new;
                eta = eta_new;
                obj = f_new;
                accepted = true;
                break;
            }
            step *= cfg.backtrack;
        }
        if !accepted {
            break;
        }
    }
    let d1 = prob.d1(&eta);
    let kkt = prob.kkt(&beta, &prob.score(&eta, &d1));
    if prob.separated(&eta) || prob.diverging(&eta) {
        return Err(Error::Separable);
    }
    let iterations = trace.len();
    Ok(Iterate { beta, iterations, trace, converged: kkt <= cfg.kkt_tol })
}

/// Factors the Newton system, adding a growing multiple of the identity if needed.
fn damped_system(prob: &Problem<'_>, dd: &[f64]) -> Result<CurvatureSystem> {
    let design = prob.data.design.clone();
    let diag = prob.pen.curvature.clone();
    let mut shift = 0.0;
    let base = {
        let x = prob.data.x();
        let colsq: f64 = (0..x.ncols()).map(|j| linalg::norm_sq(linalg::col(x, j))).sum::<f64>();
        (colsq / (prob.n * x.ncols().max(1) as f64)).max(1e-300)
    };
    for _ in 0..12 {
        match CurvatureSystem::build(design.clone(), dd, None, diag.clone(), shift) {
            Ok(s) => return Ok(s),
            Err(Error::Singular(_)) => shift = if shift == 0.0 { 1e-12 * base } else { shift * 100.0 },
            Err(e) => return Err(e),
        }
    }
    Err(Error::Singular("newton system stays singular after damping".into()))
}

fn prox_newton(prob: &Problem<'_>, cfg: &SolverConfig, init: Option<&[f64]>) -> Result<Iterate> {
    let data = prob.data;
    let x = data.x();
    let (n, p) = (data.n(), data.p());
    let pen = prob.pen;
    let mut beta = init.map_or_else(|| vec![0.0; p], <[f64]>::to_vec);
    let mut eta = linalg::mat_vec(x, &beta);
    let mut obj = prob.objective(&beta, &eta);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut stalls = 0;
    for _ in 0..cfg.max_iters {
        let d1 = prob.d1(&eta);
        let u = prob.score(&eta, &d1);
        let scale = linalg::norm_inf(&u).max(1.0);
        let kkt = pen.max_subgrad_distance(&beta, &u) / scale;
        trace.push(kkt);
        if kkt <= cfg.kkt_tol {
            converged = true;
            break;
        }
        let dd = prob.d2(&eta);
        let inner_tol = (1e-2 * kkt * scale / (1.0 + stalls as f64 * 10.0)).max(1e-15 * scale);
        let mut in_ws: Vec<bool> = (0..p).map(|j| beta[j] != 0.0 || u[j].abs() > pen.l1[j]).collect();
        let mut ws: Vec<usize> = (0..p).filter(|&j| in_ws[j]).collect();
        let mut z = beta.clone();
        let mut r = vec![0.0; n];
        let mut a = vec![f64::NAN; p];
        let model_grad = |j: usize, r: &[f64]| -> f64 {
            let col = linalg::col(x, j);
            let mut s = 0.0;
            for i in 0..n {
                s += (d1[i] + dd[i] * r[i]) * col[i];
            }
            s / prob.n
        };
        for _sweep in 0..100_000 {
            let mut max_change = 0.0f64;
            for &j in &ws {
                let col = linalg::col(x, j);
                if a[j].is_nan() {
                    a[j] = col.iter().zip(&dd).map(|(v, w)| w * v * v).sum::<f64>() / prob.n;
                }
                let g = model_grad(j, &r);
                let denom = a[j] + pen.curvature[j];
                let znew = if denom > 0.0 {
                    soft_threshold(a[j] * z[j] - g, pen.l1[j]) / denom
                } else {
                    z[j]
                };
                let delta = znew - z[j];
                if delta != 0.0 {
                    for (ri, ci) in r.iter_mut().zip(col) {
                        *ri += delta * ci;
                    }
                    z[j] = znew;
                    max_change = max_change.max(delta.abs() * denom);
                }
            }
            if max_change <= inner_tol {
                let mut added = false;
                for j in 0..p {
                    if !in_ws[j] && model_grad(j, &r).abs() > pen.l1[j] + inner_tol {
                        in_ws[j] = true;
                        ws.push(j);
                        added = true;
                    }
                }
                if !added {
                    break;
                }
            }
        }
        let dir: Vec<f64> = z.iter().zip(&beta).map(|(a, b)| a - b).collect();
        let delta = -linalg::dot(&u, &dir) + pen.value(&z) - pen.value(&beta);
        if !(delta < 0.0) {
            stalls += 1;
            if stalls > 5 {
                break;
            }
            continue;
        }
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-14 {
            let b_new: Vec<f64> = beta.iter().zip(&dir).map(|(b, d)| b + step * d).collect();
            let eta_new: Vec<f64> = eta.iter().zip(&r).map(|(e, d)| e + step * d).collect();
            let f_new = prob.objective(&b_new, &eta_new);
            if sufficient_decrease(f_new, obj, step, delta, cfg.armijo) {
                beta = b_new;
                eta = eta_new;
                obj = f_new;
                accepted = true;
                break;
            }
            step *= cfg.backtrack;
        }
        if !accepted {
            stalls += 1;
            if stalls > 5 {
                break;
            }
        }
    }
    if let Some(polished) = polish(prob, &beta) {
        let eta_p = linalg::mat_vec(x, &polished);
        let kp = prob.kkt(&polished, &prob.score(&eta_p, &prob.d1(&eta_p)));
        let k0 = prob.kkt(&beta, &prob.score(&eta, &prob.d1(&eta)));
        if kp <= k0 {
            beta = polished;
            trace.push(kp);
            converged = converged || kp <= cfg.kkt_tol;
        }
    }
    let iterations = trace.len();
    Ok(Iterate { beta, iterations, trace, converged })
}

/// Newton on the active set with signs fixed; `None` if a sign would flip.
fn polish(prob: &Problem<'_>, beta: &[f64]) -> Option<Vec<f64>> {
    let x = prob.data.x();
    let pen = prob.pen;
    let active: Vec<usize> = (0..beta.len()).filter(|&j| beta[j] != 0.0).collect();
    if active.is_empty() {
        return None;
    }
    let signs: Vec<f64> = active.iter().map(|&j| beta[j].signum()).collect();
    let mut b = beta.to_vec();
    let mut eta = linalg::mat_vec(x, &b);
    let restricted = |b: &[f64], eta: &[f64]| prob.objective(b, eta);
    let mut obj = restricted(&b, &eta);
    for _ in 0..50 {
        let d1 = prob.d1(&eta);
        let grad: Vec<f64> = active
            .iter()
            .enumerate()
            .map(|(a, &j)| {
                linalg::dot(linalg::col(x, j), &d1) / prob.n + pen.l1[j] * signs[a] + pen.curvature[j] * b[j]
            })
            .collect();
        if linalg::norm_inf(&grad) <= 1e-15 {
            break;
        }
        let dd = prob.d2(&eta);
        let diag = active.iter().map(|&j| pen.curvature[j]).collect();
        let sys = CurvatureSystem::build(prob.data.design.clone(), &dd, Some(active.clone()), diag, 0.0).ok()?;
        let dir: Vec<f64> = sys.solve(&grad).into_iter().map(|v| -v).collect();
        let slope = linalg::dot(&grad, &dir);
        if !(slope < 0.0) {
            break;
        }
        let mut step = 1.0;
        let mut moved = false;
        while step > 1e-10 {
            let mut nb = b.clone();
            let mut flipped = false;
            for (a, &j) in active.iter().enumerate() {
                nb[j] = b[j] + step * dir[a];
                if nb[j] * signs[a] <= 0.0 {
                    flipped = true;
                }
            }
            if flipped {
                return None;
            }
            let neta = linalg::mat_vec(x, &nb);
            let f = restricted(&nb, &neta);
            if sufficient_decrease(f, obj, step, slope, 1e-4) {
                b = nb;
                eta = neta;
                obj = f;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Some(b)
}

/// Monotone FISTA with backtracking on the Lipschitz constant of the loss part.
fn fista(prob: &Problem<'_>, cfg: &SolverConfig, init: Option<&[f64]>) -> Result<Iterate> {
    let x = prob.data.x();
    let p = prob.data.p();
    let pen = prob.pen;
    let mut xk = init.map_or_else(|| vec![0.0; p], <[f64]>::to_vec);
    let mut eta_x = linalg::mat_vec(x, &xk);
    let mut fx = prob.objective(&xk, &eta_x);
    let mut yk = xk.clone();
    let mut t = 1.0f64;
    let mut lip = 1.0f64;
    let mut trace = Vec::new();
    for iter in 0..cfg.max_iters {
        let d1x = prob.d1(&eta_x);
        let kkt = prob.kkt(&xk, &prob.score(&eta_x, &d1x));
        trace.push(kkt);
        if kkt <= cfg.kkt_tol {
            return Ok(Iterate { beta: xk, iterations: iter, trace, converged: true });
        }
        let eta_y = linalg::mat_vec(x, &yk);
        let fy = prob.loss_value(&eta_y);
        let grad: Vec<f64> = prob.score(&eta_y, &prob.d1(&eta_y)).into_iter().map(|v| -v).collect();
        let (z, eta_z) = loop {
            let arg: Vec<f64> = yk.iter().zip(&grad).map(|(y, g)| y - g / lip).collect();
            let z = pen.prox(1.0 / lip, &arg);
            let eta_z = linalg::mat_vec(x, &z);
            let diff: Vec<f64> = z.iter().zip(&yk).map(|(a, b)| a - b).collect();
            let model = fy + linalg::dot(&grad, &diff) + 0.5 * lip * linalg::norm_sq(&diff);
            if prob.loss_value(&eta_z) <= model + 1e-14 * fy.abs().max(1.0) {
                break (z, eta_z);
            }
            lip *= 2.0;
        };
        let fz = prob.objective(&z, &eta_z);
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let prev = xk.clone();
        if fz <= fx {
            xk = z.clone();
            eta_x = eta_z;
            fx = fz;
        }
        yk = (0..p)
            .map(|j| xk[j] + (t / t_new) * (z[j] - xk[j]) + ((t - 1.0) / t_new) * (xk[j] - prev[j]))
            .collect();
        t = t_new;
    }
    let iterations = trace.len();
    Ok(Iterate { beta: xk, iterations, trace, converged: false })
}

/// Distance from `Xᵀψ̂/n` to `∂g(β̂)` in sup-norm, over `max(1, ‖Xᵀψ̂‖∞/n)`.
pub fn kkt_residual(fit: &FitResult, data: &Dataset) -> f64 {
    kkt_residual_at(&fit.beta, data, &fit.loss, &fit.resolved)
}

/// KKT residual of an arbitrary `β` (no guard).
pub fn kkt_residual_at(beta: &[f64], data: &Dataset, loss: &LossFamily, pen: &ResolvedPenalty) -> f64 {
    let prob = Problem { data, loss: *loss, pen, guard: None, n: data.n() as f64 };
    let eta = linalg::mat_vec(data.x(), beta);
    prob.kkt(beta, &prob.score(&eta, &prob.d1(&eta)))
}

/// Objective `(1/n) Σ ℓ + g` at `β` (no guard).
pub fn objective_at(beta: &[f64], data: &Dataset, loss: &LossFamily, pen: &ResolvedPenalty) -> f64 {
    let prob = Problem { data, loss: *loss, pen, guard: None, n: data.n() as f64 };
    prob.objective(beta, &linalg::mat_vec(data.x(), beta))
}

/// Returns `Xᵀψ̂/n` after checking it lies in `∂g(β̂)` within `tol`.
pub fn penalty_subgrad_from_kkt(fit: &FitResult, data: &Dataset, tol: f64) -> Result<Vec<f64>> {
    let u = fit.score(data);
    fit.resolved.check_subgradient(&fit.beta, &u, tol)?;
    Ok(u)
}
