//! Config-driven Monte Carlo harness.
//!
//! An experiment is a set of arms (link, loss, penalty, dimensions) crossed
//! with a λ grid and `reps` replications. Each replication draws one design
//! per distinct `(n, p)` and one response per arm, so arms of the same size
//! share `X` within a replication. Everything is derived from `seed`, which
//! makes the output independent of scheduling.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use faer::Mat;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjust::{self, compute_adjustments, compute_ahat, compute_oracle, compute_traces, Adjustments, OracleQuantities, SigmaInfo, Traces, Variant};
use crate::error::{Error, Result};
use crate::estimator::{fit_from, FitResult, SolverConfig};
use crate::inference::{self, DebiasedEstimate};
use crate::loss::LossFamily;
use crate::model::{Covariance, Dataset, Design, IndexRecipe, IndexVector, LinkSpec};
use crate::parallel::{self, Backend};
use crate::penalty::PenaltyFamily;
use crate::rng::derive_seed;
use crate::stats::{self, KsResult, Summary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CovarianceConfig {
    /// `Σ = I_p`
    Identity,
    /// `Σ = I_p/p`
    IdentityOverP,
    /// `Σ = I_p/n`
    IdentityOverN,
    IdentityScaled { c: f64 },
    /// `Σ_jk = ρ^{|j−k|}`
    Ar1 { rho: f64 },
    /// Row-major `p × p` matrix.
    Explicit { matrix: Vec<Vec<f64>> },
}

impl CovarianceConfig {
    pub fn build(&self, n: usize, p: usize) -> Result<Covariance> {
        match self {
            CovarianceConfig::Identity => Ok(Covariance::identity(p)),
            CovarianceConfig::IdentityOverP => Covariance::identity_scaled(p, 1.0 / p as f64),
            CovarianceConfig::IdentityOverN => Covariance::identity_scaled(p, 1.0 / n as f64),
            CovarianceConfig::IdentityScaled { c } => Covariance::identity_scaled(p, *c),
            CovarianceConfig::Ar1 { rho } => {
                if !(rho.abs() < 1.0) {
                    return Err(Error::InvalidInput(format!("AR(1) coefficient {rho} must satisfy |ρ| < 1")));
                }
                Covariance::explicit(Mat::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs())))
            }
            CovarianceConfig::Explicit { matrix } => {
                if matrix.len() != p || matrix.iter().any(|r| r.len() != p) {
                    return Err(Error::DimensionMismatch { what: "explicit covariance", expected: p, got: matrix.len() });
                }
                Covariance::explicit(Mat::from_fn(p, p, |i, j| matrix[i][j]))
            }
        }
    }

    fn is_identity_over_p(&self) -> bool {
        matches!(self, CovarianceConfig::IdentityOverP)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n: usize,
    pub p: usize,
    pub covariance: CovarianceConfig,
    pub index: IndexRecipe,
    /// Default link; arms may override it.
    #[serde(default)]
    pub link: Option<LinkSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSpec {
    List(Vec<f64>),
    /// `points` values from `low` to `high`, geometric unless `log = false`.
    Grid {
        low: f64,
        high: f64,
        points: usize,
        #[serde(default = "yes")]
        log: bool,
    },
}

fn yes() -> bool {
    true
}

impl LambdaSpec {
    pub fn values(&self) -> Vec<f64> {
        match *self {
            LambdaSpec::List(ref v) => v.clone(),
            LambdaSpec::Grid { low, high, points, log } => {
                if points == 1 {
                    return vec![low];
                }
                (0..points)
                    .map(|i| {
                        let t = i as f64 / (points - 1) as f64;
                        if log {
                            (low.ln() + t * (high.ln() - low.ln())).exp()
                        } else {
                            low + t * (high - low)
                        }
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub loss: LossFamily,
    pub penalty: PenaltyFamily,
    /// Replaces the penalty's λ, one record per value.
    #[serde(default)]
    pub lambdas: Option<LambdaSpec>,
    pub variant: Variant,
    #[serde(default)]
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PivotKind {
    #[default]
    None,
    /// Debiased pivot with `Ω_jj`.
    Debiased,
    /// Least-squares pivot.
    LeastSquares,
    /// Ridge pivot for `Σ = I/p`.
    Ridge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaMode {
    #[default]
    Exact,
    Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub pivots: PivotKind,
    /// Interval coverage and test rejection rates.
    pub ci: bool,
    /// Exact prox identity gap, isotropic `Σ` only.
    pub prox: bool,
    /// Exact identities (df̂, v̂, trace bounds) per fit.
    pub identities: bool,
    /// Compute `γ* = tr[ΣÂ]` even when `Â` is not otherwise needed.
    pub gamma_star: bool,
    pub omega: OmegaMode,
    pub qq_points: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { pivots: PivotKind::None, ci: false, prox: false, identities: false, gamma_star: false, omega: OmegaMode::Exact, qq_points: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    #[serde(default)]
    pub link: Option<LinkSpec>,
    #[serde(default)]
    pub loss: Option<LossFamily>,
    #[serde(default)]
    pub penalty: Option<PenaltyFamily>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub p: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub reps: usize,
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub model: ModelConfig,
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default)]
    pub arms: Vec<ArmConfig>,
}

fn default_alpha() -> f64 {
    0.05
}

/// An arm with every override applied.
#[derive(Debug, Clone)]
pub struct ResolvedArm {
    pub name: String,
    pub link: LinkSpec,
    pub loss: LossFamily,
    pub penalty: PenaltyFamily,
    pub n: usize,
    pub p: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidInput(format!("cannot serialize config: {e}")))
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }

    pub fn lambdas(&self) -> Vec<Option<f64>> {
        match &self.estimator.lambdas {
            Some(l) => l.values().into_iter().map(Some).collect(),
            None => vec![self.estimator.penalty.lambda()],
        }
    }

    pub fn arms(&self) -> Vec<ResolvedArm> {
        let base = |a: Option<&ArmConfig>| ResolvedArm {
            name: a.map_or_else(|| "main".to_string(), |a| a.name.clone()),
            link: a.and_then(|a| a.link).or(self.model.link).unwrap_or(LinkSpec::Poisson),
            loss: a.and_then(|a| a.loss).unwrap_or(self.estimator.loss),
            penalty: a.and_then(|a| a.penalty.clone()).unwrap_or_else(|| self.estimator.penalty.clone()),
            n: a.and_then(|a| a.n).unwrap_or(self.model.n),
            p: a.and_then(|a| a.p).unwrap_or(self.model.p),
        };
        if self.arms.is_empty() {
            vec![base(None)]
        } else {
            self.arms.iter().map(|a| base(Some(a))).collect()
        }
    }

    /// Checks the whole config and reports every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.name.trim().is_empty() {
            errs.push("name: must be nonempty".to_string());
        }
        if self.reps == 0 {
            errs.push("reps: must be ≥ 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            errs.push(format!("alpha: {} must lie in (0, 1)", self.alpha));
        }
        if self.outputs.qq_points == 0 {
            errs.push("outputs.qq_points: must be ≥ 1".into());
        }
        if let Err(e) = self.estimator.solver.validate() {
            errs.push(format!("estimator.solver: {e}"));
        }
        match &self.estimator.lambdas {
            Some(LambdaSpec::List(v)) if v.is_empty() => errs.push("estimator.lambdas: empty list".into()),
            Some(LambdaSpec::List(v)) if v.iter().any(|l| !(*l >= 0.0 && l.is_finite())) => {
                errs.push("estimator.lambdas: values must be finite and ≥ 0".into())
            }
            Some(LambdaSpec::Grid { low, high, points, log }) => {
                if *points == 0 || !(low.is_finite() && high.is_finite() && low <= high) || (*log && !(*low > 0.0)) {
                    errs.push(format!("estimator.lambdas: bad grid [{low}, {high}] with {points} points"));
                }
            }
            _ => {}
        }
        let mut names = std::collections::HashSet::new();
        for (i, a) in self.arms.iter().enumerate() {
            if a.name.trim().is_empty() || a.name.contains(['/', '\\']) {
                errs.push(format!("arms[{i}].name: must be nonempty without path separators"));
            }
            if !names.insert(a.name.clone()) {
                errs.push(format!("arms[{i}].name: duplicate '{}'", a.name));
            }
        }
        if self.model.link.is_none() && (self.arms.is_empty() || self.arms.iter().any(|a| a.link.is_none())) {
            errs.push("model.link: required unless every arm sets a link".into());
        }
        let variant = self.estimator.variant;
        for arm in self.arms() {
            let at = |m: String| format!("arm '{}': {m}", arm.name);
            if arm.n == 0 || arm.p == 0 {
                errs.push(at(format!("n = {} and p = {} must be ≥ 1", arm.n, arm.p)));
                continue;
            }
            if let Err(e) = arm.link.validate() {
                errs.push(at(format!("link: {e}")));
            }
            for lam in self.lambdas() {
                let pen = lam.map_or_else(|| arm.penalty.clone(), |l| arm.penalty.with_lambda(l));
                if let Err(e) = pen.validate() {
                    errs.push(at(format!("penalty: {e}")));
                }
            }
            let is_ridge = matches!(arm.penalty, PenaltyFamily::Ridge { .. });
            if self.estimator.solver.coercive_k.is_some() && !matches!(arm.penalty, PenaltyFamily::None) {
                errs.push(at("estimator.solver.coercive_k: needs penalty none".into()));
            }
            if matches!(variant, Variant::RidgeSimplified) || self.outputs.pivots == PivotKind::Ridge {
                if !is_ridge || !self.model.covariance.is_identity_over_p() {
                    errs.push(at("ridge forms need a ridge penalty and covariance identity-over-p".into()));
                }
            }
            if self.outputs.pivots == PivotKind::LeastSquares
                && (!arm.loss.is_square() || !matches!(arm.penalty, PenaltyFamily::None) || arm.p >= arm.n)
            {
                errs.push(at("least-squares pivots need square loss, penalty none and p < n".into()));
            }
            if matches!(variant, Variant::Unregularized) && !matches!(arm.penalty, PenaltyFamily::None) {
                errs.push(at("variant unregularized needs penalty none".into()));
            }
            if matches!(variant, Variant::SquareLoss) && !arm.loss.is_square() {
                errs.push(at("variant square-loss needs the square loss".into()));
            }
            if matches!(variant, Variant::Huber) && arm.loss != LossFamily::Huber {
                errs.push(at("variant huber needs the Huber loss".into()));
            }
            if matches!(arm.penalty, PenaltyFamily::None) && arm.p >= arm.n {
                errs.push(at(format!("penalty none needs p < n (p = {}, n = {})", arm.p, arm.n)));
            }
            if self.outputs.omega == OmegaMode::Estimate && arm.p >= arm.n {
                errs.push(at("outputs.omega = estimate needs p < n".into()));
            }
            if self.outputs.prox
                && !matches!(
                    self.model.covariance,
                    CovarianceConfig::Identity | CovarianceConfig::IdentityOverN | CovarianceConfig::IdentityOverP | CovarianceConfig::IdentityScaled { .. }
                )
            {
                errs.push(at("outputs.prox needs an isotropic covariance".into()));
            }
            if let Err(e) = self.model.covariance.build(arm.n, arm.p) {
                errs.push(at(format!("covariance: {e}")));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "message", rename_all = "kebab-case")]
pub enum RecordStatus {
    Ok,
    /// Computed but flagged, e.g. `β̂ = 0` at a large λ.
    Degenerate(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    /// `name/arm`
    pub experiment: String,
    pub arm: usize,
    pub rep: usize,
    pub seed: u64,
    pub lambda_index: usize,
    pub lambda: Option<f64>,
    pub n: usize,
    pub p: usize,
    pub status: RecordStatus,
    pub converged: bool,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub guard_active: bool,
    pub active: usize,
    pub adjustments: Option<Adjustments>,
    pub oracle: Option<OracleQuantities>,
    pub ks_null: Option<f64>,
    pub coverage_null: Option<f64>,
    pub coverage_nonnull: Option<f64>,
    pub reject_null: Option<f64>,
    pub prox_gap: Option<f64>,
    pub identity_gap: Option<f64>,
    pub null_pivots: Vec<f64>,
    pub nonnull_pivots: Vec<f64>,
}

impl ReplicationRecord {
    pub fn is_ok(&self) -> bool {
        self.status == RecordStatus::Ok
    }

    /// `sign(a*)·â`-free comparison value `√max(0, â²)`.
    pub fn a_hat(&self) -> Option<f64> {
        self.adjustments.map(|a| a.a())
    }

    /// Named scalar metrics used in summaries.
    pub fn metrics(&self) -> Vec<(&'static str, Option<f64>)> {
        let a = self.adjustments;
        let o = self.oracle;
        let get = |f: fn(&Adjustments) -> f64| a.as_ref().map(f);
        let norm_b2 = o.map(|o| o.sigma_star2 + o.a_star * o.a_star);
        let both = |f: &dyn Fn(&Adjustments, &OracleQuantities) -> Option<f64>| match (a.as_ref(), o.as_ref()) {
            (Some(a), Some(o)) => f(a, o),
            _ => None,
        };
        vec![
            ("df", get(|a| a.df)),
            ("v", get(|a| a.v)),
            ("r2", get(|a| a.r2)),
            ("gamma", get(|a| a.gamma)),
            ("t2", get(|a| a.t2)),
            ("a2", get(|a| a.a2)),
            ("sigma2", get(|a| a.sigma2)),
            ("a_hat", get(|a| a.a())),
            ("a_star", o.map(|o| o.a_star)),
            ("abs_a_star", o.map(|o| o.a_star.abs())),
            ("sigma_star2", o.map(|o| o.sigma_star2)),
            ("gamma_star", o.and_then(|o| o.gamma_star)),
            ("t_star", o.and_then(|o| o.t_star)),
            ("abs_a_gap", both(&|a, o| Some((a.a() - o.a_star.abs()).abs()))),
            ("a2_gap", both(&|a, o| Some((a.a2 - o.a_star * o.a_star).abs()))),
            ("sigma2_rel_err", both(&|a, o| (o.sigma_star2 > 0.0).then(|| (a.sigma2 - o.sigma_star2).abs() / o.sigma_star2))),
            ("gamma_gap", both(&|a, o| o.gamma_star.map(|g| (a.v * (a.gamma - g)).abs()))),
            ("t2_gap", both(&|a, o| o.t_star.map(|t| (a.t2 - t * t).abs() / a.r2))),
            ("signal_strength", a.as_ref().and_then(|a| inference::signal_strength(a).ok())),
            ("a_hat_normalized", both(&|a, _| norm_b2.map(|b| a.a() / (0.01 + b).sqrt()))),
            ("a_star_normalized", o.and_then(|o| norm_b2.map(|b| o.a_star / (0.01 + b).sqrt()))),
            ("ks_null", self.ks_null),
            ("coverage_null", self.coverage_null),
            ("coverage_nonnull", self.coverage_nonnull),
            ("reject_null", self.reject_null),
            ("prox_gap", self.prox_gap),
            ("identity_gap", self.identity_gap),
            ("kkt_residual", Some(self.kkt_residual)),
            ("iterations", Some(self.iterations as f64)),
            ("active", Some(self.active as f64)),
        ]
    }

    /// Records flagged degenerate or failed are exempt.
    fn check_finite(&self) -> Result<()> {
        if !self.is_ok() {
            return Ok(());
        }
        for (name, v) in self.metrics() {
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(Error::NonFinite { seed: self.seed, field: format!("{} ({})", name, self.experiment) });
            }
        }
        if self.null_pivots.iter().chain(&self.nonnull_pivots).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { seed: self.seed, field: format!("pivots ({})", self.experiment) });
        }
        Ok(())
    }
}

/// Fixed CSV header of the records file.
pub const CSV_HEADER: [&str; 20] = [
    "experiment", "rep", "seed", "lambda", "n", "p", "df", "v", "r2", "gamma", "t2", "a2", "sigma2", "a_star", "sigma_star2",
    "gamma_star", "t_star", "ks_null", "coverage_null", "coverage_nonnull",
];

fn csv_row(r: &ReplicationRecord) -> Vec<String> {
    let f = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let a = r.adjustments;
    let o = r.oracle;
    vec![
        r.experiment.clone(),
        r.rep.to_string(),
        r.seed.to_string(),
        f(r.lambda),
        r.n.to_string(),
        r.p.to_string(),
        f(a.map(|a| a.df)),
        f(a.map(|a| a.v)),
        f(a.map(|a| a.r2)),
        f(a.map(|a| a.gamma)),
        f(a.map(|a| a.t2)),
        f(a.map(|a| a.a2)),
        f(a.map(|a| a.sigma2)),
        f(o.map(|o| o.a_star)),
        f(o.map(|o| o.sigma_star2)),
        f(o.and_then(|o| o.gamma_star)),
        f(o.and_then(|o| o.t_star)),
        f(r.ks_null),
        f(r.coverage_null),
        f(r.coverage_nonnull),
    ]
}

pub fn write_records_csv<W: std::io::Write>(out: W, records: &[ReplicationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record(csv_row(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Designs and covariances shared by the arms of one replication.
struct Shared {
    covs: HashMap<(usize, usize), Arc<Covariance>>,
    indices: HashMap<(usize, usize), IndexVector>,
}

fn prepare(cfg: &ExperimentConfig, arms: &[ResolvedArm]) -> Result<Shared> {
    let mut covs = HashMap::new();
    let mut indices = HashMap::new();
    for a in arms {
        if let std::collections::hash_map::Entry::Vacant(e) = covs.entry((a.n, a.p)) {
            let cov = Arc::new(cfg.model.covariance.build(a.n, a.p)?);
            indices.insert((a.n, a.p), cfg.model.index.build(&cov)?);
            e.insert(cov);
        }
    }
    Ok(Shared { covs, indices })
}

pub fn rep_seed(cfg: &ExperimentConfig, rep: usize) -> u64 {
    derive_seed(cfg.seed, &[rep as u64])
}

/// Dataset of arm `arm` in replication `rep`, as the harness builds it.
pub fn replication_dataset(cfg: &ExperimentConfig, arm: usize, rep: usize) -> Result<Dataset> {
    let arms = cfg.arms();
    let a = arms.get(arm).ok_or_else(|| Error::InvalidInput(format!("arm {arm} out of range")))?;
    let shared = prepare(cfg, std::slice::from_ref(a))?;
    let seed = rep_seed(cfg, rep);
    let design = Arc::new(Design::new(crate::model::sample_design(&shared.covs[&(a.n, a.p)], a.n, design_seed(seed, a))?));
    dataset_for(&shared, design, a, arm, seed)
}

fn design_seed(seed: u64, a: &ResolvedArm) -> u64 {
    derive_seed(seed, &[0, a.n as u64, a.p as u64])
}

fn dataset_for(shared: &Shared, design: Arc<Design>, a: &ResolvedArm, arm: usize, seed: u64) -> Result<Dataset> {
    let key = (a.n, a.p);
    Dataset::simulate_on(design, shared.covs[&key].clone(), shared.indices[&key].clone(), &a.link, derive_seed(seed, &[1, arm as u64]))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ReplicationRecord>> {
    run_experiment_with(cfg, Backend::default())
}

pub fn run_experiment_with(cfg: &ExperimentConfig, backend: Backend) -> Result<Vec<ReplicationRecord>> {
    cfg.validate()?;
    let arms = cfg.arms();
    let shared = prepare(cfg, &arms)?;
    let reps: Vec<usize> = (0..cfg.reps).collect();
    let per_rep = parallel::map(backend, &reps, |&rep| run_replication(cfg, &arms, &shared, rep));
    let mut out = Vec::new();
    for r in per_rep {
        out.extend(r?);
    }
    Ok(out)
}

fn run_replication(cfg: &ExperimentConfig, arms: &[ResolvedArm], shared: &Shared, rep: usize) -> Result<Vec<ReplicationRecord>> {
    let seed = rep_seed(cfg, rep);
    let mut designs: HashMap<(usize, usize), Arc<Design>> = HashMap::new();
    let lambdas = cfg.lambdas();
    let mut out = Vec::with_capacity(arms.len() * lambdas.len());
    for (ai, arm) in arms.iter().enumerate() {
        let design = match designs.get(&(arm.n, arm.p)) {
            Some(d) => d.clone(),
            None => {
                let x = crate::model::sample_design(&shared.covs[&(arm.n, arm.p)], arm.n, design_seed(seed, arm))?;
                let d = Arc::new(Design::new(x));
                designs.insert((arm.n, arm.p), d.clone());
                d
            }
        };
        let data = dataset_for(shared, design, arm, ai, seed)?;
        // warm starts along the path, from the most regularized end
        let mut order: Vec<usize> = (0..lambdas.len()).collect();
        order.sort_by(|&i, &j| lambdas[j].partial_cmp(&lambdas[i]).unwrap_or(std::cmp::Ordering::Equal));
        let mut slots: Vec<Option<ReplicationRecord>> = vec![None; lambdas.len()];
        let mut warm: Option<Vec<f64>> = None;
        for li in order {
            let lam = lambdas[li];
            let pen = lam.map_or_else(|| arm.penalty.clone(), |l| arm.penalty.with_lambda(l));
            let mut rec = ReplicationRecord {
                experiment: format!("{}/{}", cfg.name, arm.name),
                arm: ai,
                rep,
                seed,
                lambda_index: li,
                lambda: lam,
                n: arm.n,
                p: arm.p,
                status: RecordStatus::Ok,
                converged: false,
                iterations: 0,
                kkt_residual: f64::NAN,
                guard_active: false,
                active: 0,
                adjustments: None,
                oracle: None,
                ks_null: None,
                coverage_null: None,
                coverage_nonnull: None,
                reject_null: None,
                prox_gap: None,
                identity_gap: None,
                null_pivots: Vec::new(),
                nonnull_pivots: Vec::new(),
            };
            match fit_from(&data, &arm.loss, &pen, &cfg.estimator.solver, warm.as_deref()) {
                Ok(fit) => {
                    rec.converged = fit.converged;
                    rec.iterations = fit.iterations;
                    rec.kkt_residual = fit.kkt_residual;
                    rec.guard_active = fit.guard_active;
                    rec.active = fit.active.len();
                    if let Err(e) = analyse(cfg, &data, &fit, &mut rec) {
                        rec.status = if fit.beta.iter().all(|b| *b == 0.0) {
                            RecordStatus::Degenerate(format!("β̂ = 0: {e}"))
                        } else {
                            RecordStatus::Failed(e.to_string())
                        };
                    }
                    warm = Some(fit.beta);
                }
                Err(e) => {
                    log::warn!("{} rep {rep} λ {:?}: {e}", rec.experiment, lam);
                    rec.status = RecordStatus::Failed(e.to_string());
                }
            }
            rec.check_finite()?;
            slots[li] = Some(rec);
        }
        out.extend(slots.into_iter().flatten());
    }
    Ok(out)
}

fn needs_ahat(cfg: &ExperimentConfig, fit: &FitResult, data: &Dataset) -> bool {
    let ls = fit.loss.is_square() && fit.resolved.is_zero() && data.p() < data.n();
    !ls || cfg.outputs.identities || cfg.outputs.gamma_star || cfg.estimator.variant == Variant::Tilde
}

fn analyse(cfg: &ExperimentConfig, data: &Dataset, fit: &FitResult, rec: &mut ReplicationRecord) -> Result<()> {
    let truth = data.truth.as_ref().ok_or(Error::MissingTruth("experiments"))?;
    let cov = &truth.cov;
    let sigma = SigmaInfo::Known(cov);
    let (ahat, traces) = if needs_ahat(cfg, fit, data) {
        let ahat = compute_ahat(fit, data)?;
        let tr = compute_traces(&ahat, fit);
        (Some(ahat), tr)
    } else {
        (None, Traces::least_squares(data.n(), data.p()))
    };
    let oracle = compute_oracle(fit, data, ahat.as_ref(), Some(&traces))?;
    let adj = compute_adjustments(fit, data, &traces, sigma, cfg.estimator.variant, oracle.gamma_star)?;
    rec.oracle = Some(oracle);
    rec.adjustments = Some(adj);
    if fit.beta.iter().all(|b| *b == 0.0) {
        rec.status = RecordStatus::Degenerate("β̂ = 0".into());
    }
    let omega = || -> Result<Vec<f64>> {
        match cfg.outputs.omega {
            OmegaMode::Exact => Ok((0..data.p()).map(|j| cov.omega_jj(j)).collect()),
            OmegaMode::Estimate => adjust::estimate_omega_diag(data),
        }
    };
    let mut deb: Option<DebiasedEstimate> = None;
    let mut debiased = || -> Result<DebiasedEstimate> {
        if deb.is_none() {
            deb = Some(inference::debias(fit, data, &adj, sigma)?);
        }
        Ok(deb.clone().expect("set above"))
    };
    let sign = inference::evaluation_sign(fit, &oracle)?;
    let pivots = match cfg.outputs.pivots {
        PivotKind::None => None,
        PivotKind::LeastSquares => Some(inference::pivot_ls(fit, data, &omega()?, oracle.sign_a())?),
        PivotKind::Debiased => Some(inference::pivot(data, &debiased()?, &adj, &omega()?, sign)?),
        PivotKind::Ridge => Some(inference::pivot_ridge(fit, data, &adj, sign)?),
    };
    if let Some(pv) = pivots {
        rec.null_pivots = pv.null_values();
        rec.nonnull_pivots = pv.nonnull_values();
        if !rec.null_pivots.is_empty() {
            rec.ks_null = Some(stats::ks_normal(&rec.null_pivots)?.statistic);
        }
    }
    if cfg.outputs.ci {
        let d = debiased()?;
        let om = omega()?;
        let w = truth.w.as_slice();
        let nulls: Vec<usize> = (0..data.p()).filter(|&j| w[j] == 0.0).collect();
        let nonnulls: Vec<usize> = (0..data.p()).filter(|&j| w[j] != 0.0).collect();
        match inference::confidence_intervals(&d, &adj, cfg.alpha, &om) {
            Ok(cis) => {
                let frac = |idx: &[usize], target: &dyn Fn(usize) -> f64| {
                    (!idx.is_empty()).then(|| idx.iter().filter(|&&j| cis[j].contains(target(j))).count() as f64 / idx.len() as f64)
                };
                rec.coverage_null = frac(&nulls, &|_| 0.0);
                rec.coverage_nonnull = frac(&nonnulls, &|j| sign * w[j]);
            }
            Err(Error::NoSignal) => log::warn!("{} rep {}: t̂ = 0, no intervals", rec.experiment, rec.rep),
            Err(e) => return Err(e),
        }
        if !nulls.is_empty() {
            let mut rejected = 0usize;
            for &j in &nulls {
                if inference::test_null(&d, &adj, j, cfg.alpha, om[j])?.reject {
                    rejected += 1;
                }
            }
            rec.reject_null = Some(rejected as f64 / nulls.len() as f64);
        }
    }
    if cfg.outputs.prox {
        rec.prox_gap = Some(inference::prox_residual_beta(fit, data, &debiased()?, &adj, sign)?.exact_gap);
    }
    if cfg.outputs.identities {
        rec.identity_gap = Some(identity_gap(fit, data, &traces, cov, rec.prox_gap)?);
    }
    Ok(())
}

/// Largest violation among the exact identities that apply to this fit.
pub fn identity_gap(fit: &FitResult, data: &Dataset, traces: &Traces, cov: &Covariance, prox_gap: Option<f64>) -> Result<f64> {
    let (n, p) = (data.n() as f64, data.p() as f64);
    let mut gap = prox_gap.unwrap_or(0.0);
    let pen = &fit.resolved;
    if pen.is_zero() {
        gap = gap.max((traces.df - p).abs());
    }
    if pen.has_l1() && pen.curvature.iter().all(|c| *c == 0.0) {
        gap = gap.max((traces.df - fit.active.len() as f64).abs());
    }
    if fit.loss.is_square() {
        gap = gap.max((traces.tr_v / n - (1.0 - traces.df / n)).abs());
    }
    if pen.min_curvature() > 0.0 {
        let c = adjust::c_hat(fit, data, cov);
        let lower = traces.tr_d / (1.0 + c) - 4.0 * c;
        let upper = traces.tr_d + 4.0 * c;
        gap = gap.max(lower - traces.tr_v).max(traces.tr_v - upper);
        gap = gap.max(-c - traces.df).max(traces.df - n - c);
    }
    Ok(gap.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub experiment: String,
    pub arm: usize,
    pub lambda_index: usize,
    pub lambda: Option<f64>,
    pub n: usize,
    pub p: usize,
    pub ok: usize,
    pub degenerate: usize,
    pub failed: usize,
    /// Over `ok` records only.
    pub metrics: BTreeMap<String, Summary>,
    pub ks_null: Option<KsResult>,
    pub ks_nonnull: Option<KsResult>,
    pub qq_null: Vec<(f64, f64)>,
    pub qq_nonnull: Vec<(f64, f64)>,
}

/// Mean, sd and stderr per metric and pooled pivot diagnostics, grouped by `(arm, λ)`.
///
/// Records are sorted by `(arm, λ, rep)` first, so the result does not depend
/// on the order of `records`.
pub fn summarize(records: &[ReplicationRecord], qq_points: usize) -> Result<Vec<GroupSummary>> {
    if records.is_empty() {
        return Err(Error::Empty("replication records"));
    }
    let mut sorted: Vec<&ReplicationRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.arm, r.lambda_index, r.rep));
    let mut groups: BTreeMap<(usize, usize), Vec<&ReplicationRecord>> = BTreeMap::new();
    for r in sorted {
        groups.entry((r.arm, r.lambda_index)).or_default().push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((arm, lambda_index), rs) in groups {
        let first = rs[0];
        let ok: Vec<&ReplicationRecord> = rs.iter().copied().filter(|r| r.is_ok()).collect();
        let mut columns: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
        for r in &ok {
            for (name, v) in r.metrics() {
                if let Some(v) = v {
                    columns.entry(name).or_default().push(v);
                }
            }
        }
        let metrics = columns
            .into_iter()
            .map(|(k, v)| Ok((k.to_string(), stats::summarize_column(&v)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let pool = |f: fn(&ReplicationRecord) -> &Vec<f64>| -> Vec<f64> { ok.iter().flat_map(|r| f(r).iter().copied()).collect() };
        let nulls = pool(|r| &r.null_pivots);
        let nonnulls = pool(|r| &r.nonnull_pivots);
        let ks = |v: &[f64]| if v.is_empty() { Ok(None) } else { stats::ks_normal(v).map(Some) };
        let qq = |v: &[f64]| if v.is_empty() { Ok(Vec::new()) } else { stats::qq_grid(v, qq_points.min(v.len())) };
        out.push(GroupSummary {
            experiment: first.experiment.clone(),
            arm,
            lambda_index,
            lambda: first.lambda,
            n: first.n,
            p: first.p,
            ok: ok.len(),
            degenerate: rs.iter().filter(|r| matches!(r.status, RecordStatus::Degenerate(_))).count(),
            failed: rs.iter().filter(|r| matches!(r.status, RecordStatus::Failed(_))).count(),
            metrics,
            ks_null: ks(&nulls)?,
            ks_nonnull: ks(&nonnulls)?,
            qq_null: qq(&nulls)?,
            qq_nonnull: qq(&nonnulls)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub experiment: String,
    pub config_sha256: String,
    pub seed: u64,
    pub reps: usize,
    pub records: usize,
    pub failed: usize,
    pub version: String,
}

/// Writes `records.csv`, `records.json`, `summary.json`, `provenance.json`,
/// `config.toml` and the pooled QQ grids under `qq/`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, records: &[ReplicationRecord], summary: &[GroupSummary]) -> Result<Provenance> {
    std::fs::create_dir_all(dir.join("qq"))?;
    write_records_csv(std::fs::File::create(dir.join("records.csv"))?, records)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(std::fs::File::create(dir.join("records.json"))?), records)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(std::fs::File::create(dir.join("summary.json"))?), summary)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    for g in summary {
        let arm = g.experiment.rsplit('/').next().unwrap_or("main");
        for (kind, grid) in [("null", &g.qq_null), ("nonnull", &g.qq_nonnull)] {
            if grid.is_empty() {
                continue;
            }
            let mut w = csv::Writer::from_path(dir.join("qq").join(format!("{arm}_lambda{}_{kind}.csv", g.lambda_index)))?;
            w.write_record(["theoretical", "empirical"])?;
            for (t, e) in grid {
                w.write_record([t.to_string(), e.to_string()])?;
            }
            w.flush()?;
        }
    }
    let prov = Provenance {
        experiment: cfg.name.clone(),
        config_sha256: cfg.hash()?,
        seed: cfg.seed,
        reps: cfg.reps,
        records: records.len(),
        failed: records.iter().filter(|r| matches!(r.status, RecordStatus::Failed(_))).count(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    serde_json::to_writer_pretty(std::fs::File::create(dir.join("provenance.json"))?, &prov)?;
    Ok(prov)
}

const PRESETS: [(&str, &str, &str); 6] = [
    ("table-ls", include_str!("../presets/table-ls.toml"), include_str!("../presets/table-ls.full.toml")),
    ("ridge", include_str!("../presets/ridge.toml"), include_str!("../presets/ridge.full.toml")),
    ("signal-strength", include_str!("../presets/signal-strength.toml"), include_str!("../presets/signal-strength.full.toml")),
    ("fig-l1", include_str!("../presets/fig-l1.toml"), include_str!("../presets/fig-l1.full.toml")),
    ("ci-coverage", include_str!("../presets/ci-coverage.toml"), include_str!("../presets/ci-coverage.full.toml")),
    ("rates", include_str!("../presets/rates.toml"), include_str!("../presets/rates.full.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

/// TOML source of a built-in preset; `full` selects the full-scale variant.
pub fn preset_source(name: &str, full: bool) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|p| p.0 == name)
        .map(|p| if full { p.2 } else { p.1 })
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))
}

pub fn preset(name: &str, full: bool) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(preset_source(name, full)?)
}
