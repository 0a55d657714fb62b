mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use obsadj::adjust::{self, compute_adjustments, compute_ahat, compute_oracle, compute_traces, Adjustments, OracleQuantities, SigmaInfo, Traces, Variant};
use obsadj::estimator::{evaluate_at, fit, FitResult, SolverConfig};
use obsadj::experiment::{self, CovarianceConfig, ExperimentConfig};
use obsadj::loss::LossFamily;
use obsadj::model::{normalize_index, Covariance, Dataset, Truth};
use obsadj::parallel::{self, Backend};
use obsadj::penalty::{L1Scaling, PenaltyFamily, RidgeScaling};
use obsadj::{inference, Error, Result};

#[derive(Parser)]
#[command(name = "obsadj", version, about = "Observable adjustments and debiased inference for regularized M-estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit β̂ on CSV data or on one simulated replication of an experiment.
    Fit(FitArgs),
    /// Adjusted quantities (df̂, v̂, r̂², γ̂, t̂², â², σ̂²) of a stored fit.
    Adjust(AdjustArgs),
    /// Per-coordinate intervals and tests for a stored fit.
    Infer(InferArgs),
    /// Run a Monte Carlo experiment.
    Experiment(ExperimentArgs),
    /// List the built-in experiment presets.
    Presets(PresetArgs),
}

#[derive(Args)]
struct Source {
    /// Built-in preset to draw the data from.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Experiment config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the full-scale variant of the preset.
    #[arg(long)]
    full: bool,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Source {
    fn load(&self) -> Result<Option<ExperimentConfig>> {
        let mut cfg = match (&self.preset, &self.config) {
            (Some(name), _) => experiment::preset(name, self.full)?,
            (None, Some(path)) => ExperimentConfig::load(path)?,
            (None, None) => return Ok(None),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(Some(cfg))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PenaltyName {
    None,
    Ridge,
    L1,
    ElasticNet,
}

#[derive(Clone, Copy, ValueEnum)]
enum CovarianceName {
    Identity,
    IdentityOverP,
    IdentityOverN,
}

#[derive(Args)]
struct FitArgs {
    /// Design matrix, n rows and p columns.
    #[arg(long, requires = "y", conflicts_with_all = ["preset", "config"])]
    x: Option<PathBuf>,
    /// Response, one column.
    #[arg(long, requires = "x")]
    y: Option<PathBuf>,
    #[command(flatten)]
    source: Source,
    /// Arm of the experiment to simulate (default: first).
    #[arg(long)]
    arm: Option<String>,
    /// Replication index to simulate.
    #[arg(long, default_value_t = 0)]
    rep: usize,
    /// square, huber, logistic, logistic-pm or binomial:<q>.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long, value_enum)]
    penalty: Option<PenaltyName>,
    /// Main tuning parameter (the L1 weight for elastic-net).
    #[arg(long)]
    lambda: Option<f64>,
    /// Penalty scaling: per-p, per-p-alt or per-n for ridge; per-sqrt-n or per-p for l1.
    #[arg(long)]
    scaling: Option<String>,
    /// Weight of ‖b‖² in the elastic net.
    #[arg(long)]
    l2: Option<f64>,
    /// Covariance of the rows of X, when known.
    #[arg(long, value_enum)]
    covariance: Option<CovarianceName>,
    /// Threshold K of the coercive guard (unpenalized fits only).
    #[arg(long = "coercive-K")]
    coercive_k: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Output directory for the fit artifact.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OmegaArg {
    Exact,
    Estimate,
}

#[derive(Args)]
struct AdjustArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, default_value = "general")]
    variant: String,
    /// Output JSON (default: <fit>/adjustments.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "exact")]
    omega: OmegaArg,
    #[arg(long, default_value = "general")]
    variant: String,
    /// Output CSV (default: <fit>/inference.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    reps: Option<usize>,
    /// Run replications on the calling thread.
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PresetArgs {
    /// Print the TOML of one preset.
    #[arg(long)]
    show: Option<String>,
    #[arg(long)]
    full: bool,
}

/// Contents of `fit.json` in a fit artifact directory.
#[derive(Debug, Serialize, Deserialize)]
struct FitArtifact {
    loss: LossFamily,
    penalty: PenaltyFamily,
    solver: SolverConfig,
    n: usize,
    p: usize,
    converged: bool,
    iterations: usize,
    kkt_residual: f64,
    objective: f64,
    guard_active: bool,
    active: usize,
    covariance: Option<CovarianceConfig>,
    signal: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Ok(w) = std::env::var("OBSADJ_WORKERS") {
        match w.parse::<usize>().map_err(|e| Error::InvalidInput(format!("OBSADJ_WORKERS: {e}"))).and_then(parallel::init_workers) {
            Ok(()) => {}
            Err(e) => return report(e),
        }
    }
    let res = match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Adjust(a) => cmd_adjust(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Experiment(a) => cmd_experiment(&a),
        Command::Presets(a) => cmd_presets(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}

/// 2 for bad input or usage, 1 for failures during the computation.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_)
        | Error::DimensionMismatch { .. }
        | Error::ResponseOutOfSet { .. }
        | Error::UnsupportedPenalty(_)
        | Error::MissingCovariance(_)
        | Error::MissingTruth(_)
        | Error::ConventionMismatch(_)
        | Error::Config(_)
        | Error::UnknownPreset(_)
        | Error::Csv(_)
        | Error::Toml(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn parse_variant(s: &str) -> Result<Variant> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        Error::InvalidInput(format!(
            "unknown variant '{s}' (expected general, tilde, unregularized, square-loss, huber, ridge-simplified)"
        ))
    })
}

fn penalty_from_flags(a: &FitArgs) -> Result<Option<PenaltyFamily>> {
    let Some(name) = a.penalty else {
        return Ok(None);
    };
    let lambda = || a.lambda.ok_or_else(|| Error::InvalidInput("--lambda is required for this penalty".into()));
    let scaling = || a.scaling.clone().ok_or_else(|| Error::InvalidInput("--scaling is required for this penalty".into()));
    let parse = |s: String| serde_json::Value::String(s);
    Ok(Some(match name {
        PenaltyName::None => PenaltyFamily::None,
        PenaltyName::Ridge => {
            let s = scaling()?;
            let scaling: RidgeScaling = serde_json::from_value(parse(s.clone()))
                .map_err(|_| Error::InvalidInput(format!("unknown ridge scaling '{s}' (per-p, per-p-alt, per-n)")))?;
            PenaltyFamily::Ridge { lambda: lambda()?, scaling }
        }
        PenaltyName::L1 => {
            let s = scaling()?;
            let scaling: L1Scaling = serde_json::from_value(parse(s.clone()))
                .map_err(|_| Error::InvalidInput(format!("unknown l1 scaling '{s}' (per-sqrt-n, per-p)")))?;
            PenaltyFamily::L1 { lambda: lambda()?, scaling }
        }
        PenaltyName::ElasticNet => PenaltyFamily::ElasticNet {
            l1: lambda()?,
            l2: a.l2.ok_or_else(|| Error::InvalidInput("--l2 is required for elastic-net".into()))?,
        },
    }))
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let flag_penalty = penalty_from_flags(a)?;
    let flag_loss = a.loss.as_deref().map(LossFamily::parse).transpose()?;
    let mut solver = SolverConfig::default();
    let (data, loss, penalty, covariance) = match a.source.load()? {
        Some(cfg) => {
            let arms = cfg.arms();
            let idx = match &a.arm {
                Some(name) => arms
                    .iter()
                    .position(|x| &x.name == name)
                    .ok_or_else(|| Error::InvalidInput(format!("no arm '{name}' in '{}'", cfg.name)))?,
                None => 0,
            };
            if a.rep >= cfg.reps {
                return Err(Error::InvalidInput(format!("--rep {} out of range (reps = {})", a.rep, cfg.reps)));
            }
            let data = experiment::replication_dataset(&cfg, idx, a.rep)?;
            solver = cfg.estimator.solver.clone();
            let arm = &arms[idx];
            let pen = flag_penalty.unwrap_or_else(|| arm.penalty.clone());
            (data, flag_loss.unwrap_or(arm.loss), pen, Some(cfg.model.covariance.clone()))
        }
        None => {
            let (Some(xp), Some(yp)) = (&a.x, &a.y) else {
                return Err(Error::InvalidInput("give --x and --y, or --preset / --config".into()));
            };
            let loss = flag_loss.ok_or_else(|| Error::InvalidInput("--loss is required with CSV data".into()))?;
            let pen = flag_penalty.ok_or_else(|| Error::InvalidInput("--penalty is required with CSV data".into()))?;
            let data = load_data(xp, yp, None, None)?;
            let cov = a.covariance.map(|c| match c {
                CovarianceName::Identity => CovarianceConfig::Identity,
                CovarianceName::IdentityOverP => CovarianceConfig::IdentityOverP,
                CovarianceName::IdentityOverN => CovarianceConfig::IdentityOverN,
            });
            (data, loss, pen, cov)
        }
    };
    if let Some(k) = a.coercive_k {
        solver.coercive_k = Some(k);
    }
    if let Some(t) = a.tol {
        solver.kkt_tol = t;
    }
    if let Some(m) = a.max_iters {
        solver.max_iters = m;
    }
    let f = fit(&data, &loss, &penalty, &solver)?;
    write_fit(&a.out, &data, &f, &solver, covariance)?;
    println!(
        "converged in {} iterations, kkt residual {:.3e}, |active| = {}, objective {:.10}",
        f.iterations,
        f.kkt_residual,
        f.active.len(),
        f.objective
    );
    Ok(())
}

fn write_fit(dir: &Path, data: &Dataset, f: &FitResult, solver: &SolverConfig, covariance: Option<CovarianceConfig>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let x = data.x();
    io::write_table(&dir.join("X.csv"), None, (0..data.n()).map(|i| (0..data.p()).map(|j| x[(i, j)].to_string()).collect()))?;
    io::write_table(&dir.join("y.csv"), Some(&["y"]), data.y.iter().map(|v| vec![v.to_string()]))?;
    io::write_indexed(&dir.join("beta.csv"), ["j", "beta"], &f.beta)?;
    io::write_indexed(&dir.join("psi.csv"), ["i", "psi"], &f.psi)?;
    let mut signal = None;
    if let Some(t) = &data.truth {
        io::write_indexed(&dir.join("w.csv"), ["j", "w"], t.w.as_slice())?;
        signal = t.signal;
    }
    let art = FitArtifact {
        loss: f.loss,
        penalty: f.penalty.clone(),
        solver: solver.clone(),
        n: data.n(),
        p: data.p(),
        converged: f.converged,
        iterations: f.iterations,
        kkt_residual: f.kkt_residual,
        objective: f.objective,
        guard_active: f.guard_active,
        active: f.active.len(),
        covariance,
        signal,
    };
    std::fs::write(dir.join("fit.json"), serde_json::to_string_pretty(&art)?)?;
    Ok(())
}

fn load_data(xp: &Path, yp: &Path, cov: Option<&CovarianceConfig>, truth_w: Option<(&Path, Option<f64>)>) -> Result<Dataset> {
    let rows = io::read_table(xp)?;
    let y = io::read_column(yp)?;
    let (n, p) = (rows.len(), rows[0].len());
    let truth = match (cov, truth_w) {
        (Some(c), Some((wp, signal))) if wp.exists() => {
            let cov = Arc::new(c.build(n, p)?);
            let w = normalize_index(&io::read_column(wp)?, &cov)?;
            Some(Truth { w, cov, signal })
        }
        _ => None,
    };
    Dataset::from_rows(&rows, y, truth)
}

struct Loaded {
    data: Dataset,
    fit: FitResult,
    art: FitArtifact,
}

fn load_fit(dir: &Path) -> Result<Loaded> {
    let art: FitArtifact = serde_json::from_str(&std::fs::read_to_string(dir.join("fit.json"))?)?;
    let data = load_data(&dir.join("X.csv"), &dir.join("y.csv"), art.covariance.as_ref(), Some((&dir.join("w.csv"), art.signal)))?;
    if data.n() != art.n || data.p() != art.p {
        return Err(Error::DimensionMismatch { what: "stored design", expected: art.n * art.p, got: data.n() * data.p() });
    }
    let beta = io::read_column(&dir.join("beta.csv"))?;
    let fit = evaluate_at(&data, &art.loss, &art.penalty, &art.solver, &beta)?;
    Ok(Loaded { data, fit, art })
}

fn sigma_of<'a>(data: &'a Dataset, cov: Option<&'a Covariance>) -> SigmaInfo<'a> {
    match cov {
        Some(c) => SigmaInfo::Known(c),
        None if data.p() < data.n() => SigmaInfo::PlugIn,
        None => SigmaInfo::Unknown,
    }
}

fn adjustments_for(l: &Loaded, variant: Variant, cov: Option<&Covariance>) -> Result<(Adjustments, Option<OracleQuantities>)> {
    let (fit, data) = (&l.fit, &l.data);
    let ls = fit.loss.is_square() && fit.resolved.is_zero() && data.p() < data.n();
    let (ahat, traces) = if ls && variant != Variant::Tilde {
        (None, Traces::least_squares(data.n(), data.p()))
    } else {
        let ahat = compute_ahat(fit, data)?;
        let tr = compute_traces(&ahat, fit);
        (Some(ahat), tr)
    };
    let oracle = match data.truth {
        Some(_) => Some(compute_oracle(fit, data, ahat.as_ref(), Some(&traces))?),
        None => None,
    };
    let gamma_star = oracle.and_then(|o| o.gamma_star);
    let adj = compute_adjustments(fit, data, &traces, sigma_of(data, cov), variant, gamma_star)?;
    Ok((adj, oracle))
}

fn built_cov(l: &Loaded) -> Result<Option<Covariance>> {
    l.art.covariance.as_ref().map(|c| c.build(l.art.n, l.art.p)).transpose()
}

#[derive(Serialize)]
struct AdjustOutput {
    adjustments: Adjustments,
    a_hat: f64,
    t_hat: f64,
    oracle: Option<OracleQuantities>,
}

fn cmd_adjust(a: &AdjustArgs) -> Result<()> {
    let variant = parse_variant(&a.variant)?;
    let l = load_fit(&a.fit)?;
    let cov = built_cov(&l)?;
    let (adj, oracle) = adjustments_for(&l, variant, cov.as_ref())?;
    let out = AdjustOutput { adjustments: adj, a_hat: adj.a(), t_hat: adj.t(), oracle };
    let path = a.out.clone().unwrap_or_else(|| a.fit.join("adjustments.json"));
    let text = serde_json::to_string_pretty(&out)?;
    std::fs::write(&path, &text)?;
    println!("{text}");
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let variant = parse_variant(&a.variant)?;
    let l = load_fit(&a.fit)?;
    let cov = built_cov(&l)?;
    let (adj, _) = adjustments_for(&l, variant, cov.as_ref())?;
    let omega = match (a.omega, cov.as_ref()) {
        (OmegaArg::Exact, Some(c)) => (0..l.data.p()).map(|j| c.omega_jj(j)).collect(),
        (OmegaArg::Exact, None) => {
            return Err(Error::MissingCovariance("--omega exact (refit with --covariance or use --omega estimate)"));
        }
        (OmegaArg::Estimate, _) => adjust::estimate_omega_diag(&l.data)?,
    };
    let deb = inference::debias(&l.fit, &l.data, &adj, sigma_of(&l.data, cov.as_ref()))?;
    let report = inference::infer(&deb, &adj, a.alpha, &omega)?;
    if let Some(w) = &report.warning {
        log::warn!("{w}");
    }
    let path = a.out.clone().unwrap_or_else(|| a.fit.join("inference.csv"));
    io::write_table(
        &path,
        Some(&["j", "beta", "beta_d", "center", "lo", "hi", "stat", "reject"]),
        report.rows.iter().map(|r| {
            vec![
                r.j.to_string(),
                r.beta.to_string(),
                r.beta_d.to_string(),
                io::opt(r.center),
                io::opt(r.lo),
                io::opt(r.hi),
                r.stat.to_string(),
                r.reject.to_string(),
            ]
        }),
    )?;
    let rejected = report.rows.iter().filter(|r| r.reject).count();
    println!("α = {}, z = {:.4}, {rejected} of {} coordinates rejected; wrote {}", report.alpha, report.z, report.rows.len(), path.display());
    Ok(())
}

fn cmd_experiment(a: &ExperimentArgs) -> Result<()> {
    let mut cfg = a
        .source
        .load()?
        .ok_or_else(|| Error::InvalidInput("give --preset or --config".into()))?;
    if let Some(r) = a.reps {
        cfg.reps = r;
    }
    cfg.validate()?;
    let backend = if a.sequential { Backend::Sequential } else { Backend::Parallel };
    let start = std::time::Instant::now();
    let records = experiment::run_experiment_with(&cfg, backend)?;
    let summary = experiment::summarize(&records, cfg.outputs.qq_points)?;
    let prov = experiment::write_outputs(&a.out, &cfg, &records, &summary)?;
    for g in &summary {
        let m = |k: &str| g.metrics.get(k).map_or_else(|| "-".to_string(), |s| format!("{:.4}±{:.4}", s.mean, s.sd));
        println!(
            "{} λ={} ok={} degenerate={} failed={} â={} |a*|={} σ̂²={} σ*²={} t̂/v̂={}",
            g.experiment,
            io::opt(g.lambda),
            g.ok,
            g.degenerate,
            g.failed,
            m("a_hat"),
            m("abs_a_star"),
            m("sigma2"),
            m("sigma_star2"),
            m("signal_strength"),
        );
    }
    println!(
        "{} records in {:.1}s, config sha256 {}; wrote {}",
        prov.records,
        start.elapsed().as_secs_f64(),
        prov.config_sha256,
        a.out.display()
    );
    Ok(())
}

fn cmd_presets(a: &PresetArgs) -> Result<()> {
    if let Some(name) = &a.show {
        print!("{}", experiment::preset_source(name, a.full)?);
        return Ok(());
    }
    for name in experiment::preset_names() {
        let cfg = experiment::preset(name, false)?;
        println!("{name:<16} {}", cfg.description);
    }
    Ok(())
}
