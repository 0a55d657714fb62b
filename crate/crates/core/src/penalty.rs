//! Separable convex penalties `g(b) = Σⱼ tⱼ|bⱼ| + cⱼbⱼ²/2`.
//!
//! Every supported family reduces to a per-coordinate L1 weight `tⱼ` and a
//! curvature `cⱼ`; the scaling conventions only change how `(λ, n, p)` map to
//! those two numbers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RidgeScaling {
    /// `λ‖b‖²/(2p)`
    PerP,
    /// `λ‖b‖²/p`
    PerPAlt,
    /// `λ‖b‖²/(2n)`
    PerN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum L1Scaling {
    /// `λ‖b‖₁/√n`
    PerSqrtN,
    /// `λ‖b‖₁/p`
    PerP,
}

/// One coordinate of a separable penalty: `l1·|b| + curvature·b²/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordPenalty {
    pub l1: f64,
    pub curvature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PenaltyFamily {
    None,
    Ridge { lambda: f64, scaling: RidgeScaling },
    L1 { lambda: f64, scaling: L1Scaling },
    /// `l1‖b‖₁ + l2‖b‖²`
    ElasticNet { l1: f64, l2: f64 },
    Separable { coords: Vec<CoordPenalty> },
}

impl PenaltyFamily {
    pub fn name(&self) -> &'static str {
        match self {
            PenaltyFamily::None => "none",
            PenaltyFamily::Ridge { .. } => "ridge",
            PenaltyFamily::L1 { .. } => "l1",
            PenaltyFamily::ElasticNet { .. } => "elastic-net",
            PenaltyFamily::Separable { .. } => "separable",
        }
    }

    /// Same family with the main tuning parameter replaced.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        match self {
            PenaltyFamily::Ridge { scaling, .. } => PenaltyFamily::Ridge { lambda, scaling: *scaling },
            PenaltyFamily::L1 { scaling, .. } => PenaltyFamily::L1 { lambda, scaling: *scaling },
            PenaltyFamily::ElasticNet { l2, .. } => PenaltyFamily::ElasticNet { l1: lambda, l2: *l2 },
            other => other.clone(),
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            PenaltyFamily::Ridge { lambda, .. } | PenaltyFamily::L1 { lambda, .. } => Some(*lambda),
            PenaltyFamily::ElasticNet { l1, .. } => Some(*l1),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidInput(format!("{what} = {v} must be finite and ≥ 0")));
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        match self {
            PenaltyFamily::None => Ok(()),
            PenaltyFamily::Ridge { lambda, .. } | PenaltyFamily::L1 { lambda, .. } => {
                if ok(*lambda) {
                    Ok(())
                } else {
                    bad("lambda", *lambda)
                }
            }
            PenaltyFamily::ElasticNet { l1, l2 } => {
                if !ok(*l1) {
                    bad("l1", *l1)
                } else if !ok(*l2) {
                    bad("l2", *l2)
                } else {
                    Ok(())
                }
            }
            PenaltyFamily::Separable { coords } => {
                for c in coords {
                    if !ok(c.l1) {
                        return bad("l1", c.l1);
                    }
                    if !ok(c.curvature) {
                        return bad("curvature", c.curvature);
                    }
                }
                Ok(())
            }
        }
    }

    /// Per-coordinate `(tⱼ, cⱼ)` for dimensions `(n, p)`.
    pub fn resolve(&self, n: usize, p: usize) -> Result<ResolvedPenalty> {
        self.validate()?;
        let (nf, pf) = (n as f64, p as f64);
        let uniform = |l1: f64, curvature: f64| ResolvedPenalty { l1: vec![l1; p], curvature: vec![curvature; p] };
        Ok(match self {
            PenaltyFamily::None => uniform(0.0, 0.0),
            PenaltyFamily::Ridge { lambda, scaling } => uniform(
                0.0,
                match scaling {
                    RidgeScaling::PerP => lambda / pf,
                    RidgeScaling::PerPAlt => 2.0 * lambda / pf,
                    RidgeScaling::PerN => lambda / nf,
                },
            ),
            PenaltyFamily::L1 { lambda, scaling } => uniform(
                match scaling {
                    L1Scaling::PerSqrtN => lambda / nf.sqrt(),
                    L1Scaling::PerP => lambda / pf,
                },
                0.0,
            ),
            PenaltyFamily::ElasticNet { l1, l2 } => uniform(*l1, 2.0 * l2),
            PenaltyFamily::Separable { coords } => {
                if coords.len() != p {
                    return Err(Error::DimensionMismatch { what: "separable penalty length", expected: p, got: coords.len() });
                }
                ResolvedPenalty {
                    l1: coords.iter().map(|c| c.l1).collect(),
                    curvature: coords.iter().map(|c| c.curvature).collect(),
                }
            }
        })
    }
}

/// A penalty in coordinate form.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPenalty {
    pub l1: Vec<f64>,
    pub curvature: Vec<f64>,
}

pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

impl ResolvedPenalty {
    pub fn p(&self) -> usize {
        self.l1.len()
    }

    pub fn has_l1(&self) -> bool {
        self.l1.iter().any(|t| *t > 0.0)
    }

    pub fn is_zero(&self) -> bool {
        !self.has_l1() && self.curvature.iter().all(|c| *c == 0.0)
    }

    /// Minimum curvature, the strong convexity constant in the Euclidean metric.
    pub fn min_curvature(&self) -> f64 {
        self.curvature.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Strong convexity constant in the `‖Σ^{1/2}·‖` metric given `‖Σ‖_op`.
    pub fn tau(&self, sigma_op_norm: f64) -> f64 {
        self.min_curvature() / sigma_op_norm
    }

    pub fn value(&self, b: &[f64]) -> f64 {
        b.iter()
            .enumerate()
            .map(|(j, &v)| self.l1[j] * v.abs() + 0.5 * self.curvature[j] * v * v)
            .sum()
    }

    /// `prox[s·gⱼ](x)`
    pub fn prox_coord(&self, j: usize, s: f64, x: f64) -> f64 {
        soft_threshold(x, s * self.l1[j]) / (1.0 + s * self.curvature[j])
    }

    /// `prox[s·g](x)`
    pub fn prox(&self, s: f64, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(j, &v)| self.prox_coord(j, s, v)).collect()
    }

    /// Distance from `u` to `∂gⱼ(bⱼ)`.
    pub fn subgrad_distance(&self, j: usize, b: f64, u: f64) -> f64 {
        let smooth = self.curvature[j] * b;
        let t = self.l1[j];
        if b > 0.0 {
            (u - smooth - t).abs()
        } else if b < 0.0 {
            (u - smooth + t).abs()
        } else {
            (u.abs() - t).max(0.0)
        }
    }

    /// `max_j dist(uⱼ, ∂gⱼ(bⱼ))`
    pub fn max_subgrad_distance(&self, b: &[f64], u: &[f64]) -> f64 {
        (0..b.len()).map(|j| self.subgrad_distance(j, b[j], u[j])).fold(0.0, f64::max)
    }

    /// Checks that `u = Xᵀψ̂/n` lies in `∂g(b)` up to `tol·max(1, ‖u‖∞)`.
    pub fn check_subgradient(&self, b: &[f64], u: &[f64], tol: f64) -> Result<()> {
        let scale = u.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let r = self.max_subgrad_distance(b, u);
        if r <= tol * scale {
            Ok(())
        } else {
            Err(Error::KktViolation { max_residual: r / scale })
        }
    }
}

pub fn penalty_prox(penalty: &PenaltyFamily, n: usize, c: f64, x: &[f64]) -> Result<Vec<f64>> {
    if !(c > 0.0) {
        return Err(Error::InvalidInput(format!("prox scale c = {c} must be > 0")));
    }
    Ok(penalty.resolve(n, x.len())?.prox(c, x))
}
