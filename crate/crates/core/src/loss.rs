//! Scalar convex losses `ℓ_y(u)` with derivatives and proximal maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabelEncoding;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossFamily {
    /// `(y − u)²/2`
    Square,
    /// `H(u − y)` with `H(t) = ∫₀^{|t|} min(1, v) dv`
    Huber,
    /// `log(1 + eᵘ) − yu` for `{0,1}` labels, `log(1 + e^{−yu})` for `±1` labels
    Logistic { encoding: LabelEncoding },
    /// `q log(1 + eᵘ) − yu` for `y ∈ {0, …, q}`
    BinomialLogistic { q: u32 },
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + eᵗ)` without overflow.
pub fn log1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Derivative of the Huber function, `max(−1, min(1, u))`.
pub fn huber_clip(u: f64) -> f64 {
    u.clamp(-1.0, 1.0)
}

fn huber(t: f64) -> f64 {
    let a = t.abs();
    if a <= 1.0 {
        0.5 * a * a
    } else {
        a - 0.5
    }
}

impl LossFamily {
    pub fn name(&self) -> &'static str {
        match self {
            LossFamily::Square => "square",
            LossFamily::Huber => "huber",
            LossFamily::Logistic { encoding: LabelEncoding::ZeroOne } => "logistic",
            LossFamily::Logistic { encoding: LabelEncoding::PlusMinus } => "logistic-pm",
            LossFamily::BinomialLogistic { .. } => "binomial",
        }
    }

    /// Parses `square`, `huber`, `logistic`, `logistic-pm`, `binomial:<q>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(LossFamily::Square),
            "huber" => Ok(LossFamily::Huber),
            "logistic" => Ok(LossFamily::Logistic { encoding: LabelEncoding::ZeroOne }),
            "logistic-pm" => Ok(LossFamily::Logistic { encoding: LabelEncoding::PlusMinus }),
            _ => {
                if let Some(q) = s.strip_prefix("binomial:") {
                    let q: u32 = q.parse().map_err(|_| Error::InvalidInput(format!("bad binomial q in '{s}'")))?;
                    if q == 0 {
                        return Err(Error::InvalidInput("binomial q must be ≥ 1".into()));
                    }
                    Ok(LossFamily::BinomialLogistic { q })
                } else {
                    Err(Error::InvalidInput(format!(
                        "unknown loss '{s}' (expected square, huber, logistic, logistic-pm, binomial:<q>)"
                    )))
                }
            }
        }
    }

    pub fn accepts(&self, y: f64) -> bool {
        match *self {
            LossFamily::Square | LossFamily::Huber => y.is_finite(),
            LossFamily::Logistic { encoding: LabelEncoding::ZeroOne } => y == 0.0 || y == 1.0,
            LossFamily::Logistic { encoding: LabelEncoding::PlusMinus } => y == -1.0 || y == 1.0,
            LossFamily::BinomialLogistic { q } => y >= 0.0 && y <= q as f64 && y.fract() == 0.0,
        }
    }

    pub fn check_response(&self, y: f64) -> Result<()> {
        if self.accepts(y) {
            Ok(())
        } else {
            Err(Error::ResponseOutOfSet { loss: self.name(), value: y })
        }
    }

    pub fn check_responses(&self, y: &[f64]) -> Result<()> {
        y.iter().try_for_each(|&v| self.check_response(v))
    }

    pub fn value(&self, y: f64, u: f64) -> f64 {
        match *self {
            LossFamily::Square => 0.5 * (y - u) * (y - u),
            LossFamily::Huber => huber(u - y),
            LossFamily::Logistic { encoding: LabelEncoding::ZeroOne } => log1p_exp(u) - y * u,
            LossFamily::Logistic { encoding: LabelEncoding::PlusMinus } => log1p_exp(-y * u),
            LossFamily::BinomialLogistic { q } => q as f64 * log1p_exp(u) - y * u,
        }
    }

    /// `ℓ'_y(u)`
    pub fn d1(&self, y: f64, u: f64) -> f64 {
        match *self {
            LossFamily::Square => u - y,
            LossFamily::Huber => huber_clip(u - y),
            LossFamily::Logistic { encoding: LabelEncoding::ZeroOne } => sigmoid(u) - y,
            LossFamily::Logistic { encoding: LabelEncoding::PlusMinus } => -y * sigmoid(-y * u),
            LossFamily::BinomialLogistic { q } => q as f64 * sigmoid(u) - y,
        }
    }

    /// `ℓ''_y(u)`; for Huber the a.e. derivative `1{|u − y| ≤ 1}`.
    pub fn d2(&self, y: f64, u: f64) -> f64 {
        match *self {
            LossFamily::Square => 1.0,
            LossFamily::Huber => {
                if (u - y).abs() <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            LossFamily::Logistic { .. } => {
                let s = sigmoid(u);
                s * (1.0 - s)
            }
            LossFamily::BinomialLogistic { q } => {
                let s = sigmoid(u);
                q as f64 * s * (1.0 - s)
            }
        }
    }

    /// Bound on `|ℓ'_y|` over `u` for the bounded-derivative families.
    fn d1_bound(&self, y: f64) -> f64 {
        match *self {
            LossFamily::Square => f64::INFINITY,
            LossFamily::Huber | LossFamily::Logistic { .. } => 1.0,
            LossFamily::BinomialLogistic { q } => (q as f64 - y).max(y),
        }
    }

    pub fn is_square(&self) -> bool {
        matches!(self, LossFamily::Square)
    }

    /// `prox[γℓ_y](x) = argmin_v (x − v)²/2 + γℓ_y(v)`.
    pub fn prox(&self, y: f64, gamma: f64, x: f64) -> f64 {
        if gamma <= 0.0 {
            return x;
        }
        match *self {
            LossFamily::Square => (x + gamma * y) / (1.0 + gamma),
            LossFamily::Huber => {
                let z = x - y;
                let s = if z.abs() <= 1.0 + gamma { z / (1.0 + gamma) } else { z - gamma * z.signum() };
                y + s
            }
            _ => self.prox_newton(y, gamma, x),
        }
    }

    /// Solves `v + γℓ'_y(v) = x` by Newton steps kept inside a shrinking bracket.
    fn prox_newton(&self, y: f64, gamma: f64, x: f64) -> f64 {
        let b = gamma * self.d1_bound(y);
        let (mut lo, mut hi) = (x - b, x + b);
        let mut v = x.clamp(lo, hi);
        let mut last_step = hi - lo;
        for _ in 0..200 {
            let f = v + gamma * self.d1(y, v) - x;
            if f.abs() <= 1e-13 * (1.0 + x.abs()) {
                return v;
            }
            if f > 0.0 {
                hi = v;
            } else {
                lo = v;
            }
            let fp = 1.0 + gamma * self.d2(y, v);
            let mut next = v - f / fp;
            // bisect when Newton leaves the bracket or fails to halve the previous step
            if !(next > lo && next < hi) || 2.0 * f.abs() > (last_step * fp).abs() {
                next = 0.5 * (lo + hi);
            }
            last_step = next - v;
            if hi - lo <= 4.0 * f64::EPSILON * (1.0 + v.abs()) {
                return next;
            }
            v = next;
        }
        v
    }
}

pub fn loss_value(loss: &LossFamily, y: f64, u: f64) -> Result<f64> {
    loss.check_response(y)?;
    Ok(loss.value(y, u))
}

pub fn loss_d1(loss: &LossFamily, y: f64, u: f64) -> Result<f64> {
    loss.check_response(y)?;
    Ok(loss.d1(y, u))
}

pub fn loss_d2(loss: &LossFamily, y: f64, u: f64) -> Result<f64> {
    loss.check_response(y)?;
    Ok(loss.d2(y, u))
}

pub fn loss_prox(loss: &LossFamily, y: f64, gamma: f64, x: f64) -> Result<f64> {
    loss.check_response(y)?;
    if !(gamma >= 0.0) {
        return Err(Error::InvalidInput(format!("prox parameter γ = {gamma} must be ≥ 0")));
    }
    Ok(loss.prox(y, gamma, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ZO: LossFamily = LossFamily::Logistic { encoding: LabelEncoding::ZeroOne };
    const PM: LossFamily = LossFamily::Logistic { encoding: LabelEncoding::PlusMinus };

    fn bisect(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        while hi - lo > 1e-13 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn point_values() {
        let sq = LossFamily::Square;
        assert_eq!((sq.value(1.0, 0.0), sq.d1(1.0, 0.0), sq.d2(1.0, 0.0)), (0.5, -1.0, 1.0));
        assert_eq!(ZO.d1(1.0, 0.0), -0.5);
        assert_eq!(ZO.d2(1.0, 0.0), 0.25);
        // q log(1+eᵘ) − yu at q = 4, y = 2, u = 0: value 4 log 2, d1 = 4/2 − 2, d2 = 4/4
        let b = LossFamily::BinomialLogistic { q: 4 };
        assert!((b.value(2.0, 0.0) - 4.0 * 2f64.ln()).abs() < 1e-15);
        assert_eq!(b.d1(2.0, 0.0), 0.0);
        assert_eq!(b.d2(2.0, 0.0), 1.0);
    }

    #[test]
    fn huber_clip_values() {
        assert_eq!(huber_clip(0.3), 0.3);
        assert_eq!(huber_clip(5.0), 1.0);
        assert_eq!(huber_clip(-2.0), -1.0);
    }

    #[test]
    fn response_set_errors() {
        assert!(matches!(loss_value(&ZO, 2.0, 0.0), Err(Error::ResponseOutOfSet { .. })));
        assert!(loss_d1(&PM, 0.0, 0.0).is_err());
        assert!(loss_d2(&LossFamily::BinomialLogistic { q: 2 }, 2.5, 0.0).is_err());
        assert!(loss_d2(&LossFamily::BinomialLogistic { q: 2 }, 3.0, 0.0).is_err());
        assert!(loss_value(&LossFamily::Square, f64::NAN, 0.0).is_err());
        assert!(loss_value(&LossFamily::Huber, 7.5, 0.0).is_ok());
    }

    #[test]
    fn parse_names() {
        for s in ["square", "huber", "logistic", "logistic-pm", "binomial:3"] {
            assert!(LossFamily::parse(s).is_ok());
        }
        assert_eq!(LossFamily::parse("binomial:3").unwrap(), LossFamily::BinomialLogistic { q: 3 });
        assert!(LossFamily::parse("pinball").is_err());
        assert!(LossFamily::parse("binomial:0").is_err());
    }

    #[test]
    fn logistic_prox_bisection_oracle() {
        // v + sigmoid(v) − 1 = 0 on [−1, 1]
        let v = ZO.prox(1.0, 1.0, 0.0);
        let oracle = bisect(|t| t + sigmoid(t) - 1.0, -1.0, 1.0);
        assert!((v - oracle).abs() < 1e-12);
        assert!(v.abs() > 1e-3);
        assert_eq!(ZO.prox(1.0, 0.0, 0.7), 0.7);
        let sq = LossFamily::Square;
        assert!((sq.prox(2.0, 0.5, 1.0) - (1.0 + 0.5 * 2.0) / 1.5).abs() < 1e-15);
    }

    #[test]
    fn huber_prox_matches_grid() {
        for &(y, g, x) in &[(0.0, 0.5, 3.0), (1.0, 2.0, 0.0), (-1.0, 0.3, -1.2), (0.5, 1.0, 2.4)] {
            let v = LossFamily::Huber.prox(y, g, x);
            let obj = |t: f64| 0.5 * (x - t) * (x - t) + g * huber(t - y);
            let mut best = (f64::INFINITY, 0.0);
            let mut t = x - 5.0;
            while t < x + 5.0 {
                if obj(t) < best.0 {
                    best = (obj(t), t);
                }
                t += 1e-5;
            }
            assert!((v - best.1).abs() < 2e-5, "{y} {g} {x}: {v} vs {}", best.1);
        }
    }

    fn family() -> impl Strategy<Value = (LossFamily, f64)> {
        prop_oneof![
            (-3.0..3.0f64).prop_map(|y| (LossFamily::Square, y)),
            (-3.0..3.0f64).prop_map(|y| (LossFamily::Huber, y)),
            prop::bool::ANY.prop_map(|b| (ZO, if b { 1.0 } else { 0.0 })),
            prop::bool::ANY.prop_map(|b| (PM, if b { 1.0 } else { -1.0 })),
            (1u32..=4).prop_flat_map(|q| (0..=q).prop_map(move |y| (LossFamily::BinomialLogistic { q }, y as f64))),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn d2_matches_finite_difference((loss, y) in family(), u in -8.0..8.0f64) {
            // Huber's d2 jumps at |u − y| = 1
            prop_assume!(!matches!(loss, LossFamily::Huber) || ((u - y).abs() - 1.0).abs() > 1e-4);
            let h = 1e-5;
            let fd = (loss.d1(y, u + h) - loss.d1(y, u - h)) / (2.0 * h);
            prop_assert!((fd - loss.d2(y, u)).abs() <= 1e-5 * (1.0 + loss.d2(y, u).abs()));
            let fd1 = (loss.value(y, u + h) - loss.value(y, u - h)) / (2.0 * h);
            prop_assert!((fd1 - loss.d1(y, u)).abs() <= 1e-5 * (1.0 + loss.d1(y, u).abs()));
            prop_assert!(loss.d2(y, u) >= 0.0);
        }

        #[test]
        fn d1_is_one_lipschitz((loss, y) in family(), u in -8.0..8.0f64, w in -8.0..8.0f64) {
            prop_assert!((loss.d1(y, u) - loss.d1(y, w)).abs() <= (u - w).abs() * (1.0 + 1e-12) + 1e-15);
        }

        #[test]
        fn prox_fixed_point_and_nonexpansive((loss, y) in family(), g in 0.01..20.0f64, x in -30.0..30.0f64, x2 in -30.0..30.0f64) {
            let v = loss.prox(y, g, x);
            prop_assert!((v + g * loss.d1(y, v) - x).abs() <= 1e-10 * (1.0 + x.abs()));
            let v2 = loss.prox(y, g, x2);
            prop_assert!((v - v2).abs() <= (x - x2).abs() + 1e-12);
        }
    }
}
