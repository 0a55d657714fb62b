//! Normal quantiles, Kolmogorov–Smirnov against `N(0,1)`, QQ grids and column summaries.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub fn normal_quantile(prob: f64) -> f64 {
    std_normal().inverse_cdf(prob)
}

/// `z_{α/2}`, the upper `α/2` quantile.
pub fn z_two_sided(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    Ok(normal_quantile(1.0 - alpha / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// One-sample KS test of `sample` against `N(0,1)`.
pub fn ks_normal(sample: &[f64]) -> Result<KsResult> {
    if sample.is_empty() {
        return Err(Error::Empty("KS sample"));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("KS sample contains non-finite values".into()));
    }
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let nf = n as f64;
    let d = s.iter().enumerate().fold(0.0f64, |m, (i, &x)| {
        let f = normal_cdf(x);
        m.max(f - i as f64 / nf).max((i + 1) as f64 / nf - f)
    });
    Ok(KsResult { statistic: d, p_value: kolmogorov_p_value(d, n), n })
}

/// Asymptotic `P(D_n > d)` with the small-sample correction
/// `λ = (√n + 0.12 + 0.11/√n)·d`.
pub fn kolmogorov_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Pairs `(Φ⁻¹((i − ½)/m), sample quantile)` on `m` evenly spaced levels.
pub fn qq_grid(sample: &[f64], m: usize) -> Result<Vec<(f64, f64)>> {
    if sample.is_empty() || m == 0 {
        return Err(Error::Empty("QQ sample"));
    }
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    Ok((0..m)
        .map(|i| {
            let prob = (i as f64 + 0.5) / m as f64;
            (normal_quantile(prob), quantile_sorted(&s, prob))
        })
        .collect())
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(s: &[f64], prob: f64) -> f64 {
    let pos = prob.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub stderr: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean, sample standard deviation and standard error.
///
/// Summation is in the given order; callers sort by replication index first.
pub fn summarize_column(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Empty("summary column"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let sd = var.sqrt();
    Ok(Summary {
        count: values.len(),
        mean,
        sd,
        stderr: sd / n.sqrt(),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidInput("slope needs at least two paired points".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidInput("log-log slope needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn quantiles() {
        assert!((z_two_sided(0.05).unwrap() - 1.959964).abs() < 1e-6);
        assert!((normal_quantile(0.5)).abs() < 1e-12);
        assert!(z_two_sided(0.0).is_err());
    }

    #[test]
    fn kolmogorov_tail_reference_points() {
        // asymptotic critical values: P(K > 1.358) ≈ 0.05, P(K > 1.628) ≈ 0.01
        let big = 1_000_000;
        let d = |lam: f64| lam / (big as f64).sqrt();
        assert!((kolmogorov_p_value(d(1.3581), big) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_p_value(d(1.6276), big) - 0.01).abs() < 1e-3);
        assert_eq!(kolmogorov_p_value(0.0, 10), 1.0);
    }

    #[test]
    fn ks_accepts_normal_and_rejects_shift() {
        let mut rng = rng_from_seed(3);
        let z: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(ks_normal(&z).unwrap().p_value > 0.01);
        let shifted: Vec<f64> = z.iter().map(|v| v + 0.3).collect();
        assert!(ks_normal(&shifted).unwrap().p_value < 1e-6);
        // single point at 0: D = 1/2
        assert!((ks_normal(&[0.0]).unwrap().statistic - 0.5).abs() < 1e-15);
    }

    #[test]
    fn summaries() {
        let s = summarize_column(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.sd), (2.0, 0.0));
        let s = summarize_column(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(summarize_column(&[]).is_err());
        let q = qq_grid(&[3.0, 1.0, 2.0], 3).unwrap();
        assert_eq!(q[1], (0.0, 2.0));
        let x = [250.0, 1000.0, 4000.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        assert!((log_log_slope(&x, &y).unwrap() + 0.5).abs() < 1e-12);
    }
}
