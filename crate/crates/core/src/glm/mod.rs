//! Penalized GLM stages: Bernoulli-logit and zero-truncated Poisson with log link.

mod fit;

pub use fit::{
    fit_stage, penalized_loglik, penalized_score, predict_eta, ConvergenceReport, FitError,
    FitOptions, FittedStage, Smoothing, StageDesign, TermKind, TermLayout,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum FamilyError {
    #[error("zero-truncated Poisson has no mass at y = 0")]
    ZeroCount,

    #[error("rate must be positive, got {0}")]
    NonPositiveRate(f64),
}

/// `1 / (1 + e^{-eta})` without overflow.
pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bernoulli log-likelihood on the logit scale: `y eta - ln(1 + e^eta)`.
pub fn loglik_bernoulli(y: bool, eta: f64) -> f64 {
    if y {
        -softplus(-eta)
    } else {
        -softplus(eta)
    }
}

/// `ln(k!)`: exact summation below 256, Stirling series above.
pub fn ln_factorial(k: u64) -> f64 {
    if k < 256 {
        (2..=k).map(|i| (i as f64).ln()).sum()
    } else {
        let n = k as f64;
        let inv = 1.0 / n;
        let inv2 = inv * inv;
        n * n.ln() - n + 0.5 * (2.0 * std::f64::consts::PI * n).ln()
            + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0))
    }
}

/// `ln(1 - e^{-lambda})`, accurate for both small and large rates.
fn ln_one_minus_exp_neg(lambda: f64) -> f64 {
    if lambda < std::f64::consts::LN_2 {
        (-(-lambda).exp_m1()).ln()
    } else {
        (-(-lambda).exp()).ln_1p()
    }
}

/// Log-pmf of the zero-truncated Poisson with untruncated mean `lambda`.
pub fn ztpoisson_logpdf(y: u64, lambda: f64) -> Result<f64, FamilyError> {
    if y == 0 {
        return Err(FamilyError::ZeroCount);
    }
    if !(lambda > 0.0) {
        return Err(FamilyError::NonPositiveRate(lambda));
    }
    Ok(zt_logpdf_eta(y, lambda.ln(), lambda))
}

fn zt_logpdf_eta(y: u64, eta: f64, lambda: f64) -> f64 {
    y as f64 * eta - lambda - ln_factorial(y) - ln_one_minus_exp_neg(lambda)
}

/// Mean of the zero-truncated Poisson, `lambda / (1 - e^{-lambda})`.
pub fn ztpoisson_mean(lambda: f64) -> Result<f64, FamilyError> {
    if !(lambda > 0.0) {
        return Err(FamilyError::NonPositiveRate(lambda));
    }
    Ok(zt_mean(lambda))
}

fn zt_mean(lambda: f64) -> f64 {
    if lambda < 1e-6 {
        1.0 + lambda / 2.0 + lambda * lambda / 12.0
    } else {
        lambda / -(-lambda).exp_m1()
    }
}

/// Variance of the zero-truncated Poisson, `mu (1 + lambda - mu)`.
fn zt_variance(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        // 1 + lambda - mu = lambda/2 - lambda^2/12 + lambda^4/720 - ...
        let l2 = lambda * lambda;
        zt_mean(lambda) * (lambda / 2.0 - l2 / 12.0 + l2 * l2 / 720.0)
    } else {
        let mu = zt_mean(lambda);
        mu * (1.0 + lambda - mu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    BernoulliLogit,
    ZtpoissonLog,
}

impl Family {
    /// Success probability or untruncated Poisson mean.
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::BernoulliLogit => logistic(eta),
            Family::ZtpoissonLog => eta.exp(),
        }
    }

    /// Log-likelihood of one observation. `y` is 0/1 for Bernoulli and at
    /// least 1 for the truncated Poisson.
    pub fn loglik(self, y: f64, eta: f64) -> f64 {
        match self {
            Family::BernoulliLogit => loglik_bernoulli(y == 1.0, eta),
            Family::ZtpoissonLog => zt_logpdf_eta(y as u64, eta, eta.exp()),
        }
    }

    /// Expected response `E[y | eta]`; the score of `eta` is `y - mean`.
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Family::BernoulliLogit => logistic(eta),
            Family::ZtpoissonLog => zt_mean(eta.exp()),
        }
    }

    /// Negative second derivative of the log-likelihood in `eta`. Both
    /// families are canonical in `eta`, so this equals the response variance.
    pub fn hessian_weight(self, eta: f64) -> f64 {
        match self {
            Family::BernoulliLogit => {
                let p = logistic(eta);
                p * (1.0 - p)
            }
            Family::ZtpoissonLog => zt_variance(eta.exp()),
        }
    }

    /// Starting linear predictor from a weighted mean response.
    pub(crate) fn initial_eta(self, mean_y: f64) -> f64 {
        match self {
            Family::BernoulliLogit => {
                let p = mean_y.clamp(0.01, 0.99);
                (p / (1.0 - p)).ln()
            }
            // crude inverse of the truncated mean; Newton refines it
            Family::ZtpoissonLog => (mean_y - 0.5).max(0.1).ln(),
        }
    }

    pub(crate) fn validate(self, y: f64) -> bool {
        match self {
            Family::BernoulliLogit => y == 0.0 || y == 1.0,
            Family::ZtpoissonLog => y >= 1.0 && y.fract() == 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::BernoulliLogit => "bernoulli-logit",
            Family::ZtpoissonLog => "ztpoisson-log",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bernoulli_loglik_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((loglik_bernoulli(true, 0.0) + ln2).abs() < 1e-15);
        assert!((loglik_bernoulli(false, 0.0) + ln2).abs() < 1e-15);
        // -ln(1 + e^-30) = -9.357622968840175e-14
        let v = loglik_bernoulli(true, 30.0);
        assert!((v + 9.357622968840175e-14).abs() < 1e-20);
        assert!(v.abs() < 1e-12);
        assert!(loglik_bernoulli(false, 800.0).is_finite());
        assert!(loglik_bernoulli(true, -800.0).is_finite());
    }

    #[test]
    fn zt_normalises() {
        for lambda in [0.1, 1.0, 3.0, 5.0, 20.0] {
            let total: f64 = (1..=200)
                .map(|y| ztpoisson_logpdf(y, lambda).unwrap().exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-10, "lambda {lambda}: {total}");
        }
    }

    #[test]
    fn zt_pdf_at_one() {
        let expected = -1.0 - (1.0 - (-1f64).exp()).ln();
        assert!((ztpoisson_logpdf(1, 1.0).unwrap() - expected).abs() < 1e-14);
        assert_eq!(ztpoisson_logpdf(0, 1.0), Err(FamilyError::ZeroCount));
    }

    #[test]
    fn zt_mean_limits() {
        assert!((ztpoisson_mean(1e-9).unwrap() - 1.0).abs() < 1e-9);
        let brute = |l: f64| -> f64 {
            (1..=200u64)
                .map(|y| y as f64 * ztpoisson_logpdf(y, l).unwrap().exp())
                .sum()
        };
        assert!((ztpoisson_mean(1.0).unwrap() - brute(1.0)).abs() < 1e-7);
        assert!((ztpoisson_mean(1.0).unwrap() - 1.581977).abs() < 1e-6);
        assert!((ztpoisson_mean(20.0).unwrap() - 20.0).abs() < 1e-7);
        assert!((ztpoisson_mean(20.0).unwrap() - brute(20.0)).abs() < 1e-7);
        assert!(ztpoisson_mean(0.0).is_err());
        assert!(ztpoisson_mean(-1.0).is_err());
    }

    #[test]
    fn zt_variance_matches_enumeration() {
        for lambda in [1e-4, 5e-4, 0.002, 0.3, 2.0, 12.0] {
            let probs: Vec<f64> = (1..=300u64)
                .map(|y| ztpoisson_logpdf(y, lambda).unwrap().exp())
                .collect();
            let m1: f64 = probs.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum();
            let m2: f64 = probs.iter().enumerate().map(|(i, p)| ((i + 1) as f64).powi(2) * p).sum();
            let var = m2 - m1 * m1;
            let w = Family::ZtpoissonLog.hessian_weight(lambda.ln());
            assert!((w - var).abs() < 1e-9 * var.max(1.0), "lambda {lambda}: {w} vs {var}");
        }
    }

    #[test]
    fn ln_factorial_branches_agree() {
        let direct: f64 = (2..=300u64).map(|i| (i as f64).ln()).sum();
        assert!((ln_factorial(300) - direct).abs() < 1e-9);
        assert_eq!(ln_factorial(0), 0.0);
        assert_eq!(ln_factorial(1), 0.0);
    }
}
