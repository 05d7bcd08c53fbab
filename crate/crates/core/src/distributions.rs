//! Forecast distribution types, likelihoods, divergence kernels and CRPS.
//!
//! The kernels used in training also come in `*_grad` flavours returning
//! partial derivatives with respect to their parameters.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::gamma::{checked_gamma_ur, ln_gamma};

use crate::error::{Error, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianParams {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::invalid(format!("invalid Gaussian N({mu}, {sigma})")));
        }
        Ok(GaussianParams { mu, sigma })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonParams {
    pub lambda: f64,
}

impl PoissonParams {
    pub fn new(lambda: f64) -> Result<Self> {
        check_rate(lambda)?;
        Ok(PoissonParams { lambda })
    }
}

/// `scale * X` with `X ~ Poisson(lambda)`: a sparse forecast mapped to raw units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledPoisson {
    pub lambda: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ForecastDist {
    Gaussian(GaussianParams),
    Poisson(PoissonParams),
    ScaledPoisson(ScaledPoisson),
}

impl ForecastDist {
    pub fn mean(&self) -> f64 {
        match *self {
            ForecastDist::Gaussian(g) => g.mu,
            ForecastDist::Poisson(p) => p.lambda,
            ForecastDist::ScaledPoisson(p) => p.lambda * p.scale,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            ForecastDist::Gaussian(g) => g.sigma * g.sigma,
            ForecastDist::Poisson(p) => p.lambda,
            ForecastDist::ScaledPoisson(p) => p.lambda * p.scale * p.scale,
        }
    }

    pub fn is_sparse(&self) -> bool {
        !matches!(self, ForecastDist::Gaussian(_))
    }

    /// Gaussian with the same mean and variance; Poisson forecasts go through
    /// the normal approximation `N(lambda, sqrt(lambda))`.
    pub fn to_gaussian(&self) -> GaussianParams {
        match *self {
            ForecastDist::Gaussian(g) => g,
            _ => GaussianParams {
                mu: self.mean(),
                sigma: self.variance().sqrt(),
            },
        }
    }
}

fn check_rate(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid(format!("Poisson rate must be positive, got {lambda}")));
    }
    Ok(())
}

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Inverse of [`std_normal_cdf`] for `q` in `(0, 1)`.
pub fn std_normal_quantile(q: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * q)
}

/// Distribution of `sum_j phi_j X_j` for independent Gaussian children.
pub fn gaussian_aggregate(children: &[GaussianParams], phi: &[f64]) -> Result<GaussianParams> {
    if children.is_empty() {
        return Err(Error::invalid("aggregate of an empty child set"));
    }
    if children.len() != phi.len() {
        return Err(Error::invalid("children and weights differ in length"));
    }
    let mu = children.iter().zip(phi).map(|(c, w)| w * c.mu).sum();
    let var: f64 = children
        .iter()
        .zip(phi)
        .map(|(c, w)| w * w * c.sigma * c.sigma)
        .sum();
    Ok(GaussianParams {
        mu,
        sigma: var.sqrt(),
    })
}

/// Value and partials of the Gaussian consistency kernel in mean/variance
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelGrad {
    pub value: f64,
    pub d_mu_parent: f64,
    pub d_var_parent: f64,
    pub d_mu_agg: f64,
    pub d_var_agg: f64,
}

/// Symmetric closed-form consistency kernel between two Gaussians, given by
/// means and variances:
///
/// `(vp + d^2) / (4 va) + (va + d^2) / (4 vp) - 1/2`, with `d = mu_p - mu_a`.
///
/// It is zero exactly when both arguments coincide.
pub fn gaussian_consistency_grad(mu_p: f64, var_p: f64, mu_a: f64, var_a: f64) -> KernelGrad {
    let d = mu_p - mu_a;
    let d2 = d * d;
    let value = (var_p + d2) / (4.0 * var_a) + (var_a + d2) / (4.0 * var_p) - 0.5;
    let d_mu = d / (2.0 * var_a) + d / (2.0 * var_p);
    KernelGrad {
        value,
        d_mu_parent: d_mu,
        d_mu_agg: -d_mu,
        d_var_parent: 1.0 / (4.0 * var_a) - (var_a + d2) / (4.0 * var_p * var_p),
        d_var_agg: 1.0 / (4.0 * var_p) - (var_p + d2) / (4.0 * var_a * var_a),
    }
}

pub fn gaussian_consistency_loss(parent: &GaussianParams, agg: &GaussianParams) -> f64 {
    gaussian_consistency_grad(
        parent.mu,
        parent.sigma * parent.sigma,
        agg.mu,
        agg.sigma * agg.sigma,
    )
    .value
}

/// `(value, d/d l1, d/d l2)` of [`poisson_jsd`]; arguments must be positive.
pub fn poisson_jsd_grad(l1: f64, l2: f64) -> (f64, f64, f64) {
    let log_ratio = l1.ln() - l2.ln();
    let diff = l1 - l2;
    (
        diff * log_ratio,
        log_ratio + diff / l1,
        -log_ratio - diff / l2,
    )
}

/// `l1 ln(l1/l2) + l2 ln(l2/l1)`.
pub fn poisson_jsd(l1: f64, l2: f64) -> Result<f64> {
    check_rate(l1)?;
    check_rate(l2)?;
    Ok(poisson_jsd_grad(l1, l2).0)
}

/// Normal approximation `N(lambda, sqrt(lambda))`.
pub fn poisson_to_gaussian(lambda: f64) -> Result<GaussianParams> {
    check_rate(lambda)?;
    Ok(GaussianParams {
        mu: lambda,
        sigma: lambda.sqrt(),
    })
}

pub fn gaussian_loglik(y: f64, p: &GaussianParams) -> f64 {
    let z = (y - p.mu) / p.sigma;
    -(p.sigma * (2.0 * PI).sqrt()).ln() - 0.5 * z * z
}

/// `(d/d mu, d/d sigma)` of [`gaussian_loglik`].
pub fn gaussian_loglik_grad(y: f64, mu: f64, sigma: f64) -> (f64, f64) {
    let r = y - mu;
    let s2 = sigma * sigma;
    (r / s2, -1.0 / sigma + r * r / (s2 * sigma))
}

/// Poisson log-likelihood extended to real `y` through `ln Gamma(y + 1)`.
pub fn poisson_loglik(y: f64, lambda: f64) -> Result<f64> {
    check_rate(lambda)?;
    if !y.is_finite() {
        return Err(Error::invalid(format!("non-finite observation {y}")));
    }
    Ok(y * lambda.ln() - lambda - ln_gamma(y + 1.0))
}

/// `d/d lambda` of [`poisson_loglik`].
pub fn poisson_loglik_grad(y: f64, lambda: f64) -> f64 {
    y / lambda - 1.0
}

/// Closed-form CRPS of a Gaussian forecast.
pub fn crps_gaussian(y: f64, p: &GaussianParams) -> f64 {
    let z = (y - p.mu) / p.sigma;
    p.sigma * (z * (2.0 * std_normal_cdf(z) - 1.0) + 2.0 * std_normal_pdf(z) - 1.0 / PI.sqrt())
}

/// `P(X <= k)` for `X ~ Poisson(lambda)`.
pub fn poisson_cdf(k: u64, lambda: f64) -> f64 {
    checked_gamma_ur(k as f64 + 1.0, lambda).unwrap_or(f64::NAN)
}

/// Quantile of a forecast: `mu + sigma * z_q` for Gaussians; the smallest
/// integer `k` with `CDF(k) >= q` for Poisson (times the scale for scaled
/// Poisson).
pub fn forecast_quantile(d: &ForecastDist, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("quantile level {q} outside (0, 1)")));
    }
    Ok(match *d {
        ForecastDist::Gaussian(g) if q == 0.5 => g.mu,
        ForecastDist::Gaussian(g) => g.mu + g.sigma * std_normal_quantile(q),
        ForecastDist::Poisson(p) => poisson_quantile(p.lambda, q)? as f64,
        ForecastDist::ScaledPoisson(p) => p.scale * poisson_quantile(p.lambda, q)? as f64,
    })
}

fn poisson_quantile(lambda: f64, q: f64) -> Result<u64> {
    check_rate(lambda)?;
    let guess = lambda + lambda.sqrt() * std_normal_quantile(q);
    let mut k = guess.max(0.0).floor() as u64;
    while k > 0 && poisson_cdf(k - 1, lambda) >= q {
        k -= 1;
    }
    while poisson_cdf(k, lambda) < q {
        k += 1;
    }
    Ok(k)
}
