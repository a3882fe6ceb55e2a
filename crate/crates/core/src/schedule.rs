//! Imbalance statistics and per-class noise schedules.
//!
//! Each class `j` diffuses with its own rate `lambda_j * beta^t`. Rarer
//! classes get larger `lambda_j` and therefore lose their signal faster.
//! The surviving signal fraction after `t` steps is the cumulative product
//! `gamma_j^t = prod_{i <= t} (1 - lambda_j beta^i)` with `gamma_j^0 = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{softmax_rows, Tensor2};

/// Per-class sample counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCensus {
    counts: Vec<u64>,
}

impl ClassCensus {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Config("census needs at least one class".into()));
        }
        if let Some(j) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("class {j} has no samples")));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// `max / min` class count, kept as a reduced fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImbalanceRatio {
    pub numerator: u64,
    pub denominator: u64,
}

impl ImbalanceRatio {
    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    /// Floored ratio, the form used when tabulating datasets.
    pub fn table(&self) -> u64 {
        self.numerator / self.denominator
    }
}

impl std::fmt::Display for ImbalanceRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({} exact)", self.table(), self.value())
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub fn imbalance_ratio(census: &ClassCensus) -> ImbalanceRatio {
    let max = *census.counts.iter().max().expect("census is non-empty");
    let min = *census.counts.iter().min().expect("census is non-empty");
    let g = gcd(max, min);
    ImbalanceRatio {
        numerator: max / g,
        denominator: min / g,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseLevelConfig {
    /// Decay exponent applied to class counts.
    pub alpha: f64,
    /// Growth constant for the noise level.
    pub c: f64,
    /// Scale of the loss/size relation (proportions only).
    pub a: f64,
    /// Offset of the loss/size relation (proportions only).
    pub b: f64,
}

impl Default for NoiseLevelConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0 / 6.0,
            c: 5.0,
            a: 1.0,
            b: 0.0,
        }
    }
}

impl NoiseLevelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("c must be > 0, got {}", self.c)));
        }
        if !(self.a >= 0.0 && self.b >= 0.0) {
            return Err(Error::Config("a and b must be >= 0".into()));
        }
        if self.alpha > 1.0 {
            log::warn!("alpha = {} lies outside [0, 1]", self.alpha);
        }
        Ok(())
    }
}

fn powers(census: &ClassCensus, alpha: f64) -> Vec<f64> {
    census
        .counts
        .iter()
        .map(|&n| (n as f64).powf(-alpha))
        .collect()
}

/// Share of the generalization error attributed to each class:
/// `p_j = (a n_j^-alpha + b) / sum_i (a n_i^-alpha + b)`.
pub fn class_proportions(census: &ClassCensus, cfg: &NoiseLevelConfig) -> Result<Vec<f64>> {
    let raw: Vec<f64> = powers(census, cfg.alpha)
        .into_iter()
        .map(|p| cfg.a * p + cfg.b)
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Config(
            "class proportions undefined: a and b are both zero".into(),
        ));
    }
    Ok(raw.into_iter().map(|r| r / total).collect())
}

/// `lambda_j = c * nu * n_j^-alpha / sum_i n_i^-alpha + 1` with the exact
/// imbalance ratio `nu`.
pub fn lambda_vector(census: &ClassCensus, cfg: &NoiseLevelConfig) -> Vec<f64> {
    let nu = imbalance_ratio(census).value();
    let p = powers(census, cfg.alpha);
    let total: f64 = p.iter().sum();
    p.into_iter().map(|v| cfg.c * nu * (v / total) + 1.0).collect()
}

/// A rule assigning a noise level to each class.
pub trait NoiseLevel: Send + Sync {
    fn name(&self) -> &'static str;

    fn lambdas(&self, census: &ClassCensus, cfg: &NoiseLevelConfig) -> Vec<f64>;
}

/// Imbalance-sensitive levels from [`lambda_vector`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Anisotropic;

impl NoiseLevel for Anisotropic {
    fn name(&self) -> &'static str {
        "anisotropic"
    }

    fn lambdas(&self, census: &ClassCensus, cfg: &NoiseLevelConfig) -> Vec<f64> {
        lambda_vector(census, cfg)
    }
}

/// `lambda = 1` for every class: the plain DDPM.
#[derive(Debug, Clone, Copy, Default)]
pub struct Isotropic;

impl NoiseLevel for Isotropic {
    fn name(&self) -> &'static str {
        "isotropic"
    }

    fn lambdas(&self, census: &ClassCensus, _cfg: &NoiseLevelConfig) -> Vec<f64> {
        vec![1.0; census.classes()]
    }
}

/// Evenly spaced betas from `beta1` to `beta_t` inclusive.
pub fn linear_beta(horizon: usize, beta1: f64, beta_t: f64) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(Error::Config("horizon T must be >= 1".into()));
    }
    if !(beta1 > 0.0 && beta1 <= beta_t && beta_t < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta1 <= betaT < 1, got {beta1}, {beta_t}"
        )));
    }
    if horizon == 1 {
        return Ok(vec![beta1]);
    }
    let step = (beta_t - beta1) / (horizon - 1) as f64;
    let mut betas: Vec<f64> = (0..horizon).map(|i| beta1 + step * i as f64).collect();
    betas[horizon - 1] = beta_t;
    Ok(betas)
}

/// Argmax of `softmax(logits)`, ties toward the lower index.
pub fn inference_class(prior_logits: &[f64]) -> usize {
    let probs = softmax_rows(&Tensor2::row_vector(prior_logits));
    let mut best = 0;
    for (j, &p) in probs.as_slice().iter().enumerate() {
        if p > probs.as_slice()[best] {
            best = j;
        }
    }
    best
}

/// Noise level of the class the prior network ranks highest.
pub fn inference_lambda(
    prior_logits: &[f64],
    census: &ClassCensus,
    cfg: &NoiseLevelConfig,
) -> f64 {
    lambda_vector(census, cfg)[inference_class(prior_logits)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    lambda: Vec<f64>,
    /// `gamma[j][t]` for `t` in `0..=T`.
    gamma: Vec<Vec<f64>>,
}

impl NoiseSchedule {
    pub fn build(beta: Vec<f64>, lambda: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || lambda.is_empty() {
            return Err(Error::Config("schedule needs T >= 1 and k >= 1".into()));
        }
        let mut gamma = Vec::with_capacity(lambda.len());
        for (j, &l) in lambda.iter().enumerate() {
            let mut row = Vec::with_capacity(beta.len() + 1);
            row.push(1.0);
            for (i, &b) in beta.iter().enumerate() {
                let product = l * b;
                if !(product < 1.0) {
                    return Err(Error::Infeasible {
                        class: j,
                        step: i + 1,
                        product,
                    });
                }
                let prev = row[i];
                row.push(prev * (1.0 - product));
            }
            gamma.push(row);
        }
        Ok(Self {
            beta,
            lambda,
            gamma,
        })
    }

    /// Time horizon `T`.
    pub fn horizon(&self) -> usize {
        self.beta.len()
    }

    pub fn classes(&self) -> usize {
        self.lambda.len()
    }

    /// `beta^t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn lambda(&self, class: usize) -> f64 {
        self.lambda[class]
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambda
    }

    pub fn gamma(&self, class: usize, t: usize) -> f64 {
        self.gamma[class][t]
    }

    pub fn gamma_row(&self, class: usize) -> &[f64] {
        &self.gamma[class]
    }
}
