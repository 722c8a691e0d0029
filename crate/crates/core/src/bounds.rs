//! Variational bound estimators and exact discrete oracles.
//!
//! All quantities are in nats.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DgibError, Result};

/// Probability clamp used by the cross-entropy term.
pub const PROB_EPS: f64 = 1e-7;
/// Critic values are clamped here before exponentiation.
pub const CRITIC_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Bernoulli,
    Categorical,
}

/// A set of 1-based time indices within a window of length `T + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeIndices {
    All,
    Subset(BTreeSet<usize>),
}

impl TimeIndices {
    pub fn none() -> Self {
        TimeIndices::Subset(BTreeSet::new())
    }

    pub fn contains(&self, t: usize) -> bool {
        match self {
            TimeIndices::All => true,
            TimeIndices::Subset(s) => s.contains(&t),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, TimeIndices::Subset(s) if s.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub prior_kind: PriorKind,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha: f64,
    /// Nodes drawn per time step for the Gaussian log-ratio terms.
    pub mc_samples: usize,
    pub time_indices_a: TimeIndices,
    pub time_indices_z: TimeIndices,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            prior_kind: PriorKind::Bernoulli,
            beta1: 1e-2,
            beta2: 1e-2,
            alpha: 0.5,
            mc_samples: 32,
            time_indices_a: TimeIndices::All,
            time_indices_z: TimeIndices::All,
        }
    }
}

impl BoundConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DgibError::arg(format!("alpha = {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta1 >= 0.0) || !(self.beta2 >= 0.0) {
            return Err(DgibError::arg("beta1 and beta2 must be >= 0"));
        }
        if self.mc_samples == 0 {
            return Err(DgibError::arg("mc_samples must be >= 1"));
        }
        Ok(())
    }
}

/// Diagonal Gaussian parameterized by mean and log-variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub log_sigma2: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, log_sigma2: Vec<f64>) -> Result<Self> {
        if mu.len() != log_sigma2.len() {
            return Err(DgibError::arg("mu and log_sigma2 lengths differ"));
        }
        if mu.iter().chain(&log_sigma2).any(|x| !x.is_finite()) {
            return Err(DgibError::arg("Gaussian parameters must be finite"));
        }
        Ok(GaussianParams { mu, log_sigma2 })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianParams { mu: vec![0.0; dim], log_sigma2: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn check_variance(&self) -> Result<()> {
        if self.log_sigma2.iter().any(|l| l.exp() <= 0.0) {
            return Err(DgibError::arg("zero variance"));
        }
        Ok(())
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.mu
            .iter()
            .zip(&self.log_sigma2)
            .zip(z)
            .map(|((m, lv), x)| -0.5 * ((2.0 * PI).ln() + lv + (x - m).powi(2) / lv.exp()))
            .sum()
    }

    /// Closed-form `KL(self || other)`.
    pub fn kl_to(&self, other: &GaussianParams) -> f64 {
        self.mu
            .iter()
            .zip(&self.log_sigma2)
            .zip(other.mu.iter().zip(&other.log_sigma2))
            .map(|((mp, lp), (mq, lq))| {
                0.5 * (lq - lp + (lp.exp() + (mp - mq).powi(2)) / lq.exp() - 1.0)
            })
            .sum()
    }
}

/// Mean binary cross-entropy with probabilities clamped to `[eps, 1 - eps]`.
pub fn ce_lower_bound(predicted_probs: &[f64], labels: &[u8]) -> Result<f64> {
    if predicted_probs.is_empty() {
        return Err(DgibError::arg("cross-entropy of an empty batch"));
    }
    if predicted_probs.len() != labels.len() {
        return Err(DgibError::arg("probabilities and labels differ in length"));
    }
    let total: f64 = predicted_probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / predicted_probs.len() as f64)
}

fn xlogy_ratio(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / y).ln()
    }
}

/// `sum_i KL[Bern(p_i) || Bern(p0)]`.
pub fn kl_bernoulli(p: &[f64], p0: f64) -> Result<f64> {
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(DgibError::arg(format!("prior probability {p0} must lie in (0, 1)")));
    }
    p.iter().try_fold(0.0, |acc, &pi| {
        if !(0.0..=1.0).contains(&pi) {
            return Err(DgibError::arg(format!("probability {pi} outside [0, 1]")));
        }
        Ok(acc + xlogy_ratio(pi, p0) + xlogy_ratio(1.0 - pi, 1.0 - p0))
    })
}

/// `KL[Cat(phi) || Uniform(m)]`.
pub fn kl_categorical(phi: &[f64], m: usize) -> Result<f64> {
    if phi.len() != m || m == 0 {
        return Err(DgibError::arg(format!("phi has {} entries, support size {m}", phi.len())));
    }
    let total: f64 = phi.iter().sum();
    if (total - 1.0).abs() > 1e-8 || phi.iter().any(|&x| x < 0.0) {
        return Err(DgibError::arg(format!("phi is not normalized (sum = {total})")));
    }
    Ok(phi.iter().map(|&x| xlogy_ratio(x, 1.0 / m as f64)).sum())
}

/// Mean over samples of `log p(z) - log q(z)` for diagonal Gaussians.
pub fn gaussian_log_ratio(z_samples: &[Vec<f64>], p: &GaussianParams, q: &GaussianParams) -> Result<f64> {
    Ok(gaussian_log_ratio_terms(z_samples, p, q)?.iter().sum::<f64>() / z_samples.len() as f64)
}

/// Per-sample log-ratios, for standard-error estimates.
pub fn gaussian_log_ratio_terms(
    z_samples: &[Vec<f64>],
    p: &GaussianParams,
    q: &GaussianParams,
) -> Result<Vec<f64>> {
    if z_samples.is_empty() {
        return Err(DgibError::arg("no samples"));
    }
    p.check_variance()?;
    q.check_variance()?;
    if p.dim() != q.dim() {
        return Err(DgibError::arg("p and q differ in dimension"));
    }
    z_samples
        .iter()
        .map(|z| {
            if z.len() != p.dim() || z.iter().any(|x| !x.is_finite()) {
                return Err(DgibError::arg("sample has wrong dimension or is not finite"));
            }
            Ok(p.log_density(z) - q.log_density(z))
        })
        .collect()
}

/// The consensus regularizer on final-step samples. Same estimator as
/// [`gaussian_log_ratio`].
pub fn consensual_term(z_final_samples: &[Vec<f64>], p: &GaussianParams, q: &GaussianParams) -> Result<f64> {
    gaussian_log_ratio(z_final_samples, p, q)
}

/// Exact `I(X; Y)` of a joint probability table.
pub fn mi_exact_discrete(joint: &Array2<f64>) -> Result<f64> {
    let total: f64 = joint.sum();
    if joint.iter().any(|&x| x < 0.0 || !x.is_finite()) || (total - 1.0).abs() > 1e-10 {
        return Err(DgibError::arg(format!("joint is not a distribution (sum = {total})")));
    }
    let px: Vec<f64> = joint.rows().into_iter().map(|r| r.sum()).collect();
    let py: Vec<f64> = joint.columns().into_iter().map(|c| c.sum()).collect();
    let mut mi = 0.0;
    for ((i, j), &pxy) in joint.indexed_iter() {
        if pxy > 0.0 {
            mi += pxy * (pxy / (px[i] * py[j])).ln();
        }
    }
    Ok(mi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NwjEstimate {
    pub value: f64,
    /// Set when some critic value was clamped before exponentiation.
    pub clamped: bool,
}

/// `mean_pairs[f] - e^{-1} mean_marginals[e^f]` from samples.
pub fn nwj_bound<S>(paired: &[S], marginal: &[S], critic: impl Fn(&S) -> f64) -> Result<NwjEstimate> {
    if paired.is_empty() || marginal.is_empty() {
        return Err(DgibError::arg("NWJ bound needs nonempty sample sets"));
    }
    let first = paired.iter().map(&critic).sum::<f64>() / paired.len() as f64;
    let mut clamped = false;
    let second = marginal
        .iter()
        .map(|s| {
            let f = critic(s);
            if f > CRITIC_CLAMP {
                clamped = true;
            }
            f.min(CRITIC_CLAMP).exp()
        })
        .sum::<f64>()
        / marginal.len() as f64;
    Ok(NwjEstimate { value: first - (-1f64).exp() * second, clamped })
}

/// The same bound with expectations taken exactly over a discrete joint.
pub fn nwj_bound_exhaustive(joint: &Array2<f64>, critic: impl Fn(usize, usize) -> f64) -> Result<NwjEstimate> {
    mi_exact_discrete(joint)?;
    let px: Vec<f64> = joint.rows().into_iter().map(|r| r.sum()).collect();
    let py: Vec<f64> = joint.columns().into_iter().map(|c| c.sum()).collect();
    let mut first = 0.0;
    let mut second = 0.0;
    let mut clamped = false;
    for ((i, j), &pxy) in joint.indexed_iter() {
        let f = critic(i, j);
        if pxy > 0.0 {
            first += pxy * f;
        }
        if f > CRITIC_CLAMP {
            clamped = true;
        }
        second += px[i] * py[j] * f.min(CRITIC_CLAMP).exp();
    }
    Ok(NwjEstimate { value: first - (-1f64).exp() * second, clamped })
}

/// Joint table of `(X, Y)` for `X ~ p_x` pushed through a row-stochastic channel.
pub fn joint_from_channel(p_x: &[f64], channel: &Array2<f64>) -> Result<Array2<f64>> {
    if channel.nrows() != p_x.len() {
        return Err(DgibError::arg("channel rows must match the input support"));
    }
    for row in channel.rows() {
        if (row.sum() - 1.0).abs() > 1e-10 || row.iter().any(|&x| x < 0.0) {
            return Err(DgibError::arg("channel rows must be distributions"));
        }
    }
    let mut joint = channel.clone();
    for (i, mut row) in joint.rows_mut().into_iter().enumerate() {
        row *= p_x[i];
    }
    Ok(joint)
}

/// Per-term values before composition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub a_terms: BTreeMap<usize, f64>,
    pub z_terms: BTreeMap<usize, f64>,
    pub consensual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    /// Structure terms for the selected time indices.
    pub a_terms: BTreeMap<usize, f64>,
    /// Feature terms for the selected time indices.
    pub z_terms: BTreeMap<usize, f64>,
    pub consensual: f64,
    pub dgib_ms: f64,
    pub dgib_c: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn sum_a(&self) -> f64 {
        self.a_terms.values().sum()
    }

    pub fn sum_z(&self) -> f64 {
        self.z_terms.values().sum()
    }

    /// Recomputes the total from the stored parts.
    pub fn recompose(&self, cfg: &BoundConfig) -> f64 {
        let ms = self.ce + cfg.beta1 * (self.sum_a() + self.sum_z());
        let c = self.ce + cfg.beta2 * self.consensual;
        cfg.alpha * ms + (1.0 - cfg.alpha) * c
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        if !self.ce.is_finite() {
            return Some("ce".into());
        }
        if let Some((t, _)) = self.a_terms.iter().find(|(_, v)| !v.is_finite()) {
            return Some(format!("A[t={t}]"));
        }
        if let Some((t, _)) = self.z_terms.iter().find(|(_, v)| !v.is_finite()) {
            return Some(format!("Z[t={t}]"));
        }
        if !self.consensual.is_finite() {
            return Some("consensual".into());
        }
        (!self.total.is_finite()).then(|| "total".into())
    }
}

/// `total = alpha * (ce + beta1 * (sum A + sum Z)) + (1 - alpha) * (ce + beta2 * cons)`,
/// with the sums restricted to the configured time indices.
pub fn assemble_loss(parts: &LossParts, cfg: &BoundConfig) -> LossBreakdown {
    let a_terms: BTreeMap<usize, f64> = parts
        .a_terms
        .iter()
        .filter(|(t, _)| cfg.time_indices_a.contains(**t))
        .map(|(t, v)| (*t, *v))
        .collect();
    let z_terms: BTreeMap<usize, f64> = parts
        .z_terms
        .iter()
        .filter(|(t, _)| cfg.time_indices_z.contains(**t))
        .map(|(t, v)| (*t, *v))
        .collect();
    let sum_a: f64 = a_terms.values().sum();
    let sum_z: f64 = z_terms.values().sum();
    let dgib_ms = parts.ce + cfg.beta1 * (sum_a + sum_z);
    let dgib_c = parts.ce + cfg.beta2 * parts.consensual;
    LossBreakdown {
        ce: parts.ce,
        a_terms,
        z_terms,
        consensual: parts.consensual,
        dgib_ms,
        dgib_c,
        total: cfg.alpha * dgib_ms + (1.0 - cfg.alpha) * dgib_c,
    }
}
