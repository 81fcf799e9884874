//! Training objectives over a full-softmax output.
//!
//! Every loss returns its value together with the gradient with respect to the
//! logits, so the model never needs to know which objective is in use.
//!
//! The coupled soft-target loss
//!
//! ```text
//! L(p, q, d) = λ1 · KL(q ‖ p) + (1 − λ1) · H(d, p)
//! ```
//!
//! splits exactly into a binary "target confidence" term, a conditional
//! "non-target distribution" term and a model-independent remainder:
//!
//! ```text
//! L = KL(q_b ‖ p_b) + λ1 (1 − q_y) · KL(q̂ ‖ p̂) + F(q)
//! q_b = Bernoulli(λ1 q_y + 1 − λ1),  p_b = Bernoulli(p_y)
//! q̂_i = q_i / (1 − q_y),  p̂_i = p_i / (1 − p_y)   for i ≠ y
//! ```
//!
//! The decoupled loss reweights the two KL terms independently:
//! `λ2 · KL(q_b ‖ p_b) + (1 − λ2) · KL(q̂ ‖ p̂)`.
//!
//! All logarithms are natural. Log-probabilities are floored at `ln(eps_log)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PredictionDistribution;

pub const DEFAULT_EPS_LOG: f64 = 1e-12;
const SUM_TOLERANCE: f64 = 1e-9;

/// Distribution shared by many soft targets (uniform or a popularity table).
#[derive(Debug, Clone, PartialEq)]
pub enum PriorDist {
    Uniform { items: usize },
    Table(Arc<[f64]>),
}

impl PriorDist {
    pub fn prob(&self, item: usize) -> f64 {
        match self {
            PriorDist::Uniform { items } => {
                if item < *items {
                    1.0 / *items as f64
                } else {
                    0.0
                }
            }
            PriorDist::Table(t) => t.get(item).copied().unwrap_or(0.0),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            PriorDist::Uniform { items } => *items,
            PriorDist::Table(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A probability distribution over items used as a training label.
///
/// Stored as sparse explicit entries plus an optional weighted shared prior:
/// `q_i = entries[i] + prior_weight · prior(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTarget {
    target: usize,
    entries: Vec<(usize, f64)>,
    prior: Option<(f64, PriorDist)>,
    q_y: f64,
}

impl SoftTarget {
    pub fn one_hot(target: usize) -> Self {
        Self {
            target,
            entries: vec![(target, 1.0)],
            prior: None,
            q_y: 1.0,
        }
    }

    /// Builds a sparse soft target. Entries may come in any order but item ids must
    /// be distinct, probabilities positive, sum to one, and include `target`.
    pub fn from_entries(target: usize, entries: Vec<(usize, f64)>) -> Result<Self> {
        Self::new(target, entries, None)
    }

    pub fn with_prior(
        target: usize,
        entries: Vec<(usize, f64)>,
        prior_weight: f64,
        prior: PriorDist,
    ) -> Result<Self> {
        if !(prior_weight > 0.0 && prior_weight <= 1.0) {
            return Err(Error::Contract(format!("prior weight {prior_weight} outside (0, 1]")));
        }
        Self::new(target, entries, Some((prior_weight, prior)))
    }

    fn new(target: usize, mut entries: Vec<(usize, f64)>, prior: Option<(f64, PriorDist)>) -> Result<Self> {
        entries.sort_by_key(|&(i, _)| i);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Contract("duplicate item in soft target".into()));
        }
        if entries.iter().any(|&(_, q)| !(q > 0.0 && q.is_finite())) {
            return Err(Error::Contract("soft target probabilities must be positive".into()));
        }
        if let Some((_, PriorDist::Table(t))) = &prior {
            if t.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                return Err(Error::Contract("prior table must be non-negative".into()));
            }
        }
        let mut q = Self {
            target,
            entries,
            prior,
            q_y: 0.0,
        };
        q.q_y = q.prob(target);
        if q.q_y <= 0.0 {
            return Err(Error::Contract(format!("target {target} is outside the soft-target support")));
        }
        let total = q.total_mass();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Contract(format!("soft target sums to {total}, expected 1")));
        }
        Ok(q)
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// Probability assigned to the target item.
    pub fn q_y(&self) -> f64 {
        self.q_y
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn prior(&self) -> Option<&(f64, PriorDist)> {
        self.prior.as_ref()
    }

    pub fn is_one_hot(&self) -> bool {
        self.prior.is_none() && self.entries.len() == 1
    }

    pub fn prob(&self, item: usize) -> f64 {
        let explicit = self
            .entries
            .binary_search_by_key(&item, |&(i, _)| i)
            .map(|k| self.entries[k].1)
            .unwrap_or(0.0);
        match &self.prior {
            Some((w, dist)) => explicit + w * dist.prob(item),
            None => explicit,
        }
    }

    fn total_mass(&self) -> f64 {
        let explicit: f64 = self.entries.iter().map(|&(_, q)| q).sum();
        match &self.prior {
            Some((w, PriorDist::Uniform { .. })) => explicit + w,
            Some((w, PriorDist::Table(t))) => explicit + w * t.iter().sum::<f64>(),
            None => explicit,
        }
    }

    /// Visits every item with `q_i > 0` in ascending item order.
    pub fn for_each_nonzero(&self, mut f: impl FnMut(usize, f64)) {
        match &self.prior {
            None => self.entries.iter().for_each(|&(i, q)| f(i, q)),
            Some((w, dist)) => {
                let mut next = self.entries.iter().peekable();
                for i in 0..dist.len() {
                    let mut q = w * dist.prob(i);
                    if let Some(&&(j, e)) = next.peek() {
                        if j == i {
                            q += e;
                            next.next();
                        }
                    }
                    if q > 0.0 {
                        f(i, q);
                    }
                }
                // explicit entries beyond the prior's range
                for &(i, q) in next {
                    f(i, q);
                }
            }
        }
    }

    pub fn to_dense(&self, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; m];
        self.for_each_nonzero(|i, q| {
            if i < m {
                out[i] = q;
            }
        });
        out
    }

    fn max_item(&self) -> Option<usize> {
        let explicit = self.entries.last().map(|&(i, _)| i);
        let prior = self.prior.as_ref().and_then(|(_, d)| d.len().checked_sub(1));
        explicit.max(prior)
    }
}

/// Loss value plus `d loss / d logits`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_logits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Cross-entropy against the one-hot target.
    Ce,
    /// Label smoothing: KL to `(1 − ε)·onehot + ε·uniform`.
    Ls,
    Coupled,
    Decoupled,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(LossMode::Ce),
            "ls" => Ok(LossMode::Ls),
            "coupled" => Ok(LossMode::Coupled),
            "decoupled" => Ok(LossMode::Decoupled),
            other => Err(Error::InvalidArgument(format!("unknown loss mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mode: LossMode,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon_smooth: f64,
    pub eps_log: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Ce,
            lambda1: 0.5,
            lambda2: 0.5,
            epsilon_smooth: 0.1,
            eps_log: DEFAULT_EPS_LOG,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name}={x} outside [0, 1]")))
            }
        };
        unit("lambda1", self.lambda1)?;
        unit("lambda2", self.lambda2)?;
        if !(0.0..1.0).contains(&self.epsilon_smooth) {
            return Err(Error::Config(format!(
                "epsilon_smooth={} outside [0, 1)",
                self.epsilon_smooth
            )));
        }
        if !(self.eps_log > 0.0 && self.eps_log < 1.0) {
            return Err(Error::Config(format!("eps_log={} must be in (0, 1)", self.eps_log)));
        }
        Ok(())
    }

    /// Evaluates the configured objective for one sample.
    ///
    /// `q` supplies the target item for every mode; CE and LS ignore the rest of it.
    pub fn evaluate(&self, p: &PredictionDistribution, q: &SoftTarget) -> Result<LossOutput> {
        let y = q.target();
        match self.mode {
            LossMode::Ce => ce_onehot(p, y, self.eps_log),
            LossMode::Ls => {
                let smoothed = make_uniform_smoothing(y, p.len(), self.epsilon_smooth);
                coupled_loss(p, &smoothed, y, 1.0, self.eps_log)
            }
            LossMode::Coupled => coupled_loss(p, q, y, self.lambda1, self.eps_log),
            LossMode::Decoupled => decoupled_loss(p, q, y, self.lambda1, self.lambda2, self.eps_log),
        }
    }
}

fn clamped_log(log_p: f64, eps_log: f64) -> f64 {
    log_p.max(eps_log.ln())
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

fn check_target(p: &PredictionDistribution, y: usize) -> Result<()> {
    if y >= p.len() {
        return Err(Error::Contract(format!("target {y} outside {} items", p.len())));
    }
    Ok(())
}

fn check_soft_target(p: &PredictionDistribution, q: &SoftTarget, y: usize) -> Result<()> {
    check_target(p, y)?;
    if q.prob(y) <= 0.0 {
        return Err(Error::Contract(format!("target {y} outside the soft-target support")));
    }
    if q.max_item().is_some_and(|i| i >= p.len()) {
        return Err(Error::Contract("soft target references items beyond the catalog".into()));
    }
    Ok(())
}

/// `−log p_y` with gradient `p − onehot(y)`.
pub fn ce_onehot(p: &PredictionDistribution, y: usize, eps_log: f64) -> Result<LossOutput> {
    check_target(p, y)?;
    let mut grad_logits = p.probs.clone();
    grad_logits[y] -= 1.0;
    Ok(LossOutput {
        loss: -clamped_log(p.log_probs[y], eps_log),
        grad_logits,
    })
}

/// `(1 − ε)·onehot(y) + ε·uniform(m)`, stored with a uniform prior.
pub fn make_uniform_smoothing(y: usize, m: usize, epsilon: f64) -> SoftTarget {
    assert!((0.0..1.0).contains(&epsilon), "smoothing epsilon must be in [0, 1)");
    if epsilon == 0.0 {
        return SoftTarget::one_hot(y);
    }
    SoftTarget::with_prior(y, vec![(y, 1.0 - epsilon)], epsilon, PriorDist::Uniform { items: m })
        .expect("label smoothing always yields a valid soft target")
}

fn kl_to_prediction(p: &PredictionDistribution, q: &SoftTarget, eps_log: f64) -> f64 {
    let mut kl = 0.0;
    q.for_each_nonzero(|i, qi| kl += qi * (qi.ln() - clamped_log(p.log_probs[i], eps_log)));
    kl
}

/// `λ1 · KL(q ‖ p) + (1 − λ1) · (−log p_y)`.
pub fn coupled_loss(
    p: &PredictionDistribution,
    q: &SoftTarget,
    y: usize,
    lambda1: f64,
    eps_log: f64,
) -> Result<LossOutput> {
    check_soft_target(p, q, y)?;
    let kl = if lambda1 > 0.0 {
        kl_to_prediction(p, q, eps_log)
    } else {
        0.0
    };
    let ce = -clamped_log(p.log_probs[y], eps_log);
    let mut grad_logits = p.probs.clone();
    q.for_each_nonzero(|i, qi| grad_logits[i] -= lambda1 * qi);
    grad_logits[y] -= 1.0 - lambda1;
    Ok(LossOutput {
        loss: lambda1 * kl + (1.0 - lambda1) * ce,
        grad_logits,
    })
}

/// The pieces of the coupled loss split into target and non-target parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDecomposition {
    /// Bernoulli parameter of the target-confidence label, `λ1·q_y + 1 − λ1`.
    pub a: f64,
    pub kl_b: f64,
    pub kl_hat: f64,
    /// `λ1 · (1 − q_y)`.
    pub hat_weight: f64,
    /// Model-independent remainder.
    pub f_q: f64,
    /// Gradient of `kl_b` with respect to the logits.
    pub grad_b: Vec<f64>,
    /// Gradient of `kl_hat` with respect to the logits (zero at `y`).
    pub grad_hat: Vec<f64>,
}

impl LossDecomposition {
    /// Gradient of `kl_b + hat_weight · kl_hat`.
    pub fn recombined_gradient(&self) -> Vec<f64> {
        self.grad_b
            .iter()
            .zip(&self.grad_hat)
            .map(|(b, h)| b + self.hat_weight * h)
            .collect()
    }
}

/// `log(1 − p_y)` computed as a log-sum-exp over the non-target log-probabilities.
fn log_rest(p: &PredictionDistribution, y: usize) -> f64 {
    let max = p
        .log_probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = p
        .log_probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &l)| (l - max).exp())
        .sum();
    max + sum.ln()
}

pub fn decompose(
    p: &PredictionDistribution,
    q: &SoftTarget,
    y: usize,
    lambda1: f64,
    eps_log: f64,
) -> Result<LossDecomposition> {
    check_soft_target(p, q, y)?;
    let m = p.len();
    let mut rest_mass = 0.0;
    q.for_each_nonzero(|i, qi| {
        if i != y {
            rest_mass += qi;
        }
    });
    let hat_weight = lambda1 * rest_mass;
    let a = 1.0 - hat_weight;

    let log_py = clamped_log(p.log_probs[y], eps_log);
    let log_rest_raw = log_rest(p, y);
    let log_1m_py = clamped_log(log_rest_raw, eps_log);
    let kl_b = xlogx(a) - a * log_py + xlogx(1.0 - a) - (1.0 - a) * log_1m_py;

    let p_y = p.probs[y];
    let p_hat = |j: usize| (p.log_probs[j] - log_rest_raw).exp();
    let mut grad_b = vec![0.0; m];
    grad_b[y] = p_y - a;
    for (j, g) in grad_b.iter_mut().enumerate() {
        if j != y {
            *g = p_hat(j) * (a - p_y);
        }
    }

    let mut kl_hat = 0.0;
    let mut grad_hat = vec![0.0; m];
    if rest_mass > 0.0 {
        for (j, g) in grad_hat.iter_mut().enumerate() {
            if j != y {
                *g = p_hat(j);
            }
        }
        q.for_each_nonzero(|i, qi| {
            if i != y {
                let q_hat = qi / rest_mass;
                let log_p_hat = clamped_log(p.log_probs[i], eps_log) - log_1m_py;
                kl_hat += q_hat * (q_hat.ln() - log_p_hat);
                grad_hat[i] -= q_hat;
            }
        });
    }

    let coupled = coupled_loss(p, q, y, lambda1, eps_log)?.loss;
    Ok(LossDecomposition {
        a,
        kl_b,
        kl_hat,
        hat_weight,
        f_q: coupled - kl_b - hat_weight * kl_hat,
        grad_b,
        grad_hat,
    })
}

/// `λ2 · KL(q_b ‖ p_b) + (1 − λ2) · KL(q̂ ‖ p̂)`.
pub fn decoupled_loss(
    p: &PredictionDistribution,
    q: &SoftTarget,
    y: usize,
    lambda1: f64,
    lambda2: f64,
    eps_log: f64,
) -> Result<LossOutput> {
    let dec = decompose(p, q, y, lambda1, eps_log)?;
    let grad_logits = dec
        .grad_b
        .iter()
        .zip(&dec.grad_hat)
        .map(|(b, h)| lambda2 * b + (1.0 - lambda2) * h)
        .collect();
    Ok(LossOutput {
        loss: lambda2 * dec.kl_b + (1.0 - lambda2) * dec.kl_hat,
        grad_logits,
    })
}

/// Outcome of an identity check: whether it held and the largest residual seen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verification {
    pub passed: bool,
    pub max_residual: f64,
}

impl Verification {
    fn from_residual(max_residual: f64, tol: f64) -> Self {
        Self {
            passed: max_residual <= tol,
            max_residual,
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central finite differences of a loss of the logits.
pub fn finite_difference_grad(logits: &[f64], h: f64, mut loss: impl FnMut(&PredictionDistribution) -> f64) -> Vec<f64> {
    let mut z = logits.to_vec();
    (0..z.len())
        .map(|j| {
            let orig = z[j];
            z[j] = orig + h;
            let up = loss(&PredictionDistribution::from_logits(&z));
            z[j] = orig - h;
            let down = loss(&PredictionDistribution::from_logits(&z));
            z[j] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

const FD_STEP: f64 = 1e-5;

/// Checks that the decomposition reproduces the coupled loss and its logit gradient.
///
/// Residuals checked: the loss identity itself, analytic coupled gradient against the
/// analytic gradient of `kl_b + hat_weight·kl_hat`, and both against central finite
/// differences through the softmax.
pub fn verify_decomposition(
    p: &PredictionDistribution,
    q: &SoftTarget,
    y: usize,
    lambda1: f64,
    tol: f64,
) -> Result<Verification> {
    let eps = DEFAULT_EPS_LOG;
    let coupled = coupled_loss(p, q, y, lambda1, eps)?;
    let dec = decompose(p, q, y, lambda1, eps)?;
    let mut residual = (coupled.loss - (dec.kl_b + dec.hat_weight * dec.kl_hat + dec.f_q)).abs();

    let recombined = dec.recombined_gradient();
    residual = residual.max(max_abs_diff(&coupled.grad_logits, &recombined));

    // log-probabilities are valid logits for p
    let z = &p.log_probs;
    let fd_coupled = finite_difference_grad(z, FD_STEP, |pp| {
        coupled_loss(pp, q, y, lambda1, eps).map(|o| o.loss).unwrap_or(f64::NAN)
    });
    let fd_split = finite_difference_grad(z, FD_STEP, |pp| {
        decompose(pp, q, y, lambda1, eps)
            .map(|d| d.kl_b + d.hat_weight * d.kl_hat)
            .unwrap_or(f64::NAN)
    });
    residual = residual
        .max(max_abs_diff(&fd_coupled, &coupled.grad_logits))
        .max(max_abs_diff(&fd_split, &recombined));
    if residual.is_nan() {
        residual = f64::INFINITY;
    }
    Ok(Verification::from_residual(residual, tol))
}

/// The `λ2` at which the decoupled loss reproduces the coupled loss (up to scale).
pub fn redline_lambda2(lambda1: f64, q_y: f64) -> f64 {
    1.0 / (1.0 + lambda1 * (1.0 - q_y))
}

/// Checks `grad(decoupled at λ2*) = λ2* · grad(coupled)` element-wise.
pub fn verify_redline(
    p: &PredictionDistribution,
    q: &SoftTarget,
    y: usize,
    lambda1: f64,
    tol: f64,
) -> Result<Verification> {
    let eps = DEFAULT_EPS_LOG;
    let lambda2 = redline_lambda2(lambda1, q.prob(y));
    let coupled = coupled_loss(p, q, y, lambda1, eps)?;
    let decoupled = decoupled_loss(p, q, y, lambda1, lambda2, eps)?;
    let scaled: Vec<f64> = coupled.grad_logits.iter().map(|g| lambda2 * g).collect();
    Ok(Verification::from_residual(
        max_abs_diff(&decoupled.grad_logits, &scaled),
        tol,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = DEFAULT_EPS_LOG;

    fn dist(probs: &[f64]) -> PredictionDistribution {
        PredictionDistribution {
            probs: probs.to_vec(),
            log_probs: probs.iter().map(|x| x.ln()).collect(),
        }
    }

    fn three_item() -> (PredictionDistribution, SoftTarget) {
        let p = dist(&[0.5, 0.3, 0.2]);
        let q = SoftTarget::from_entries(0, vec![(0, 0.8), (1, 0.15), (2, 0.05)]).unwrap();
        (p, q)
    }

    #[test]
    fn ce_hand_values() {
        let u = dist(&[0.25; 4]);
        assert!((ce_onehot(&u, 0, EPS).unwrap().loss - 4f64.ln()).abs() < 1e-12);
        let (p, _) = three_item();
        let out = ce_onehot(&p, 0, EPS).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(out.grad_logits, vec![-0.5, 0.3, 0.2]);
        let perfect = PredictionDistribution::from_logits(&[0.0, -1e4, -1e4]);
        assert!(ce_onehot(&perfect, 0, EPS).unwrap().loss < 1e-12);
    }

    #[test]
    fn uniform_smoothing_values() {
        assert!(make_uniform_smoothing(3, 10, 0.0).is_one_hot());
        let q = make_uniform_smoothing(3, 10, 0.1);
        assert!((q.q_y() - 0.91).abs() < 1e-15);
        assert!((q.prob(4) - 0.01).abs() < 1e-15);
        let s: f64 = q.to_dense(10).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coupled_hand_value() {
        let (p, q) = three_item();
        let out = coupled_loss(&p, &q, 0, 0.5, EPS).unwrap();
        assert!((out.loss - 0.447932).abs() < 1e-6, "{}", out.loss);
    }

    #[test]
    fn coupled_with_one_hot_is_ce() {
        let (p, _) = three_item();
        let d = SoftTarget::one_hot(1);
        for lambda1 in [0.0, 0.3, 1.0] {
            let a = coupled_loss(&p, &d, 1, lambda1, EPS).unwrap();
            let b = ce_onehot(&p, 1, EPS).unwrap();
            assert!((a.loss - b.loss).abs() < 1e-15);
            assert!(max_abs_diff(&a.grad_logits, &b.grad_logits) < 1e-15);
        }
    }

    #[test]
    fn coupled_rejects_target_outside_support() {
        let (p, q) = three_item();
        let narrow = SoftTarget::from_entries(1, vec![(1, 1.0)]).unwrap();
        assert!(matches!(coupled_loss(&p, &narrow, 0, 0.5, EPS), Err(Error::Contract(_))));
        assert!(coupled_loss(&p, &q, 5, 0.5, EPS).is_err());
    }

    #[test]
    fn decomposition_hand_values() {
        let (p, q) = three_item();
        let d = decompose(&p, &q, 0, 0.5, EPS).unwrap();
        assert!((d.a - 0.9).abs() < 1e-12);
        assert!((d.kl_b - 0.368064).abs() < 1e-6, "{}", d.kl_b);
        assert!((d.kl_hat - 0.049857).abs() < 1e-6, "{}", d.kl_hat);
        assert!((d.hat_weight - 0.1).abs() < 1e-12);
        assert!((d.f_q - 0.074882).abs() < 1e-6, "{}", d.f_q);
    }

    #[test]
    fn decomposition_of_one_hot() {
        let (p, _) = three_item();
        let d = decompose(&p, &SoftTarget::one_hot(0), 0, 0.7, EPS).unwrap();
        assert_eq!(d.kl_hat, 0.0);
        assert_eq!(d.hat_weight, 0.0);
        assert!((d.a - 1.0).abs() < 1e-15);
        assert!((d.kl_b + 0.5f64.ln()).abs() < 1e-12);
        assert!(d.grad_hat.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn decoupled_hand_value_and_endpoints() {
        let (p, q) = three_item();
        let out = decoupled_loss(&p, &q, 0, 0.5, 0.5, EPS).unwrap();
        assert!((out.loss - 0.208961).abs() < 1e-6, "{}", out.loss);
        let d = decompose(&p, &q, 0, 0.5, EPS).unwrap();
        let only_b = decoupled_loss(&p, &q, 0, 0.5, 1.0, EPS).unwrap();
        assert_eq!(only_b.loss, d.kl_b);
        let only_hat = decoupled_loss(&p, &q, 0, 0.5, 0.0, EPS).unwrap();
        assert_eq!(only_hat.loss, d.kl_hat);
        // the non-target term cannot move p_y: zero gradient on y, and the gradient
        // sums to zero over the remaining logits
        assert_eq!(only_hat.grad_logits[0], 0.0);
        assert!(only_hat.grad_logits.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn redline_values() {
        assert!((redline_lambda2(0.5, 0.8) - 0.909091).abs() < 1e-6);
        assert_eq!(redline_lambda2(0.0, 0.3), 1.0);
        assert_eq!(redline_lambda2(0.7, 1.0), 1.0);
        assert!((redline_lambda2(1.0, 0.5) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn verifiers_pass_on_hand_example() {
        let (p, q) = three_item();
        assert!(verify_decomposition(&p, &q, 0, 0.5, 1e-6).unwrap().passed);
        assert!(verify_redline(&p, &q, 0, 0.5, 1e-12).unwrap().passed);
        assert!(verify_redline(&p, &SoftTarget::one_hot(2), 2, 0.5, 1e-12).unwrap().passed);
        assert!(!verify_decomposition(&p, &q, 0, 0.5, 0.0).unwrap().passed);
    }

    #[test]
    fn prior_backed_target_matches_dense_equivalent() {
        let m = 6;
        let table: Arc<[f64]> = vec![0.1, 0.2, 0.3, 0.2, 0.1, 0.1].into();
        let q = SoftTarget::with_prior(2, vec![(2, 0.5)], 0.5, PriorDist::Table(table.clone())).unwrap();
        let entries: Vec<(usize, f64)> = q.to_dense(m).into_iter().enumerate().collect();
        let dense = SoftTarget::from_entries(2, entries).unwrap();
        let p = PredictionDistribution::from_logits(&[0.3, -0.1, 0.5, 0.0, 1.2, -0.7]);
        for mode in [LossMode::Coupled, LossMode::Decoupled] {
            let cfg = LossConfig {
                mode,
                lambda1: 0.6,
                lambda2: 0.3,
                ..LossConfig::default()
            };
            let a = cfg.evaluate(&p, &q).unwrap();
            let b = cfg.evaluate(&p, &dense).unwrap();
            assert!((a.loss - b.loss).abs() < 1e-14);
            assert!(max_abs_diff(&a.grad_logits, &b.grad_logits) < 1e-14);
        }
    }

    #[test]
    fn soft_target_validation() {
        assert!(SoftTarget::from_entries(0, vec![(0, 0.5), (1, 0.4)]).is_err());
        assert!(SoftTarget::from_entries(0, vec![(0, 0.5), (0, 0.5)]).is_err());
        assert!(SoftTarget::from_entries(2, vec![(0, 0.5), (1, 0.5)]).is_err());
        assert!(SoftTarget::from_entries(0, vec![(0, 1.5), (1, -0.5)]).is_err());
    }

    #[test]
    fn loss_config_validation() {
        let mut cfg = LossConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lambda1 = 1.2;
        assert!(cfg.validate().is_err());
        cfg.lambda1 = 0.5;
        cfg.epsilon_smooth = 1.0;
        assert!(cfg.validate().is_err());
    }
}
