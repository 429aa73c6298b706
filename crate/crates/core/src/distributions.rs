//! Answer distributions over a closed vocabulary and the two rules for
//! combining expert distributions.
//!
//! Distributions are stored as natural-log probabilities. Probabilities that
//! enter from the outside are floored at [`PROB_FLOOR`] before the log is
//! taken, so a weighted sum of log-probabilities stays finite even when some
//! weights are negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest probability admitted before taking logs, and the clamp applied to
/// non-positive weighted sums in [`mixture_combine`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Ordered, duplicate-free set of answer strings (the verbalizer set).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct AnswerVocabulary {
    labels: Vec<String>,
}

impl AnswerVocabulary {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::InvalidVocabulary(format!(
                "need at least 2 labels, got {}",
                labels.len()
            )));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::InvalidVocabulary(format!("duplicate label `{l}`")));
            }
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn require_index(&self, label: &str) -> Result<usize> {
        self.index_of(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }
}

impl TryFrom<Vec<String>> for AnswerVocabulary {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        Self::new(labels)
    }
}

impl From<AnswerVocabulary> for Vec<String> {
    fn from(v: AnswerVocabulary) -> Self {
        v.labels
    }
}

/// Numerically stable `ln Σ exp(x_i)`. Returns `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// A normalized distribution over an [`AnswerVocabulary`], in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    logp: Vec<f64>,
}

impl TokenDistribution {
    /// Normalize raw log-scores: `logp = raw - logsumexp(raw)`.
    pub fn log_normalize(raw: &[f64]) -> Result<Self> {
        if raw.len() < 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                found: raw.len(),
            });
        }
        if let Some(index) = raw.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput { index });
        }
        let z = logsumexp(raw);
        Ok(Self {
            logp: raw.iter().map(|x| x - z).collect(),
        })
    }

    /// Build from (possibly unnormalized) probabilities, flooring each entry
    /// at [`PROB_FLOOR`].
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if let Some(index) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::NonFiniteInput { index });
        }
        let logs: Vec<f64> = probs.iter().map(|p| p.max(PROB_FLOOR).ln()).collect();
        Self::log_normalize(&logs)
    }

    pub fn uniform(size: usize) -> Self {
        let lp = -(size as f64).ln();
        Self {
            logp: vec![lp; size],
        }
    }

    pub fn logp(&self) -> &[f64] {
        &self.logp
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logp.iter().map(|l| l.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp.is_empty()
    }
}

/// Per-expert mixing coefficients. Entries may be negative (anti-experts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MixtureWeights(Vec<f64>);

impl MixtureWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if let Some(index) = w.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput { index });
        }
        Ok(Self(w))
    }

    pub fn ones(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// How expert distributions are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combination {
    /// Weighted product of experts (log-linear pooling).
    #[default]
    Poe,
    /// Weighted arithmetic mixture of probabilities.
    Mixture,
}

impl Combination {
    pub fn combine(self, w: &[f64], experts: &[TokenDistribution]) -> Result<TokenDistribution> {
        match self {
            Combination::Poe => poe_combine(w, experts),
            Combination::Mixture => mixture_combine(w, experts),
        }
    }
}

impl std::str::FromStr for Combination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poe" => Ok(Combination::Poe),
            "mixture" => Ok(Combination::Mixture),
            other => Err(Error::config(
                "combination",
                format!("expected `poe` or `mixture`, got `{other}`"),
            )),
        }
    }
}

fn check_shapes(w: &[f64], experts: &[TokenDistribution]) -> Result<usize> {
    if experts.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: 0,
        });
    }
    if w.len() != experts.len() {
        return Err(Error::DimensionMismatch {
            expected: experts.len(),
            found: w.len(),
        });
    }
    let v = experts[0].len();
    for e in experts {
        if e.len() != v {
            return Err(Error::DimensionMismatch {
                expected: v,
                found: e.len(),
            });
        }
    }
    Ok(v)
}

/// `p(y) ∝ exp(Σ_i w_i log p_i(y))`.
pub fn poe_combine(w: &[f64], experts: &[TokenDistribution]) -> Result<TokenDistribution> {
    let v = check_shapes(w, experts)?;
    let mut scores = vec![0.0; v];
    for (wi, e) in w.iter().zip(experts) {
        for (s, l) in scores.iter_mut().zip(&e.logp) {
            *s += wi * l;
        }
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::DegenerateDistribution);
    }
    TokenDistribution::log_normalize(&scores)
}

/// `p(y) ∝ max(ε, Σ_i w_i p_i(y))`. Negative weighted sums, which only occur
/// with negative weights, are clamped to `ε = PROB_FLOOR`.
pub fn mixture_combine(w: &[f64], experts: &[TokenDistribution]) -> Result<TokenDistribution> {
    let v = check_shapes(w, experts)?;
    let sums = mixture_sums(w, experts, v);
    if sums.iter().all(|s| *s <= 0.0) || sums.iter().any(|s| !s.is_finite()) {
        return Err(Error::DegenerateDistribution);
    }
    let logs: Vec<f64> = sums.iter().map(|s| s.max(PROB_FLOOR).ln()).collect();
    TokenDistribution::log_normalize(&logs)
}

pub(crate) fn mixture_sums(w: &[f64], experts: &[TokenDistribution], v: usize) -> Vec<f64> {
    let mut sums = vec![0.0; v];
    for (wi, e) in w.iter().zip(experts) {
        for (s, l) in sums.iter_mut().zip(&e.logp) {
            *s += wi * l.exp();
        }
    }
    sums
}

/// Greedy decoding over the closed vocabulary; ties go to the lowest index.
pub fn predict_label(d: &TokenDistribution) -> usize {
    let mut best = 0;
    for (i, l) in d.logp.iter().enumerate() {
        if *l > d.logp[best] {
            best = i;
        }
    }
    best
}
