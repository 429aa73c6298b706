//! Learning weighting-function parameters by maximizing the conditional
//! log-likelihood of a training split.
//!
//! Expert distributions do not depend on the weights, so they are computed
//! once per (example, subset) by [`precompute`] and the optimization loop only
//! touches the cached log-probabilities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    mixture_sums, predict_label, AnswerVocabulary, Combination, TokenDistribution, PROB_FLOOR,
};
use crate::error::{Error, Result};
use crate::experts::{ExpertSource, Query};
use crate::partitioning::Demonstration;
use crate::rng;
use crate::weighting::{
    imle_grad, init_scalar_weights, topk_mask, HyperNetwork, ScalarWeights, SparseWeighting,
    WeightCheckpoint, WeightingKind, HYPERNET_HIDDEN, HYPERNET_INPUT_DIM,
};

/// A query with its gold answer index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub input: String,
    pub gold: usize,
}

/// Cached expert distributions for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutputs {
    pub experts: Vec<TokenDistribution>,
    pub gold: usize,
}

/// Evaluate every subset on every example, in parallel. Output order follows
/// `examples`, expert order follows `subsets`.
pub fn precompute<E: ExpertSource + ?Sized>(
    expert: &E,
    subsets: &[Vec<&Demonstration>],
    examples: &[LabeledExample],
    vocab: &AnswerVocabulary,
) -> Result<Vec<ExpertOutputs>> {
    examples
        .par_iter()
        .map(|ex| {
            let query = Query { id: &ex.id, text: &ex.input };
            let experts = subsets
                .iter()
                .map(|s| expert.evaluate(s, query, vocab))
                .collect::<Result<Vec<_>>>()?;
            Ok(ExpertOutputs { experts, gold: ex.gold })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Where the IMLE mask estimate is taken: once per example, with the
/// resulting mask differences averaged, or once per optimizer step on the
/// averaged `∂L/∂m̂`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImleScope {
    Example,
    #[default]
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub seed: u64,
    pub combination: Combination,
    pub weighting: WeightingKind,
    pub optimizer: OptimizerKind,
    /// Project scalar weights onto `w ≥ 0` after every step.
    pub nonnegative: bool,
    /// Retained experts for sparse weighting.
    pub k_prime: Option<usize>,
    pub lambda: f64,
    pub imle_scope: ImleScope,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 5,
            batch_size: 1,
            grad_accumulation: 12,
            seed: 42,
            combination: Combination::Poe,
            weighting: WeightingKind::Scalar,
            optimizer: OptimizerKind::Adam,
            nonnegative: false,
            k_prime: None,
            lambda: SparseWeighting::DEFAULT_LAMBDA,
            imle_scope: ImleScope::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("training.learning_rate", "must be positive"));
        }
        if self.epochs < 1 {
            return Err(Error::config("training.epochs", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        if self.grad_accumulation < 1 {
            return Err(Error::config("training.grad_accumulation", "must be at least 1"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("training.lambda", "must be positive"));
        }
        if self.weighting == WeightingKind::Uniform {
            return Err(Error::config("training.weighting", "uniform weights have nothing to train"));
        }
        if self.weighting == WeightingKind::Sparse && self.k_prime.is_none() {
            return Err(Error::config("training.k_prime", "required for sparse weighting"));
        }
        Ok(())
    }
}

/// Negative log-likelihood of `gold` under the combined distribution.
pub fn nll_loss(
    w: &[f64],
    experts: &[TokenDistribution],
    gold: usize,
    combination: Combination,
) -> Result<f64> {
    let d = combination.combine(w, experts)?;
    Ok(-d.logp()[gold])
}

/// `∂L/∂w_i = E_{y∼p}[log p_i(y)] − log p_i(y*)` for the product of experts.
pub fn grad_scalar_poe(w: &[f64], experts: &[TokenDistribution], gold: usize) -> Result<Vec<f64>> {
    Ok(loss_and_grad(w, experts, gold, Combination::Poe)?.1)
}

/// Loss and gradient with respect to the mixing weights, for either rule.
///
/// For the probability mixture, labels whose weighted sum sits at the
/// `ε` clamp contribute a zero subgradient.
pub fn loss_and_grad(
    w: &[f64],
    experts: &[TokenDistribution],
    gold: usize,
    combination: Combination,
) -> Result<(f64, Vec<f64>)> {
    let combined = combination.combine(w, experts)?;
    let loss = -combined.logp()[gold];
    let grad = match combination {
        Combination::Poe => {
            let q = combined.probs();
            experts
                .iter()
                .map(|e| {
                    let expected: f64 = q.iter().zip(e.logp()).map(|(p, l)| p * l).sum();
                    expected - e.logp()[gold]
                })
                .collect()
        }
        Combination::Mixture => {
            let v = combined.len();
            let sums = mixture_sums(w, experts, v);
            let z: f64 = sums.iter().map(|s| s.max(PROB_FLOOR)).sum();
            let active: Vec<bool> = sums.iter().map(|s| *s > PROB_FLOOR).collect();
            experts
                .iter()
                .map(|e| {
                    let p: Vec<f64> = e.probs();
                    let norm: f64 = p.iter().zip(&active).filter(|(_, a)| **a).map(|(x, _)| x).sum();
                    let own = if active[gold] { p[gold] / sums[gold] } else { 0.0 };
                    norm / z - own
                })
                .collect()
        }
    };
    Ok((loss, grad))
}

/// Central differences `(L(p + h e_i) − L(p − h e_i)) / 2h`.
pub fn grad_finite_difference<F>(loss_fn: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            p[i] = params[i] + h;
            let up = loss_fn(&p);
            p[i] = params[i] - h;
            let down = loss_fn(&p);
            p[i] = params[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i − b_i| / max(‖a‖∞, ‖b‖∞, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(1e-8, f64::max);
    diff / scale
}

/// Flattened hypernetwork parameter gradient.
pub fn grad_hypernet(
    net: &HyperNetwork,
    features: &[Vec<f64>],
    experts: &[TokenDistribution],
    gold: usize,
    combination: Combination,
) -> Result<Vec<f64>> {
    let w = net.forward_features(features);
    let (_, gw) = loss_and_grad(&w, experts, gold, combination)?;
    Ok(net.backward(features, &gw))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrad {
    pub w_prime: Vec<f64>,
    pub m: Vec<f64>,
    /// `−∂L/∂m̂`, the direction passed to [`imle_grad`].
    pub mask_descent: Vec<f64>,
}

/// Gradients for `w = w′ ⊙ top-k′(m)`.
///
/// `w′` receives the dense gradient through the mask. `m` receives the
/// perturb-and-compare estimate `top-k′(m) − top-k′(m − λ ∂L/∂m̂)`, with
/// `∂L/∂m̂_i = w′_i ∂L/∂w_i`; it is computed as `imle_grad(m, −∂L/∂m̂)` so a
/// descent step raises the coefficients of experts whose inclusion lowers the
/// loss.
pub fn grad_sparse(
    sw: &SparseWeighting,
    experts: &[TokenDistribution],
    gold: usize,
    combination: Combination,
) -> Result<(f64, SparseGrad)> {
    let mask = topk_mask(&sw.m, sw.k_prime)?;
    let w: Vec<f64> = sw.w_prime.iter().zip(&mask).map(|(a, b)| a * b).collect();
    let (loss, gw) = loss_and_grad(&w, experts, gold, combination)?;
    let w_prime = gw.iter().zip(&mask).map(|(g, b)| g * b).collect();
    let descent: Vec<f64> = sw.w_prime.iter().zip(&gw).map(|(a, g)| -(a * g)).collect();
    let m = imle_grad(&sw.m, &descent, sw.k_prime, sw.lambda)?;
    Ok((loss, SparseGrad { w_prime, m, mask_descent: descent }))
}

/// SGD or Adam (β1 = 0.9, β2 = 0.999, ε = 1e-8) with an optional projection
/// onto `p ≥ 0` for selected coordinates.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    nonnegative: Vec<bool>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, nonnegative: Vec<bool>) -> Self {
        let n = nonnegative.len();
        Self { kind, lr, nonnegative, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.nonnegative.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - Self::BETA1.powi(self.t);
                let c2 = 1.0 - Self::BETA2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
                    self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
                }
            }
        }
        for (p, nn) in params.iter_mut().zip(&self.nonnegative) {
            if *nn && *p < 0.0 {
                *p = 0.0;
            }
        }
    }
}

/// One optimizer step on fresh state (SGD has none; Adam's first step).
pub fn optimizer_step(params: &[f64], grad: &[f64], cfg: &TrainingConfig) -> Vec<f64> {
    let mut p = params.to_vec();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, vec![cfg.nonnegative; p.len()]);
    opt.step(&mut p, grad);
    p
}

/// A weighting function together with its trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Trainable {
    Uniform { k: usize },
    Scalar(ScalarWeights),
    Hypernet { net: HyperNetwork, features: Vec<Vec<f64>> },
    Sparse(SparseWeighting),
}

impl Trainable {
    /// Fresh parameters for `cfg.weighting` over the given subsets.
    pub fn init(cfg: &TrainingConfig, subsets: &[Vec<&Demonstration>]) -> Result<Self> {
        let k = subsets.len();
        Ok(match cfg.weighting {
            WeightingKind::Uniform => Trainable::Uniform { k },
            WeightingKind::Scalar => Trainable::Scalar(init_scalar_weights(k)?),
            WeightingKind::Sparse => Trainable::Sparse(SparseWeighting::init(
                k,
                cfg.k_prime.unwrap_or(k),
                cfg.lambda,
            )?),
            WeightingKind::Hypernet => {
                if k == 0 {
                    return Err(Error::InvalidK { k, n: 0 });
                }
                let net = HyperNetwork::random(
                    cfg.seed,
                    HYPERNET_INPUT_DIM,
                    HYPERNET_HIDDEN,
                    1.0 / k as f64,
                );
                let features = net.featurize(subsets);
                Trainable::Hypernet { net, features }
            }
        })
    }

    pub fn kind(&self) -> WeightingKind {
        match self {
            Trainable::Uniform { .. } => WeightingKind::Uniform,
            Trainable::Scalar(_) => WeightingKind::Scalar,
            Trainable::Hypernet { .. } => WeightingKind::Hypernet,
            Trainable::Sparse(_) => WeightingKind::Sparse,
        }
    }

    /// Effective mixing weights.
    pub fn weights(&self) -> Vec<f64> {
        match self {
            Trainable::Uniform { k } => vec![1.0 / *k as f64; *k],
            Trainable::Scalar(s) => s.w.clone(),
            Trainable::Hypernet { net, features } => net.forward_features(features),
            Trainable::Sparse(sw) => {
                let mask = topk_mask(&sw.m, sw.k_prime).expect("validated k'");
                sw.w_prime.iter().zip(&mask).map(|(a, b)| a * b).collect()
            }
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Trainable::Uniform { .. } => Vec::new(),
            Trainable::Scalar(s) => s.w.clone(),
            Trainable::Hypernet { net, .. } => net.params(),
            Trainable::Sparse(sw) => sw.w_prime.iter().chain(&sw.m).copied().collect(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        match self {
            Trainable::Uniform { .. } => {}
            Trainable::Scalar(s) => s.w.copy_from_slice(p),
            Trainable::Hypernet { net, .. } => net.set_params(p),
            Trainable::Sparse(sw) => {
                let k = sw.w_prime.len();
                sw.w_prime.copy_from_slice(&p[..k]);
                sw.m.copy_from_slice(&p[k..]);
            }
        }
    }

    /// Which parameters the nonnegativity projection applies to.
    fn projected(&self, nonnegative: bool) -> Vec<bool> {
        let n = self.params().len();
        match self {
            Trainable::Scalar(_) => vec![nonnegative; n],
            Trainable::Sparse(sw) => {
                let k = sw.w_prime.len();
                (0..n).map(|i| nonnegative && i < k).collect()
            }
            _ => vec![false; n],
        }
    }

    pub fn loss_and_grad(&self, out: &ExpertOutputs, combination: Combination) -> Result<(f64, Vec<f64>)> {
        match self {
            Trainable::Uniform { .. } => {
                Ok((nll_loss(&self.weights(), &out.experts, out.gold, combination)?, Vec::new()))
            }
            Trainable::Scalar(s) => loss_and_grad(&s.w, &out.experts, out.gold, combination),
            Trainable::Hypernet { net, features } => {
                let w = net.forward_features(features);
                let (loss, gw) = loss_and_grad(&w, &out.experts, out.gold, combination)?;
                Ok((loss, net.backward(features, &gw)))
            }
            Trainable::Sparse(sw) => {
                let (loss, g) = grad_sparse(sw, &out.experts, out.gold, combination)?;
                Ok((loss, g.w_prime.into_iter().chain(g.m).collect()))
            }
        }
    }

    /// Per-example terms summed by [`train`]: for sparse weights with
    /// [`ImleScope::Batch`], the `m` block holds `−∂L/∂m̂` and is turned into
    /// an IMLE step by [`Trainable::finish_batch`].
    fn example_terms(&self, out: &ExpertOutputs, cfg: &TrainingConfig) -> Result<(f64, Vec<f64>)> {
        match (self, cfg.imle_scope) {
            (Trainable::Sparse(sw), ImleScope::Batch) => {
                let (loss, g) = grad_sparse(sw, &out.experts, out.gold, cfg.combination)?;
                Ok((loss, g.w_prime.into_iter().chain(g.mask_descent).collect()))
            }
            _ => self.loss_and_grad(out, cfg.combination),
        }
    }

    fn finish_batch(&self, grad: &mut [f64], cfg: &TrainingConfig) -> Result<()> {
        if let (Trainable::Sparse(sw), ImleScope::Batch) = (self, cfg.imle_scope) {
            let k = sw.w_prime.len();
            let m = imle_grad(&sw.m, &grad[k..], sw.k_prime, sw.lambda)?;
            grad[k..].copy_from_slice(&m);
        }
        Ok(())
    }

    /// Restore a weighting function; hypernetwork features are recomputed
    /// from `subsets`.
    pub fn from_checkpoint(ck: &WeightCheckpoint, subsets: &[Vec<&Demonstration>]) -> Result<Self> {
        let k = subsets.len();
        if ck.k != k {
            return Err(Error::DimensionMismatch { expected: k, found: ck.k });
        }
        let need_len = |v: &[f64]| {
            if v.len() == k {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { expected: k, found: v.len() })
            }
        };
        Ok(match ck.kind {
            WeightingKind::Uniform => Trainable::Uniform { k },
            WeightingKind::Scalar => {
                need_len(&ck.values)?;
                Trainable::Scalar(ScalarWeights { w: ck.values.clone() })
            }
            WeightingKind::Hypernet => {
                let net = ck
                    .hypernet_params
                    .clone()
                    .ok_or_else(|| Error::config("hypernet_params", "missing from checkpoint"))?;
                if net.w1.len() != net.input_dim * net.hidden || net.b1.len() != net.hidden || net.w2.len() != net.hidden {
                    return Err(Error::config("hypernet_params", "inconsistent shapes"));
                }
                let features = net.featurize(subsets);
                Trainable::Hypernet { net, features }
            }
            WeightingKind::Sparse => {
                let m = ck.m.clone().ok_or_else(|| Error::config("m", "missing from checkpoint"))?;
                need_len(&ck.values)?;
                need_len(&m)?;
                let sw = SparseWeighting {
                    w_prime: ck.values.clone(),
                    m,
                    k_prime: ck.k_prime.ok_or_else(|| Error::config("k_prime", "missing from checkpoint"))?,
                    lambda: ck.lambda.unwrap_or(SparseWeighting::DEFAULT_LAMBDA),
                };
                sw.validate()?;
                Trainable::Sparse(sw)
            }
        })
    }

    pub fn checkpoint(&self) -> WeightCheckpoint {
        let k = self.weights().len();
        let mut ck = WeightCheckpoint {
            kind: self.kind(),
            k,
            values: self.weights(),
            hypernet_params: None,
            m: None,
            k_prime: None,
            lambda: None,
        };
        match self {
            Trainable::Hypernet { net, .. } => ck.hypernet_params = Some(net.clone()),
            Trainable::Sparse(sw) => {
                ck.values = sw.w_prime.clone();
                ck.m = Some(sw.m.clone());
                ck.k_prime = Some(sw.k_prime);
                ck.lambda = Some(sw.lambda);
            }
            _ => {}
        }
        ck
    }
}

/// Predictions under fixed weights.
pub fn predict_all(w: &[f64], outputs: &[ExpertOutputs], combination: Combination) -> Result<Vec<usize>> {
    outputs
        .iter()
        .map(|o| Ok(predict_label(&combination.combine(w, &o.experts)?)))
        .collect()
}

pub fn accuracy_with(w: &[f64], outputs: &[ExpertOutputs], combination: Combination) -> Result<f64> {
    if outputs.is_empty() {
        return Ok(0.0);
    }
    let preds = predict_all(w, outputs, combination)?;
    let hits = preds.iter().zip(outputs).filter(|(p, o)| **p == o.gold).count();
    Ok(hits as f64 / outputs.len() as f64)
}

pub fn mean_log_likelihood(w: &[f64], outputs: &[ExpertOutputs], combination: Combination) -> Result<f64> {
    let mut total = 0.0;
    for o in outputs {
        total -= nll_loss(w, &o.experts, o.gold, combination)?;
    }
    Ok(total / outputs.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub dev_loss: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
}

/// Epoch loop with gradient accumulation and dev-accuracy model selection.
///
/// Each epoch visits `train` in a seeded shuffle; gradients are averaged over
/// `batch_size × grad_accumulation` examples (or the epoch remainder) before
/// each optimizer step. The returned parameters are those of the epoch with
/// the highest dev accuracy, earliest on ties.
pub fn train(
    cfg: &TrainingConfig,
    init: Trainable,
    train: &[ExpertOutputs],
    dev: &[ExpertOutputs],
) -> Result<(Trainable, TrainingTrace)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("train", "training split is empty"));
    }
    if dev.is_empty() {
        return Err(Error::config("dev", "dev split is empty"));
    }
    let mut model = init;
    let mut params = model.params();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.projected(cfg.nonnegative));
    if cfg.nonnegative {
        // the constraint holds from the first step onward
        let proj = model.projected(true);
        for (p, nn) in params.iter_mut().zip(&proj) {
            if *nn && *p < 0.0 {
                *p = 0.0;
            }
        }
        model.set_params(&params);
    }

    let step_size = cfg.batch_size * cfg.grad_accumulation;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng::derive(cfg.seed, "train-order");
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng::shuffle(&mut order, &mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(step_size) {
            let results: Vec<(f64, Vec<f64>)> = chunk
                .par_iter()
                .map(|&i| model.example_terms(&train[i], cfg))
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; params.len()];
            for (loss, g) in &results {
                loss_sum += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            model.finish_batch(&mut grad, cfg)?;
            opt.step(&mut params, &grad);
            model.set_params(&params);
        }
        let w = model.weights();
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            dev_accuracy: accuracy_with(&w, dev, cfg.combination)?,
            dev_loss: -mean_log_likelihood(&w, dev, cfg.combination)?,
            weights: w,
        });
        snapshots.push(params.clone());
    }

    let mut selected = 0;
    for (i, r) in records.iter().enumerate() {
        if r.dev_accuracy > records[selected].dev_accuracy {
            selected = i;
        }
    }
    model.set_params(&snapshots[selected]);
    Ok((model, TrainingTrace { epochs: records, selected_epoch: selected }))
}

/// Precompute expert outputs for both splits and train from fresh parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_on_partition<E: ExpertSource + ?Sized>(
    cfg: &TrainingConfig,
    expert: &E,
    subsets: &[Vec<&Demonstration>],
    vocab: &AnswerVocabulary,
    train_split: &[LabeledExample],
    dev_split: &[LabeledExample],
) -> Result<(Trainable, TrainingTrace)> {
    cfg.validate()?;
    let train_out = precompute(expert, subsets, train_split, vocab)?;
    let dev_out = precompute(expert, subsets, dev_split, vocab)?;
    train(cfg, Trainable::init(cfg, subsets)?, &train_out, &dev_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::poe_combine;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn dist(p: &[f64]) -> TokenDistribution {
        TokenDistribution::from_probs(p).unwrap()
    }

    fn random_instance(seed: u64, k: usize, v: usize) -> (Vec<f64>, Vec<TokenDistribution>, usize) {
        let mut r = rng::seeded(seed);
        let w = (0..k).map(|_| r.gen_range(-1.0..1.5)).collect();
        let experts = (0..k)
            .map(|_| {
                let raw: Vec<f64> = (0..v).map(|_| r.gen_range(-3.0..3.0)).collect();
                TokenDistribution::log_normalize(&raw).unwrap()
            })
            .collect();
        (w, experts, r.gen_range(0..v))
    }

    #[test]
    fn nll_examples() {
        let u = dist(&[0.5, 0.5]);
        assert_abs_diff_eq!(nll_loss(&[1.0], std::slice::from_ref(&u), 0, Combination::Poe).unwrap(), 2f64.ln(), epsilon = 1e-12);
        let sure = dist(&[1.0 - 1e-12, 1e-12]);
        assert!(nll_loss(&[1.0], &[sure], 0, Combination::Poe).unwrap() < 1e-9);
        let l = nll_loss(&[1.0, 1.0], &[dist(&[0.8, 0.2]), u], 0, Combination::Poe).unwrap();
        assert_abs_diff_eq!(l, -(0.8f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.2231, epsilon = 1e-4);
    }

    #[test]
    fn poe_gradient_examples() {
        let u = dist(&[0.25; 4]);
        let g = grad_scalar_poe(&[0.3, -0.2], &[u.clone(), u], 2).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15));

        let e = dist(&[0.7, 0.2, 0.1]);
        let g = grad_scalar_poe(&[0.5, 0.5], &[e.clone(), e], 1).unwrap();
        assert_eq!(g[0], g[1]);

        let (w, experts, gold) = random_instance(7, 3, 4);
        let analytic = grad_scalar_poe(&w, &experts, gold).unwrap();
        let numeric = grad_finite_difference(
            |p| nll_loss(p, &experts, gold, Combination::Poe).unwrap(),
            &w,
            1e-6,
        );
        assert!(relative_error(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn finite_difference_examples() {
        let g = grad_finite_difference(|p| p.iter().map(|x| x * x).sum(), &[1.0, 2.0], 1e-6);
        assert_abs_diff_eq!(g[0], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g[1], 4.0, epsilon = 1e-6);
        let g = grad_finite_difference(|_| 3.0, &[1.0, 2.0, 3.0], 1e-6);
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn mixture_gradient_matches_finite_differences() {
        for seed in 0..50 {
            let (w, experts, gold) = random_instance(seed, 4, 3);
            let w: Vec<f64> = w.iter().map(|x| x.abs() + 0.05).collect();
            let (_, analytic) = loss_and_grad(&w, &experts, gold, Combination::Mixture).unwrap();
            let numeric = grad_finite_difference(
                |p| nll_loss(p, &experts, gold, Combination::Mixture).unwrap(),
                &w,
                1e-6,
            );
            assert!(relative_error(&analytic, &numeric) < 1e-5, "seed {seed}");
        }
    }

    #[test]
    fn hypernet_gradient_examples() {
        let u = dist(&[0.5, 0.5]);
        let net = HyperNetwork::random(3, 16, 4, 0.2);
        let feats = vec![vec![0.5; 16], vec![0.25; 16]];
        let g = grad_hypernet(&net, &feats, &[u.clone(), u], 0, Combination::Poe).unwrap();
        assert!(g.iter().all(|x| *x == 0.0));

        // output-bias-only network: dL/db2 = Σ ∂L/∂w_i
        let mut bias_only = HyperNetwork::zeros(16, 4);
        bias_only.b2 = 0.4;
        let experts = vec![dist(&[0.7, 0.3]), dist(&[0.2, 0.8])];
        let g = grad_hypernet(&bias_only, &feats, &experts, 0, Combination::Poe).unwrap();
        let gw = grad_scalar_poe(&[0.4, 0.4], &experts, 0).unwrap();
        assert_abs_diff_eq!(*g.last().unwrap(), gw[0] + gw[1], epsilon = 1e-15);
        assert!(g[..g.len() - 1].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn hypernet_gradient_matches_finite_differences() {
        let mut r = rng::seeded(11);
        let mut net = HyperNetwork::random(5, 16, 4, 0.1);
        net.w2.iter_mut().for_each(|a| *a *= 20.0);
        let feats: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..16).map(|_| r.gen_range(0.0..0.5)).collect())
            .collect();
        let (_, experts, gold) = random_instance(12, 3, 4);
        let analytic = grad_hypernet(&net, &feats, &experts, gold, Combination::Poe).unwrap();
        let numeric = grad_finite_difference(
            |p| {
                let mut n = net.clone();
                n.set_params(p);
                nll_loss(&n.forward_features(&feats), &experts, gold, Combination::Poe).unwrap()
            },
            &net.params(),
            1e-6,
        );
        assert!(relative_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn sparse_gradient_examples() {
        let (w, experts, gold) = random_instance(3, 3, 4);
        let sw = SparseWeighting { w_prime: w.clone(), m: vec![0.1, 0.5, 0.3], k_prime: 3, lambda: 1.0 };
        let (_, g) = grad_sparse(&sw, &experts, gold, Combination::Poe).unwrap();
        assert_eq!(g.w_prime, grad_scalar_poe(&w, &experts, gold).unwrap());
        assert_eq!(g.m, vec![0.0; 3]);

        let sw = SparseWeighting { k_prime: 2, ..sw };
        let (_, g) = grad_sparse(&sw, &experts, gold, Combination::Poe).unwrap();
        assert_eq!(g.w_prime[0], 0.0);
        assert!(g.m.iter().all(|x| [-1.0, 0.0, 1.0].contains(x)));
        assert_eq!(g.m.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn sparse_mask_moves_toward_helpful_expert() {
        // expert 0 is informative for gold 0; expert 1 is uniform but selected first
        let experts = vec![dist(&[0.9, 0.1]), dist(&[0.5, 0.5])];
        let sw = SparseWeighting { w_prime: vec![0.5, 0.5], m: vec![0.5, 0.5 + 1e-9], k_prime: 1, lambda: 1.0 };
        let (_, g) = grad_sparse(&sw, &experts, 0, Combination::Poe).unwrap();
        // a descent step on m must raise m_0 above m_1
        assert!(g.m[0] < 0.0 && g.m[1] > 0.0, "{:?}", g.m);
    }

    #[test]
    fn optimizer_examples() {
        let sgd = TrainingConfig { optimizer: OptimizerKind::Sgd, learning_rate: 0.1, ..Default::default() };
        let p = optimizer_step(&[1.0], &[2.0], &sgd);
        assert_abs_diff_eq!(p[0], 0.8, epsilon = 1e-15);
        assert_eq!(optimizer_step(&[1.0, -2.0], &[0.0, 0.0], &sgd), vec![1.0, -2.0]);
        let adam = TrainingConfig::default();
        assert_eq!(optimizer_step(&[1.0, -2.0], &[0.0, 0.0], &adam), vec![1.0, -2.0]);
        let proj = TrainingConfig { nonnegative: true, ..sgd };
        assert_eq!(optimizer_step(&[-0.3, 0.2], &[0.0, 0.0], &proj), vec![0.0, 0.2]);
        // Adam's first step has magnitude lr per coordinate
        let p = optimizer_step(&[0.0, 0.0], &[3.0, -0.01], &adam);
        assert_abs_diff_eq!(p[0], -1e-4, epsilon = 1e-9);
        assert_abs_diff_eq!(p[1], 1e-4, epsilon = 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainingConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainingConfig { grad_accumulation: 0, ..Default::default() }.validate().is_err());
        assert!(TrainingConfig { weighting: WeightingKind::Sparse, ..Default::default() }.validate().is_err());
        let defaults = TrainingConfig::default();
        assert_eq!(defaults.learning_rate, 1e-4);
        assert_eq!(defaults.grad_accumulation, 12);
        assert_eq!(defaults.epochs, 5);
        assert_eq!(defaults.batch_size, 1);
    }

    #[test]
    fn sgd_small_step_does_not_increase_loss() {
        for seed in 0..20 {
            let (w, experts, gold) = random_instance(100 + seed, 5, 4);
            let before = nll_loss(&w, &experts, gold, Combination::Poe).unwrap();
            let g = grad_scalar_poe(&w, &experts, gold).unwrap();
            let cfg = TrainingConfig { optimizer: OptimizerKind::Sgd, learning_rate: 1e-6, ..Default::default() };
            let after = nll_loss(&optimizer_step(&w, &g, &cfg), &experts, gold, Combination::Poe).unwrap();
            assert!(after <= before);
        }
    }

    /// Expert 0 always puts 0.9 on the gold label; the others are uniform.
    fn planted(n: usize, seed: u64) -> Vec<ExpertOutputs> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| {
                let gold = r.gen_range(0..2);
                let mut p = [0.1, 0.1];
                p[gold] = 0.9;
                ExpertOutputs {
                    experts: vec![dist(&p), dist(&[0.5, 0.5]), dist(&[0.5, 0.5])],
                    gold,
                }
            })
            .collect()
    }

    #[test]
    fn training_upweights_the_informative_expert() {
        let train_set = planted(60, 1);
        let dev = planted(20, 2);
        let cfg = TrainingConfig { learning_rate: 0.05, ..Default::default() };
        let init = Trainable::Scalar(init_scalar_weights(3).unwrap());
        let (model, trace) = train(&cfg, init, &train_set, &dev).unwrap();
        let w = model.weights();
        assert!(w[0] > w[1] && w[0] > w[2], "{w:?}");
        assert_eq!(trace.epochs.len(), 5);
        let best = trace.epochs.iter().map(|e| e.dev_accuracy).fold(0.0, f64::max);
        assert_eq!(trace.epochs[trace.selected_epoch].dev_accuracy, best);
        assert!(trace.epochs[..trace.selected_epoch].iter().all(|e| e.dev_accuracy < best));
        assert_eq!(trace.epochs[trace.selected_epoch].weights, w);
    }

    #[test]
    fn sparse_training_selects_the_informative_expert() {
        let train_set = planted(60, 1);
        let dev = planted(20, 2);
        for imle_scope in [ImleScope::Example, ImleScope::Batch] {
            let cfg = TrainingConfig {
                learning_rate: 0.05,
                weighting: WeightingKind::Sparse,
                k_prime: Some(1),
                imle_scope,
                ..Default::default()
            };
            // the all-zero init selects expert 0; start from expert 2 instead
            let init = SparseWeighting { w_prime: vec![1.0 / 3.0; 3], m: vec![0.0, 0.0, 0.1], k_prime: 1, lambda: 1.0 };
            let (model, trace) = train(&cfg, Trainable::Sparse(init), &train_set, &dev).unwrap();
            let w = model.weights();
            assert!(w[0] != 0.0 && w[1] == 0.0 && w[2] == 0.0, "{imle_scope:?} {w:?} {trace:?}");
        }
    }

    #[test]
    fn training_is_deterministic_and_validates() {
        let train_set = planted(30, 3);
        let dev = planted(10, 4);
        let cfg = TrainingConfig { learning_rate: 0.01, ..Default::default() };
        let run = || train(&cfg, Trainable::Scalar(init_scalar_weights(3).unwrap()), &train_set, &dev).unwrap();
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&ta).unwrap(), serde_json::to_string(&tb).unwrap());

        let bad = TrainingConfig { epochs: 0, ..Default::default() };
        assert!(matches!(
            train(&bad, Trainable::Scalar(init_scalar_weights(3).unwrap()), &train_set, &dev),
            Err(Error::InvalidConfig { .. })
        ));
        assert!(train(&cfg, Trainable::Scalar(init_scalar_weights(3).unwrap()), &[], &dev).is_err());
    }

    #[test]
    fn nonnegative_projection_holds_throughout() {
        // expert 1 is systematically wrong, so unconstrained training drives it negative
        let data: Vec<ExpertOutputs> = planted(60, 5)
            .into_iter()
            .map(|mut o| {
                let mut p = [0.8, 0.8];
                p[o.gold] = 0.2;
                o.experts[1] = dist(&p);
                o
            })
            .collect();
        let cfg = TrainingConfig { learning_rate: 0.05, nonnegative: true, ..Default::default() };
        let (_, trace) = train(&cfg, Trainable::Scalar(init_scalar_weights(3).unwrap()), &data, &data[..20]).unwrap();
        assert!(trace.epochs.iter().all(|e| e.weights.iter().all(|w| *w >= 0.0)));
        let free = TrainingConfig { nonnegative: false, ..cfg };
        let (_, trace) = train(&free, Trainable::Scalar(init_scalar_weights(3).unwrap()), &data, &data[..20]).unwrap();
        assert!(trace.epochs.last().unwrap().weights[1] < 0.0);
    }

    #[test]
    fn poe_gradient_matches_combined_distribution() {
        let (w, experts, gold) = random_instance(9, 4, 3);
        let q = poe_combine(&w, &experts).unwrap().probs();
        let g = grad_scalar_poe(&w, &experts, gold).unwrap();
        for (i, e) in experts.iter().enumerate() {
            let expected: f64 = (0..3).map(|y| q[y] * e.logp()[y]).sum::<f64>() - e.logp()[gold];
            assert_abs_diff_eq!(g[i], expected, epsilon = 1e-14);
        }
    }
}
