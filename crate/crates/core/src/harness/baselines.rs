//! Reference methods: one prompt with every demonstration, one expert per
//! demonstration multiplied together, and best-of-N random subsets.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{predict_label, AnswerVocabulary, TokenDistribution};
use crate::error::{Error, Result};
use crate::experts::{ExpertSource, Query};
use crate::partitioning::Demonstration;
use crate::rng;

use super::metrics::{evaluate, Metric};

/// Score of one method on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fragment {
    pub value: f64,
    pub predictions: Vec<String>,
    pub expert_calls: u64,
}

fn require_nonempty(split: &[Demonstration]) -> Result<()> {
    if split.is_empty() {
        return Err(Error::config("eval_split", "evaluation split is empty"));
    }
    Ok(())
}

fn score(
    dists: &[TokenDistribution],
    split: &[Demonstration],
    vocab: &AnswerVocabulary,
    metric: Metric,
    expert_calls: u64,
) -> Result<Fragment> {
    let predictions: Vec<String> = dists.iter().map(|d| vocab.label(predict_label(d)).to_string()).collect();
    let gold: Vec<&str> = split.iter().map(|d| d.output.as_str()).collect();
    Ok(Fragment { value: evaluate(&predictions, &gold, metric)?, predictions, expert_calls })
}

/// `p(y | D, x)` with the whole pool in one context.
pub fn concat_distributions<E: ExpertSource + ?Sized>(
    expert: &E,
    subset: &[&Demonstration],
    split: &[Demonstration],
    vocab: &AnswerVocabulary,
) -> Result<Vec<TokenDistribution>> {
    split
        .par_iter()
        .map(|q| expert.evaluate(subset, Query { id: &q.id, text: &q.input }, vocab))
        .collect()
}

pub fn run_concat_baseline<E: ExpertSource + ?Sized>(
    expert: &E,
    pool: &[Demonstration],
    split: &[Demonstration],
    vocab: &AnswerVocabulary,
    metric: Metric,
) -> Result<Fragment> {
    require_nonempty(split)?;
    let whole: Vec<&Demonstration> = pool.iter().collect();
    let dists = concat_distributions(expert, &whole, split, vocab)?;
    score(&dists, split, vocab, metric, split.len() as u64)
}

/// `∏_j p(y | {d_j}, x)`, renormalized, computed directly in log space.
pub fn ensemble_distributions<E: ExpertSource + ?Sized>(
    expert: &E,
    pool: &[Demonstration],
    split: &[Demonstration],
    vocab: &AnswerVocabulary,
) -> Result<Vec<TokenDistribution>> {
    split
        .par_iter()
        .map(|q| {
            let query = Query { id: &q.id, text: &q.input };
            let mut total = vec![0.0; vocab.len()];
            for d in pool {
                let p = expert.evaluate(&[d], query, vocab)?;
                for (t, l) in total.iter_mut().zip(p.logp()) {
                    *t += l;
                }
            }
            TokenDistribution::log_normalize(&total)
        })
        .collect()
}

pub fn run_ensemble_baseline<E: ExpertSource + ?Sized>(
    expert: &E,
    pool: &[Demonstration],
    split: &[Demonstration],
    vocab: &AnswerVocabulary,
    metric: Metric,
) -> Result<Fragment> {
    require_nonempty(split)?;
    let dists = ensemble_distributions(expert, pool, split, vocab)?;
    score(&dists, split, vocab, metric, (split.len() * pool.len()) as u64)
}

/// Seeded candidate subsets (pool indices): size uniform in `[1, n]`, members
/// the prefix of a fresh permutation. Candidate `i` does not depend on how
/// many candidates follow it.
pub fn random_search_candidates(n: usize, k_candidates: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut r = rng::derive(seed, "random-search");
    (0..k_candidates)
        .map(|_| {
            let size = r.gen_range(1..=n);
            let mut perm = rng::permutation(n, &mut r);
            perm.truncate(size);
            perm
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSearchOutcome {
    pub candidates: Vec<Vec<String>>,
    pub train_scores: Vec<f64>,
    pub best: usize,
    pub fragment: Fragment,
}

/// Best candidate on `train_split` (lowest index on ties), scored on `eval_split`.
#[allow(clippy::too_many_arguments)]
pub fn run_random_search<E: ExpertSource + ?Sized>(
    expert: &E,
    pool: &[Demonstration],
    k_candidates: usize,
    train_split: &[Demonstration],
    eval_split: &[Demonstration],
    vocab: &AnswerVocabulary,
    metric: Metric,
    seed: u64,
) -> Result<RandomSearchOutcome> {
    if k_candidates < 1 {
        return Err(Error::config("candidates", "must be at least 1"));
    }
    if pool.is_empty() {
        return Err(Error::EmptySubset);
    }
    require_nonempty(train_split)?;
    require_nonempty(eval_split)?;
    let picks = random_search_candidates(pool.len(), k_candidates, seed);
    let mut train_scores = Vec::with_capacity(picks.len());
    for c in &picks {
        let subset: Vec<&Demonstration> = c.iter().map(|&i| &pool[i]).collect();
        let dists = concat_distributions(expert, &subset, train_split, vocab)?;
        train_scores.push(score(&dists, train_split, vocab, metric, 0)?.value);
    }
    let mut best = 0;
    for (i, s) in train_scores.iter().enumerate() {
        if *s > train_scores[best] {
            best = i;
        }
    }
    let subset: Vec<&Demonstration> = picks[best].iter().map(|&i| &pool[i]).collect();
    let dists = concat_distributions(expert, &subset, eval_split, vocab)?;
    let calls = (k_candidates * train_split.len() + eval_split.len()) as u64;
    Ok(RandomSearchOutcome {
        candidates: picks.iter().map(|c| c.iter().map(|&i| pool[i].id.clone()).collect()).collect(),
        train_scores,
        best,
        fragment: score(&dists, eval_split, vocab, metric, calls)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::poe_combine;
    use crate::experts::{SimilarityExpert, SimilarityExpertConfig};
    use crate::harness::synthetic::{gen_synthetic_task, SyntheticTaskSpec};

    fn setup() -> (SimilarityExpert, crate::harness::synthetic::SyntheticTask) {
        let spec = SyntheticTaskSpec { n_demos: 10, n_train: 40, n_dev: 10, n_test: 60, ..Default::default() };
        (SimilarityExpert::new(SimilarityExpertConfig::default()).unwrap(), gen_synthetic_task(&spec).unwrap())
    }

    #[test]
    fn ensemble_of_one_is_concat() {
        let (e, t) = setup();
        let one = &t.pool[..1];
        let a = run_concat_baseline(&e, one, &t.test, &t.vocabulary, Metric::Accuracy).unwrap();
        let b = run_ensemble_baseline(&e, one, &t.test, &t.vocabulary, Metric::Accuracy).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn ensemble_matches_poe_with_unit_weights() {
        let (e, t) = setup();
        let direct = ensemble_distributions(&e, &t.pool, &t.test, &t.vocabulary).unwrap();
        for (q, d) in t.test.iter().zip(&direct) {
            let experts: Vec<TokenDistribution> = t
                .pool
                .iter()
                .map(|p| e.evaluate(&[p], Query { id: &q.id, text: &q.input }, &t.vocabulary).unwrap())
                .collect();
            let poe = poe_combine(&vec![1.0; experts.len()], &experts).unwrap();
            for (a, b) in poe.probs().iter().zip(d.probs()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_split_rejected() {
        let (e, t) = setup();
        assert!(run_concat_baseline(&e, &t.pool, &[], &t.vocabulary, Metric::Accuracy).is_err());
        assert!(run_ensemble_baseline(&e, &t.pool, &[], &t.vocabulary, Metric::Accuracy).is_err());
    }

    #[test]
    fn random_search_contract() {
        let (e, t) = setup();
        let one = run_random_search(&e, &t.pool, 1, &t.train, &t.test, &t.vocabulary, Metric::Accuracy, 3).unwrap();
        assert_eq!(one.best, 0);
        let five = run_random_search(&e, &t.pool, 5, &t.train, &t.test, &t.vocabulary, Metric::Accuracy, 3).unwrap();
        // nested candidate sets
        assert_eq!(five.candidates[0], one.candidates[0]);
        let best = five.train_scores.iter().cloned().fold(f64::MIN, f64::max);
        assert!(best >= one.train_scores[0]);
        assert_eq!(five.train_scores[five.best], best);
        assert!(five.train_scores[..five.best].iter().all(|s| *s < best));
        for c in &five.candidates {
            assert!(!c.is_empty() && c.len() <= t.pool.len());
        }
        assert!(run_random_search(&e, &t.pool, 0, &t.train, &t.test, &t.vocabulary, Metric::Accuracy, 3).is_err());
    }
}
