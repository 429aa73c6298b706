//! Seeded synthetic classification tasks.
//!
//! Each label owns `topics_per_label` disjoint sets of topic tokens. An input
//! is a bag of `input_len` tokens: with probability `signal` a position draws
//! from one topic of the example's own label, with probability `confusion`
//! from a topic of another label, and otherwise from the shared distractors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::AnswerVocabulary;
use crate::error::{Error, Result};
use crate::partitioning::{Demonstration, Tag};
use crate::rng::{self, SeededRng};

use super::perturb::{inject_imbalance, inject_noise, inject_ood};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub labels: Vec<String>,
    /// Closed answer set; defaults to `labels`.
    pub answer_vocabulary: Option<Vec<String>>,
    pub topics_per_label: usize,
    /// Total token vocabulary; tokens not owned by a topic are distractors.
    pub vocab_size: usize,
    pub topic_size: usize,
    pub input_len: usize,
    pub signal: f64,
    pub confusion: f64,
    pub n_demos: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Fraction of demonstrations replaced by an unrelated task.
    pub ood_fraction: f64,
    /// Demonstrations keeping the second label after rebalancing.
    pub minority_count: Option<usize>,
    pub noised_count: usize,
    pub noise_answers: Vec<String>,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            labels: vec!["positive".into(), "negative".into()],
            answer_vocabulary: None,
            topics_per_label: 2,
            vocab_size: 60,
            topic_size: 6,
            input_len: 8,
            signal: 0.35,
            confusion: 0.1,
            n_demos: 30,
            n_train: 240,
            n_dev: 120,
            n_test: 400,
            ood_fraction: 0.0,
            minority_count: None,
            noised_count: 0,
            noise_answers: vec!["yes".into(), "no".into(), "foo".into(), "bar".into()],
            seed: 42,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.labels.len() < 2 {
            return bad("at least two labels are required");
        }
        if self.topics_per_label == 0 || self.topic_size == 0 || self.input_len == 0 {
            return bad("topics_per_label, topic_size and input_len must be positive");
        }
        if self.topic_tokens() > self.vocab_size {
            return bad("topic tokens exceed vocab_size");
        }
        let probs_ok = (0.0..=1.0).contains(&self.signal)
            && (0.0..=1.0).contains(&self.confusion)
            && self.signal + self.confusion <= 1.0;
        if !probs_ok {
            return bad("signal and confusion must be probabilities with sum ≤ 1");
        }
        if self.distractors() == 0 && self.signal + self.confusion < 1.0 {
            return bad("no distractor tokens left for the remaining probability mass");
        }
        if self.n_demos == 0 {
            return bad("n_demos must be positive");
        }
        if !(0.0..=1.0).contains(&self.ood_fraction) {
            return bad("ood_fraction must lie in [0, 1]");
        }
        if self.noised_count > self.n_demos {
            return bad("noised_count exceeds n_demos");
        }
        if self.noised_count > 0 && self.noise_answers.is_empty() {
            return bad("noise_answers is empty");
        }
        if let Some(m) = self.minority_count {
            if m == 0 || m >= self.n_demos {
                return bad("minority_count must lie in [1, n_demos)");
            }
        }
        let vocab = self.vocabulary()?;
        for l in self.labels.iter().chain(if self.noised_count > 0 { &self.noise_answers[..] } else { &[] }) {
            if vocab.index_of(l).is_none() {
                return Err(Error::InvalidSpec(format!("answer `{l}` missing from the answer vocabulary")));
            }
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<AnswerVocabulary> {
        let labels = self.answer_vocabulary.clone().unwrap_or_else(|| self.labels.clone());
        AnswerVocabulary::new(labels).map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    fn topic_tokens(&self) -> usize {
        self.labels.len() * self.topics_per_label * self.topic_size
    }

    fn distractors(&self) -> usize {
        self.vocab_size - self.topic_tokens()
    }
}

/// Token sampler for one task. `prefix` names the topic tokens, so two
/// generators with different prefixes have disjoint topics while sharing the
/// distractor tokens.
#[derive(Debug, Clone)]
pub struct TaskGenerator {
    spec: SyntheticTaskSpec,
    prefix: &'static str,
}

impl TaskGenerator {
    pub fn new(spec: &SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec: spec.clone(), prefix: "w" })
    }

    /// A token-disjoint task over the same labels, used for OOD injection.
    pub fn out_of_domain(spec: &SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec: spec.clone(), prefix: "z" })
    }

    pub fn labels(&self) -> &[String] {
        &self.spec.labels
    }

    pub fn input(&self, label: usize, rng: &mut SeededRng) -> String {
        let s = &self.spec;
        let topic = rng.gen_range(0..s.topics_per_label);
        let mut tokens = Vec::with_capacity(s.input_len);
        for _ in 0..s.input_len {
            let u: f64 = rng.gen();
            let tok = if u < s.signal {
                self.topic_token(label, topic, rng.gen_range(0..s.topic_size))
            } else if u < s.signal + s.confusion {
                let mut other = rng.gen_range(0..s.labels.len() - 1);
                if other >= label {
                    other += 1;
                }
                let t = rng.gen_range(0..s.topics_per_label);
                self.topic_token(other, t, rng.gen_range(0..s.topic_size))
            } else {
                format!("x{}", rng.gen_range(0..s.distractors()))
            };
            tokens.push(tok);
        }
        tokens.join(" ")
    }

    fn topic_token(&self, label: usize, topic: usize, j: usize) -> String {
        let s = &self.spec;
        let idx = (label * s.topics_per_label + topic) * s.topic_size + j;
        format!("{}{idx}", self.prefix)
    }

    pub fn demonstration(&self, id: String, label: usize, rng: &mut SeededRng) -> Demonstration {
        Demonstration::new(id, self.input(label, rng), self.spec.labels[label].clone())
    }

    /// `count` examples with labels assigned round-robin.
    pub fn batch(&self, prefix: &str, count: usize, rng: &mut SeededRng) -> Vec<Demonstration> {
        let width = count.saturating_sub(1).to_string().len().max(2);
        (0..count)
            .map(|i| {
                let label = i % self.spec.labels.len();
                self.demonstration(format!("{prefix}{i:0width$}"), label, rng)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub vocabulary: AnswerVocabulary,
    pub pool: Vec<Demonstration>,
    pub train: Vec<Demonstration>,
    pub dev: Vec<Demonstration>,
    pub test: Vec<Demonstration>,
}

/// A clean task: balanced pool and splits, no perturbations applied.
pub fn gen_synthetic_task(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    let generator = TaskGenerator::new(spec)?;
    let pool = generator
        .batch("d", spec.n_demos, &mut rng::derive(spec.seed, "pool"))
        .into_iter()
        .map(|d| d.with_tag(Tag::InDomain))
        .collect();
    Ok(SyntheticTask {
        vocabulary: spec.vocabulary()?,
        pool,
        train: generator.batch("tr", spec.n_train, &mut rng::derive(spec.seed, "train")),
        dev: generator.batch("dv", spec.n_dev, &mut rng::derive(spec.seed, "dev")),
        test: generator.batch("te", spec.n_test, &mut rng::derive(spec.seed, "test")),
    })
}

/// [`gen_synthetic_task`] followed by the perturbations enabled in `spec`,
/// in the order OOD replacement, rebalancing, answer noise.
pub fn build_task(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    let mut task = gen_synthetic_task(spec)?;
    if spec.ood_fraction > 0.0 {
        let ood = TaskGenerator::out_of_domain(spec)?;
        task.pool = inject_ood(&task.pool, spec.ood_fraction, &ood, spec.seed)?;
    }
    if let Some(m) = spec.minority_count {
        let generator = TaskGenerator::new(spec)?;
        let source = generator.batch("s", 2 * spec.n_demos, &mut rng::derive(spec.seed, "imbalance-source"))
            .into_iter()
            .map(|d| d.with_tag(Tag::InDomain))
            .collect::<Vec<_>>();
        task.pool = inject_imbalance(&task.pool, &source, m, spec.seed)?;
    }
    if spec.noised_count > 0 {
        task.pool = inject_noise(&task.pool, spec.noised_count, &spec.noise_answers, spec.seed)?;
    }
    Ok(task)
}
