//! Experts: sources of `p(y | D_i, x)` for a demonstration subset `D_i` and a
//! query `x`.
//!
//! [`SimilarityExpert`] is a deterministic stand-in for a language model
//! prompted with the subset: every demonstration votes for its own answer with
//! a strength equal to its similarity to the query. [`ExternalExpert`] replays
//! log-scores that were computed offline by a real model.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distributions::{AnswerVocabulary, TokenDistribution};
use crate::error::{Error, Result};
use crate::partitioning::{subset_id, tokenize, Demonstration};

/// The query side of an expert call.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub id: &'a str,
    pub text: &'a str,
}

/// Contract for `p(y | D_i, x)`. Implementations must be pure: equal
/// arguments give equal distributions.
pub trait ExpertSource: Sync {
    fn evaluate(
        &self,
        subset: &[&Demonstration],
        query: Query<'_>,
        vocab: &AnswerVocabulary,
    ) -> Result<TokenDistribution>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Jaccard,
    TfCosine,
}

impl Similarity {
    pub fn between(self, a: &str, b: &str) -> f64 {
        let ta = tokenize(a);
        let tb = tokenize(b);
        match self {
            Similarity::Jaccard => jaccard(&ta, &tb),
            Similarity::TfCosine => tf_cosine(&ta, &tb),
        }
    }
}

pub fn jaccard(a: &[String], b: &[String]) -> f64 {
    let sa: BTreeSet<&str> = a.iter().map(String::as_str).collect();
    let sb: BTreeSet<&str> = b.iter().map(String::as_str).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

pub fn tf_cosine(a: &[String], b: &[String]) -> f64 {
    fn count(toks: &[String]) -> BTreeMap<&str, f64> {
        let mut m = BTreeMap::new();
        for t in toks {
            *m.entry(t.as_str()).or_insert(0.0) += 1.0;
        }
        m
    }
    let (ca, cb) = (count(a), count(b));
    let dot: f64 = ca.iter().map(|(t, x)| x * cb.get(t).copied().unwrap_or(0.0)).sum();
    let na: f64 = ca.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = cb.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimilarityExpertConfig {
    pub temperature: f64,
    pub smoothing: f64,
    pub similarity: Similarity,
}

impl Default for SimilarityExpertConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            smoothing: 0.1,
            similarity: Similarity::Jaccard,
        }
    }
}

impl SimilarityExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("expert.temperature", "must be positive"));
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return Err(Error::config("expert.smoothing", "must be positive"));
        }
        Ok(())
    }
}

/// Label scores `α + Σ_{(x_j, y_j) ∈ D_i, y_j = ℓ} sim(x, x_j)`, tempered by
/// `τ` and normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimilarityExpert {
    pub cfg: SimilarityExpertConfig,
}

impl SimilarityExpert {
    pub fn new(cfg: SimilarityExpertConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn label_scores(
        &self,
        subset: &[&Demonstration],
        query: &str,
        vocab: &AnswerVocabulary,
    ) -> Result<Vec<f64>> {
        if subset.is_empty() {
            return Err(Error::EmptySubset);
        }
        let q = tokenize(query);
        let mut scores = vec![self.cfg.smoothing; vocab.len()];
        for d in subset {
            let label = vocab.require_index(&d.output)?;
            let x = tokenize(&d.input);
            scores[label] += match self.cfg.similarity {
                Similarity::Jaccard => jaccard(&q, &x),
                Similarity::TfCosine => tf_cosine(&q, &x),
            };
        }
        Ok(scores)
    }
}

impl ExpertSource for SimilarityExpert {
    fn evaluate(
        &self,
        subset: &[&Demonstration],
        query: Query<'_>,
        vocab: &AnswerVocabulary,
    ) -> Result<TokenDistribution> {
        let scores = self.label_scores(subset, query.text, vocab)?;
        let raw: Vec<f64> = scores.iter().map(|s| s / self.cfg.temperature).collect();
        TokenDistribution::log_normalize(&raw)
    }
}

/// One line of the external-logits JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalLogitsRecord {
    pub query_id: String,
    pub subset_id: String,
    pub log_scores: Vec<f64>,
}

/// Precomputed raw log-scores keyed by `(query_id, subset_id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalLogitsTable {
    entries: BTreeMap<(String, String), Vec<f64>>,
}

impl ExternalLogitsTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, record: ExternalLogitsRecord, line: usize) -> Result<()> {
        let key = (record.query_id, record.subset_id);
        if self.entries.contains_key(&key) {
            return Err(Error::DuplicateEntry {
                query_id: key.0,
                subset_id: key.1,
                line,
            });
        }
        self.entries.insert(key, record.log_scores);
        Ok(())
    }

    pub fn get(&self, query_id: &str, subset_id: &str) -> Option<&[f64]> {
        self.entries
            .get(&(query_id.to_string(), subset_id.to_string()))
            .map(Vec::as_slice)
    }

    pub fn parse(reader: impl BufRead) -> Result<Self> {
        let mut table = Self::default();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ExternalLogitsRecord =
                serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            table.insert(record, line_no)?;
        }
        Ok(table)
    }
}

pub fn load_external_logits(path: impl AsRef<Path>) -> Result<ExternalLogitsTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ExternalLogitsTable::parse(std::io::BufReader::new(file))
}

pub fn external_expert_eval(
    table: &ExternalLogitsTable,
    subset_id: &str,
    query_id: &str,
    vocab: &AnswerVocabulary,
) -> Result<TokenDistribution> {
    let scores = table
        .get(query_id, subset_id)
        .ok_or_else(|| Error::MissingEntry {
            query_id: query_id.to_string(),
            subset_id: subset_id.to_string(),
        })?;
    if scores.len() != vocab.len() {
        return Err(Error::DimensionMismatch {
            expected: vocab.len(),
            found: scores.len(),
        });
    }
    TokenDistribution::log_normalize(scores)
}

/// Expert backed by an [`ExternalLogitsTable`]; subsets are looked up by
/// [`subset_id`].
#[derive(Debug, Clone)]
pub struct ExternalExpert {
    pub table: ExternalLogitsTable,
}

impl ExpertSource for ExternalExpert {
    fn evaluate(
        &self,
        subset: &[&Demonstration],
        query: Query<'_>,
        vocab: &AnswerVocabulary,
    ) -> Result<TokenDistribution> {
        if subset.is_empty() {
            return Err(Error::EmptySubset);
        }
        let ids: Vec<&str> = subset.iter().map(|d| d.id.as_str()).collect();
        external_expert_eval(&self.table, &subset_id(&ids), query.id, vocab)
    }
}
