//! Method × seed experiment grids over synthetic tasks.
//!
//! Every (method, seed) cell regenerates its task from the seed and shares
//! nothing mutable with other cells, so cells run in parallel. The report is
//! assembled afterwards in config order and contains no timing, which keeps
//! `report.json` byte-identical across reruns; wall-clock seconds go to the
//! CSV summary only.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::Combination;
use crate::error::{Error, Result};
use crate::experts::{SimilarityExpert, SimilarityExpertConfig};
use crate::partitioning::{subset_id, Demonstration, Partition, PartitionStrategy, Tag};
use crate::rng;
use crate::training::{
    mean_log_likelihood, precompute, predict_all, train, ExpertOutputs, Trainable, TrainingConfig,
    TrainingTrace,
};
use crate::weighting::{init_scalar_weights, topk_mask, WeightingKind};

use super::baselines::{run_concat_baseline, run_ensemble_baseline, run_random_search};
use super::cost::{cost_model, CostModelInput};
use super::dataset::to_examples;
use super::metrics::{evaluate, Metric};
use super::synthetic::{build_task, SyntheticTask, SyntheticTaskSpec};
use super::Method;

pub const DEFAULT_SEEDS: [u64; 5] = [31, 42, 65, 438, 991];

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostUnits {
    pub c_llm: f64,
    pub c_hyper: f64,
}

impl Default for CostUnits {
    fn default() -> Self {
        Self { c_llm: 1.0, c_hyper: 1.0 }
    }
}

/// One row of the method grid. Unset fields fall back to the experiment-wide
/// settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub method: Method,
    /// Report key; defaults to the method name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Subsets for MoICL methods, candidates for random search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_prime: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combination: Option<Combination>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonnegative: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionStrategy>,
    /// Group in-domain demonstrations into their own subsets, placed at
    /// seeded positions among the others.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub planted: bool,
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            name: None,
            k: None,
            k_prime: None,
            combination: None,
            nonnegative: None,
            partition: None,
            planted: false,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.method.as_str().to_string())
    }

    fn weighting(&self) -> Option<WeightingKind> {
        match self.method {
            Method::MoiclUniform => Some(WeightingKind::Uniform),
            Method::MoiclScalar => Some(WeightingKind::Scalar),
            Method::MoiclHypernet => Some(WeightingKind::Hypernet),
            Method::MoiclSparse => Some(WeightingKind::Sparse),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub task: SyntheticTaskSpec,
    #[serde(default)]
    pub expert: SimilarityExpertConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub partition: PartitionStrategy,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub cost: CostUnits,
    pub methods: Vec<MethodSpec>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one method is required"));
        }
        self.task.validate().map_err(|e| Error::config("task", e.to_string()))?;
        self.expert.validate().map_err(|e| Error::config("expert", e.to_string()))?;
        if !(self.cost.c_llm > 0.0 && self.cost.c_hyper > 0.0) {
            return Err(Error::config("cost", "unit costs must be positive"));
        }
        let n = self.task.n_demos;
        let mut names = BTreeSet::new();
        for (i, m) in self.methods.iter().enumerate() {
            let at = |field: &str| format!("methods[{i}].{field}");
            if !names.insert(m.display_name()) {
                return Err(Error::config(at("name"), format!("duplicate method name `{}`", m.display_name())));
            }
            if let Some(kind) = m.weighting() {
                let k = m.k.ok_or_else(|| Error::config(at("k"), "required for MoICL methods"))?;
                if k < 1 || k > n {
                    return Err(Error::config(at("k"), format!("must lie in [1, {n}]")));
                }
                if kind == WeightingKind::Sparse {
                    let kp = m.k_prime.ok_or_else(|| Error::config(at("k_prime"), "required for moicl_sparse"))?;
                    if kp < 1 || kp > k {
                        return Err(Error::config(at("k_prime"), format!("must lie in [1, {k}]")));
                    }
                }
                if kind != WeightingKind::Uniform {
                    self.cell_training(m, 0)
                        .validate()
                        .map_err(|e| Error::config(at("training"), e.to_string()))?;
                }
            }
            if m.method == Method::RandomSearch && m.k == Some(0) {
                return Err(Error::config(at("k"), "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn cell_training(&self, m: &MethodSpec, seed: u64) -> TrainingConfig {
        let mut t = self.training.clone();
        t.seed = seed;
        if let Some(kind) = m.weighting() {
            t.weighting = kind;
        }
        if let Some(c) = m.combination {
            t.combination = c;
        }
        if let Some(nn) = m.nonnegative {
            t.nonnegative = nn;
        }
        if m.k_prime.is_some() {
            t.k_prime = m.k_prime;
        }
        t
    }

    /// Candidate count for random search: its own `k`, else the largest MoICL `k`.
    fn random_search_candidates(&self, m: &MethodSpec) -> usize {
        m.k.or_else(|| self.methods.iter().filter(|s| s.method.is_moicl()).filter_map(|s| s.k).max())
            .unwrap_or(5)
    }

    pub fn task_for_seed(&self, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec { seed, ..self.task.clone() }
    }
}

/// Parse and validate a JSON config; errors name the offending field path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { String::new() } else { path }, e.inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertWeight {
    pub subset_id: String,
    pub weight: f64,
    pub tags: Vec<Tag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub seed: u64,
    pub value: f64,
    pub cost_units: f64,
    pub expert_calls: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub experts: Vec<ExpertWeight>,
    /// Mean weight over experts carrying each tag; `clean` covers experts
    /// with neither `noised` nor `ood`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tag_means: BTreeMap<String, f64>,
    /// Retained expert indices for `moicl_sparse`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<usize>>,
    /// Chosen demonstrations for `random_search`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_subset: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub metric: Metric,
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two seeds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    pub cells: Vec<CellReport>,
}

impl MethodReport {
    pub fn cell(&self, seed: u64) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.seed == seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub config: ExperimentConfig,
    pub methods: Vec<MethodReport>,
}

impl RunReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub k: Option<usize>,
    pub seed: u64,
    pub metric: Metric,
    pub value: f64,
    pub cost_units: f64,
    pub seconds: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// Run the full grid. Returns the report and one summary row per cell.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(RunReport, Vec<SummaryRow>)> {
    cfg.validate()?;
    let jobs: Vec<(usize, u64)> = (0..cfg.methods.len())
        .flat_map(|m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let cells: Vec<(CellReport, f64)> = jobs
        .par_iter()
        .map(|&(m, seed)| {
            let start = Instant::now();
            let cell = run_cell(cfg, &cfg.methods[m], seed)?;
            Ok((cell, start.elapsed().as_secs_f64()))
        })
        .collect::<Result<_>>()?;

    let mut methods = Vec::with_capacity(cfg.methods.len());
    let mut rows = Vec::with_capacity(cells.len());
    let mut it = cells.into_iter();
    for spec in &cfg.methods {
        let mut mcells = Vec::with_capacity(cfg.seeds.len());
        for _ in &cfg.seeds {
            let (cell, seconds) = it.next().expect("one cell per job");
            rows.push(SummaryRow {
                method: spec.display_name(),
                k: spec.k,
                seed: cell.seed,
                metric: cfg.metric,
                value: cell.value,
                cost_units: cell.cost_units,
                seconds,
            });
            mcells.push(cell);
        }
        let values: Vec<f64> = mcells.iter().map(|c| c.value).collect();
        let (mean, std) = mean_std(&values);
        methods.push(MethodReport {
            name: spec.display_name(),
            method: spec.method,
            k: spec.k,
            metric: cfg.metric,
            mean,
            std,
            cells: mcells,
        });
    }
    Ok((RunReport { name: cfg.name.clone(), config: cfg.clone(), methods }, rows))
}

/// Write `report.json` and `summary.csv` into `out_dir`.
pub fn write_outputs(out_dir: impl AsRef<Path>, report: &RunReport, rows: &[SummaryRow]) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report_path = dir.join("report.json");
    std::fs::write(&report_path, report.to_json()?).map_err(|e| Error::io(&report_path, e))?;
    let csv_path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&csv_path)
        .map_err(|e| Error::io(&csv_path, std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(&csv_path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

/// In-domain demonstrations fill the first subsets, the rest follow, each
/// interleaved by label so subsets stay balanced; the
/// subset order is then shuffled by `seed`.
pub fn planted_partition(pool: &[Demonstration], k: usize, seed: u64) -> Result<Partition> {
    let n = pool.len();
    if k < 1 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    let corrupted = |d: &Demonstration| d.has_tag(Tag::Ood) || d.has_tag(Tag::Noised);
    let mut order: Vec<&Demonstration> = Vec::with_capacity(n);
    for bad in [false, true] {
        let mut by_label: BTreeMap<&str, Vec<&Demonstration>> = BTreeMap::new();
        for d in pool.iter().filter(|d| corrupted(d) == bad) {
            by_label.entry(d.output.as_str()).or_default().push(d);
        }
        for group in by_label.values_mut() {
            group.sort_by(|a, b| a.id.cmp(&b.id));
        }
        let longest = by_label.values().map(Vec::len).max().unwrap_or(0);
        for i in 0..longest {
            order.extend(by_label.values().filter_map(|g| g.get(i).copied()));
        }
    }
    let (base, extra) = (n / k, n % k);
    let mut groups = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        groups.push(order[start..start + len].iter().map(|d| d.id.clone()).collect::<Vec<_>>());
        start += len;
    }
    let mut r = rng::derive(seed, "planted");
    rng::shuffle(&mut groups, &mut r);
    let p = Partition { k, seed, subsets: groups };
    p.validate(pool)?;
    Ok(p)
}

/// Everything a MoICL cell needs before choosing weights.
pub struct PreparedCell {
    pub task: SyntheticTask,
    pub partition: Partition,
    pub train: Vec<ExpertOutputs>,
    pub dev: Vec<ExpertOutputs>,
    pub test: Vec<ExpertOutputs>,
}

pub fn prepare_moicl(cfg: &ExperimentConfig, m: &MethodSpec, seed: u64) -> Result<PreparedCell> {
    let task = build_task(&cfg.task_for_seed(seed))?;
    let k = m.k.ok_or_else(|| Error::config("k", "required for MoICL methods"))?;
    let partition = if m.planted {
        planted_partition(&task.pool, k, seed)?
    } else {
        m.partition.unwrap_or(cfg.partition).apply(&task.pool, k, seed)?
    };
    let subsets = partition.resolve(&task.pool)?;
    let expert = SimilarityExpert::new(cfg.expert)?;
    let v = &task.vocabulary;
    let train = precompute(&expert, &subsets, &to_examples(&task.train, v)?, v)?;
    let dev = precompute(&expert, &subsets, &to_examples(&task.dev, v)?, v)?;
    let test = precompute(&expert, &subsets, &to_examples(&task.test, v)?, v)?;
    Ok(PreparedCell { task, partition, train, dev, test })
}

fn run_cell(cfg: &ExperimentConfig, m: &MethodSpec, seed: u64) -> Result<CellReport> {
    let cost = |n: usize, k: usize, k_prime: Option<usize>| {
        cost_model(&CostModelInput {
            n,
            k,
            c_llm: cfg.cost.c_llm,
            c_hyper: cfg.cost.c_hyper,
            method: m.method,
            k_prime,
        })
    };
    let base = |value: f64, cost_units: f64, expert_calls: u64| CellReport {
        seed,
        value,
        cost_units,
        expert_calls,
        selected_epoch: None,
        experts: Vec::new(),
        tag_means: BTreeMap::new(),
        mask: None,
        selected_subset: None,
    };
    let expert = SimilarityExpert::new(cfg.expert)?;

    match m.method {
        Method::Concat => {
            let task = build_task(&cfg.task_for_seed(seed))?;
            let f = run_concat_baseline(&expert, &task.pool, &task.test, &task.vocabulary, cfg.metric)?;
            Ok(base(f.value, cost(task.pool.len(), 1, None)?, f.expert_calls))
        }
        Method::Ensemble => {
            let task = build_task(&cfg.task_for_seed(seed))?;
            let n = task.pool.len();
            let f = run_ensemble_baseline(&expert, &task.pool, &task.test, &task.vocabulary, cfg.metric)?;
            Ok(base(f.value, cost(n, n, None)?, f.expert_calls))
        }
        Method::RandomSearch => {
            let task = build_task(&cfg.task_for_seed(seed))?;
            let out = run_random_search(
                &expert,
                &task.pool,
                cfg.random_search_candidates(m),
                &task.train,
                &task.test,
                &task.vocabulary,
                cfg.metric,
                seed,
            )?;
            let chosen = out.candidates[out.best].clone();
            let mut cell = base(out.fragment.value, cost(chosen.len(), 1, None)?, out.fragment.expert_calls);
            cell.selected_subset = Some(chosen);
            Ok(cell)
        }
        _ => {
            let trained = train_method(cfg, m, seed)?;
            let prep = &trained.prep;
            let subsets = prep.partition.resolve(&prep.task.pool)?;
            let k = prep.partition.k;
            let w = trained.model.weights();
            let value = score_weights(&w, prep, trained.combination, cfg.metric)?;
            let experts: Vec<ExpertWeight> = subsets
                .iter()
                .zip(&w)
                .map(|(s, &weight)| {
                    let ids: Vec<&str> = s.iter().map(|d| d.id.as_str()).collect();
                    let tags: BTreeSet<Tag> = s.iter().flat_map(|d| d.tags.iter().copied()).collect();
                    ExpertWeight { subset_id: subset_id(&ids), weight, tags: tags.into_iter().collect() }
                })
                .collect();
            let n = prep.task.pool.len();
            let k_prime = match &trained.model {
                Trainable::Sparse(sw) => Some(sw.k_prime),
                _ => None,
            };
            let calls = k_prime.unwrap_or(k);
            let mut cell = base(value, cost(n, k, k_prime)?, (calls * prep.test.len()) as u64);
            cell.selected_epoch = trained.trace.as_ref().map(|t| t.selected_epoch);
            cell.tag_means = tag_means(&experts);
            cell.experts = experts;
            if let Trainable::Sparse(sw) = &trained.model {
                cell.mask = Some(mask_indices(&topk_mask(&sw.m, sw.k_prime)?));
            }
            Ok(cell)
        }
    }
}

/// A trained MoICL cell.
pub struct TrainedCell {
    pub prep: PreparedCell,
    pub model: Trainable,
    pub trace: Option<TrainingTrace>,
    pub combination: Combination,
}

/// Prepare and train one MoICL method on one seed (uniform weights skip training).
pub fn train_method(cfg: &ExperimentConfig, m: &MethodSpec, seed: u64) -> Result<TrainedCell> {
    if !m.method.is_moicl() {
        return Err(Error::config("method", format!("`{}` has no trainable weights", m.method.as_str())));
    }
    let prep = prepare_moicl(cfg, m, seed)?;
    let tcfg = cfg.cell_training(m, seed);
    let k = prep.partition.k;
    let (model, trace) = if m.method == Method::MoiclUniform {
        (Trainable::Uniform { k }, None)
    } else {
        let subsets = prep.partition.resolve(&prep.task.pool)?;
        let init = Trainable::init(&tcfg, &subsets)?;
        let (model, trace) = train(&tcfg, init, &prep.train, &prep.dev)?;
        (model, Some(trace))
    };
    Ok(TrainedCell { prep, model, trace, combination: tcfg.combination })
}

/// Test-split score of fixed weights on a prepared cell.
pub fn score_weights(w: &[f64], prep: &PreparedCell, combination: Combination, metric: Metric) -> Result<f64> {
    let preds = predict_all(w, &prep.test, combination)?;
    let vocab = &prep.task.vocabulary;
    let pred_labels: Vec<&str> = preds.iter().map(|&i| vocab.label(i)).collect();
    let gold: Vec<&str> = prep.task.test.iter().map(|d| d.output.as_str()).collect();
    evaluate(&pred_labels, &gold, metric)
}

fn mask_indices(mask: &[f64]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, b)| **b > 0.5).map(|(i, _)| i).collect()
}

pub fn tag_means(experts: &[ExpertWeight]) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for e in experts {
        for t in &e.tags {
            groups.entry(t.as_str().to_string()).or_default().push(e.weight);
        }
        if !e.tags.contains(&Tag::Noised) && !e.tags.contains(&Tag::Ood) {
            groups.entry("clean".to_string()).or_default().push(e.weight);
        }
    }
    groups
        .into_iter()
        .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
        .collect()
}

/// Learned and exhaustively optimal `k′`-subsets of experts for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseTrial {
    pub seed: u64,
    pub learned: Vec<usize>,
    pub optimal: Vec<usize>,
    /// Dev mean log-likelihood per candidate mask, in lexicographic order.
    pub scores: MaskScores,
}

fn combinations(k: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(r);
    fn rec(start: usize, k: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..k {
            cur.push(i);
            rec(i + 1, k, r, cur, out);
            cur.pop();
        }
    }
    rec(0, k, r, &mut cur, &mut out);
    out
}

/// Candidate masks (expert indices) with their dev mean log-likelihood.
pub type MaskScores = Vec<(Vec<usize>, f64)>;

/// Best `k′`-subset by dev log-likelihood after training scalar weights on
/// each candidate; the earliest candidate wins ties.
pub fn brute_force_mask(
    tcfg: &TrainingConfig,
    k_prime: usize,
    train_out: &[ExpertOutputs],
    dev_out: &[ExpertOutputs],
) -> Result<(Vec<usize>, MaskScores)> {
    let k = train_out.first().map_or(0, |o| o.experts.len());
    if k_prime < 1 || k_prime > k {
        return Err(Error::InvalidKPrime { k_prime, k });
    }
    let restrict = |outs: &[ExpertOutputs], keep: &[usize]| -> Vec<ExpertOutputs> {
        outs.iter()
            .map(|o| ExpertOutputs { experts: keep.iter().map(|&i| o.experts[i].clone()).collect(), gold: o.gold })
            .collect()
    };
    let scalar = TrainingConfig { weighting: WeightingKind::Scalar, k_prime: None, ..tcfg.clone() };
    let scores: Vec<(Vec<usize>, f64)> = combinations(k, k_prime)
        .into_par_iter()
        .map(|keep| {
            let tr = restrict(train_out, &keep);
            let dv = restrict(dev_out, &keep);
            let init = Trainable::Scalar(init_scalar_weights(keep.len())?);
            let (model, _) = train(&scalar, init, &tr, &dv)?;
            let ll = mean_log_likelihood(&model.weights(), &dv, scalar.combination)?;
            Ok((keep, ll))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, (_, s)) in scores.iter().enumerate() {
        if *s > scores[best].1 {
            best = i;
        }
    }
    Ok((scores[best].0.clone(), scores))
}

/// Train `moicl_sparse` on one seed and compare its mask with the optimum.
pub fn sparse_selection_trial(cfg: &ExperimentConfig, m: &MethodSpec, seed: u64) -> Result<SparseTrial> {
    if m.method != Method::MoiclSparse {
        return Err(Error::config("method", "sparse trial needs moicl_sparse"));
    }
    let prep = prepare_moicl(cfg, m, seed)?;
    let tcfg = cfg.cell_training(m, seed);
    let k_prime = tcfg.k_prime.ok_or_else(|| Error::config("k_prime", "required for moicl_sparse"))?;
    let subsets = prep.partition.resolve(&prep.task.pool)?;
    let (model, _) = train(&tcfg, Trainable::init(&tcfg, &subsets)?, &prep.train, &prep.dev)?;
    let learned = match &model {
        Trainable::Sparse(sw) => mask_indices(&topk_mask(&sw.m, sw.k_prime)?),
        _ => unreachable!("sparse weighting requested"),
    };
    let (optimal, scores) = brute_force_mask(&tcfg, k_prime, &prep.train, &prep.dev)?;
    Ok(SparseTrial { seed, learned, optimal, scores })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            name: "tiny".into(),
            task: SyntheticTaskSpec { n_demos: 10, n_train: 36, n_dev: 12, n_test: 40, ..Default::default() },
            expert: SimilarityExpertConfig::default(),
            training: TrainingConfig { learning_rate: 0.05, epochs: 2, ..Default::default() },
            partition: PartitionStrategy::Static,
            seeds: vec![42],
            metric: Metric::Accuracy,
            cost: CostUnits::default(),
            methods: vec![MethodSpec::new(Method::Concat), MethodSpec::new(Method::MoiclScalar).with_k(5)],
        }
    }

    #[test]
    fn single_seed_has_no_std_and_two_methods() {
        let (report, rows) = run_experiment(&tiny()).unwrap();
        assert_eq!(report.methods.len(), 2);
        assert!(report.methods.iter().all(|m| m.std.is_none()));
        assert_eq!(rows.len(), 2);
        let json = report.to_json().unwrap();
        assert!(!json.contains("\"std\""));
        assert!(!json.contains("seconds"));
        assert_eq!(report.method("moicl_scalar").unwrap().cells[0].cost_units, 5.0 * 9.0);
    }

    #[test]
    fn rerun_is_byte_identical() {
        let cfg = ExperimentConfig { seeds: vec![31, 42], ..tiny() };
        let a = run_experiment(&cfg).unwrap().0.to_json().unwrap();
        let b = run_experiment(&cfg).unwrap().0.to_json().unwrap();
        assert_eq!(a, b);
        assert!(a.contains("\"std\""));
    }

    #[test]
    fn config_errors_carry_paths() {
        let err = parse_config(r#"{"name":"x","methods":[{"method":"concat"}],"training":{"epochs":"five"}}"#)
            .unwrap_err();
        match err {
            Error::InvalidConfig { path, .. } => assert_eq!(path, "training.epochs"),
            e => panic!("{e}"),
        }
        let err = parse_config(r#"{"name":"x","methods":[{"method":"moicl_scalar"}]}"#).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { ref path, .. } if path == "methods[0].k"), "{err}");
        let err = parse_config(r#"{"name":"x","methods":[{"method":"nope"}]}"#).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { ref path, .. } if path == "methods[0].method"), "{err}");
        let err = parse_config(r#"{"name":"x","methods":[{"method":"concat"}],"training":{"epochs":0}}"#);
        assert!(err.is_ok(), "training is only validated for trained methods");
    }

    #[test]
    fn config_round_trips() {
        let cfg = tiny();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(parse_config(&text).unwrap(), cfg);
    }

    #[test]
    fn planted_partition_groups_clean_demos() {
        let spec = SyntheticTaskSpec { n_demos: 24, ood_fraction: 0.75, ..Default::default() };
        let task = build_task(&spec).unwrap();
        let p = planted_partition(&task.pool, 8, 3).unwrap();
        let resolved = p.resolve(&task.pool).unwrap();
        let clean: Vec<usize> = resolved
            .iter()
            .enumerate()
            .filter(|(_, s)| s.iter().all(|d| !d.has_tag(Tag::Ood)))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(clean.len(), 2);
        assert!(resolved.iter().all(|s| s.len() == 3));
    }

    #[test]
    fn combinations_count() {
        assert_eq!(combinations(8, 2).len(), 28);
        assert_eq!(combinations(5, 5), vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn tag_means_split_clean_and_noised() {
        let e = |w: f64, tags: Vec<Tag>| ExpertWeight { subset_id: "x".into(), weight: w, tags };
        let m = tag_means(&[e(1.0, vec![Tag::InDomain]), e(-1.0, vec![Tag::InDomain, Tag::Noised]), e(0.5, vec![])]);
        assert_eq!(m["clean"], 0.75);
        assert_eq!(m["noised"], -1.0);
        assert_eq!(m["in_domain"], 0.0);
    }
}
