//! Splitting a demonstration pool into `k` disjoint expert subsets.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Provenance marker carried by a demonstration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    InDomain,
    Ood,
    Noised,
    ImbalanceMinority,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::InDomain => "in_domain",
            Tag::Ood => "ood",
            Tag::Noised => "noised",
            Tag::ImbalanceMinority => "imbalance_minority",
        }
    }
}

/// One input/output pair shown in context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub id: String,
    pub input: String,
    pub output: String,
    #[serde(default)]
    pub tags: BTreeSet<Tag>,
}

impl Demonstration {
    pub fn new(id: impl Into<String>, input: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            input: input.into(),
            output: output.into(),
            tags: BTreeSet::new(),
        }
    }

    pub fn with_tag(mut self, tag: Tag) -> Self {
        self.tags.insert(tag);
        self
    }

    pub fn has_tag(&self, tag: Tag) -> bool {
        self.tags.contains(&tag)
    }
}

/// Check the pool-level invariants: unique ids and nonempty outputs.
pub fn validate_pool(pool: &[Demonstration]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (i, d) in pool.iter().enumerate() {
        if !seen.insert(d.id.as_str()) {
            return Err(Error::config(format!("pool[{i}].id"), format!("duplicate id `{}`", d.id)));
        }
        if d.output.is_empty() {
            return Err(Error::config(format!("pool[{i}].output"), "empty output"));
        }
    }
    Ok(())
}

/// Disjoint cover of a pool by `k` nonempty subsets of demonstration ids.
///
/// Serializes as `{"k":…,"seed":…,"subsets":[[id,…],…]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub k: usize,
    pub seed: u64,
    pub subsets: Vec<Vec<String>>,
}

impl Partition {
    fn from_indices(pool: &[Demonstration], seed: u64, groups: Vec<Vec<usize>>) -> Self {
        Self {
            k: groups.len(),
            seed,
            subsets: groups
                .into_iter()
                .map(|g| g.into_iter().map(|i| pool[i].id.clone()).collect())
                .collect(),
        }
    }

    /// The single subset holding the whole pool.
    pub fn whole(pool: &[Demonstration]) -> Self {
        Self {
            k: 1,
            seed: 0,
            subsets: vec![pool.iter().map(|d| d.id.clone()).collect()],
        }
    }

    /// One singleton subset per demonstration, in pool order.
    pub fn singletons(pool: &[Demonstration]) -> Self {
        Self {
            k: pool.len(),
            seed: 0,
            subsets: pool.iter().map(|d| vec![d.id.clone()]).collect(),
        }
    }

    /// Confirm the partition is a disjoint cover of `pool`.
    pub fn validate(&self, pool: &[Demonstration]) -> Result<()> {
        if self.k != self.subsets.len() || self.k == 0 {
            return Err(Error::config(
                "partition.k",
                format!("k={} but {} subsets", self.k, self.subsets.len()),
            ));
        }
        let ids: BTreeSet<&str> = pool.iter().map(|d| d.id.as_str()).collect();
        let mut seen = BTreeSet::new();
        for (i, s) in self.subsets.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::config(format!("partition.subsets[{i}]"), "empty subset"));
            }
            for id in s {
                if !ids.contains(id.as_str()) {
                    return Err(Error::config(
                        format!("partition.subsets[{i}]"),
                        format!("unknown demonstration `{id}`"),
                    ));
                }
                if !seen.insert(id.as_str()) {
                    return Err(Error::config(
                        format!("partition.subsets[{i}]"),
                        format!("`{id}` appears in more than one subset"),
                    ));
                }
            }
        }
        if seen.len() != ids.len() {
            return Err(Error::config("partition.subsets", "subsets do not cover the pool"));
        }
        Ok(())
    }

    /// Resolve ids back to demonstrations.
    pub fn resolve<'a>(&self, pool: &'a [Demonstration]) -> Result<Vec<Vec<&'a Demonstration>>> {
        let by_id: HashMap<&str, &Demonstration> = pool.iter().map(|d| (d.id.as_str(), d)).collect();
        self.subsets
            .iter()
            .map(|s| {
                s.iter()
                    .map(|id| {
                        by_id.get(id.as_str()).copied().ok_or_else(|| {
                            Error::config("partition.subsets", format!("unknown demonstration `{id}`"))
                        })
                    })
                    .collect()
            })
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.subsets.iter().map(Vec::len).collect()
    }
}

/// Stable identifier for a subset: its demonstration ids, sorted and joined
/// with `+`. Used to key precomputed expert scores.
pub fn subset_id<S: AsRef<str>>(ids: &[S]) -> String {
    let mut v: Vec<&str> = ids.iter().map(AsRef::as_ref).collect();
    v.sort_unstable();
    v.join("+")
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k < 1 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    Ok(())
}

/// Seeded shuffle, then contiguous chunks whose sizes differ by at most one
/// (the first `n mod k` chunks take the extra element).
pub fn partition_static(pool: &[Demonstration], k: usize, seed: u64) -> Result<Partition> {
    let n = pool.len();
    check_k(k, n)?;
    let order = rng::permutation(n, &mut rng::seeded(seed));
    let (base, extra) = (n / k, n % k);
    let mut groups = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        groups.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(Partition::from_indices(pool, seed, groups))
}

/// Seeded shuffle, then `k - 1` distinct cut points drawn from `1..n`, so
/// every subset is nonempty.
pub fn partition_random_size(pool: &[Demonstration], k: usize, seed: u64) -> Result<Partition> {
    let n = pool.len();
    check_k(k, n)?;
    let mut r = rng::seeded(seed);
    let order = rng::permutation(n, &mut r);
    let mut candidates: Vec<usize> = (1..n).collect();
    // partial Fisher–Yates: the first k-1 slots become a uniform sample
    for i in 0..k - 1 {
        let j = r.gen_range(i..candidates.len());
        candidates.swap(i, j);
    }
    let mut cuts: Vec<usize> = candidates[..k - 1].to_vec();
    cuts.sort_unstable();
    cuts.push(n);
    let mut groups = Vec::with_capacity(k);
    let mut start = 0;
    for c in cuts {
        groups.push(order[start..c].to_vec());
        start = c;
    }
    Ok(Partition::from_indices(pool, seed, groups))
}

/// Lowercase, split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Corpus statistics for Okapi BM25.
#[derive(Debug, Clone)]
pub struct Bm25CorpusStats {
    pub doc_freq: BTreeMap<String, usize>,
    pub doc_len: Vec<usize>,
    pub avg_len: f64,
    pub k1: f64,
    pub b: f64,
}

impl Bm25CorpusStats {
    pub const DEFAULT_K1: f64 = 1.5;
    pub const DEFAULT_B: f64 = 0.75;

    pub fn build(docs: &[Vec<String>]) -> Self {
        Self::with_params(docs, Self::DEFAULT_K1, Self::DEFAULT_B)
    }

    pub fn with_params(docs: &[Vec<String>], k1: f64, b: f64) -> Self {
        let mut doc_freq = BTreeMap::new();
        for d in docs {
            let unique: BTreeSet<&String> = d.iter().collect();
            for t in unique {
                *doc_freq.entry(t.clone()).or_insert(0) += 1;
            }
        }
        let doc_len: Vec<usize> = docs.iter().map(Vec::len).collect();
        let total: usize = doc_len.iter().sum();
        // an all-empty corpus would make avg_len 0; clamp so the ratio stays defined
        let avg_len = (total as f64 / docs.len().max(1) as f64).max(1.0);
        Self {
            doc_freq,
            doc_len,
            avg_len,
            k1,
            b,
        }
    }

    pub fn num_docs(&self) -> usize {
        self.doc_len.len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

/// Okapi BM25 of `doc_tokens` against the distinct terms of `query_tokens`.
pub fn bm25_score(query_tokens: &[String], doc_tokens: &[String], stats: &Bm25CorpusStats) -> f64 {
    let mut tf: HashMap<&str, usize> = HashMap::new();
    for t in doc_tokens {
        *tf.entry(t.as_str()).or_insert(0) += 1;
    }
    let len_norm = 1.0 - stats.b + stats.b * doc_tokens.len() as f64 / stats.avg_len;
    let terms: BTreeSet<&str> = query_tokens.iter().map(String::as_str).collect();
    terms
        .into_iter()
        .filter_map(|t| tf.get(t).map(|&f| (t, f as f64)))
        .map(|(t, f)| stats.idf(t) * f * (stats.k1 + 1.0) / (f + stats.k1 * len_norm))
        .sum()
}

/// Farthest-point seeding under symmetrized BM25 similarity, then capacitated
/// nearest-seed assignment.
///
/// The first seed is drawn from the seeded stream; each further seed is the
/// demonstration whose largest similarity to the chosen seeds is smallest.
/// Remaining demonstrations are assigned greedily in order of decreasing
/// similarity, each to its most similar seed with room left. Capacities are
/// `⌈n/k⌉` for at most `n mod k` subsets and `⌊n/k⌋` for the rest.
pub fn partition_bm25(pool: &[Demonstration], k: usize, seed: u64) -> Result<Partition> {
    let n = pool.len();
    check_k(k, n)?;
    let docs: Vec<Vec<String>> = pool.iter().map(|d| tokenize(&d.input)).collect();
    let stats = Bm25CorpusStats::build(&docs);
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let s = 0.5 * (bm25_score(&docs[i], &docs[j], &stats) + bm25_score(&docs[j], &docs[i], &stats));
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }

    let mut r = rng::seeded(seed);
    let mut seeds = vec![r.gen_range(0..n)];
    let mut is_seed = vec![false; n];
    is_seed[seeds[0]] = true;
    while seeds.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for c in (0..n).filter(|&c| !is_seed[c]) {
            let closest = seeds.iter().map(|&s| sim[c][s]).fold(f64::NEG_INFINITY, f64::max);
            if best.is_none_or(|(_, b)| closest < b) {
                best = Some((c, closest));
            }
        }
        let (c, _) = best.expect("k <= n leaves a candidate");
        is_seed[c] = true;
        seeds.push(c);
    }

    let (lo, extra) = (n / k, n % k);
    let mut groups: Vec<Vec<usize>> = seeds.iter().map(|&s| vec![s]).collect();
    let mut at_hi = 0;
    let mut pairs: Vec<(usize, usize)> = (0..n)
        .filter(|&d| !is_seed[d])
        .flat_map(|d| (0..k).map(move |g| (d, g)))
        .collect();
    pairs.sort_by(|a, b| {
        sim[b.0][seeds[b.1]]
            .total_cmp(&sim[a.0][seeds[a.1]])
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut assigned = is_seed.clone();
    for (d, g) in pairs {
        if assigned[d] {
            continue;
        }
        let size = groups[g].len();
        let has_room = size < lo || (size == lo && extra > 0 && at_hi < extra);
        if !has_room {
            continue;
        }
        if size == lo {
            at_hi += 1;
        }
        groups[g].push(d);
        assigned[d] = true;
    }
    debug_assert!(assigned.iter().all(|a| *a));
    Ok(Partition::from_indices(pool, seed, groups))
}

/// Named partitioning strategy, as used in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStrategy {
    #[default]
    Static,
    RandomSize,
    Bm25,
}

impl PartitionStrategy {
    pub fn apply(self, pool: &[Demonstration], k: usize, seed: u64) -> Result<Partition> {
        match self {
            PartitionStrategy::Static => partition_static(pool, k, seed),
            PartitionStrategy::RandomSize => partition_random_size(pool, k, seed),
            PartitionStrategy::Bm25 => partition_bm25(pool, k, seed),
        }
    }
}
