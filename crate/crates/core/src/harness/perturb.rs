//! Demonstration-pool perturbations: out-of-domain replacement, label
//! imbalance and answer noise. Replaced or altered items keep their ids and
//! positions and carry a tag naming the perturbation.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::partitioning::{Demonstration, Tag};
use crate::rng;

use super::synthetic::TaskGenerator;

/// `⌈p·n⌉`, robust to `p·n` landing one ulp above an integer.
pub fn ood_count(p: f64, n: usize) -> usize {
    let x = p * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Replace `⌈p·n⌉` seeded positions with demonstrations from `ood`.
pub fn inject_ood(
    pool: &[Demonstration],
    p: f64,
    ood: &TaskGenerator,
    seed: u64,
) -> Result<Vec<Demonstration>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidSpec(format!("ood fraction {p} outside [0, 1]")));
    }
    let count = ood_count(p, pool.len());
    let mut r = rng::derive(seed, "ood");
    let chosen = rng::permutation(pool.len(), &mut r);
    let mut out = pool.to_vec();
    let n_labels = ood.labels().len();
    for &i in &chosen[..count] {
        let label = r.gen_range(0..n_labels);
        let mut d = ood.demonstration(pool[i].id.clone(), label, &mut r);
        d.tags = BTreeSet::from([Tag::Ood]);
        out[i] = d;
    }
    Ok(out)
}

/// Rebuild `pool` so that exactly `minority_count` demonstrations carry the
/// minority label and the rest carry the majority label.
///
/// The majority label is the first output seen in `pool`, the minority label
/// the second. Pool items are kept in order while quotas allow; the shortfall
/// is filled from `source`, in an order shuffled by `seed`. Minority items are
/// tagged unless the result is balanced.
pub fn inject_imbalance(
    pool: &[Demonstration],
    source: &[Demonstration],
    minority_count: usize,
    seed: u64,
) -> Result<Vec<Demonstration>> {
    let n = pool.len();
    if minority_count == 0 || minority_count >= n {
        return Err(Error::InvalidSpec(format!("minority_count {minority_count} must lie in [1, {n})")));
    }
    let mut labels: Vec<&str> = Vec::new();
    for d in pool.iter().chain(source) {
        if !labels.contains(&d.output.as_str()) {
            labels.push(&d.output);
        }
    }
    if labels.len() < 2 {
        return Err(Error::Infeasible("pool and source contain fewer than two labels".into()));
    }
    let (major, minor) = (labels[0].to_string(), labels[1].to_string());
    let quota = |label: &str| if label == minor { minority_count } else { n - minority_count };

    let mut taken_major = 0;
    let mut taken_minor = 0;
    let mut out: Vec<Demonstration> = Vec::with_capacity(n);
    let mut offer = |d: &Demonstration, out: &mut Vec<Demonstration>| {
        let slot = if d.output == major {
            &mut taken_major
        } else if d.output == minor {
            &mut taken_minor
        } else {
            return;
        };
        if *slot < quota(&d.output) {
            *slot += 1;
            out.push(d.clone());
        }
    };
    for d in pool {
        offer(d, &mut out);
    }
    let mut r = rng::derive(seed, "imbalance");
    let used: BTreeSet<String> = out.iter().map(|d| d.id.clone()).collect();
    let mut fill: Vec<&Demonstration> = source.iter().filter(|d| !used.contains(&d.id)).collect();
    rng::shuffle(&mut fill, &mut r);
    for d in fill {
        offer(d, &mut out);
    }
    if out.len() != n {
        return Err(Error::Infeasible(format!(
            "need {} `{major}` and {minority_count} `{minor}` demonstrations, source is too small",
            n - minority_count
        )));
    }
    let balanced = 2 * minority_count == n;
    Ok(out
        .into_iter()
        .map(|d| if !balanced && d.output == minor { d.with_tag(Tag::ImbalanceMinority) } else { d })
        .collect())
}

/// Replace the outputs of `noised_count` seeded demonstrations by seeded
/// uniform picks from `answers`.
pub fn inject_noise(
    pool: &[Demonstration],
    noised_count: usize,
    answers: &[String],
    seed: u64,
) -> Result<Vec<Demonstration>> {
    if noised_count > pool.len() {
        return Err(Error::InvalidSpec(format!(
            "noised_count {noised_count} exceeds pool size {}",
            pool.len()
        )));
    }
    if noised_count > 0 && answers.is_empty() {
        return Err(Error::InvalidSpec("noise answers are empty".into()));
    }
    let mut r = rng::derive(seed, "noise");
    let chosen = rng::permutation(pool.len(), &mut r);
    let mut out = pool.to_vec();
    for &i in &chosen[..noised_count] {
        out[i].output = answers[r.gen_range(0..answers.len())].clone();
        out[i].tags.insert(Tag::Noised);
    }
    Ok(out)
}
