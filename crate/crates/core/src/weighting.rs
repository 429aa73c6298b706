//! Weighting functions producing one mixing coefficient per expert: uniform,
//! trainable scalars, a hypernetwork over subset contents, and top-k′
//! sparsification with its perturb-and-compare gradient estimator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::MixtureWeights;
use crate::error::{Error, Result};
use crate::partitioning::{tokenize, Demonstration};
use crate::rng;

pub const HYPERNET_INPUT_DIM: usize = 512;
pub const HYPERNET_HIDDEN: usize = 32;

/// `w_i = 1/k` for every expert.
pub fn uniform_weights(k: usize) -> Result<MixtureWeights> {
    if k == 0 {
        return Err(Error::InvalidK { k, n: 0 });
    }
    MixtureWeights::new(vec![1.0 / k as f64; k])
}

/// Trainable per-expert weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarWeights {
    pub w: Vec<f64>,
}

impl ScalarWeights {
    pub fn weights(&self) -> Result<MixtureWeights> {
        MixtureWeights::new(self.w.clone())
    }
}

pub fn init_scalar_weights(k: usize) -> Result<ScalarWeights> {
    Ok(ScalarWeights {
        w: uniform_weights(k)?.into_vec(),
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed bag-of-words, scaled to unit L2 norm (all zeros for empty text).
pub fn hashed_features(text: &str, dim: usize) -> Vec<f64> {
    let mut f = vec![0.0; dim];
    for t in tokenize(text) {
        f[(fnv1a(t.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        f.iter_mut().for_each(|x| *x /= norm);
    }
    f
}

/// Text seen by the hypernetwork for one subset: every input and answer.
pub fn subset_text(subset: &[&Demonstration]) -> String {
    let mut s = String::new();
    for d in subset {
        s.push_str(&d.input);
        s.push(' ');
        s.push_str(&d.output);
        s.push('\n');
    }
    s
}

/// Per-subset scorer `w_i = b2 + Σ_h a_h tanh(W1 f_i + b1)_h`, where `f_i`
/// are hashed bag-of-words features of subset `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperNetwork {
    pub input_dim: usize,
    pub hidden: usize,
    /// `hidden × input_dim`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl HyperNetwork {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            input_dim,
            hidden,
            w1: vec![0.0; hidden * input_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    /// Seeded init: `W1 ~ U(-1, 1)`, `b1 = 0`, `a ~ U(-0.1/√H, 0.1/√H)`,
    /// `b2 = out_bias`.
    pub fn random(seed: u64, input_dim: usize, hidden: usize, out_bias: f64) -> Self {
        let mut r = rng::seeded(seed);
        let mut net = Self::zeros(input_dim, hidden);
        for x in net.w1.iter_mut() {
            *x = r.gen_range(-1.0..1.0);
        }
        let scale = 0.1 / (hidden as f64).sqrt();
        for x in net.w2.iter_mut() {
            *x = r.gen_range(-scale..scale);
        }
        net.b2 = out_bias;
        net
    }

    pub fn featurize(&self, subsets: &[Vec<&Demonstration>]) -> Vec<Vec<f64>> {
        subsets
            .iter()
            .map(|s| hashed_features(&subset_text(s), self.input_dim))
            .collect()
    }

    fn hidden_activations(&self, f: &[f64]) -> Vec<f64> {
        (0..self.hidden)
            .map(|h| {
                let row = &self.w1[h * self.input_dim..(h + 1) * self.input_dim];
                let z: f64 = row
                    .iter()
                    .zip(f)
                    .filter(|(_, x)| **x != 0.0)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
                    + self.b1[h];
                z.tanh()
            })
            .collect()
    }

    pub fn forward_one(&self, f: &[f64]) -> f64 {
        let act = self.hidden_activations(f);
        self.b2 + act.iter().zip(&self.w2).map(|(a, w)| a * w).sum::<f64>()
    }

    pub fn forward_features(&self, features: &[Vec<f64>]) -> Vec<f64> {
        features.iter().map(|f| self.forward_one(f)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// Parameters flattened as `[W1, b1, a, b2]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend_from_slice(&self.w1);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.push(self.b2);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params());
        let (w1, rest) = p.split_at(self.w1.len());
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.hidden);
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2 = b2[0];
    }

    /// Chain rule from `∂L/∂w_i` to the flattened parameter gradient.
    pub fn backward(&self, features: &[Vec<f64>], grad_w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.num_params()];
        let (b1_off, w2_off, b2_off) = (
            self.w1.len(),
            self.w1.len() + self.hidden,
            self.w1.len() + 2 * self.hidden,
        );
        for (f, &gw) in features.iter().zip(grad_w) {
            if gw == 0.0 {
                continue;
            }
            let act = self.hidden_activations(f);
            g[b2_off] += gw;
            for h in 0..self.hidden {
                g[w2_off + h] += gw * act[h];
                let dz = gw * self.w2[h] * (1.0 - act[h] * act[h]);
                if dz == 0.0 {
                    continue;
                }
                g[b1_off + h] += dz;
                let row = &mut g[h * self.input_dim..(h + 1) * self.input_dim];
                for (gr, x) in row.iter_mut().zip(f) {
                    if *x != 0.0 {
                        *gr += dz * x;
                    }
                }
            }
        }
        g
    }
}

/// Weights for a list of subsets, one forward pass per subset.
pub fn hypernet_forward(h: &HyperNetwork, subsets: &[Vec<&Demonstration>]) -> Result<MixtureWeights> {
    MixtureWeights::new(h.forward_features(&h.featurize(subsets)))
}

/// Indicator of the `k′` largest entries of `m`; ties go to the lower index.
pub fn topk_mask(m: &[f64], k_prime: usize) -> Result<Vec<f64>> {
    let k = m.len();
    if k_prime < 1 || k_prime > k {
        return Err(Error::InvalidKPrime { k_prime, k });
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| m[b].total_cmp(&m[a]).then(a.cmp(&b)));
    let mut mask = vec![0.0; k];
    for &i in &order[..k_prime] {
        mask[i] = 1.0;
    }
    Ok(mask)
}

/// Dense weights `w′`, masking coefficients `m`, and the retained count `k′`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseWeighting {
    pub w_prime: Vec<f64>,
    pub m: Vec<f64>,
    pub k_prime: usize,
    pub lambda: f64,
}

impl SparseWeighting {
    pub const DEFAULT_LAMBDA: f64 = 1.0;

    /// `w′ = m = 1/k`.
    pub fn init(k: usize, k_prime: usize, lambda: f64) -> Result<Self> {
        let sw = Self {
            w_prime: uniform_weights(k)?.into_vec(),
            m: uniform_weights(k)?.into_vec(),
            k_prime,
            lambda,
        };
        sw.validate()?;
        Ok(sw)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.w_prime.len();
        if self.m.len() != k {
            return Err(Error::DimensionMismatch { expected: k, found: self.m.len() });
        }
        if self.k_prime < 1 || self.k_prime > k {
            return Err(Error::InvalidKPrime { k_prime: self.k_prime, k });
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be positive"));
        }
        Ok(())
    }

    pub fn mask(&self) -> Result<Vec<f64>> {
        topk_mask(&self.m, self.k_prime)
    }
}

/// `w = w′ ⊙ top-k′(m)`.
pub fn sparsify(sw: &SparseWeighting) -> Result<MixtureWeights> {
    let mask = topk_mask(&sw.m, sw.k_prime)?;
    if sw.w_prime.len() != mask.len() {
        return Err(Error::DimensionMismatch { expected: mask.len(), found: sw.w_prime.len() });
    }
    MixtureWeights::new(sw.w_prime.iter().zip(&mask).map(|(w, b)| w * b).collect())
}

/// `top-k′(m) − top-k′(m + λ·grad_mask)`, evaluated exactly.
///
/// Note the sign: with `grad_mask = ∂L/∂m̂` this moves `m` away from experts
/// whose inclusion lowers the loss, so the trainer passes `-∂L/∂m̂` (see
/// [`crate::training::grad_sparse`]).
pub fn imle_grad(m: &[f64], grad_mask: &[f64], k_prime: usize, lambda: f64) -> Result<Vec<f64>> {
    if grad_mask.len() != m.len() {
        return Err(Error::DimensionMismatch { expected: m.len(), found: grad_mask.len() });
    }
    let current = topk_mask(m, k_prime)?;
    let perturbed: Vec<f64> = m.iter().zip(grad_mask).map(|(a, g)| a + lambda * g).collect();
    let target = topk_mask(&perturbed, k_prime)?;
    Ok(current.iter().zip(&target).map(|(a, b)| a - b).collect())
}

/// Which weighting function a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingKind {
    Uniform,
    Scalar,
    Hypernet,
    Sparse,
}

/// JSON checkpoint for a trained weighting function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightCheckpoint {
    pub kind: WeightingKind,
    pub k: usize,
    /// Effective per-expert weights (for `sparse`, the dense `w′`).
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypernet_params: Option<HyperNetwork>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_prime: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_weights(1).unwrap().as_slice(), &[1.0]);
        assert_eq!(uniform_weights(4).unwrap().as_slice(), &[0.25; 4]);
        let w = uniform_weights(30).unwrap();
        assert!(w.as_slice().iter().all(|x| *x == 1.0 / 30.0));
        assert!(uniform_weights(0).is_err());
        for k in [1, 4, 30] {
            let s = init_scalar_weights(k).unwrap();
            assert_eq!(s.w, uniform_weights(k).unwrap().into_vec());
            assert!((s.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(init_scalar_weights(0).is_err());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_mask(&[0.5, 0.2, 0.9], 2).unwrap(), vec![1.0, 0.0, 1.0]);
        assert_eq!(topk_mask(&[0.5, 0.5, 0.1], 1).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(topk_mask(&[0.3, 0.1, 0.2], 3).unwrap(), vec![1.0; 3]);
        assert!(matches!(topk_mask(&[0.1, 0.2], 0), Err(Error::InvalidKPrime { .. })));
        assert!(matches!(topk_mask(&[0.1, 0.2], 3), Err(Error::InvalidKPrime { .. })));
    }

    #[test]
    fn sparsify_examples() {
        let sw = SparseWeighting { w_prime: vec![0.3, -0.2, 0.5], m: vec![0.5, 0.2, 0.9], k_prime: 2, lambda: 1.0 };
        assert_eq!(sparsify(&sw).unwrap().as_slice(), &[0.3, 0.0, 0.5]);
        let sw = SparseWeighting { k_prime: 3, ..sw };
        assert_eq!(sparsify(&sw).unwrap().as_slice(), &[0.3, -0.2, 0.5]);
        let sw = SparseWeighting { w_prime: vec![0.0; 3], ..sw };
        assert_eq!(sparsify(&sw).unwrap().as_slice(), &[0.0; 3]);
    }

    #[test]
    fn imle_examples() {
        assert_eq!(imle_grad(&[0.4, 0.6], &[0.0, 0.0], 1, 1.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(imle_grad(&[0.4, 0.6], &[1.0, -1.0], 1, 1.0).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(imle_grad(&[0.4, 0.6], &[1.0, -1.0], 1, 0.05).unwrap(), vec![0.0, 0.0]);
        assert!(imle_grad(&[0.4, 0.6], &[1.0], 1, 1.0).is_err());
    }

    #[test]
    fn sparse_init_and_validation() {
        let sw = SparseWeighting::init(4, 2, 1.0).unwrap();
        assert_eq!(sw.m, vec![0.25; 4]);
        assert_eq!(sw.mask().unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
        assert!(SparseWeighting::init(4, 5, 1.0).is_err());
        assert!(SparseWeighting::init(4, 2, 0.0).is_err());
    }

    fn toy_subsets() -> Vec<Demonstration> {
        vec![
            Demonstration::new("a", "cat dog", "yes"),
            Demonstration::new("b", "stock bond", "no"),
            Demonstration::new("c", "dog cat", "yes"),
            Demonstration::new("d", "red blue", "no"),
        ]
    }

    #[test]
    fn constant_network() {
        let mut net = HyperNetwork::zeros(HYPERNET_INPUT_DIM, HYPERNET_HIDDEN);
        net.b2 = 0.37;
        let d = toy_subsets();
        let w = hypernet_forward(&net, &[vec![&d[0]], vec![&d[1], &d[3]]]).unwrap();
        assert_eq!(w.as_slice(), &[0.37, 0.37]);
    }

    #[test]
    fn identical_and_reordered_subsets_share_weights() {
        let net = HyperNetwork::random(42, HYPERNET_INPUT_DIM, HYPERNET_HIDDEN, 0.1);
        let d = toy_subsets();
        let w = hypernet_forward(&net, &[vec![&d[0], &d[1]], vec![&d[1], &d[0]], vec![&d[2]]]).unwrap();
        assert_eq!(w.as_slice()[0], w.as_slice()[1]);
        // "cat dog" and "dog cat" carry the same bag of words
        let w2 = hypernet_forward(&net, &[vec![&d[0]], vec![&d[2]]]).unwrap();
        assert_eq!(w2.as_slice()[0], w2.as_slice()[1]);
    }

    /// Naive re-implementation of the forward pass, used to freeze the golden
    /// vector below.
    fn reference_forward(net: &HyperNetwork, text: &str) -> f64 {
        let mut f = vec![0.0; net.input_dim];
        for tok in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let mut h: u64 = 14695981039346656037;
            for b in tok.to_lowercase().bytes() {
                h = (h ^ b as u64).wrapping_mul(1099511628211);
            }
            f[(h % net.input_dim as u64) as usize] += 1.0;
        }
        let norm: f64 = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut out = net.b2;
        for h in 0..net.hidden {
            let mut z = net.b1[h];
            let row = &net.w1[h * net.input_dim..(h + 1) * net.input_dim];
            z += row.iter().zip(&f).map(|(w, x)| w * x / norm).sum::<f64>();
            out += net.w2[h] * z.tanh();
        }
        out
    }

    #[test]
    fn seeded_network_matches_golden_vector() {
        let net = HyperNetwork::random(42, HYPERNET_INPUT_DIM, HYPERNET_HIDDEN, 0.1);
        let d = toy_subsets();
        let subsets = vec![vec![&d[0]], vec![&d[1], &d[2]], vec![&d[3]]];
        let w = hypernet_forward(&net, &subsets).unwrap();
        for (i, s) in subsets.iter().enumerate() {
            let expected = reference_forward(&net, &subset_text(s));
            assert!((w.as_slice()[i] - expected).abs() < 1e-12);
        }
        let golden = GOLDEN_SEED42;
        for (a, b) in w.as_slice().iter().zip(golden) {
            assert!((a - b).abs() < 1e-12, "{:?}", w.as_slice());
        }
    }

    const GOLDEN_SEED42: [f64; 3] = [0.0840365506849391, 0.09854152619021779, 0.1320579192536738];

    #[test]
    fn params_round_trip() {
        let net = HyperNetwork::random(7, 16, 4, 0.2);
        let mut other = HyperNetwork::zeros(16, 4);
        other.set_params(&net.params());
        assert_eq!(other, net);
        assert_eq!(net.num_params(), 16 * 4 + 4 + 4 + 1);
    }

    fn grid(v: Vec<i32>) -> Vec<f64> {
        v.into_iter().map(|x| x as f64 * 0.25).collect()
    }

    proptest! {
        #[test]
        fn topk_has_k_prime_ones_and_ignores_shifts(
            m in prop::collection::vec(-8i32..8, 1..9),
            kp in 1usize..9,
            shift in -8i32..8,
        ) {
            let m = grid(m);
            let kp = 1 + (kp - 1) % m.len();
            let mask = topk_mask(&m, kp).unwrap();
            prop_assert_eq!(mask.iter().filter(|x| **x == 1.0).count(), kp);
            let shifted: Vec<f64> = m.iter().map(|x| x + shift as f64 * 0.25).collect();
            prop_assert_eq!(topk_mask(&shifted, kp).unwrap(), mask);
        }

        #[test]
        fn imle_entries_sum_to_zero(
            m in prop::collection::vec(-8i32..8, 1..9),
            g in prop::collection::vec(-1i32..=1, 9),
            kp in 1usize..9,
            lambda in prop::sample::select(vec![0.1, 1.0, 10.0]),
        ) {
            let m = grid(m);
            let kp = 1 + (kp - 1) % m.len();
            let g: Vec<f64> = g[..m.len()].iter().map(|x| *x as f64).collect();
            let d = imle_grad(&m, &g, kp, lambda).unwrap();
            prop_assert!(d.iter().all(|x| [-1.0, 0.0, 1.0].contains(x)));
            prop_assert_eq!(d.iter().sum::<f64>(), 0.0);
        }

        #[test]
        fn full_k_prime_is_identity(w in prop::collection::vec(-2.0f64..2.0, 1..8)) {
            let k = w.len();
            let sw = SparseWeighting { w_prime: w.clone(), m: vec![0.0; k], k_prime: k, lambda: 1.0 };
            prop_assert_eq!(sparsify(&sw).unwrap().into_vec(), w);
        }
    }
}
