//! Inference cost in abstract units, from context-length scaling: one
//! forward pass over a context of `m` demonstrations costs `(m + 1)²·C_LLM`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Method;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelInput {
    /// Demonstrations in context; for `random_search`, the selected subset size.
    pub n: usize,
    pub k: usize,
    pub c_llm: f64,
    pub c_hyper: f64,
    pub method: Method,
    /// Retained experts for `moicl_sparse`.
    #[serde(default)]
    pub k_prime: Option<usize>,
}

/// - concat, random_search: `(n+1)²·C_LLM`
/// - ensemble: `n·(1+1)²·C_LLM`
/// - moicl_*: `k·(n/k+1)²·C_LLM` (`k′` calls for `moicl_sparse`)
/// - moicl_hypernet: plus `n²·C_Hyper`
pub fn cost_model(input: &CostModelInput) -> Result<f64> {
    let CostModelInput { n, k, c_llm, c_hyper, method, k_prime } = *input;
    if n < 1 {
        return Err(Error::config("n", "must be at least 1"));
    }
    if k < 1 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    if !(c_llm > 0.0 && c_hyper > 0.0) {
        return Err(Error::config("cost", "unit costs must be positive"));
    }
    let nf = n as f64;
    let kf = k as f64;
    let moicl = |calls: f64| calls * (nf / kf + 1.0).powi(2) * c_llm;
    Ok(match method {
        Method::Concat | Method::RandomSearch => (nf + 1.0).powi(2) * c_llm,
        Method::Ensemble => nf * 4.0 * c_llm,
        Method::MoiclUniform | Method::MoiclScalar => moicl(kf),
        Method::MoiclHypernet => moicl(kf) + nf * nf * c_hyper,
        Method::MoiclSparse => {
            let kp = k_prime.unwrap_or(k);
            if kp < 1 || kp > k {
                return Err(Error::InvalidKPrime { k_prime: kp, k });
            }
            moicl(kp as f64)
        }
    })
}
