//! Synthetic tasks, perturbations, baselines, metrics, the cost model and
//! experiment orchestration.

pub mod baselines;
pub mod cost;
pub mod dataset;
pub mod experiment;
pub mod metrics;
pub mod perturb;
pub mod presets;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use baselines::{run_concat_baseline, run_ensemble_baseline, run_random_search, Fragment};
pub use cost::{cost_model, CostModelInput};
pub use experiment::{load_config, parse_config, run_experiment, ExperimentConfig, MethodSpec, RunReport};
pub use metrics::{evaluate, Metric};
pub use perturb::{inject_imbalance, inject_noise, inject_ood};
pub use synthetic::{build_task, gen_synthetic_task, SyntheticTask, SyntheticTaskSpec, TaskGenerator};

/// Every method the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Concat,
    Ensemble,
    RandomSearch,
    MoiclUniform,
    MoiclScalar,
    MoiclHypernet,
    MoiclSparse,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Concat,
        Method::Ensemble,
        Method::RandomSearch,
        Method::MoiclUniform,
        Method::MoiclScalar,
        Method::MoiclHypernet,
        Method::MoiclSparse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Concat => "concat",
            Method::Ensemble => "ensemble",
            Method::RandomSearch => "random_search",
            Method::MoiclUniform => "moicl_uniform",
            Method::MoiclScalar => "moicl_scalar",
            Method::MoiclHypernet => "moicl_hypernet",
            Method::MoiclSparse => "moicl_sparse",
        }
    }

    pub fn is_moicl(self) -> bool {
        matches!(
            self,
            Method::MoiclUniform | Method::MoiclScalar | Method::MoiclHypernet | Method::MoiclSparse
        )
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}
