//! Frozen experiment configs shipped with the crate.

use crate::error::{Error, Result};

use super::experiment::{parse_config, ExperimentConfig};

pub const NAMES: [&str; 5] = ["default", "noise", "ood", "imbalance", "sparse"];

pub fn preset_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "default" => include_str!("../../configs/default.json"),
        "noise" => include_str!("../../configs/noise.json"),
        "ood" => include_str!("../../configs/ood.json"),
        "imbalance" => include_str!("../../configs/imbalance.json"),
        "sparse" => include_str!("../../configs/sparse.json"),
        _ => return None,
    })
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let text = preset_text(name)
        .ok_or_else(|| Error::config("preset", format!("unknown preset `{name}`; known: {}", NAMES.join(", "))))?;
    parse_config(text)
}
