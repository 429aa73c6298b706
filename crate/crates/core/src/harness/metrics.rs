use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Accuracy,
    Em,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Em => "em",
        }
    }
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Fraction of matching predictions. `em` compares after lowercasing and
/// trimming outer whitespace. An empty input scores 0.
pub fn evaluate<P: AsRef<str>, G: AsRef<str>>(predictions: &[P], gold: &[G], metric: Metric) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::LengthMismatch { predictions: predictions.len(), gold: gold.len() });
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(gold)
        .filter(|(p, g)| match metric {
            Metric::Accuracy => p.as_ref() == g.as_ref(),
            Metric::Em => normalize(p.as_ref()) == normalize(g.as_ref()),
        })
        .count();
    Ok(hits as f64 / gold.len() as f64)
}
