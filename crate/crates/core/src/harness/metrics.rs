//! Average-accuracy metrics over a lower-triangular accuracy matrix.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `r[t][i]` is the accuracy (percent) on task `i` after training task `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub r: Vec<Vec<f64>>,
    /// `A_t = (1/t) Σ_{i≤t} R_{t,i}`.
    pub a_t: Vec<f64>,
    pub a_last: f64,
    /// `Ā = (1/T) Σ_t A_t`.
    pub a_bar: f64,
}

pub fn compute_metrics(r: &[Vec<f64>]) -> Result<MetricTable> {
    if r.is_empty() {
        return Err(Error::MalformedMatrix("no rows".into()));
    }
    for (t, row) in r.iter().enumerate() {
        if row.len() != t + 1 {
            return Err(Error::MalformedMatrix(format!(
                "row {t} has {} entries, expected {}",
                row.len(),
                t + 1
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::MalformedMatrix(format!("entry {v} in row {t} outside [0, 100]")));
        }
    }
    let a_t: Vec<f64> = r.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect();
    let a_bar = a_t.iter().sum::<f64>() / a_t.len() as f64;
    Ok(MetricTable {
        r: r.to_vec(),
        a_last: *a_t.last().expect("non-empty"),
        a_t,
        a_bar,
    })
}
