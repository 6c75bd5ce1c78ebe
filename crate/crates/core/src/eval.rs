//! Scoring detected cluster structures and risk surfaces against the truth.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::car::quantile_sorted;
use crate::cluster::ClusterConfig;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("no replicates to evaluate")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Fraction of unordered unit pairs on which two partitions agree.
///
/// Computed from the contingency table: agreements are the pairs together in
/// both plus the pairs apart in both.
pub fn rand_index(a: &ClusterConfig, b: &ClusterConfig) -> Result<f64, EvalError> {
    let n = a.n();
    if b.n() != n {
        return Err(EvalError::SizeMismatch(n, b.n()));
    }
    let total = pairs(n as u64);
    if total == 0 {
        return Ok(1.0);
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    for (&la, &lb) in a.assignment().iter().zip(b.assignment()) {
        *table.entry((la, lb)).or_default() += 1;
    }
    let together_both: u64 = table.values().map(|&c| pairs(c)).sum();
    let together_a: u64 = a.sizes().iter().map(|&s| pairs(s as u64)).sum();
    let together_b: u64 = b.sizes().iter().map(|&s| pairs(s as u64)).sum();
    let apart_both = total + together_both - together_a - together_b;
    Ok((together_both + apart_both) as f64 / total as f64)
}

/// Root mean square error between two risk vectors.
pub fn rmse(estimated: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if estimated.len() != truth.len() {
        return Err(EvalError::SizeMismatch(estimated.len(), truth.len()));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let sse: f64 = estimated.iter().zip(truth).map(|(e, t)| (e - t) * (e - t)).sum();
    Ok((sse / truth.len() as f64).sqrt())
}

/// RMSE of log-risks.
pub fn log_rmse(estimated: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    let le: Vec<f64> = estimated.iter().map(|v| v.ln()).collect();
    let lt: Vec<f64> = truth.iter().map(|v| v.ln()).collect();
    rmse(&le, &lt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: String,
    pub k_true: usize,
    pub k_est: usize,
    pub rand: f64,
    pub rmse: f64,
}

impl ReplicateRow {
    pub fn score(
        replicate: impl Into<String>,
        truth: &ClusterConfig,
        estimate: &ClusterConfig,
        true_risk: &[f64],
        risk_mean: &[f64],
        log_scale: bool,
    ) -> Result<Self, EvalError> {
        Ok(Self {
            replicate: replicate.into(),
            k_true: truth.k(),
            k_est: estimate.k(),
            rand: rand_index(truth, estimate)?,
            rmse: if log_scale {
                log_rmse(risk_mean, true_risk)?
            } else {
                rmse(risk_mean, true_risk)?
            },
        })
    }
}

/// Five-number summary for boxplots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            min: v[0],
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReplicateRow>,
    pub k_est: BoxStats,
    pub rand: BoxStats,
    pub rmse: BoxStats,
    /// Replicates present in the truth set but missing a result.
    pub missing: Vec<String>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<ReplicateRow>, missing: Vec<String>) -> Result<Self, EvalError> {
        if rows.is_empty() {
            return Err(EvalError::Empty);
        }
        let col = |f: fn(&ReplicateRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        Ok(Self {
            k_est: BoxStats::of(&col(|r| r.k_est as f64)),
            rand: BoxStats::of(&col(|r| r.rand)),
            rmse: BoxStats::of(&col(|r| r.rmse)),
            rows,
            missing,
        })
    }

    /// `replicate,k_true,k_est,rand,rmse`
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}
