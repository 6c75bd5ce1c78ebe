//! Observed and expected counts per unit and period, and the log-SIR matrix
//! used by the clustering stage.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Continuity correction substituted for zero counts inside the log-SIR matrix.
pub const DEFAULT_ZERO_ADJUST: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("unknown period {0:?}")]
    UnknownPeriod(String),
    #[error("unknown unit id {0:?} in counts")]
    UnknownId(String),
    #[error("missing counts for unit {id:?} in period {period:?}")]
    MissingCell { id: String, period: String },
    #[error("duplicate counts for unit {id:?} in period {period:?}")]
    DuplicateCell { id: String, period: String },
    #[error("expected count must be positive and finite, got {value} for unit {id:?}")]
    NonPositiveExpected { id: String, value: f64 },
    #[error("no prior periods besides the study period")]
    NoPriorPeriods,
    #[error("zero adjustment must be positive, got {0}")]
    BadZeroAdjust(f64),
    #[error("panel shape mismatch: {0}")]
    Shape(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Counts for `n` units over `T` periods, one of which is the study period.
#[derive(Debug, Clone, PartialEq)]
pub struct CountPanel {
    ids: Vec<String>,
    periods: Vec<String>,
    study: usize,
    // indexed [period][unit]
    observed: Vec<Vec<u64>>,
    expected: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct CountRow {
    id: String,
    period: String,
    observed: u64,
    expected: f64,
}

impl CountPanel {
    /// `observed[t][i]` and `expected[t][i]` for period `t` and unit `i`.
    pub fn new(
        ids: Vec<String>,
        periods: Vec<String>,
        study_period: &str,
        observed: Vec<Vec<u64>>,
        expected: Vec<Vec<f64>>,
    ) -> Result<Self, RiskError> {
        let study = periods
            .iter()
            .position(|p| p == study_period)
            .ok_or_else(|| RiskError::UnknownPeriod(study_period.to_string()))?;
        let n = ids.len();
        if observed.len() != periods.len() || expected.len() != periods.len() {
            return Err(RiskError::Shape(format!(
                "{} periods but {} observed / {} expected columns",
                periods.len(),
                observed.len(),
                expected.len()
            )));
        }
        for (y, e) in observed.iter().zip(&expected) {
            if y.len() != n || e.len() != n {
                return Err(RiskError::Shape(format!("column length differs from {n} units")));
            }
            for (i, &v) in e.iter().enumerate() {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(RiskError::NonPositiveExpected { id: ids[i].clone(), value: v });
                }
            }
        }
        Ok(Self {
            ids,
            periods,
            study,
            observed,
            expected,
        })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn periods(&self) -> &[String] {
        &self.periods
    }

    pub fn study_period(&self) -> &str {
        &self.periods[self.study]
    }

    /// Prior period labels in panel order.
    pub fn prior_periods(&self) -> Vec<&str> {
        self.prior_indices().map(|t| self.periods[t].as_str()).collect()
    }

    fn prior_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.periods.len()).filter(move |&t| t != self.study)
    }

    fn period_index(&self, label: &str) -> Result<usize, RiskError> {
        self.periods
            .iter()
            .position(|p| p == label)
            .ok_or_else(|| RiskError::UnknownPeriod(label.to_string()))
    }

    pub fn observed(&self, period: &str) -> Result<&[u64], RiskError> {
        Ok(&self.observed[self.period_index(period)?])
    }

    pub fn expected(&self, period: &str) -> Result<&[f64], RiskError> {
        Ok(&self.expected[self.period_index(period)?])
    }

    pub fn study_observed(&self) -> &[u64] {
        &self.observed[self.study]
    }

    pub fn study_expected(&self) -> &[f64] {
        &self.expected[self.study]
    }

    /// Standardised incidence ratio `Y / E` for one period, without any zero
    /// correction.
    pub fn sir(&self, period: &str) -> Result<Vec<f64>, RiskError> {
        let t = self.period_index(period)?;
        Ok(self.observed[t]
            .iter()
            .zip(&self.expected[t])
            .map(|(&y, &e)| y as f64 / e)
            .collect())
    }

    /// Log-SIR matrix over the prior periods, `ln(max(Y, zero_adjust) / E)`.
    pub fn build_psi(&self, zero_adjust: f64) -> Result<PriorRiskMatrix, RiskError> {
        if !(zero_adjust > 0.0) {
            return Err(RiskError::BadZeroAdjust(zero_adjust));
        }
        let priors: Vec<usize> = self.prior_indices().collect();
        if priors.is_empty() {
            return Err(RiskError::NoPriorPeriods);
        }
        let (n, q) = (self.n(), priors.len());
        let mut data = Vec::with_capacity(n * q);
        let mut zero_cells = 0;
        for i in 0..n {
            for &t in &priors {
                let y = self.observed[t][i];
                if y == 0 {
                    zero_cells += 1;
                }
                data.push(log_ratio(y, self.expected[t][i], zero_adjust));
            }
        }
        Ok(PriorRiskMatrix {
            n,
            q,
            data,
            zero_cells,
        })
    }

    /// Pearson correlation of each prior period's log-SIR with the study
    /// period's log-SIR (both with the zero correction). `None` marks a
    /// zero-variance column.
    pub fn prior_correlations(&self, zero_adjust: f64) -> Result<Vec<Option<f64>>, RiskError> {
        let priors: Vec<usize> = self.prior_indices().collect();
        if priors.is_empty() {
            return Err(RiskError::NoPriorPeriods);
        }
        let column = |t: usize| -> Vec<f64> {
            self.observed[t]
                .iter()
                .zip(&self.expected[t])
                .map(|(&y, &e)| log_ratio(y, e, zero_adjust))
                .collect()
        };
        let study = column(self.study);
        Ok(priors.into_iter().map(|t| pearson(&study, &column(t))).collect())
    }

    /// Reads long-format counts CSV (`id,period,observed,expected`). Units are
    /// ordered by `ids` when given, otherwise by first appearance; periods by
    /// first appearance.
    pub fn from_csv<R: Read>(source: R, ids: Option<&[String]>, study_period: &str) -> Result<Self, RiskError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(source);
        let rows: Vec<CountRow> = reader.deserialize().collect::<Result<_, _>>()?;

        let mut unit_order: Vec<String> = ids.map(<[String]>::to_vec).unwrap_or_default();
        let mut unit_index: HashMap<String, usize> =
            unit_order.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let fixed_units = ids.is_some();
        let mut periods: Vec<String> = Vec::new();
        let mut period_index: HashMap<String, usize> = HashMap::new();
        for row in &rows {
            if !unit_index.contains_key(&row.id) {
                if fixed_units {
                    return Err(RiskError::UnknownId(row.id.clone()));
                }
                unit_index.insert(row.id.clone(), unit_order.len());
                unit_order.push(row.id.clone());
            }
            if !period_index.contains_key(&row.period) {
                period_index.insert(row.period.clone(), periods.len());
                periods.push(row.period.clone());
            }
        }

        let (n, t) = (unit_order.len(), periods.len());
        let mut observed = vec![vec![None; n]; t];
        let mut expected = vec![vec![0.0; n]; t];
        for row in rows {
            let (i, p) = (unit_index[&row.id], period_index[&row.period]);
            if observed[p][i].is_some() {
                return Err(RiskError::DuplicateCell { id: row.id, period: row.period });
            }
            observed[p][i] = Some(row.observed);
            expected[p][i] = row.expected;
        }
        let mut obs = Vec::with_capacity(t);
        for (p, col) in observed.into_iter().enumerate() {
            let mut filled = Vec::with_capacity(n);
            for (i, cell) in col.into_iter().enumerate() {
                filled.push(cell.ok_or_else(|| RiskError::MissingCell {
                    id: unit_order[i].clone(),
                    period: periods[p].clone(),
                })?);
            }
            obs.push(filled);
        }
        Self::new(unit_order, periods, study_period, obs, expected)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), RiskError> {
        let mut w = csv::Writer::from_writer(writer);
        for (t, period) in self.periods.iter().enumerate() {
            for (i, id) in self.ids.iter().enumerate() {
                w.serialize(CountRow {
                    id: id.clone(),
                    period: period.clone(),
                    observed: self.observed[t][i],
                    expected: self.expected[t][i],
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn log_ratio(y: u64, e: f64, zero_adjust: f64) -> f64 {
    (y as f64).max(zero_adjust).ln() - e.ln()
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// The `n x q` matrix of prior-period log-SIRs, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorRiskMatrix {
    n: usize,
    q: usize,
    data: Vec<f64>,
    zero_cells: usize,
}

impl PriorRiskMatrix {
    /// Wraps rows directly; all rows must share one length.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        let q = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == q), "ragged prior risk rows");
        Self {
            n,
            q,
            data: rows.into_iter().flatten().collect(),
            zero_cells: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.q..(i + 1) * self.q]
    }

    /// Cells where the zero-count correction replaced an observed zero.
    pub fn zero_cells(&self) -> usize {
        self.zero_cells
    }
}
