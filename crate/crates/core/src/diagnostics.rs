//! Scalar MCMC convergence diagnostics.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceDiagnostics {
    pub ess: f64,
    pub geweke_z: f64,
}

impl TraceDiagnostics {
    pub fn of(trace: &[f64]) -> Self {
        Self {
            ess: effective_sample_size(trace),
            geweke_z: geweke_z(trace, 0.1, 0.5),
        }
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v)
}

/// Effective sample size from Geyer's initial monotone positive sequence.
/// A constant trace returns its length.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let (m, v) = mean_var(x);
    if v == 0.0 {
        return n as f64;
    }
    let autocov = |lag: usize| -> f64 {
        x[..n - lag]
            .iter()
            .zip(&x[lag..])
            .map(|(a, b)| (a - m) * (b - m))
            .sum::<f64>()
            / n as f64
    };
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = autocov(lag) + autocov(lag + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        lag += 2;
    }
    // tau = -1 + 2 * sum(pairs) / gamma_0
    let tau = (2.0 * sum / v - 1.0).max(1.0 / n as f64);
    (n as f64 / tau).min(n as f64 * (n as f64).log10().max(1.0))
}

/// Geweke z-score comparing the means of the first `first` and last `last`
/// fractions of a trace, with ESS-corrected standard errors.
pub fn geweke_z(x: &[f64], first: f64, last: f64) -> f64 {
    let n = x.len();
    let na = ((n as f64) * first).floor() as usize;
    let nb = ((n as f64) * last).floor() as usize;
    if na < 2 || nb < 2 {
        return 0.0;
    }
    let a = &x[..na];
    let b = &x[n - nb..];
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let se2 = va / effective_sample_size(a) + vb / effective_sample_size(b);
    if se2 == 0.0 {
        return 0.0;
    }
    (ma - mb) / se2.sqrt()
}
