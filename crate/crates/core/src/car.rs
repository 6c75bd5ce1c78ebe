//! Poisson log-linear model with intrinsic CAR random effects and a
//! piecewise-constant cluster intercept, fitted by Metropolis-within-Gibbs.
//!
//! ```text
//! Y_i ~ Poisson(E_i R_i)
//! ln R_i = phi_i + alpha_{c(i)}
//! alpha_j ~ N(0, V)
//! phi ~ ICAR(tau), sum(phi) = 0
//! tau ~ Gamma(a, b)
//! ```
//!
//! Each iteration performs:
//! 1. single-site random-walk Metropolis on every `phi_i`;
//! 2. random-walk Metropolis on every `alpha_j`, using the cluster totals
//!    `sum Y_i` and `sum E_i exp(phi_i)` that the full conditional depends on;
//! 3. a level-shift Metropolis step per cluster, moving `alpha_j` up and the
//!    cluster's `phi_i` down by the same amount (the linear predictor, and so
//!    the likelihood, is unchanged; only the priors see the move);
//! 4. re-centring of `phi` to sum zero, absorbed into `alpha`;
//! 5. a conjugate Gibbs draw of `tau`.
//!
//! Proposal scales adapt towards an acceptance rate of 0.4 during burn-in
//! and are frozen afterwards.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;
use thiserror::Error;

use crate::cluster::ClusterConfig;
use crate::diagnostics::TraceDiagnostics;
use crate::gmrf::SparsePrecision;
use crate::graph::AreaGraph;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("configuration covers {config} units but the graph has {graph}")]
    ConfigSize { config: usize, graph: usize },
    #[error("data vectors have length {y} (observed) and {e} (expected) for {n} units")]
    DataSize { y: usize, e: usize, n: usize },
    #[error("expected count for unit {0} must be positive and finite")]
    BadExpected(usize),
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamSize { got: usize, expected: usize },
    #[error("precision tau must be positive, got {0}")]
    BadTau(f64),
    #[error("invalid prior: {0}")]
    BadPrior(String),
    #[error("invalid MCMC settings: {0}")]
    BadSettings(String),
    #[error("log posterior is not finite")]
    NonFinite,
    #[error("chain diverged at iteration {0}")]
    Divergent(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Priors {
    /// Variance of the normal prior on each cluster intercept.
    pub alpha_variance: f64,
    pub tau_shape: f64,
    pub tau_rate: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            alpha_variance: 10.0,
            tau_shape: 1.0,
            tau_rate: 1.0,
        }
    }
}

/// `diag(W 1) - W`, the ICAR precision with `tau` factored out.
pub fn icar_precision(graph: &AreaGraph) -> SparsePrecision {
    let diag = graph.neighbor_counts().as_slice().iter().map(|&c| c as f64).collect();
    SparsePrecision::from_parts(diag, graph.edges().iter().map(|&(i, j)| (i, j, -1.0)))
}

/// `phi' (diag(W 1) - W) phi = sum over edges of (phi_i - phi_j)^2`.
pub fn icar_quad_form(graph: &AreaGraph, phi: &[f64]) -> f64 {
    graph
        .edges()
        .iter()
        .map(|&(i, j)| (phi[i] - phi[j]) * (phi[i] - phi[j]))
        .sum()
}

/// Everything needed to evaluate the model for one cluster configuration.
#[derive(Debug, Clone)]
pub struct ModelSpec<'g> {
    graph: &'g AreaGraph,
    config: ClusterConfig,
    y: Vec<u64>,
    e: Vec<f64>,
    priors: Priors,
    rank: usize,
    members: Vec<Vec<usize>>,
    boundary: Vec<Vec<(usize, usize)>>,
    log_e: Vec<f64>,
    y_sum: Vec<f64>,
    log_fact_sum: f64,
}

impl<'g> ModelSpec<'g> {
    pub fn new(
        graph: &'g AreaGraph,
        config: ClusterConfig,
        y: Vec<u64>,
        e: Vec<f64>,
        priors: Priors,
    ) -> Result<Self, ModelError> {
        let n = graph.n();
        if config.n() != n {
            return Err(ModelError::ConfigSize { config: config.n(), graph: n });
        }
        if y.len() != n || e.len() != n {
            return Err(ModelError::DataSize { y: y.len(), e: e.len(), n });
        }
        if let Some(i) = e.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(ModelError::BadExpected(i));
        }
        if !(priors.alpha_variance > 0.0 && priors.tau_shape > 0.0 && priors.tau_rate > 0.0) {
            return Err(ModelError::BadPrior(format!("{priors:?}")));
        }
        let members = config.members();
        // edges leaving each cluster, oriented (inside, outside)
        let mut boundary = vec![Vec::new(); config.k()];
        for &(i, j) in graph.edges() {
            let (ci, cj) = (config.label(i), config.label(j));
            if ci != cj {
                boundary[ci].push((i, j));
                boundary[cj].push((j, i));
            }
        }
        let y_sum = members.iter().map(|m| m.iter().map(|&i| y[i] as f64).sum()).collect();
        Ok(Self {
            graph,
            rank: n - graph.n_components(),
            log_e: e.iter().map(|v| v.ln()).collect(),
            log_fact_sum: y.iter().map(|&v| ln_factorial(v)).sum(),
            members,
            boundary,
            y_sum,
            config,
            y,
            e,
            priors,
        })
    }

    pub fn graph(&self) -> &'g AreaGraph {
        self.graph
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.config.k()
    }

    pub fn observed(&self) -> &[u64] {
        &self.y
    }

    pub fn expected(&self) -> &[f64] {
        &self.e
    }

    pub fn priors(&self) -> &Priors {
        &self.priors
    }

    /// Rank of the ICAR precision, `n` minus the number of components.
    pub fn icar_rank(&self) -> usize {
        self.rank
    }

    /// `sum ln(Y_i!)`, the constant separating the full Poisson deviance from
    /// the kernel-only one.
    pub fn log_factorial_sum(&self) -> f64 {
        self.log_fact_sum
    }

    /// Linear predictor `phi_i + alpha_{c(i)}`.
    pub fn linear_predictor(&self, alpha: &[f64], phi: &[f64]) -> Vec<f64> {
        phi.iter()
            .zip(self.config.assignment())
            .map(|(p, &c)| p + alpha[c])
            .collect()
    }

    /// `sum_i [Y_i (ln E_i + eta_i) - E_i exp(eta_i)]`, without `ln Y_i!`.
    pub fn log_likelihood_kernel(&self, eta: &[f64]) -> f64 {
        (0..self.n())
            .map(|i| self.y[i] as f64 * (self.log_e[i] + eta[i]) - self.e[i] * eta[i].exp())
            .sum()
    }

    /// Shape and rate of the Gamma full conditional of `tau` given `phi`.
    pub fn tau_conditional(&self, phi: &[f64]) -> (f64, f64) {
        (
            self.priors.tau_shape + self.rank as f64 / 2.0,
            self.priors.tau_rate + icar_quad_form(self.graph, phi) / 2.0,
        )
    }

    fn check_lengths(&self, alpha: &[f64], phi: &[f64]) -> Result<(), ModelError> {
        if alpha.len() != self.k() {
            return Err(ModelError::ParamSize { got: alpha.len(), expected: self.k() });
        }
        if phi.len() != self.n() {
            return Err(ModelError::ParamSize { got: phi.len(), expected: self.n() });
        }
        Ok(())
    }
}

/// Unnormalised log posterior density (additive constants dropped).
pub fn log_posterior(spec: &ModelSpec<'_>, alpha: &[f64], phi: &[f64], tau: f64) -> Result<f64, ModelError> {
    spec.check_lengths(alpha, phi)?;
    if !(tau > 0.0) {
        return Err(ModelError::BadTau(tau));
    }
    let p = spec.priors;
    let eta = spec.linear_predictor(alpha, phi);
    let value = spec.log_likelihood_kernel(&eta) - alpha.iter().map(|a| a * a).sum::<f64>() / (2.0 * p.alpha_variance)
        + (spec.rank as f64 / 2.0 + p.tau_shape - 1.0) * tau.ln()
        - tau / 2.0 * icar_quad_form(spec.graph, phi)
        - p.tau_rate * tau;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(ModelError::NonFinite)
    }
}

/// One conjugate Gibbs draw of `tau` given `phi`.
pub fn sample_tau<R: Rng + ?Sized>(spec: &ModelSpec<'_>, phi: &[f64], rng: &mut R) -> f64 {
    let (shape, rate) = spec.tau_conditional(phi);
    Gamma::new(shape, 1.0 / rate)
        .expect("shape and rate are positive")
        .sample(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcSettings {
    pub burnin: usize,
    pub keep: usize,
    pub thin: usize,
    /// Initial random-walk standard deviation for each `phi_i`.
    pub phi_scale: f64,
    /// Initial random-walk standard deviation for each `alpha_j` and for the
    /// cluster level-shift move.
    pub alpha_scale: f64,
    pub target_acceptance: f64,
    pub seed: u64,
}

impl Default for McmcSettings {
    fn default() -> Self {
        Self {
            burnin: 2000,
            keep: 5000,
            thin: 1,
            phi_scale: 0.1,
            alpha_scale: 0.1,
            target_acceptance: 0.4,
            seed: 0,
        }
    }
}

impl McmcSettings {
    fn validate(&self) -> Result<(), ModelError> {
        if self.keep == 0 || self.thin == 0 {
            return Err(ModelError::BadSettings("keep and thin must be at least 1".into()));
        }
        if !(self.phi_scale > 0.0 && self.alpha_scale > 0.0) {
            return Err(ModelError::BadSettings("proposal scales must be positive".into()));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(ModelError::BadSettings("target acceptance must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub phi: f64,
    pub alpha: f64,
    pub shift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarSummary {
    pub mean: f64,
    pub sd: f64,
    pub lower95: f64,
    pub upper95: f64,
}

impl ScalarSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean,
            sd: var.sqrt(),
            lower95: quantile_sorted(&sorted, 0.025),
            upper95: quantile_sorted(&sorted, 0.975),
        }
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub tau: TraceDiagnostics,
    /// Diagnostics for a few randomly chosen random effects, keyed by unit.
    pub phi: Vec<(usize, TraceDiagnostics)>,
}

/// Posterior draws of one chain, ready to be summarised.
#[derive(Debug, Clone, Default)]
pub struct Draws {
    pub alpha: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    pub tau: Vec<f64>,
}

/// Posterior summaries for one fitted configuration.
#[derive(Debug, Clone)]
pub struct ModelFit {
    pub k: usize,
    pub alpha: Vec<ScalarSummary>,
    pub tau: ScalarSummary,
    pub phi_mean: Vec<f64>,
    /// Posterior mean of the linear predictor per unit.
    pub eta_mean: Vec<f64>,
    /// Risk `R_i = exp(eta_i)` per unit.
    pub risk: Vec<ScalarSummary>,
    /// Full Poisson deviance (including `ln Y!`) of every retained draw.
    pub deviance: Vec<f64>,
    pub tau_draws: Vec<f64>,
    pub acceptance: Acceptance,
    pub diagnostics: Diagnostics,
    /// Largest `|sum phi|` over retained draws.
    pub max_abs_phi_sum: f64,
}

impl ModelFit {
    /// Summarises raw draws; `acceptance` and the units chosen for `phi`
    /// diagnostics are supplied by the caller.
    pub fn from_draws(spec: &ModelSpec<'_>, draws: &Draws, acceptance: Acceptance, tracked: &[usize]) -> Self {
        let (n, k, m) = (spec.n(), spec.k(), draws.tau.len());
        let mut eta_cols = vec![Vec::with_capacity(m); n];
        let mut deviance = Vec::with_capacity(m);
        let mut phi_mean = vec![0.0; n];
        let mut max_abs_phi_sum: f64 = 0.0;
        for (alpha, phi) in draws.alpha.iter().zip(&draws.phi) {
            let eta = spec.linear_predictor(alpha, phi);
            deviance.push(poisson_deviance(spec, &eta));
            for (col, v) in eta_cols.iter_mut().zip(&eta) {
                col.push(*v);
            }
            for (s, p) in phi_mean.iter_mut().zip(phi) {
                *s += p;
            }
            max_abs_phi_sum = max_abs_phi_sum.max(phi.iter().sum::<f64>().abs());
        }
        phi_mean.iter_mut().for_each(|s| *s /= m as f64);
        let eta_mean = eta_cols.iter().map(|c| c.iter().sum::<f64>() / m as f64).collect();
        let risk = eta_cols
            .iter()
            .map(|c| ScalarSummary::of(&c.iter().map(|v| v.exp()).collect::<Vec<_>>()))
            .collect();
        let alpha = (0..k)
            .map(|j| ScalarSummary::of(&draws.alpha.iter().map(|a| a[j]).collect::<Vec<_>>()))
            .collect();
        let diagnostics = Diagnostics {
            tau: TraceDiagnostics::of(&draws.tau),
            phi: tracked
                .iter()
                .map(|&i| (i, TraceDiagnostics::of(&draws.phi.iter().map(|p| p[i]).collect::<Vec<_>>())))
                .collect(),
        };
        Self {
            k,
            alpha,
            tau: ScalarSummary::of(&draws.tau),
            phi_mean,
            eta_mean,
            risk,
            deviance,
            tau_draws: draws.tau.clone(),
            acceptance,
            diagnostics,
            max_abs_phi_sum,
        }
    }

    pub fn n_draws(&self) -> usize {
        self.deviance.len()
    }

    pub fn risk_mean(&self) -> Vec<f64> {
        self.risk.iter().map(|r| r.mean).collect()
    }
}

/// Full Poisson deviance `-2 sum ln Poisson(Y_i; E_i exp(eta_i))`.
pub fn poisson_deviance(spec: &ModelSpec<'_>, eta: &[f64]) -> f64 {
    -2.0 * (spec.log_likelihood_kernel(eta) - spec.log_fact_sum)
}

struct Adapter {
    log_scale: Vec<f64>,
    accepted: Vec<u64>,
    tried: Vec<u64>,
}

impl Adapter {
    fn new(len: usize, scale: f64) -> Self {
        Self {
            log_scale: vec![scale.ln(); len],
            accepted: vec![0; len],
            tried: vec![0; len],
        }
    }

    fn scale(&self, i: usize) -> f64 {
        self.log_scale[i].exp()
    }

    fn record(&mut self, i: usize, accepted: bool, adapt: Option<(f64, f64)>) {
        if let Some((gain, target)) = adapt {
            let hit = if accepted { 1.0 } else { 0.0 };
            self.log_scale[i] = (self.log_scale[i] + gain * (hit - target)).clamp(-12.0, 3.0);
        } else {
            self.tried[i] += 1;
            self.accepted[i] += u64::from(accepted);
        }
    }

    fn rate(&self) -> f64 {
        let tried: u64 = self.tried.iter().sum();
        if tried == 0 {
            return 0.0;
        }
        self.accepted.iter().sum::<u64>() as f64 / tried as f64
    }
}

fn accept<R: Rng>(rng: &mut R, log_ratio: f64) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

/// Runs the sampler and summarises the retained draws.
pub fn fit(spec: &ModelSpec<'_>, settings: &McmcSettings) -> Result<ModelFit, ModelError> {
    let (draws, acceptance, tracked) = run_chain(spec, settings)?;
    Ok(ModelFit::from_draws(spec, &draws, acceptance, &tracked))
}

/// Runs the sampler, returning raw draws, acceptance rates and the units
/// tracked for diagnostics.
pub fn run_chain(spec: &ModelSpec<'_>, settings: &McmcSettings) -> Result<(Draws, Acceptance, Vec<usize>), ModelError> {
    settings.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let (n, k) = (spec.n(), spec.k());
    let graph = spec.graph;
    let assignment = spec.config.assignment().to_vec();
    let variance = spec.priors.alpha_variance;
    let degree: Vec<f64> = (0..n).map(|i| graph.neighbors(i).len() as f64).collect();

    let tracked: Vec<usize> = index::sample(&mut rng, n, n.min(3)).into_vec();

    let mut phi = vec![0.0; n];
    let mut alpha: Vec<f64> = (0..k)
        .map(|j| {
            let e_sum: f64 = spec.members[j].iter().map(|&i| spec.e[i]).sum();
            (spec.y_sum[j].max(0.5) / e_sum).ln()
        })
        .collect();
    let mut tau = 1.0;
    // base[i] = E_i exp(phi_i); exp_alpha[j] = exp(alpha_j)
    let mut base: Vec<f64> = spec.e.clone();
    let mut exp_alpha: Vec<f64> = alpha.iter().map(|a| a.exp()).collect();

    let mut phi_ad = Adapter::new(n, settings.phi_scale);
    let mut alpha_ad = Adapter::new(k, settings.alpha_scale);
    let mut shift_ad = Adapter::new(k, settings.alpha_scale);
    let target = settings.target_acceptance;

    let total = settings.burnin + settings.keep * settings.thin;
    let mut draws = Draws {
        alpha: Vec::with_capacity(settings.keep),
        phi: Vec::with_capacity(settings.keep),
        tau: Vec::with_capacity(settings.keep),
    };

    for iter in 0..total {
        let adapt = (iter < settings.burnin).then(|| (1.0 / (iter as f64 + 1.0).powf(0.6), target));

        for i in 0..n {
            let step: f64 = rng.sample(StandardNormal);
            let proposal = phi[i] + phi_ad.scale(i) * step;
            let neighbor_sum: f64 = graph.neighbors(i).iter().map(|&j| phi[j]).sum();
            let new_base = spec.e[i] * proposal.exp();
            let ea = exp_alpha[assignment[i]];
            let delta = proposal - phi[i];
            let log_ratio = spec.y[i] as f64 * delta - (new_base - base[i]) * ea
                - tau / 2.0 * (degree[i] * (proposal * proposal - phi[i] * phi[i]) - 2.0 * delta * neighbor_sum);
            let ok = log_ratio.is_finite() && new_base.is_finite() && accept(&mut rng, log_ratio);
            if ok {
                phi[i] = proposal;
                base[i] = new_base;
            }
            phi_ad.record(i, ok, adapt);
        }

        for j in 0..k {
            let s: f64 = spec.members[j].iter().map(|&i| base[i]).sum();
            let step: f64 = rng.sample(StandardNormal);
            let proposal = alpha[j] + alpha_ad.scale(j) * step;
            let new_exp = proposal.exp();
            let log_ratio = spec.y_sum[j] * (proposal - alpha[j]) - s * (new_exp - exp_alpha[j])
                - (proposal * proposal - alpha[j] * alpha[j]) / (2.0 * variance);
            let ok = log_ratio.is_finite() && new_exp.is_finite() && accept(&mut rng, log_ratio);
            if ok {
                alpha[j] = proposal;
                exp_alpha[j] = new_exp;
            }
            alpha_ad.record(j, ok, adapt);
        }

        if k > 1 {
            for j in 0..k {
                let step: f64 = rng.sample(StandardNormal);
                let d = shift_ad.scale(j) * step;
                let edge_change: f64 = spec.boundary[j]
                    .iter()
                    .map(|&(inside, outside)| d * d - 2.0 * d * (phi[inside] - phi[outside]))
                    .sum();
                let log_ratio = -((alpha[j] + d).powi(2) - alpha[j] * alpha[j]) / (2.0 * variance) - tau / 2.0 * edge_change;
                let ok = log_ratio.is_finite() && accept(&mut rng, log_ratio);
                if ok {
                    alpha[j] += d;
                    exp_alpha[j] = alpha[j].exp();
                    for &i in &spec.members[j] {
                        phi[i] -= d;
                    }
                }
                shift_ad.record(j, ok, adapt);
            }
        }

        let mean = phi.iter().sum::<f64>() / n as f64;
        for p in &mut phi {
            *p -= mean;
        }
        for (a, ea) in alpha.iter_mut().zip(&mut exp_alpha) {
            *a += mean;
            *ea = a.exp();
        }
        for i in 0..n {
            base[i] = spec.e[i] * phi[i].exp();
        }

        tau = sample_tau(spec, &phi, &mut rng);

        let finite = tau.is_finite()
            && tau > 0.0
            && alpha.iter().all(|a| a.is_finite())
            && base.iter().all(|b| b.is_finite())
            && phi.iter().all(|p| p.is_finite());
        if !finite {
            return Err(ModelError::Divergent(iter));
        }

        if iter >= settings.burnin && (iter - settings.burnin + 1).is_multiple_of(settings.thin) {
            draws.alpha.push(alpha.clone());
            draws.phi.push(phi.clone());
            draws.tau.push(tau);
        }
    }

    let acceptance = Acceptance {
        phi: phi_ad.rate(),
        alpha: alpha_ad.rate(),
        shift: shift_ad.rate(),
    };
    Ok((draws, acceptance, tracked))
}
