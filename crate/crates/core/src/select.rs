//! DIC computation and the sweep over candidate cluster counts.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::car::{self, McmcSettings, ModelError, ModelFit, ModelSpec, Priors};
use crate::cluster::{ClusterConfig, ClusterError, MergeTree};
use crate::graph::AreaGraph;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("empty k range")]
    EmptyRange,
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("every fit in the sweep failed; first error: {0}")]
    AllFailed(String),
    #[error("could not build worker pool: {0}")]
    Pool(String),
}

/// Where the deviance is evaluated for the `p_d` plug-in term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlugIn {
    /// Posterior mean of `phi_i + alpha_{c(i)}`.
    #[default]
    LinearPredictor,
    /// Posterior mean of the risk `R_i`.
    Risk,
}

/// Whether the `ln Y_i!` terms are kept in the deviance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DevianceConvention {
    #[default]
    Full,
    Kernel,
}

impl FromStr for PlugIn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear_predictor" | "eta" => Ok(PlugIn::LinearPredictor),
            "risk" => Ok(PlugIn::Risk),
            _ => Err(format!("unknown plug-in {s:?} (expected linear_predictor or risk)")),
        }
    }
}

impl fmt::Display for PlugIn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlugIn::LinearPredictor => "linear_predictor",
            PlugIn::Risk => "risk",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DicResult {
    pub k: usize,
    pub dbar: f64,
    pub pd: f64,
    pub dic: f64,
}

impl DicResult {
    fn new(k: usize, dbar: f64, plug: f64) -> Self {
        let pd = dbar - plug;
        Self { k, dbar, pd, dic: dbar + pd }
    }
}

/// Full Poisson deviance `-2 sum ln Poisson(Y_i; E_i exp(phi_i + alpha_{c(i)}))`.
pub fn deviance(spec: &ModelSpec<'_>, alpha: &[f64], phi: &[f64]) -> Result<f64, ModelError> {
    if alpha.len() != spec.k() || phi.len() != spec.n() {
        return Err(ModelError::ParamSize {
            got: alpha.len() + phi.len(),
            expected: spec.k() + spec.n(),
        });
    }
    Ok(car::poisson_deviance(spec, &spec.linear_predictor(alpha, phi)))
}

/// `DIC = Dbar + p_d` with `p_d = Dbar - D(plug-in)`.
pub fn dic(fit: &ModelFit, spec: &ModelSpec<'_>, plug_in: PlugIn, convention: DevianceConvention) -> DicResult {
    let offset = match convention {
        DevianceConvention::Full => 0.0,
        DevianceConvention::Kernel => -2.0 * spec.log_factorial_sum(),
    };
    let dbar = fit.deviance.iter().sum::<f64>() / fit.deviance.len() as f64 + offset;
    let eta: Vec<f64> = match plug_in {
        PlugIn::LinearPredictor => fit.eta_mean.clone(),
        PlugIn::Risk => fit.risk.iter().map(|r| r.mean.ln()).collect(),
    };
    let plug = car::poisson_deviance(spec, &eta) + offset;
    DicResult::new(fit.k, dbar, plug)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSettings {
    pub k_values: Vec<usize>,
    pub mcmc: McmcSettings,
    pub priors: Priors,
    pub plug_in: PlugIn,
    pub convention: DevianceConvention,
    pub near_tie_delta: f64,
    /// Worker threads; `None` uses the available parallelism.
    pub threads: Option<usize>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            k_values: Vec::new(),
            mcmc: McmcSettings::default(),
            priors: Priors::default(),
            plug_in: PlugIn::default(),
            convention: DevianceConvention::default(),
            near_tie_delta: 4.0,
            threads: None,
        }
    }
}

/// Default candidate range `1..=min(n, 100)`, clipped to reachable cuts.
pub fn default_k_values(tree: &MergeTree) -> Vec<usize> {
    (tree.min_clusters().max(1)..=tree.n().min(100)).collect()
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub config: ClusterConfig,
    pub fit: ModelFit,
    pub dic: DicResult,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    /// Successful fits sorted by `k`.
    pub entries: Vec<SweepEntry>,
    pub failures: Vec<(usize, String)>,
    pub selected_k: usize,
    pub near_ties: Vec<usize>,
}

impl SweepResult {
    pub fn curve(&self) -> Vec<DicResult> {
        self.entries.iter().map(|e| e.dic).collect()
    }

    pub fn selected(&self) -> &SweepEntry {
        self.entry(self.selected_k).expect("selected k has an entry")
    }

    pub fn entry(&self, k: usize) -> Option<&SweepEntry> {
        self.entries.iter().find(|e| e.dic.k == k)
    }
}

/// Argmin of DIC (smallest `k` on exact ties) and every `k` within `delta`
/// of the minimum.
pub fn select(curve: &[DicResult], delta: f64) -> Option<(usize, Vec<usize>)> {
    let best = curve
        .iter()
        .min_by(|a, b| a.dic.total_cmp(&b.dic).then(a.k.cmp(&b.k)))?;
    let near = curve.iter().filter(|d| d.dic - best.dic <= delta).map(|d| d.k).collect();
    Some((best.k, near))
}

/// Per-`k` chain seed derived from the sweep's base seed (SplitMix64 mix).
pub fn derive_seed(base: u64, k: usize) -> u64 {
    let mut z = base ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fits the model for every candidate `k`, scores each by DIC and selects
/// the minimiser. Individual fit failures are logged and excluded.
pub fn sweep(
    graph: &AreaGraph,
    observed: &[u64],
    expected: &[f64],
    tree: &MergeTree,
    settings: &SweepSettings,
) -> Result<SweepResult, SweepError> {
    let k_values: Vec<usize> = if settings.k_values.is_empty() {
        default_k_values(tree)
    } else {
        let mut ks = settings.k_values.clone();
        ks.sort_unstable();
        ks.dedup();
        ks
    };
    if k_values.is_empty() {
        return Err(SweepError::EmptyRange);
    }
    let configs: Vec<ClusterConfig> = k_values.iter().map(|&k| tree.cut(k)).collect::<Result<_, _>>()?;

    let run_one = |config: &ClusterConfig| -> Result<SweepEntry, String> {
        let k = config.k();
        let spec = ModelSpec::new(graph, config.clone(), observed.to_vec(), expected.to_vec(), settings.priors)
            .map_err(|e| e.to_string())?;
        let mcmc = McmcSettings {
            seed: derive_seed(settings.mcmc.seed, k),
            ..settings.mcmc
        };
        let fit = car::fit(&spec, &mcmc).map_err(|e| e.to_string())?;
        let dic = dic(&fit, &spec, settings.plug_in, settings.convention);
        if dic.pd < 0.0 {
            warn!("k = {k}: negative effective number of parameters ({:.3})", dic.pd);
        }
        Ok(SweepEntry {
            config: config.clone(),
            fit,
            dic,
        })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.threads.unwrap_or(0))
        .build()
        .map_err(|e| SweepError::Pool(e.to_string()))?;
    let outcomes: Vec<(usize, Result<SweepEntry, String>)> =
        pool.install(|| configs.par_iter().map(|c| (c.k(), run_one(c))).collect());

    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (k, outcome) in outcomes {
        match outcome {
            Ok(entry) => entries.push(entry),
            Err(msg) => {
                warn!("fit for k = {k} failed: {msg}");
                failures.push((k, msg));
            }
        }
    }
    entries.sort_by_key(|e| e.dic.k);
    let curve: Vec<DicResult> = entries.iter().map(|e| e.dic).collect();
    let Some((selected_k, near_ties)) = select(&curve, settings.near_tie_delta) else {
        return Err(SweepError::AllFailed(failures.first().map(|f| f.1.clone()).unwrap_or_default()));
    };
    Ok(SweepResult {
        entries,
        failures,
        selected_k,
        near_ties,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::car::{Acceptance, Draws};

    fn one_unit(y: u64, e: f64) -> (AreaGraph, Vec<u64>, Vec<f64>) {
        (AreaGraph::new(vec!["u".into()], []).unwrap(), vec![y], vec![e])
    }

    #[test]
    fn worked_deviances() {
        let cases = [(1, 1.0, 0.0, 2.0), (3, 1.0, 3f64.ln(), 2.9918), (0, 2.0, 0.0, 4.0)];
        for (y, e, eta, want) in cases {
            let (g, yv, ev) = one_unit(y, e);
            let spec = ModelSpec::new(&g, ClusterConfig::single_cluster(1), yv, ev, Priors::default()).unwrap();
            let d = deviance(&spec, &[eta], &[0.0]).unwrap();
            assert!((d - want).abs() < 1e-4, "{y} {e}: {d}");
        }
        // saturated case by direct pmf: -2 ln(27 e^-3 / 6)
        let (g, yv, ev) = one_unit(3, 1.0);
        let spec = ModelSpec::new(&g, ClusterConfig::single_cluster(1), yv, ev, Priors::default()).unwrap();
        let exact = -2.0 * (27.0 * (-3f64).exp() / 6.0).ln();
        assert!((deviance(&spec, &[3f64.ln()], &[0.0]).unwrap() - exact).abs() < 1e-12);
    }

    #[test]
    fn degenerate_chain_has_zero_pd() {
        let g = AreaGraph::grid(2, 2);
        let spec = ModelSpec::new(&g, ClusterConfig::single_cluster(4), vec![3, 4, 5, 6], vec![4.0; 4], Priors::default()).unwrap();
        let phi = vec![0.1, -0.1, 0.2, -0.2];
        let draws = Draws {
            alpha: vec![vec![0.05]; 1000],
            phi: vec![phi; 1000],
            tau: vec![2.0; 1000],
        };
        let acc = Acceptance { phi: 0.4, alpha: 0.4, shift: 0.0 };
        let fit = ModelFit::from_draws(&spec, &draws, acc, &[0]);
        let d = dic(&fit, &spec, PlugIn::LinearPredictor, DevianceConvention::Full);
        assert!(d.pd.abs() < 1e-9, "{}", d.pd);
        assert_eq!(d.dic, d.dbar + d.pd);
        let r = dic(&fit, &spec, PlugIn::Risk, DevianceConvention::Full);
        assert!(r.pd.abs() < 1e-9);
    }

    #[test]
    fn kernel_convention_shifts_by_constant() {
        let g = AreaGraph::grid(2, 2);
        let spec = ModelSpec::new(&g, ClusterConfig::single_cluster(4), vec![3, 4, 5, 6], vec![4.0; 4], Priors::default()).unwrap();
        let draws = Draws {
            alpha: (0..1000).map(|i| vec![0.01 * (i % 7) as f64]).collect(),
            phi: (0..1000).map(|i| vec![0.02 * (i % 3) as f64 - 0.02, 0.0, 0.02, -0.02 * (i % 3) as f64]).collect(),
            tau: vec![1.0; 1000],
        };
        let fit = ModelFit::from_draws(&spec, &draws, Acceptance { phi: 0.5, alpha: 0.5, shift: 0.5 }, &[]);
        let full = dic(&fit, &spec, PlugIn::LinearPredictor, DevianceConvention::Full);
        let kernel = dic(&fit, &spec, PlugIn::LinearPredictor, DevianceConvention::Kernel);
        let shift = 2.0 * spec.log_factorial_sum();
        assert!((full.dbar - kernel.dbar - shift).abs() < 1e-9);
        assert!((full.pd - kernel.pd).abs() < 1e-9);
    }

    #[test]
    fn selection_and_near_ties() {
        let curve: Vec<DicResult> = [(1, 110.0), (2, 101.0), (3, 100.0), (4, 103.5), (5, 104.5)]
            .iter()
            .map(|&(k, dic)| DicResult { k, dbar: dic, pd: 0.0, dic })
            .collect();
        let (k, near) = select(&curve, 4.0).unwrap();
        assert_eq!(k, 3);
        assert_eq!(near, vec![2, 3, 4]);
        assert!(select(&[], 4.0).is_none());
    }

    #[test]
    fn derived_seeds_differ_per_k() {
        let seeds: std::collections::BTreeSet<u64> = (1..=100).map(|k| derive_seed(7, k)).collect();
        assert_eq!(seeds.len(), 100);
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn single_candidate_sweep_selects_it() {
        let g = AreaGraph::grid(3, 3);
        let psi = crate::risk::PriorRiskMatrix::from_rows((0..9).map(|i| vec![i as f64 * 0.1]).collect());
        let tree = crate::cluster::agglomerate(&g, &psi, crate::cluster::LinkageMethod::Centroid, 0).unwrap();
        let settings = SweepSettings {
            k_values: vec![5],
            mcmc: McmcSettings { burnin: 200, keep: 1000, ..Default::default() },
            threads: Some(1),
            ..Default::default()
        };
        let y = vec![10, 12, 9, 14, 11, 10, 13, 8, 12];
        let result = sweep(&g, &y, &[10.0; 9], &tree, &settings).unwrap();
        assert_eq!(result.selected_k, 5);
        assert_eq!(result.near_ties, vec![5]);
        assert_eq!(result.selected().config.k(), 5);

        let bad = SweepSettings { k_values: vec![10], ..settings };
        assert!(matches!(sweep(&g, &y, &[10.0; 9], &tree, &bad), Err(SweepError::Cluster(_))));
    }
}
