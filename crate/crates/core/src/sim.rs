//! Simulated clustered disease data.
//!
//! Log-risks are drawn from a Leroux CAR field whose mean is a piecewise
//! constant template scaled by `C`. Study counts are Poisson at that risk;
//! each prior period adds independent uniform noise to the log-risk before
//! drawing its counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterConfig;
use crate::gmrf::{GmrfError, GmrfSampler, SparsePrecision};
use crate::graph::AreaGraph;
use crate::risk::{CountPanel, RiskError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("Leroux rho must lie in [0, 1), got {0}")]
    BadRho(f64),
    #[error("precision tau must be positive, got {0}")]
    BadTau(f64),
    #[error("multiplier C must be non-negative, got {0}")]
    BadMultiplier(f64),
    #[error("noise half-widths must be non-negative and non-decreasing: {0:?}")]
    BadNoise(Vec<f64>),
    #[error("template: {0}")]
    Template(String),
    #[error("expected counts: {0}")]
    Expected(String),
    #[error("Poisson mean {0} out of range")]
    PoissonMean(f64),
    #[error(transparent)]
    Gmrf(#[from] GmrfError),
    #[error(transparent)]
    Risk(#[from] RiskError),
}

/// `tau (rho (diag(W 1) - W) + (1 - rho) I)`.
pub fn leroux_precision(graph: &AreaGraph, rho: f64, tau: f64) -> Result<SparsePrecision, SimError> {
    if !(0.0..1.0).contains(&rho) {
        return Err(SimError::BadRho(rho));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(SimError::BadTau(tau));
    }
    let diag = graph
        .neighbor_counts()
        .as_slice()
        .iter()
        .map(|&c| tau * (rho * c as f64 + 1.0 - rho))
        .collect();
    Ok(SparsePrecision::from_parts(
        diag,
        graph.edges().iter().map(|&(i, j)| (i, j, -tau * rho)),
    ))
}

/// Rectangle of lattice cells `rows[0]..rows[1]` x `cols[0]..cols[1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub rows: [usize; 2],
    pub cols: [usize; 2],
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Singleton {
    pub row: usize,
    pub col: usize,
    pub mean: f64,
}

/// Declarative lattice template: a background cluster with rectangular
/// blocks and single cells painted over it in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TemplateSpec {
    pub background_mean: f64,
    pub blocks: Vec<Block>,
    pub singletons: Vec<Singleton>,
}

impl TemplateSpec {
    /// Four quadrant blocks; needs at least two rows and two columns.
    pub fn quadrants(rows: usize, cols: usize, means: [f64; 4]) -> Self {
        Self {
            background_mean: means[0],
            blocks: vec![
                Block { rows: [0, rows / 2], cols: [cols / 2, cols], mean: means[1] },
                Block { rows: [rows / 2, rows], cols: [0, cols / 2], mean: means[2] },
                Block { rows: [rows / 2, rows], cols: [cols / 2, cols], mean: means[3] },
            ],
            singletons: Vec::new(),
        }
    }
}

/// A contiguous partition with one mean per cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub config: ClusterConfig,
    pub means: Vec<f64>,
}

impl Template {
    pub fn new(graph: &AreaGraph, config: ClusterConfig, means: Vec<f64>) -> Result<Self, SimError> {
        if config.n() != graph.n() {
            return Err(SimError::Template(format!("{} units for a {}-unit graph", config.n(), graph.n())));
        }
        if means.len() != config.k() {
            return Err(SimError::Template(format!("{} means for {} clusters", means.len(), config.k())));
        }
        config
            .check_contiguous(graph)
            .map_err(|e| SimError::Template(e.to_string()))?;
        Ok(Self { config, means })
    }

    /// One cluster, mean zero.
    pub fn flat(n: usize) -> Self {
        Self {
            config: ClusterConfig::single_cluster(n),
            means: vec![0.0; usize::from(n > 0)],
        }
    }

    /// Four quadrant blocks on a `rows x cols` lattice, means given in
    /// top-left, top-right, bottom-left, bottom-right order.
    pub fn quadrants(rows: usize, cols: usize, means: [f64; 4]) -> Self {
        Self::from_spec(rows, cols, &TemplateSpec::quadrants(rows, cols, means)).expect("quadrants are contiguous")
    }

    /// Paints the spec onto a lattice; every painted region (including what
    /// remains of the background) must be contiguous.
    pub fn from_spec(rows: usize, cols: usize, spec: &TemplateSpec) -> Result<Self, SimError> {
        let mut paint = vec![0usize; rows * cols];
        let mut means = vec![spec.background_mean];
        for b in &spec.blocks {
            if b.rows[0] >= b.rows[1] || b.cols[0] >= b.cols[1] || b.rows[1] > rows || b.cols[1] > cols {
                return Err(SimError::Template(format!("block {b:?} outside a {rows}x{cols} lattice")));
            }
            let label = means.len();
            means.push(b.mean);
            for r in b.rows[0]..b.rows[1] {
                for c in b.cols[0]..b.cols[1] {
                    paint[r * cols + c] = label;
                }
            }
        }
        for s in &spec.singletons {
            if s.row >= rows || s.col >= cols {
                return Err(SimError::Template(format!("singleton {s:?} outside a {rows}x{cols} lattice")));
            }
            paint[s.row * cols + s.col] = means.len();
            means.push(s.mean);
        }
        let config = ClusterConfig::from_labels(&paint);
        // canonical relabelling drops overwritten labels; carry means across
        let mut ordered = vec![0.0; config.k()];
        for (i, &l) in config.assignment().iter().enumerate() {
            ordered[l] = means[paint[i]];
        }
        Self::new(&AreaGraph::grid(rows, cols), config, ordered)
    }

    /// Template mean for each unit.
    pub fn unit_means(&self) -> Vec<f64> {
        self.config.assignment().iter().map(|&l| self.means[l]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub template: Template,
    pub c: f64,
    pub rho: f64,
    pub tau: f64,
    pub expected: Vec<f64>,
    /// Half-widths of the uniform log-risk noise for each prior period,
    /// nearest period first.
    pub noise: Vec<f64>,
    pub seed: u64,
}

impl SimScenario {
    pub const DEFAULT_RHO: f64 = 0.9;
    pub const DEFAULT_TAU: f64 = 1.0;
    pub const DEFAULT_EXPECTED: f64 = 100.0;
    pub const DEFAULT_NOISE: [f64; 3] = [0.1, 0.15, 0.2];

    /// Default Leroux parameters, constant expected counts of 100 and the
    /// three default noise levels.
    pub fn new(template: Template, c: f64, seed: u64) -> Self {
        let n = template.config.n();
        Self {
            template,
            c,
            rho: Self::DEFAULT_RHO,
            tau: Self::DEFAULT_TAU,
            expected: vec![Self::DEFAULT_EXPECTED; n],
            noise: Self::DEFAULT_NOISE.to_vec(),
            seed,
        }
    }

    fn validate(&self, graph: &AreaGraph) -> Result<(), SimError> {
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(SimError::BadMultiplier(self.c));
        }
        let ok = self.noise.iter().all(|&w| w >= 0.0 && w.is_finite()) && self.noise.windows(2).all(|w| w[0] <= w[1]);
        if !ok {
            return Err(SimError::BadNoise(self.noise.clone()));
        }
        if self.expected.len() != graph.n() {
            return Err(SimError::Expected(format!("{} values for {} units", self.expected.len(), graph.n())));
        }
        if self.expected.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(SimError::Expected("values must be positive".into()));
        }
        Template::new(graph, self.template.config.clone(), self.template.means.clone())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    /// Study period `"study"` plus prior periods `"prior1"` (nearest) onwards.
    pub panel: CountPanel,
    pub true_phi: Vec<f64>,
    pub true_risk: Vec<f64>,
    pub truth: ClusterConfig,
}

pub const STUDY_PERIOD: &str = "study";

pub fn prior_label(t: usize) -> String {
    format!("prior{}", t + 1)
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> Result<u64, SimError> {
    let dist = Poisson::new(mean).map_err(|_| SimError::PoissonMean(mean))?;
    Ok(dist.sample(rng) as u64)
}

/// Draws one dataset from the scenario.
pub fn generate(graph: &AreaGraph, scenario: &SimScenario) -> Result<SimDataset, SimError> {
    scenario.validate(graph)?;
    let precision = leroux_precision(graph, scenario.rho, scenario.tau)?;
    let sampler = GmrfSampler::new(&precision)?;
    generate_with(graph, scenario, &sampler)
}

/// As [`generate`], reusing a factorised sampler for the scenario's Leroux
/// precision.
pub fn generate_with(graph: &AreaGraph, scenario: &SimScenario, sampler: &GmrfSampler) -> Result<SimDataset, SimError> {
    scenario.validate(graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mean: Vec<f64> = scenario.template.unit_means().iter().map(|m| scenario.c * m).collect();
    let phi = sampler.sample(&mut rng, &mean)?;
    let e = &scenario.expected;

    let study: Vec<u64> = phi
        .iter()
        .zip(e)
        .map(|(p, e)| poisson(&mut rng, e * p.exp()))
        .collect::<Result<_, _>>()?;
    let mut observed = Vec::with_capacity(scenario.noise.len() + 1);
    for &w in &scenario.noise {
        let counts = phi
            .iter()
            .zip(e)
            .map(|(p, e)| {
                let u = if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
                poisson(&mut rng, e * (p + u).exp())
            })
            .collect::<Result<Vec<_>, _>>()?;
        observed.push(counts);
    }
    observed.push(study);

    let mut periods: Vec<String> = (0..scenario.noise.len()).map(prior_label).collect();
    periods.push(STUDY_PERIOD.to_string());
    let expected = vec![e.clone(); periods.len()];
    let panel = CountPanel::new(graph.ids().to_vec(), periods, STUDY_PERIOD, observed, expected)?;
    Ok(SimDataset {
        panel,
        true_risk: phi.iter().map(|p| p.exp()).collect(),
        true_phi: phi,
        truth: scenario.template.config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn rho_zero_is_scaled_identity() {
        let g = AreaGraph::grid(3, 3);
        let p = leroux_precision(&g, 0.0, 2.5).unwrap().to_dense();
        for (i, row) in p.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 2.5 } else { 0.0 });
            }
        }
    }

    #[test]
    fn path_precision_worked_example() {
        let g = AreaGraph::new(vec!["a".into(), "b".into(), "c".into()], [(0, 1), (1, 2)]).unwrap();
        let p = leroux_precision(&g, 0.5, 1.0).unwrap().to_dense();
        assert_eq!(p, vec![vec![1.0, -0.5, 0.0], vec![-0.5, 1.5, -0.5], vec![0.0, -0.5, 1.0]]);
        let m = DMatrix::from_fn(3, 3, |i, j| p[i][j]);
        assert!(m.cholesky().is_some());
    }

    #[test]
    fn rho_out_of_range() {
        let g = AreaGraph::grid(2, 2);
        assert!(matches!(leroux_precision(&g, 1.0, 1.0), Err(SimError::BadRho(_))));
        assert!(matches!(leroux_precision(&g, -0.1, 1.0), Err(SimError::BadRho(_))));
    }

    #[test]
    fn smallest_eigenvalue_bound() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let n = rng.random_range(2..25);
            let edges: Vec<(usize, usize)> = (0..n * 2)
                .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
                .filter(|(a, b)| a != b)
                .collect();
            let g = AreaGraph::new((0..n).map(|i| i.to_string()).collect(), edges).unwrap();
            let (rho, tau) = (rng.random_range(0.0..0.99), rng.random_range(0.1..5.0));
            let p = leroux_precision(&g, rho, tau).unwrap().to_dense();
            let m = DMatrix::from_fn(n, n, |i, j| p[i][j]);
            let min = m.symmetric_eigen().eigenvalues.min();
            assert!(min >= tau * (1.0 - rho) - 1e-9, "{min} < {}", tau * (1.0 - rho));
        }
    }

    #[test]
    fn template_from_spec() {
        let spec = TemplateSpec {
            background_mean: 0.0,
            blocks: vec![Block { rows: [0, 2], cols: [0, 2], mean: 1.0 }],
            singletons: vec![Singleton { row: 3, col: 3, mean: -1.0 }],
        };
        let t = Template::from_spec(4, 4, &spec).unwrap();
        assert_eq!(t.config.k(), 3);
        let m = t.unit_means();
        assert_eq!(m[0], 1.0);
        assert_eq!(m[15], -1.0);
        assert_eq!(m[3], 0.0);

        // a band across the middle splits the background in two
        let split = TemplateSpec {
            blocks: vec![Block { rows: [1, 2], cols: [0, 4], mean: 1.0 }],
            ..Default::default()
        };
        assert!(Template::from_spec(4, 4, &split).is_err());
    }

    #[test]
    fn quadrant_means() {
        let t = Template::quadrants(4, 4, [0.0, 0.6, -0.6, 0.3]);
        assert_eq!(t.config.k(), 4);
        let m = t.unit_means();
        assert_eq!((m[0], m[3], m[12], m[15]), (0.0, 0.6, -0.6, 0.3));
    }

    #[test]
    fn generation_is_reproducible_and_shaped() {
        let g = AreaGraph::grid(5, 5);
        let scenario = SimScenario::new(Template::quadrants(5, 5, [0.0, 0.5, -0.5, 0.2]), 1.0, 21);
        let a = generate(&g, &scenario).unwrap();
        let b = generate(&g, &scenario).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.panel.periods(), &["prior1", "prior2", "prior3", "study"]);
        assert_eq!(a.truth.k(), 4);
        for (r, p) in a.true_risk.iter().zip(&a.true_phi) {
            assert!((r.ln() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_validation() {
        let g = AreaGraph::grid(2, 2);
        let mut s = SimScenario::new(Template::flat(4), 0.0, 1);
        s.noise = vec![0.2, 0.1];
        assert!(matches!(generate(&g, &s), Err(SimError::BadNoise(_))));
        s.noise = vec![0.0, 0.0];
        assert!(generate(&g, &s).is_ok());
        s.c = -1.0;
        assert!(matches!(generate(&g, &s), Err(SimError::BadMultiplier(_))));
    }
}
