use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use arealclust::eval::{rand_index, rmse};
use arealclust::gmrf::GmrfSampler;
use arealclust::graph::{adjacency_from_polygons, AreaGraph, PolygonOptions};
use arealclust::risk::CountPanel;
use arealclust::sim::{generate, generate_with, leroux_precision, SimScenario, Template, TemplateSpec};
use arealclust::ClusterConfig;

fn grid_geojson(rows: usize, cols: usize) -> String {
    let features: Vec<String> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| {
            let (x, y) = (c as f64, r as f64);
            format!(
                r#"{{"type":"Feature","properties":{{"id":"r{r}c{c}"}},"geometry":{{"type":"Polygon","coordinates":[[[{x},{y}],[{x1},{y}],[{x1},{y1}],[{x},{y1}],[{x},{y}]]]}}}}"#,
                x1 = x + 1.0,
                y1 = y + 1.0
            )
        })
        .collect();
    format!(r#"{{"type":"FeatureCollection","features":[{}]}}"#, features.join(","))
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> AreaGraph {
    let edges: Vec<(usize, usize)> = (0..2 * n)
        .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
        .filter(|(a, b)| a != b)
        .collect();
    AreaGraph::new((0..n).map(|i| i.to_string()).collect(), edges).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let k = rng.random_range(1..=n);
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

fn panel(y: Vec<Vec<u64>>, e: Vec<Vec<f64>>) -> CountPanel {
    let n = y[0].len();
    let periods = (0..y.len()).map(|t| format!("p{t}")).collect();
    CountPanel::new((0..n).map(|i| i.to_string()).collect(), periods, "p0", y, e).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn polygon_grid_has_rook_edge_count(rows in 1usize..6, cols in 1usize..6) {
        let g = adjacency_from_polygons(grid_geojson(rows, cols).as_bytes(), &PolygonOptions::default()).unwrap();
        prop_assert_eq!(g.edges().len(), rows * (cols - 1) + cols * (rows - 1));
        let grid = AreaGraph::grid(rows, cols);
        prop_assert_eq!(g.edges(), grid.edges());
    }

    #[test]
    fn adjacency_is_symmetric_and_irreflexive(n in 1usize..50, seed: u64) {
        let g = random_graph(&mut ChaCha8Rng::seed_from_u64(seed), n);
        for i in 0..n {
            prop_assert!(!g.neighbors(i).contains(&i));
            for &j in g.neighbors(i) {
                prop_assert!(g.neighbors(j).contains(&i));
            }
        }
    }

    #[test]
    fn whole_graph_contiguity_is_connectivity(n in 1usize..50, seed: u64) {
        let g = random_graph(&mut ChaCha8Rng::seed_from_u64(seed), n);
        let all: Vec<usize> = (0..n).collect();
        prop_assert_eq!(g.is_contiguous(&all).unwrap(), oracle::count_components(n, g.edges()) == 1);
        prop_assert_eq!(g.n_components(), oracle::count_components(n, g.edges()));
    }

    #[test]
    fn psi_monotone_in_observed_antitone_in_expected(
        n in 1usize..10, seed: u64, unit in 0usize..10, bump in 1u64..20, scale in 1.01f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = unit % n;
        let y: Vec<Vec<u64>> = (0..3).map(|_| (0..n).map(|_| rng.random_range(0..30)).collect()).collect();
        let e: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.random_range(1.0..20.0)).collect()).collect();
        let base = panel(y.clone(), e.clone()).build_psi(0.5).unwrap();

        let mut more_y = y.clone();
        more_y[1][unit] += bump;
        let up = panel(more_y, e.clone()).build_psi(0.5).unwrap();
        let mut more_e = e.clone();
        more_e[2][unit] *= scale;
        let down = panel(y, more_e).build_psi(0.5).unwrap();
        for i in 0..n {
            for j in 0..2 {
                prop_assert!(up.row(i)[j] >= base.row(i)[j]);
                prop_assert!(down.row(i)[j] <= base.row(i)[j]);
            }
        }
    }

    #[test]
    fn zero_adjust_irrelevant_without_zeros(n in 1usize..10, seed: u64, adjust in 0.01f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<Vec<u64>> = (0..2).map(|_| (0..n).map(|_| rng.random_range(1..30)).collect()).collect();
        let e: Vec<Vec<f64>> = (0..2).map(|_| (0..n).map(|_| rng.random_range(1.0..20.0)).collect()).collect();
        let p = panel(y, e);
        prop_assert_eq!(p.build_psi(0.5).unwrap(), p.build_psi(adjust).unwrap());
    }

    #[test]
    fn rand_matches_pair_enumeration(n in 1usize..30, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_labels(&mut rng, n), random_labels(&mut rng, n));
        let (ca, cb) = (ClusterConfig::from_labels(&a), ClusterConfig::from_labels(&b));
        let r = rand_index(&ca, &cb).unwrap();
        prop_assert_eq!(r, oracle::rand_by_pairs(&a, &b));
        prop_assert_eq!(r, rand_index(&cb, &ca).unwrap());
    }

    #[test]
    fn rand_ignores_relabelling(n in 1usize..30, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_labels(&mut rng, n), random_labels(&mut rng, n));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let relabelled: Vec<usize> = a.iter().map(|&l| perm[l] + 7).collect();
        let r = rand_index(&ClusterConfig::from_labels(&a), &ClusterConfig::from_labels(&b)).unwrap();
        let s = rand_index(&ClusterConfig::from_labels(&relabelled), &ClusterConfig::from_labels(&b)).unwrap();
        prop_assert_eq!(r, s);
    }

    #[test]
    fn rmse_ignores_common_permutation(n in 1usize..40, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        let truth: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let pe: Vec<f64> = order.iter().map(|&i| est[i]).collect();
        let pt: Vec<f64> = order.iter().map(|&i| truth[i]).collect();
        let (a, b) = (rmse(&est, &truth).unwrap(), rmse(&pe, &pt).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
    }
}

#[test]
fn independent_prior_columns_are_weakly_correlated() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let y: Vec<Vec<u64>> = (0..2).map(|_| (0..100).map(|_| rng.random_range(5..50)).collect()).collect();
    let e = vec![vec![20.0; 100]; 2];
    let r = panel(y, e).prior_correlations(0.5).unwrap();
    assert!(r[0].unwrap().abs() < 0.3, "{r:?}");
}

fn halves(rows: usize, cols: usize, m: f64) -> TemplateSpec {
    TemplateSpec {
        background_mean: 0.0,
        blocks: vec![arealclust::sim::Block { rows: [0, rows], cols: [cols / 2, cols], mean: m }],
        singletons: Vec::new(),
    }
}

#[test]
fn generation_is_reproducible() {
    let g = AreaGraph::grid(6, 6);
    let s = SimScenario::new(Template::quadrants(6, 6, [0.0, 0.5, -0.5, 0.2]), 1.0, 99);
    assert_eq!(generate(&g, &s).unwrap(), generate(&g, &s).unwrap());
    let other = SimScenario { seed: 100, ..s.clone() };
    assert_ne!(generate(&g, &s).unwrap().true_phi, generate(&g, &other).unwrap().true_phi);
}

#[test]
fn phi_mean_converges_to_scaled_template() {
    let (rows, cols, reps) = (8, 8, 200);
    let g = AreaGraph::grid(rows, cols);
    let template = Template::quadrants(rows, cols, [0.0, 0.6, -0.6, 0.3]);
    let c = 1.5;
    let sampler = GmrfSampler::new(&leroux_precision(&g, 0.9, 1.0).unwrap()).unwrap();
    let members = template.config.members();
    let mut block_means = vec![Vec::with_capacity(reps); members.len()];
    for r in 0..reps {
        let s = SimScenario::new(template.clone(), c, r as u64);
        let d = generate_with(&g, &s, &sampler).unwrap();
        for (j, m) in members.iter().enumerate() {
            block_means[j].push(m.iter().map(|&i| d.true_phi[i]).sum::<f64>() / m.len() as f64);
        }
    }
    for (j, v) in block_means.iter().enumerate() {
        let mean = v.iter().sum::<f64>() / reps as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let se = sd / (reps as f64).sqrt();
        let target = c * template.means[j];
        assert!((mean - target).abs() < 3.0 * se, "block {j}: {mean} vs {target} (se {se})");
    }
}

#[test]
fn zero_noise_priors_replicate_study_risk() {
    let g = AreaGraph::grid(12, 12);
    let mut s = SimScenario::new(Template::flat(144), 0.0, 5);
    s.noise = vec![0.0, 0.0, 0.0];
    let d = generate(&g, &s).unwrap();
    let mean: Vec<f64> = d.true_risk.iter().map(|r| 100.0 * r).collect();
    let var_sum: f64 = mean.iter().sum::<f64>() * 2.0;
    let study = d.panel.study_observed();
    for p in d.panel.prior_periods() {
        let prior = d.panel.observed(p).unwrap();
        // difference of two independent Poisson draws at the same mean
        let diff: f64 = prior.iter().zip(study).map(|(&a, &b)| a as f64 - b as f64).sum();
        assert!(diff.abs() < 4.0 * var_sum.sqrt(), "{p}: {diff}");
        let z2: f64 = prior
            .iter()
            .zip(study)
            .zip(&mean)
            .map(|((&a, &b), m)| (a as f64 - b as f64).powi(2) / (2.0 * m))
            .sum();
        // chi-square with 144 degrees of freedom
        assert!((z2 - 144.0).abs() < 5.0 * (2.0 * 144f64).sqrt(), "{p}: {z2}");
    }
}

#[test]
fn half_grid_risk_ratio_matches_template() {
    let (rows, cols, m) = (10, 10, 0.5);
    let g = AreaGraph::grid(rows, cols);
    let template = Template::from_spec(rows, cols, &halves(rows, cols, m)).unwrap();
    let sampler = GmrfSampler::new(&leroux_precision(&g, 0.9, 1.0).unwrap()).unwrap();
    let right: Vec<bool> = (0..rows * cols).map(|i| i % cols >= cols / 2).collect();
    let mut log_ratios = Vec::new();
    for r in 0..200 {
        let d = generate_with(&g, &SimScenario::new(template.clone(), 1.0, r), &sampler).unwrap();
        let sir = d.panel.sir("study").unwrap();
        let side = |want: bool| {
            let v: Vec<f64> = sir.iter().zip(&right).filter(|(_, &s)| s == want).map(|(v, _)| *v).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        log_ratios.push((side(true) / side(false)).ln());
    }
    let mean = log_ratios.iter().sum::<f64>() / log_ratios.len() as f64;
    let sd = (log_ratios.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (log_ratios.len() - 1) as f64).sqrt();
    let se = sd / (log_ratios.len() as f64).sqrt();
    assert!((mean - m).abs() < 3.0 * se + 0.02, "log ratio {mean} vs {m} (se {se})");
}

#[test]
fn prior_correlation_falls_with_noise() {
    let g = AreaGraph::grid(12, 12);
    let sampler = GmrfSampler::new(&leroux_precision(&g, 0.9, 1.0).unwrap()).unwrap();
    let template = Template::quadrants(12, 12, [0.0, 0.6, -0.6, 0.3]);
    let mut sums = [0.0; 3];
    let reps = 50;
    for r in 0..reps {
        let s = SimScenario::new(template.clone(), 1.0, 1000 + r);
        let d = generate_with(&g, &s, &sampler).unwrap();
        let corr = d.panel.prior_correlations(0.5).unwrap();
        for (acc, c) in sums.iter_mut().zip(&corr) {
            *acc += c.unwrap() / reps as f64;
        }
    }
    assert!(sums[0] > sums[1] && sums[1] > sums[2], "{sums:?}");
}
