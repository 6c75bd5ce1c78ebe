//! Independent reference implementations used to check the main crate.
//!
//! Nothing here depends on `arealclust`; every routine is the plainest
//! textbook version of the computation, favouring clarity over speed.

/// One merge of the reference clustering: the two member sets joined and the
/// linkage value at which they merged.
#[derive(Debug, Clone, PartialEq)]
pub struct RefMerge {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefLinkage {
    Single,
    Centroid,
    Ward,
}

fn sq_euclid(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Unconstrained agglomerative clustering with Lance-Williams updates on a
/// full dissimilarity matrix.
///
/// Single linkage works on Euclidean distances. Centroid linkage works on
/// squared centroid distances and Ward on the increase in error sum of
/// squares; both heights are reported on the scale the main crate uses
/// (Euclidean centroid distance, raw ESS increase).
pub fn lance_williams(points: &[Vec<f64>], method: RefLinkage) -> Vec<RefMerge> {
    let n = points.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let s = sq_euclid(&points[i], &points[j]);
            d[i][j] = match method {
                RefLinkage::Single => s.sqrt(),
                RefLinkage::Centroid => s,
                // ESS increase of two singletons
                RefLinkage::Ward => s / 2.0,
            };
        }
    }
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for _ in 1..n {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..n {
            if members[i].is_none() {
                continue;
            }
            for j in (i + 1)..n {
                if members[j].is_some() && d[i][j] < best.0 {
                    best = (d[i][j], i, j);
                }
            }
        }
        let (h, i, j) = best;
        let mi = members[i].take().unwrap();
        let mj = members[j].take().unwrap();
        let (ni, nj) = (mi.len() as f64, mj.len() as f64);
        for k in 0..n {
            if k == i || k == j || members[k].is_none() {
                continue;
            }
            let nk = members[k].as_ref().unwrap().len() as f64;
            let v = match method {
                RefLinkage::Single => d[k][i].min(d[k][j]),
                RefLinkage::Centroid => {
                    (ni * d[k][i] + nj * d[k][j]) / (ni + nj) - ni * nj * d[i][j] / ((ni + nj) * (ni + nj))
                }
                RefLinkage::Ward => ((ni + nk) * d[k][i] + (nj + nk) * d[k][j] - nk * d[i][j]) / (ni + nj + nk),
            };
            d[k][i] = v;
            d[i][k] = v;
        }
        let height = match method {
            RefLinkage::Centroid => h.max(0.0).sqrt(),
            _ => h,
        };
        let mut union = mi.clone();
        union.extend(&mj);
        union.sort_unstable();
        merges.push(RefMerge { a: mi, b: mj, height });
        members[i] = Some(union);
    }
    merges
}

/// Rand index by enumerating every unordered pair.
pub fn rand_by_pairs(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut agree = 0u64;
    let mut total = 0u64;
    for i in 0..n {
        for j in (i + 1)..n {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / total as f64
}

/// Number of connected components by union-find.
pub fn count_components(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut uf = UnionFind::new(n);
    for &(a, b) in edges {
        uf.union(a, b);
    }
    (0..n).filter(|&i| uf.find(i) == i).count()
}

/// Whether `members` induce a connected subgraph, by union-find over the
/// edges with both ends inside.
pub fn induced_connected(n: usize, edges: &[(usize, usize)], members: &[usize]) -> bool {
    let mut inside = vec![false; n];
    for &m in members {
        inside[m] = true;
    }
    let mut uf = UnionFind::new(n);
    for &(a, b) in edges {
        if inside[a] && inside[b] {
            uf.union(a, b);
        }
    }
    let root = uf.find(members[0]);
    members.iter().all(|&m| uf.find(m) == root)
}

pub struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    pub fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// One-sample Kolmogorov-Smirnov statistic against a continuous CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value of a KS statistic `d` from `n` samples, using
/// Stephens' small-sample correction.
pub fn ks_pvalue(n: usize, d: f64) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // the alternating tail series converges slowly here; use the theta form of the CDF
        let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let cdf: f64 = (1..=20).map(|k| ((2 * k - 1) as f64).powi(2) * c).map(f64::exp).sum::<f64>()
            * (2.0 * std::f64::consts::PI).sqrt()
            / lambda;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

/// `ln(y!)` by direct summation.
pub fn ln_factorial(y: u64) -> f64 {
    (2..=y).map(|v| (v as f64).ln()).sum()
}

/// Poisson log-pmf evaluated term by term.
pub fn poisson_ln_pmf(y: u64, mean: f64) -> f64 {
    y as f64 * mean.ln() - mean - ln_factorial(y)
}

/// Median by sorting, averaging the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}
