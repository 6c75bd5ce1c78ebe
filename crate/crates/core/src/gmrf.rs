//! Sparse symmetric precision matrices and exact sampling from Gaussian
//! Markov random fields.
//!
//! Factorisation uses an envelope (profile) Cholesky after a reverse
//! Cuthill-McKee reordering, which keeps fill confined to a narrow band for
//! lattice-like adjacency structures.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GmrfError {
    #[error("precision matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("mean has length {0}, precision has dimension {1}")]
    DimensionMismatch(usize, usize),
}

/// Symmetric sparse matrix: a dense diagonal plus per-row off-diagonal
/// entries (both triangles stored, sorted by column).
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePrecision {
    diag: Vec<f64>,
    off: Vec<Vec<(usize, f64)>>,
}

impl SparsePrecision {
    /// Builds from a diagonal and upper-or-lower off-diagonal triplets; each
    /// unordered pair may appear once.
    pub fn from_parts(diag: Vec<f64>, entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut off = vec![Vec::new(); diag.len()];
        for (i, j, v) in entries {
            assert!(i != j, "off-diagonal entry on the diagonal");
            off[i].push((j, v));
            off[j].push((i, v));
        }
        for row in &mut off {
            row.sort_unstable_by_key(|&(j, _)| j);
        }
        Self { diag, off }
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// Off-diagonal entries of row `i`.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.off[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.diag[i];
        }
        self.off[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map_or(0.0, |p| self.off[i][p].1)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut out = vec![vec![0.0; n]; n];
        for (i, row) in out.iter_mut().enumerate() {
            row[i] = self.diag[i];
            for &(j, v) in &self.off[i] {
                row[j] = v;
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|i| self.diag[i] * x[i] + self.off[i].iter().map(|&(j, v)| v * x[j]).sum::<f64>())
            .collect()
    }

    /// `x' A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            diag: self.diag.iter().map(|d| d * factor).collect(),
            off: self
                .off
                .iter()
                .map(|r| r.iter().map(|&(j, v)| (j, v * factor)).collect())
                .collect(),
        }
    }
}

/// Reverse Cuthill-McKee ordering of the sparsity graph; returns `perm` with
/// `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &SparsePrecision) -> Vec<usize> {
    let n = a.n();
    let degree = |i: usize| a.row(i).len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut starts: Vec<usize> = (0..n).collect();
    starts.sort_by_key(|&i| (degree(i), i));
    for &s in &starts {
        if visited[s] {
            continue;
        }
        visited[s] = true;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut next: Vec<usize> = a.row(u).iter().map(|&(j, _)| j).filter(|&j| !visited[j]).collect();
            next.sort_by_key(|&j| (degree(j), j));
            for j in next {
                visited[j] = true;
                queue.push_back(j);
            }
        }
    }
    order.reverse();
    order
}

const PIVOT_TOLERANCE: f64 = 1e-10;

/// Envelope Cholesky factor `P A P' = L L'`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    perm: Vec<usize>,
    first: Vec<usize>,
    // row i holds L[i][first[i]..=i]
    rows: Vec<Vec<f64>>,
}

impl Cholesky {
    pub fn factor(a: &SparsePrecision) -> Result<Self, GmrfError> {
        let perm = reverse_cuthill_mckee(a);
        let n = a.n();
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let mut first = vec![0; n];
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let old = perm[i];
            let f = a
                .row(old)
                .iter()
                .map(|&(j, _)| inverse[j])
                .filter(|&j| j < i)
                .min()
                .unwrap_or(i);
            first[i] = f;
            let mut row = vec![0.0; i - f + 1];
            for &(j, v) in a.row(old) {
                let jn = inverse[j];
                if jn < i {
                    row[jn - f] = v;
                }
            }
            row[i - f] = a.diag()[old];

            for j in f..i {
                let start = f.max(first[j]);
                let lj = &rows[j];
                let mut s = row[j - f];
                for k in start..j {
                    s -= row[k - f] * lj[k - first[j]];
                }
                row[j - f] = s / lj[j - first[j]];
            }
            let mut d = row[i - f];
            for k in f..i {
                d -= row[k - f] * row[k - f];
            }
            // relative tolerance: rounding leaves a tiny positive pivot on singular input
            if !(d > PIVOT_TOLERANCE * a.diag()[old].abs() && d.is_finite()) {
                return Err(GmrfError::NotPositiveDefinite { pivot: old, value: d });
            }
            row[i - f] = d.sqrt();
            rows.push(row);
        }
        Ok(Self { perm, first, rows })
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    /// Number of stored factor entries.
    pub fn envelope_size(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n()).map(|i| self.rows[i][i - self.first[i]].ln()).sum::<f64>()
    }

    /// Solves `A x = b` in the original ordering.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        self.forward(&mut y);
        self.backward(&mut y);
        self.unpermute(&y)
    }

    /// Maps standard normals `z` to `x` with `x ~ N(0, A^-1)`.
    pub fn whiten_inverse(&self, z: &[f64]) -> Vec<f64> {
        let mut x = z.to_vec();
        self.backward(&mut x);
        self.unpermute(&x)
    }

    fn unpermute(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = x[new];
        }
        out
    }

    // L y = b in place
    fn forward(&self, y: &mut [f64]) {
        for i in 0..self.n() {
            let f = self.first[i];
            let row = &self.rows[i];
            let mut s = y[i];
            for k in f..i {
                s -= row[k - f] * y[k];
            }
            y[i] = s / row[i - f];
        }
    }

    // L' x = z in place
    fn backward(&self, x: &mut [f64]) {
        for i in (0..self.n()).rev() {
            let f = self.first[i];
            let row = &self.rows[i];
            x[i] /= row[i - f];
            let xi = x[i];
            for k in f..i {
                x[k] -= row[k - f] * xi;
            }
        }
    }
}

/// Reusable sampler for `N(mean, precision^-1)`.
#[derive(Debug, Clone)]
pub struct GmrfSampler {
    chol: Cholesky,
}

impl GmrfSampler {
    pub fn new(precision: &SparsePrecision) -> Result<Self, GmrfError> {
        Ok(Self {
            chol: Cholesky::factor(precision)?,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, mean: &[f64]) -> Result<Vec<f64>, GmrfError> {
        let n = self.chol.n();
        if mean.len() != n {
            return Err(GmrfError::DimensionMismatch(mean.len(), n));
        }
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut x = self.chol.whiten_inverse(&z);
        x.iter_mut().zip(mean).for_each(|(x, m)| *x += m);
        Ok(x)
    }
}

/// One draw from `N(mean, precision^-1)` with a fresh seeded generator.
pub fn sample_gmrf(precision: &SparsePrecision, mean: &[f64], seed: u64) -> Result<Vec<f64>, GmrfError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GmrfSampler::new(precision)?.sample(&mut rng, mean)
}
