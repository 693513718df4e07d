//! Tooth adjacency graph, CAR covariance and multivariate normal draws.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Undirected graph on vertices `0..size` (1-based in all text I/O).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyGraph {
    size: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl AdjacencyGraph {
    /// Builds a graph from 0-based pairs, checking symmetry-free input,
    /// self-loops and isolated vertices.
    pub fn new(size: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument(
                "graph must have at least one vertex".into(),
            ));
        }
        let mut edges = BTreeSet::new();
        for (a, b) in pairs {
            if a >= size || b >= size {
                return Err(Error::InvalidArgument(format!(
                    "edge ({}, {}) references a vertex outside 1..={size}",
                    a + 1,
                    b + 1
                )));
            }
            if a == b {
                return Err(Error::InvalidArgument(format!(
                    "self-loop at vertex {}",
                    a + 1
                )));
            }
            edges.insert((a.min(b), a.max(b)));
        }
        let g = Self { size, edges };
        let deg = g.degrees();
        if let Some(v) = deg.iter().position(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "vertex {} has no neighbours; every tooth needs degree >= 1",
                v + 1
            )));
        }
        Ok(g)
    }

    /// Two disjoint path graphs of `t/2` vertices each (upper and lower arch).
    pub fn dental(t: usize) -> Result<Self> {
        if t == 0 || !t.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "dental graph needs an even, positive number of teeth, got {t}"
            )));
        }
        let half = t / 2;
        let chain = |start: usize| (start..start + half - 1).map(|v| (v, v + 1));
        Self::new(t, chain(0).chain(chain(half)))
    }

    /// Parses an edge list: one `t t'` pair per line, 1-based. Blank lines and
    /// lines starting with `#` are skipped. `size` defaults to the largest
    /// vertex index seen.
    pub fn parse_edge_list(text: &str, size: Option<usize>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .collect();
            let parse = |s: &str| -> Result<usize> {
                match s.parse::<usize>() {
                    Ok(v) if v >= 1 => Ok(v - 1),
                    _ => Err(Error::Config(format!(
                        "edge list line {}: expected 1-based vertex index, got {s:?}",
                        lineno + 1
                    ))),
                }
            };
            if fields.len() != 2 {
                return Err(Error::Config(format!(
                    "edge list line {}: expected two vertex indices",
                    lineno + 1
                )));
            }
            pairs.push((parse(fields[0])?, parse(fields[1])?));
        }
        let n = size.unwrap_or_else(|| pairs.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(0));
        Self::new(n, pairs)
    }

    pub fn load_edge_list(path: &Path, size: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_edge_list(&text, size)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Edges as 0-based `(low, high)` pairs.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.size];
        for &(a, b) in &self.edges {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }
}

/// Dense symmetric positive definite matrix with its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    dim: usize,
    data: Vec<f64>,
    chol: Vec<f64>,
}

impl SpdMatrix {
    /// Factorizes a row-major `dim × dim` matrix.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::InvalidArgument(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                data.len()
            )));
        }
        let chol = cholesky(dim, &data, "matrix must be symmetric positive definite")?;
        Ok(Self { dim, data, chol })
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self {
            dim,
            chol: data.clone(),
            data,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    /// Row-major lower-triangular factor `L` with `L Lᵀ = self`.
    pub fn factor(&self) -> &[f64] {
        &self.chol
    }

    /// Writes one `N(0, self)` draw into `out`, using `z` as scratch.
    #[inline]
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, z: &mut [f64], out: &mut [f64]) {
        let n = self.dim;
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for i in 0..n {
            let row = &self.chol[i * n..i * n + i + 1];
            out[i] = row.iter().zip(&z[..=i]).map(|(l, z)| l * z).sum();
        }
    }

    /// `n` i.i.d. rows from `N(0, self)`.
    pub fn sample_mvn<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let mut z = vec![0.0; self.dim];
        (0..n)
            .map(|_| {
                let mut row = vec![0.0; self.dim];
                self.sample_into(rng, &mut z, &mut row);
                row
            })
            .collect()
    }
}

fn cholesky(n: usize, a: &[f64], hint: &'static str) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite {
                pivot: j + 1,
                value: d,
                hint,
            });
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` in place.
fn chol_solve(n: usize, l: &[f64], b: &mut [f64]) {
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * b[k]).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * b[k]).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CarModel {
    pub graph: AdjacencyGraph,
    pub tau: f64,
    pub rho: f64,
}

impl CarModel {
    pub fn new(graph: AdjacencyGraph, tau: f64, rho: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive, got {tau}"
            )));
        }
        if rho == 1.0 {
            return Err(Error::InvalidArgument(
                "rho = 1 gives the intrinsic CAR model, whose precision C - D is singular; use rho in [0, 1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::InvalidArgument(format!(
                "rho must lie in [0, 1), got {rho}"
            )));
        }
        Ok(Self { graph, tau, rho })
    }

    /// Precision matrix `C − ρD` (row-major, without the τ² factor).
    pub fn precision(&self) -> Vec<f64> {
        let n = self.graph.size();
        let mut p = vec![0.0; n * n];
        for (i, d) in self.graph.degrees().into_iter().enumerate() {
            p[i * n + i] = d as f64;
        }
        for (a, b) in self.graph.edges() {
            p[a * n + b] = -self.rho;
            p[b * n + a] = -self.rho;
        }
        p
    }

    /// `Σ = τ²(C − ρD)⁻¹`, factorized.
    pub fn covariance(&self) -> Result<SpdMatrix> {
        let n = self.graph.size();
        let prec = self.precision();
        let l = cholesky(n, &prec, "C - rho*D is singular; reduce rho")?;
        let t2 = self.tau * self.tau;
        let mut sigma = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.iter_mut().for_each(|c| *c = 0.0);
            col[j] = t2;
            chol_solve(n, &l, &mut col);
            for i in 0..n {
                sigma[i * n + j] = col[i];
            }
        }
        // Symmetrize away round-off from the column solves.
        for i in 0..n {
            for j in 0..i {
                let m = 0.5 * (sigma[i * n + j] + sigma[j * n + i]);
                sigma[i * n + j] = m;
                sigma[j * n + i] = m;
            }
        }
        let chol = cholesky(
            n,
            &sigma,
            "covariance lost positive definiteness; reduce rho",
        )?;
        Ok(SpdMatrix {
            dim: n,
            data: sigma,
            chol,
        })
    }
}

pub fn car_covariance(m: &CarModel) -> Result<SpdMatrix> {
    m.covariance()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn dental_28() {
        let g = AdjacencyGraph::dental(28).unwrap();
        assert_eq!(g.edge_count(), 26);
        let deg = g.degrees();
        assert_eq!(deg.iter().filter(|&&d| d == 1).count(), 4);
        assert_eq!(deg.iter().filter(|&&d| d == 2).count(), 24);
    }

    #[test]
    fn dental_small_and_invalid() {
        let g = AdjacencyGraph::dental(4).unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1), (2, 3)]);
        assert!(AdjacencyGraph::dental(2).is_err());
        assert!(AdjacencyGraph::dental(0).is_err());
        assert!(AdjacencyGraph::dental(7).is_err());
    }

    #[test]
    fn edge_list_parsing() {
        let g = AdjacencyGraph::parse_edge_list("# arch\n1 2\n3,4\n\n", None).unwrap();
        assert_eq!(g, AdjacencyGraph::dental(4).unwrap());
        assert!(AdjacencyGraph::parse_edge_list("1 1\n", None).is_err());
        assert!(AdjacencyGraph::parse_edge_list("0 1\n", None).is_err());
        assert!(AdjacencyGraph::parse_edge_list("1 2\n", Some(3)).is_err());
    }

    #[test]
    fn rho_domain() {
        let g = AdjacencyGraph::dental(4).unwrap();
        let err = CarModel::new(g.clone(), 1.0, 1.0).unwrap_err().to_string();
        assert!(err.contains("intrinsic"));
        assert!(CarModel::new(g.clone(), 1.0, -0.1).is_err());
        assert!(CarModel::new(g, 0.0, 0.5).is_err());
    }

    #[test]
    fn rho_zero_gives_scaled_inverse_degree() {
        let g = AdjacencyGraph::dental(28).unwrap();
        let deg = g.degrees();
        let s = CarModel::new(g, 0.85, 0.0).unwrap().covariance().unwrap();
        for i in 0..28 {
            for j in 0..28 {
                let want = if i == j {
                    0.85 * 0.85 / deg[i] as f64
                } else {
                    0.0
                };
                assert!((s.get(i, j) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn two_by_two_block() {
        let g = AdjacencyGraph::dental(4).unwrap();
        let s = CarModel::new(g, 1.0, 0.5).unwrap().covariance().unwrap();
        let want = [[1.0 / 0.75, 0.5 / 0.75], [0.5 / 0.75, 1.0 / 0.75]];
        for blk in [0, 2] {
            for i in 0..2 {
                for j in 0..2 {
                    assert!((s.get(blk + i, blk + j) - want[i][j]).abs() < 1e-13);
                }
            }
        }
        assert_eq!(s.get(0, 2), 0.0);
    }

    #[test]
    fn precision_times_covariance_is_scaled_identity() {
        let m = CarModel::new(AdjacencyGraph::dental(28).unwrap(), 0.85, 0.975).unwrap();
        let s = m.covariance().unwrap();
        let p = m.precision();
        let n = 28;
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..n).map(|k| p[i * n + k] * s.get(k, j)).sum();
                let want = if i == j { 0.85 * 0.85 } else { 0.0 };
                assert!((v - want).abs() < 1e-8, "({i},{j}) = {v}");
            }
        }
        let max = s.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            for j in 0..n {
                assert!((s.get(i, j) - s.get(j, i)).abs() <= 1e-12 * max);
            }
        }
    }

    #[test]
    fn diagonal_nondecreasing_in_rho() {
        let g = AdjacencyGraph::dental(28).unwrap();
        let mut prev: Option<Vec<f64>> = None;
        for rho in [0.0, 0.5, 0.9, 0.975] {
            let d = CarModel::new(g.clone(), 0.85, rho)
                .unwrap()
                .covariance()
                .unwrap()
                .diag();
            if let Some(p) = &prev {
                assert!(d.iter().zip(p).all(|(a, b)| a >= b));
            }
            prev = Some(d);
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        let r = SpdMatrix::new(2, vec![1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            r,
            Err(Error::NotPositiveDefinite { pivot: 2, .. })
        ));
    }

    #[test]
    fn mvn_sample_covariance_matches() {
        let s = CarModel::new(AdjacencyGraph::dental(4).unwrap(), 1.0, 0.5)
            .unwrap()
            .covariance()
            .unwrap();
        let n = 1_000_000;
        let mut r = rng::substream(3, &[rng::tag::ORACLE]);
        let mut z = [0.0; 4];
        let mut x = [0.0; 4];
        let mut sum = [0.0; 4];
        let mut cross = [[0.0; 4]; 4];
        for _ in 0..n {
            s.sample_into(&mut r, &mut z, &mut x);
            for i in 0..4 {
                sum[i] += x[i];
                for j in 0..4 {
                    cross[i][j] += x[i] * x[j];
                }
            }
        }
        for i in 0..4 {
            let m = sum[i] / n as f64;
            assert!(m.abs() < 3.0 * (s.get(i, i) / n as f64).sqrt());
            for j in 0..4 {
                let c = cross[i][j] / n as f64;
                assert!(
                    (c - s.get(i, j)).abs() < 0.01,
                    "({i},{j}) {c} vs {}",
                    s.get(i, j)
                );
            }
        }
    }

    #[test]
    fn identity_sampler_has_unit_variance() {
        let s = SpdMatrix::identity(3);
        let rows = s.sample_mvn(200_000, &mut rng::from_seed(9));
        for j in 0..3 {
            let v = rows.iter().map(|r| r[j] * r[j]).sum::<f64>() / rows.len() as f64;
            // SE of a sample variance of N(0,1) is √(2/n)
            assert!((v - 1.0).abs() < 3.0 * (2.0 / 200_000.0f64).sqrt());
        }
    }

    proptest! {
        #[test]
        fn random_graphs_factorize(n in 2usize..12, seed in any::<u64>(), rho in 0.0f64..0.99) {
            use rand::Rng;
            let mut r = rng::from_seed(seed);
            // Spanning path keeps every degree positive.
            let mut pairs: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
            for _ in 0..n {
                let a = r.random_range(0..n);
                let b = r.random_range(0..n);
                if a != b { pairs.push((a, b)); }
            }
            let g = AdjacencyGraph::new(n, pairs).unwrap();
            let s = CarModel::new(g, 0.7, rho).unwrap().covariance().unwrap();
            prop_assert!(s.diag().iter().all(|&d| d > 0.0));
        }
    }
}
