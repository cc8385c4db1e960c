//! Communication graphs, consensus weights and the blockwise consensus
//! operators.
//!
//! `Z = W ⊗ I_p` is never materialized: [`apply_laplacian`] and friends walk
//! the sparse rows of [`WeightMatrix`] block by block. Only the eigen
//! diagnostics build the dense `n × n` matrix.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{self, Mat};

/// Absolute tolerance for the weight-matrix conditions.
pub const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetworkError {
    #[error("d-regular cycle needs an even degree, got d = {0}")]
    OddDegree(usize),
    #[error("d-regular cycle needs 2 <= d <= n - 1, got n = {n}, d = {d}")]
    DegreeOutOfRange { n: usize, d: usize },
    #[error("graph must have at least one node")]
    Empty,
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    NodeOutOfRange(usize, usize, usize),
    #[error("self-loop edge at node {0}; self-inclusion comes from the neighborhood definition")]
    SelfLoop(usize),
    #[error("graph is disconnected")]
    Disconnected,
    #[error("weight matrix is not symmetric: w[{i}][{j}] = {a} but w[{j}][{i}] = {b}")]
    Asymmetric { i: usize, j: usize, a: f64, b: f64 },
    #[error("row {row} sums to {sum}, not 1")]
    RowSum { row: usize, sum: f64 },
    #[error("negative weight w[{0}][{1}] = {2}")]
    NegativeWeight(usize, usize, f64),
    #[error("weight w[{0}][{1}] = {2} does not match the topology (nonzero iff edge or diagonal)")]
    Sparsity(usize, usize, f64),
    #[error("diagonal bounds violated: delta = {delta}, Delta = {big_delta}; need 0 < delta <= Delta < 1")]
    DiagonalBounds { delta: f64, big_delta: f64 },
    #[error("second-largest eigenvalue modulus of W is {0}; null(I - W) must be span(1)")]
    NotConsensus(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("need at least two nodes for a nonzero Laplacian eigenvalue")]
    SingleNode,
}

/// Undirected communication graph with self-inclusive neighborhoods.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighborhoods: Vec<Vec<usize>>,
}

impl Topology {
    /// Builds a connected topology from an undirected edge list. Duplicate
    /// edges and either orientation are accepted.
    pub fn from_edges<I>(n: usize, edges: I) -> Result<Self, NetworkError>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        if n == 0 {
            return Err(NetworkError::Empty);
        }
        let mut list = Vec::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(NetworkError::NodeOutOfRange(a, b, n));
            }
            if a == b {
                return Err(NetworkError::SelfLoop(a));
            }
            list.push((a.min(b), a.max(b)));
        }
        list.sort_unstable();
        list.dedup();

        let mut neighborhoods: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for &(a, b) in &list {
            neighborhoods[a].push(b);
            neighborhoods[b].push(a);
        }
        for nb in &mut neighborhoods {
            nb.sort_unstable();
        }
        let t = Self {
            n,
            edges: list,
            neighborhoods,
        };
        if !t.is_connected() {
            return Err(NetworkError::Disconnected);
        }
        Ok(t)
    }

    /// Ring where node `i` links to `i ± 1, …, i ± d/2 (mod n)`.
    pub fn d_regular_cycle(n: usize, d: usize) -> Result<Self, NetworkError> {
        if d % 2 != 0 {
            return Err(NetworkError::OddDegree(d));
        }
        if d < 2 || d + 1 > n {
            return Err(NetworkError::DegreeOutOfRange { n, d });
        }
        let edges = (0..n).flat_map(|i| (1..=d / 2).map(move |k| (i, (i + k) % n)));
        Self::from_edges(n, edges)
    }

    pub fn complete(n: usize) -> Result<Self, NetworkError> {
        let edges = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j)));
        Self::from_edges(n, edges)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// `n_i`, sorted, including `i` itself.
    pub fn neighborhood(&self, i: usize) -> &[usize] {
        &self.neighborhoods[i]
    }

    /// `m_i = |n_i|`
    pub fn size(&self, i: usize) -> usize {
        self.neighborhoods[i].len()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighborhoods[i].len() - 1
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighborhoods[i].iter().copied().filter(move |&j| j != i)
    }

    pub fn in_neighborhood(&self, i: usize, j: usize) -> bool {
        self.neighborhoods[i].binary_search(&j).is_ok()
    }

    /// Position of `j` inside the sorted neighborhood of `i`.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        self.neighborhoods[i].binary_search(&j).ok()
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for &j in &self.neighborhoods[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count == self.n
    }
}

/// Builds the `d`-regular cycle used throughout the experiments.
pub fn build_d_regular_cycle(n: usize, d: usize) -> Result<Topology, NetworkError> {
    Topology::d_regular_cycle(n, d)
}

/// Symmetric consensus weights stored sparsely, one row per node.
///
/// Row `i` holds `(j, w_ij)` for every `j ∈ n_i` in ascending `j`, the
/// diagonal included. Construction does not validate; see
/// [`validate_weight_matrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    rows: Vec<Vec<(usize, f64)>>,
}

impl WeightMatrix {
    /// Metropolis–Hastings weights `w_ij = 1/(1 + max(deg_i, deg_j))`.
    pub fn metropolis(t: &Topology) -> Result<Self, NetworkError> {
        if !t.is_connected() {
            return Err(NetworkError::Disconnected);
        }
        let rows = (0..t.n())
            .map(|i| {
                let mut off_sum = 0.0;
                let mut row: Vec<(usize, f64)> = t
                    .neighborhood(i)
                    .iter()
                    .map(|&j| {
                        if j == i {
                            (j, 0.0)
                        } else {
                            let w = 1.0 / (1.0 + t.degree(i).max(t.degree(j)) as f64);
                            off_sum += w;
                            (j, w)
                        }
                    })
                    .collect();
                let own = row.iter_mut().find(|(j, _)| *j == i).unwrap();
                own.1 = 1.0 - off_sum;
                row
            })
            .collect();
        Ok(Self { rows })
    }

    /// Explicit weights given as `(i, j, w_ij)` triples; the symmetric entry
    /// is *not* filled in automatically. Entries outside the topology are
    /// kept so that validation can report them.
    pub fn from_entries(n: usize, entries: &[(usize, usize, f64)]) -> Result<Self, NetworkError> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, w) in entries {
            if i >= n || j >= n {
                return Err(NetworkError::NodeOutOfRange(i, j, n));
            }
            match rows[i].iter_mut().find(|(c, _)| *c == j) {
                Some(e) => e.1 = w,
                None => rows[i].push((j, w)),
            }
        }
        for r in &mut rows {
            r.sort_by_key(|e| e.0);
        }
        Ok(Self { rows })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .iter()
            .find(|(c, _)| *c == j)
            .map_or(0.0, |e| e.1)
    }

    pub fn self_weight(&self, i: usize) -> f64 {
        self.weight(i, i)
    }

    /// All stored `(i, j, w_ij)` triples, row-major.
    pub fn entries(&self) -> Vec<(usize, usize, f64)> {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(j, w)| (i, j, w)))
            .collect()
    }

    pub fn to_dense(&self) -> Mat {
        let n = self.n();
        let mut m = Mat::zeros(n, n);
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, w) in r {
                m[(i, j)] = w;
            }
        }
        m
    }

    /// Dense `I − W`.
    pub fn dense_laplacian(&self) -> Mat {
        let n = self.n();
        Mat::identity(n, n) - self.to_dense()
    }
}

/// Measured constants of a valid weight matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightReport {
    /// `δ = min_i w_ii`
    pub delta: f64,
    /// `Δ = max_i w_ii`
    pub big_delta: f64,
    pub second_eigenvalue_modulus: f64,
}

/// Checks symmetry, stochasticity, sparsity, the consensus null space and
/// the diagonal bounds, in that order.
pub fn validate_weight_matrix(w: &WeightMatrix, t: &Topology) -> Result<WeightReport, NetworkError> {
    let n = t.n();
    if w.n() != n {
        return Err(NetworkError::Dimension {
            expected: n,
            got: w.n(),
        });
    }
    for i in 0..n {
        for &(j, a) in w.row(i) {
            let b = w.weight(j, i);
            if (a - b).abs() > WEIGHT_TOL {
                return Err(NetworkError::Asymmetric { i, j, a, b });
            }
        }
    }
    for i in 0..n {
        let sum: f64 = w.row(i).iter().map(|e| e.1).sum();
        if (sum - 1.0).abs() > WEIGHT_TOL {
            return Err(NetworkError::RowSum { row: i, sum });
        }
        if let Some(&(j, v)) = w.row(i).iter().find(|e| e.1 < 0.0) {
            return Err(NetworkError::NegativeWeight(i, j, v));
        }
    }

    let dense = w.to_dense();
    let ev = linalg::symmetric_eigenvalues(&dense);
    let mut moduli: Vec<f64> = ev.iter().map(|v| v.abs()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    let slem = moduli.get(1).copied().unwrap_or(0.0);
    if slem >= 1.0 - WEIGHT_TOL {
        return Err(NetworkError::NotConsensus(slem));
    }

    for i in 0..n {
        for j in 0..n {
            let v = dense[(i, j)];
            let allowed = i == j || t.in_neighborhood(i, j);
            if (allowed && v <= 0.0) || (!allowed && v != 0.0) {
                return Err(NetworkError::Sparsity(i, j, v));
            }
        }
    }

    let diag = (0..n).map(|i| dense[(i, i)]);
    let delta = diag.clone().fold(f64::INFINITY, f64::min);
    let big_delta = diag.fold(f64::NEG_INFINITY, f64::max);
    if !(delta > 0.0 && big_delta < 1.0) {
        return Err(NetworkError::DiagonalBounds { delta, big_delta });
    }
    Ok(WeightReport {
        delta,
        big_delta,
        second_eigenvalue_modulus: slem,
    })
}

/// `n` blocks of dimension `p`, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedVector {
    p: usize,
    data: Vec<f64>,
}

impl StackedVector {
    pub fn zeros(n: usize, p: usize) -> Self {
        Self {
            p,
            data: vec![0.0; n * p],
        }
    }

    pub fn from_flat(p: usize, data: Vec<f64>) -> Self {
        assert!(p > 0 && data.len() % p == 0, "flat length must be a multiple of p");
        Self { p, data }
    }

    pub fn from_blocks<B: AsRef<[f64]>>(blocks: &[B]) -> Self {
        let p = blocks.first().map_or(0, |b| b.as_ref().len());
        let mut data = Vec::with_capacity(blocks.len() * p);
        for b in blocks {
            assert_eq!(b.as_ref().len(), p, "blocks must share one dimension");
            data.extend_from_slice(b.as_ref());
        }
        Self { p, data }
    }

    /// Every block equal to `v`.
    pub fn consensus(n: usize, v: &[f64]) -> Self {
        let mut data = Vec::with_capacity(n * v.len());
        for _ in 0..n {
            data.extend_from_slice(v);
        }
        Self { p: v.len(), data }
    }

    pub fn n(&self) -> usize {
        if self.p == 0 {
            0
        } else {
            self.data.len() / self.p
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.p.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.data)
    }
}

/// `((I − Z)x)_i = x_i − Σ_{j∈n_i} w_ij x_j`
pub fn apply_laplacian(w: &WeightMatrix, x: &StackedVector) -> Result<StackedVector, NetworkError> {
    if x.n() != w.n() {
        return Err(NetworkError::Dimension {
            expected: w.n(),
            got: x.n(),
        });
    }
    let mut out = x.clone();
    for i in 0..w.n() {
        let block = out.block_mut(i);
        for &(j, wij) in w.row(i) {
            linalg::axpy(block, -wij, x.block(j));
        }
    }
    Ok(out)
}

/// `(Zx)_i = Σ_{j∈n_i} w_ij x_j`
pub fn apply_mixing(w: &WeightMatrix, x: &StackedVector) -> Result<StackedVector, NetworkError> {
    if x.n() != w.n() {
        return Err(NetworkError::Dimension {
            expected: w.n(),
            got: x.n(),
        });
    }
    let mut out = StackedVector::zeros(x.n(), x.p());
    for i in 0..w.n() {
        let block = out.block_mut(i);
        for &(j, wij) in w.row(i) {
            linalg::axpy(block, wij, x.block(j));
        }
    }
    Ok(out)
}

/// `δ̂`, the smallest nonzero eigenvalue of `I − W`.
pub fn smallest_nonzero_laplacian_eigenvalue(w: &WeightMatrix) -> Result<f64, NetworkError> {
    if w.n() < 2 {
        return Err(NetworkError::SingleNode);
    }
    let ev = linalg::symmetric_eigenvalues(&w.dense_laplacian());
    // connected graph: exactly one eigenvalue sits at zero
    Ok(ev[1])
}
