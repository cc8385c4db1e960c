//! Curvature engine: per-node primal BFGS, the truncated Neumann-series
//! primal direction, and neighborhood dual BFGS with distributed direction
//! assembly.
//!
//! Distributed pieces come in two flavors: per-node kernels that the
//! simulator calls with mailbox data, and whole-network wrappers built on the
//! same kernels for tests and diagnostics.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{self, Mat};
use crate::network::{StackedVector, Topology, WeightMatrix};

/// Relative curvature threshold below which a BFGS pair is skipped.
pub const SKIP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CurvatureError {
    #[error("non-finite input to a curvature update")]
    NonFinite,
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("local splitting block D_{0} is not positive definite")]
    SplittingBlock(usize),
    #[error("dual curvature block is not invertible")]
    SingularDual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Accepted,
    Skipped,
}

/// A variable variation and its matching gradient variation.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationPair {
    pub variable_variation: Vec<f64>,
    pub gradient_variation: Vec<f64>,
}

fn check_len(a: &[f64], n: usize) -> Result<(), CurvatureError> {
    if a.len() == n {
        Ok(())
    } else {
        Err(CurvatureError::Length {
            expected: n,
            got: a.len(),
        })
    }
}

/// Shared rank-two update `C + ssᵀ/(sᵀv) − Cvvᵀ C/(vᵀCv)`; returns `None`
/// when the pair fails the curvature test.
fn rank_two(c: &Mat, v: &[f64], s: &[f64]) -> Result<Option<Mat>, CurvatureError> {
    if !linalg::all_finite(v) || !linalg::all_finite(s) || !linalg::all_finite(c.as_slice()) {
        return Err(CurvatureError::NonFinite);
    }
    let curv = linalg::dot(v, s);
    if !(curv > SKIP_TOL * linalg::norm(v) * linalg::norm(s)) {
        return Ok(None);
    }
    let cv = linalg::mat_vec(c, v);
    let vcv = linalg::dot(v, &cv);
    if !(vcv > 0.0) {
        return Ok(None);
    }
    let n = v.len();
    let mut out = c.clone();
    for r in 0..n {
        for k in 0..n {
            out[(r, k)] += s[r] * s[k] / curv - cv[r] * cv[k] / vcv;
        }
    }
    linalg::symmetrize(&mut out);
    Ok(Some(out))
}

/// `B + rrᵀ/(uᵀr) − Buuᵀ B/(uᵀBu)`, skipped when `uᵀr ≤ 1e-12‖u‖‖r‖`.
pub fn bfgs_update_primal(b: &Mat, u: &[f64], r: &[f64]) -> Result<(Mat, UpdateOutcome), CurvatureError> {
    check_len(u, b.nrows())?;
    check_len(r, b.nrows())?;
    Ok(match rank_two(b, u, r)? {
        Some(next) => (next, UpdateOutcome::Accepted),
        None => (b.clone(), UpdateOutcome::Skipped),
    })
}

/// Projects the spectrum of a symmetric matrix onto `[lo, hi]`.
pub fn clip_spectrum(m: &Mat, lo: f64, hi: f64) -> Mat {
    let mut s = m.clone();
    linalg::symmetrize(&mut s);
    let eig = nalgebra::SymmetricEigen::new(s);
    let vals = eig.eigenvalues.map(|v| v.clamp(lo, hi));
    let mut out = &eig.eigenvectors * Mat::from_diagonal(&vals) * eig.eigenvectors.transpose();
    linalg::symmetrize(&mut out);
    out
}

/// One node's share of the series recursion: its diagonal splitting block
/// `D_i = B_i + 2α(1 − w_ii)I` and the coupling weights of its row.
#[derive(Debug, Clone)]
pub struct NeumannNode {
    pub node: usize,
    pub splitting: Mat,
    alpha: f64,
    self_weight: f64,
}

impl NeumannNode {
    pub fn new(node: usize, b: &Mat, w: &WeightMatrix, alpha: f64) -> Self {
        Self::from_parts(node, b, w.self_weight(node), alpha)
    }

    pub fn from_parts(node: usize, b: &Mat, self_weight: f64, alpha: f64) -> Self {
        let p = b.nrows();
        let splitting = b + Mat::identity(p, p) * (2.0 * alpha * (1.0 - self_weight));
        Self {
            node,
            splitting,
            alpha,
            self_weight,
        }
    }

    fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, CurvatureError> {
        linalg::solve_spd(&self.splitting, rhs).ok_or(CurvatureError::SplittingBlock(self.node))
    }

    /// `d⁰_i = −D_i^{-1} g_i`
    pub fn start(&self, g: &[f64]) -> Result<Vec<f64>, CurvatureError> {
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        self.solve(&neg)
    }

    /// `d_i ← D_i^{-1}(α(1 − w_ii)d_i + Σ_{j≠i} α w_ij d_j − g_i)`, where
    /// `neighbors` yields `(w_ij, d_j)` for the delivered neighbor blocks.
    pub fn step<'a, I>(&self, own: &[f64], neighbors: I, g: &[f64]) -> Result<Vec<f64>, CurvatureError>
    where
        I: IntoIterator<Item = (f64, &'a [f64])>,
    {
        let mut rhs: Vec<f64> = g.iter().map(|v| -v).collect();
        linalg::axpy(&mut rhs, self.alpha * (1.0 - self.self_weight), own);
        for (wij, dj) in neighbors {
            linalg::axpy(&mut rhs, self.alpha * wij, dj);
        }
        self.solve(&rhs)
    }
}

/// `−G_K^{-1} g` for `G = B + α(I − Z)`, via `K` rounds of the splitting
/// recursion.
pub fn neumann_descent(
    g: &StackedVector,
    b: &[Mat],
    w: &WeightMatrix,
    alpha: f64,
    k: usize,
) -> Result<StackedVector, CurvatureError> {
    let n = w.n();
    let nodes: Vec<NeumannNode> = (0..n).map(|i| NeumannNode::new(i, &b[i], w, alpha)).collect();
    let blocks = nodes
        .iter()
        .map(|nd| nd.start(g.block(nd.node)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut d = StackedVector::from_blocks(&blocks);
    for _ in 0..k {
        let blocks = nodes
            .iter()
            .map(|nd| {
                let i = nd.node;
                let nbrs = w
                    .row(i)
                    .iter()
                    .filter(|e| e.0 != i)
                    .map(|&(j, wij)| (wij, d.block(j)));
                nd.step(d.block(i), nbrs, g.block(i))
            })
            .collect::<Result<Vec<_>, _>>()?;
        d = StackedVector::from_blocks(&blocks);
    }
    Ok(d)
}

/// Dense `G_K^{-1} = Σ_{k=0}^{K} (D^{-1}M)^k D^{-1}` for diagnostics.
pub fn dense_primal_inverse(b: &[Mat], w: &WeightMatrix, alpha: f64, k: usize) -> Option<Mat> {
    let n = w.n();
    let p = b.first().map_or(0, |m| m.nrows());
    let np = n * p;
    let mut d_inv = Mat::zeros(np, np);
    for (i, bi) in b.iter().enumerate() {
        let nd = NeumannNode::new(i, bi, w, alpha);
        let inv = linalg::inverse_spd(&nd.splitting)?;
        d_inv.view_mut((i * p, i * p), (p, p)).copy_from(&inv);
    }
    let mut m = Mat::zeros(np, np);
    for i in 0..n {
        for &(j, wij) in w.row(i) {
            let v = if i == j { alpha * (1.0 - wij) } else { alpha * wij };
            for c in 0..p {
                m[(i * p + c, j * p + c)] = v;
            }
        }
    }
    let dm = &d_inv * &m;
    let mut term = d_inv.clone();
    let mut total = d_inv;
    for _ in 0..k {
        term = &dm * &term;
        total += &term;
    }
    linalg::symmetrize(&mut total);
    Some(total)
}

/// Dense `B + α(I − Z)`.
pub fn dense_primal_hessian(b: &[Mat], w: &WeightMatrix, alpha: f64) -> Mat {
    let p = b.first().map_or(0, |m| m.nrows());
    let mut g = linalg::kron_identity(&w.dense_laplacian(), p) * alpha;
    for (i, bi) in b.iter().enumerate() {
        let mut blk = g.view_mut((i * p, i * p), (p, p));
        blk += bi;
    }
    g
}

/// Diagonal of `Υ_{n_i}`: `1/m_j` for each `j ∈ n_i` in neighborhood order.
pub fn normalization(t: &Topology, i: usize) -> Vec<f64> {
    t.neighborhood(i).iter().map(|&j| 1.0 / t.size(j) as f64).collect()
}

fn scale_blocks(v: &[f64], weights: &[f64], p: usize) -> Vec<f64> {
    v.chunks(p)
        .zip(weights)
        .flat_map(|(blk, w)| blk.iter().map(move |x| x * w))
        .collect()
}

/// `ṽ = Υ(y_new − y_old)`, `s̃ = (h_new − h_old) − γṽ` over one neighborhood.
pub fn dual_variations(
    y_new: &[f64],
    y_old: &[f64],
    h_new: &[f64],
    h_old: &[f64],
    gamma: f64,
    upsilon: &[f64],
) -> Result<VariationPair, CurvatureError> {
    let len = y_new.len();
    for v in [y_old, h_new, h_old] {
        check_len(v, len)?;
    }
    if upsilon.is_empty() || len % upsilon.len() != 0 {
        return Err(CurvatureError::Length {
            expected: len,
            got: upsilon.len(),
        });
    }
    let p = len / upsilon.len();
    let vt = scale_blocks(&linalg::sub(y_new, y_old), upsilon, p);
    let mut st = linalg::sub(h_new, h_old);
    linalg::axpy(&mut st, -gamma, &vt);
    Ok(VariationPair {
        variable_variation: vt,
        gradient_variation: st,
    })
}

/// Regularized neighborhood BFGS, skipped unless `ṽᵀs̃ > 0`.
pub fn bfgs_update_dual(c: &Mat, pair: &VariationPair, gamma: f64) -> Result<(Mat, UpdateOutcome), CurvatureError> {
    let (v, s) = (&pair.variable_variation, &pair.gradient_variation);
    check_len(v, c.nrows())?;
    check_len(s, c.nrows())?;
    Ok(match rank_two(c, v, s)? {
        Some(mut next) => {
            for k in 0..c.nrows() {
                next[(k, k)] += gamma;
            }
            (next, UpdateOutcome::Accepted)
        }
        None => (c.clone(), UpdateOutcome::Skipped),
    })
}

/// How a node turns its curvature block into a neighborhood direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DualDirectionRule {
    /// `(C^{-1} + ΓΥ)h`
    Plain,
    /// `(P C^{-1} P + (1 + γ)^{-1}(I − P) + ΓΥ)h`, with `P` removing the
    /// neighborhood block average. Learned curvature then never moves the
    /// network-wide sum of the dual variables.
    #[default]
    Conserving,
}

/// Removes the block average: `v − (1/m) Σ_j v_j` blockwise.
fn center_blocks(v: &[f64], p: usize) -> Vec<f64> {
    let m = v.len() / p;
    let mut mean = vec![0.0; p];
    for blk in v.chunks(p) {
        linalg::axpy(&mut mean, 1.0 / m as f64, blk);
    }
    let mut out = v.to_vec();
    for blk in out.chunks_mut(p) {
        linalg::axpy(blk, -1.0, &mean);
    }
    out
}

/// The dense neighborhood operator applied by [`dual_neighborhood_direction`].
pub fn dual_neighborhood_operator(
    c: &Mat,
    big_gamma: f64,
    upsilon: &[f64],
    gamma: f64,
    rule: DualDirectionRule,
) -> Result<Mat, CurvatureError> {
    let len = c.nrows();
    let p = len / upsilon.len();
    let c_inv = linalg::inverse_spd(c).ok_or(CurvatureError::SingularDual)?;
    let mut op = match rule {
        DualDirectionRule::Plain => c_inv,
        DualDirectionRule::Conserving => {
            let m = upsilon.len();
            let mut proj = Mat::identity(len, len);
            for a in 0..m {
                for b in 0..m {
                    for k in 0..p {
                        proj[(a * p + k, b * p + k)] -= 1.0 / m as f64;
                    }
                }
            }
            let avg = Mat::identity(len, len) - &proj;
            &proj * c_inv * &proj + avg / (1.0 + gamma)
        }
    };
    for (a, w) in upsilon.iter().enumerate() {
        for k in 0..p {
            op[(a * p + k, a * p + k)] += big_gamma * w;
        }
    }
    linalg::symmetrize(&mut op);
    Ok(op)
}

/// Neighborhood direction magnitude; the caller applies the ascent sign.
pub fn dual_neighborhood_direction(
    c: &Mat,
    h: &[f64],
    big_gamma: f64,
    upsilon: &[f64],
    gamma: f64,
    rule: DualDirectionRule,
) -> Result<Vec<f64>, CurvatureError> {
    check_len(h, c.nrows())?;
    let p = h.len() / upsilon.len();
    let mut out = match rule {
        DualDirectionRule::Plain => linalg::solve_spd(c, h).ok_or(CurvatureError::SingularDual)?,
        DualDirectionRule::Conserving => {
            let centered = center_blocks(h, p);
            let solved = linalg::solve_spd(c, &centered).ok_or(CurvatureError::SingularDual)?;
            let mut out = center_blocks(&solved, p);
            let mut avg = linalg::sub(h, &centered);
            for v in &mut avg {
                *v /= 1.0 + gamma;
            }
            linalg::axpy(&mut out, 1.0, &avg);
            out
        }
    };
    let reg = scale_blocks(h, upsilon, p);
    linalg::axpy(&mut out, big_gamma, &reg);
    Ok(out)
}

/// Gathers the blocks of `n_i` from a stacked vector.
pub fn gather(t: &Topology, i: usize, v: &StackedVector) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.size(i) * v.p());
    for &j in t.neighborhood(i) {
        out.extend_from_slice(v.block(j));
    }
    out
}

/// Whole-network scatter-sum of the neighborhood directions.
pub fn distributed_dual_direction(
    t: &Topology,
    c: &[Mat],
    h: &StackedVector,
    big_gamma: f64,
    gamma: f64,
    rule: DualDirectionRule,
) -> Result<StackedVector, CurvatureError> {
    let p = h.p();
    let mut out = StackedVector::zeros(t.n(), p);
    for i in 0..t.n() {
        let e = dual_neighborhood_direction(&c[i], &gather(t, i, h), big_gamma, &normalization(t, i), gamma, rule)?;
        for (slot, &j) in t.neighborhood(i).iter().enumerate() {
            linalg::axpy(out.block_mut(j), 1.0, &e[slot * p..(slot + 1) * p]);
        }
    }
    Ok(out)
}

/// Dense `H^{-1} = Σ_i S_iᵀ Op_i S_i`, whose regularizer terms add up to `ΓI`.
pub fn assemble_global_dual_inverse(
    c: &[Mat],
    big_gamma: f64,
    gamma: f64,
    t: &Topology,
    p: usize,
    rule: DualDirectionRule,
) -> Result<Mat, CurvatureError> {
    let np = t.n() * p;
    let mut h = Mat::zeros(np, np);
    for i in 0..t.n() {
        let op = dual_neighborhood_operator(&c[i], big_gamma, &normalization(t, i), gamma, rule)?;
        let nb = t.neighborhood(i);
        for (a, &ja) in nb.iter().enumerate() {
            for (b, &jb) in nb.iter().enumerate() {
                let src = op.view((a * p, b * p), (p, p));
                let mut dst = h.view_mut((ja * p, jb * p), (p, p));
                dst += src;
            }
        }
    }
    linalg::symmetrize(&mut h);
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{apply_laplacian, build_d_regular_cycle};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        linalg::norm(&linalg::sub(a, b)) / linalg::norm(b)
    }

    fn random_spd(rng: &mut ChaCha8Rng, p: usize, lo: f64) -> Mat {
        let a = Mat::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        let mut m = &a * a.transpose() + Mat::identity(p, p) * lo;
        linalg::symmetrize(&mut m);
        m
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Topology {
        // random spanning tree plus a few chords
        let mut edges: Vec<(usize, usize)> = (1..n).map(|j| (rng.random_range(0..j), j)).collect();
        for _ in 0..n {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a != b {
                edges.push((a, b));
            }
        }
        Topology::from_edges(n, edges).unwrap()
    }

    #[test]
    fn primal_identity_fixed_point() {
        let b = Mat::identity(3, 3);
        let (next, out) = bfgs_update_primal(&b, &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(out, UpdateOutcome::Accepted);
        assert!((next - b).abs().max() < 1e-15);
    }

    #[test]
    fn primal_quadratic_secant() {
        let a = Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 10.0, 0.1]));
        let u = [0.3, -0.2, 0.9];
        let r = linalg::mat_vec(&a, &u);
        let (next, out) = bfgs_update_primal(&Mat::identity(3, 3), &u, &r).unwrap();
        assert_eq!(out, UpdateOutcome::Accepted);
        assert!(rel(&linalg::mat_vec(&next, &u), &r) <= 1e-10);
    }

    #[test]
    fn primal_skip_rule() {
        let b = Mat::identity(2, 2) * 2.0;
        let (next, out) = bfgs_update_primal(&b, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(out, UpdateOutcome::Skipped);
        assert_eq!(next, b);
        let (_, out) = bfgs_update_primal(&b, &[1.0, 0.0], &[-1.0, 0.0]).unwrap();
        assert_eq!(out, UpdateOutcome::Skipped);
    }

    #[test]
    fn primal_rejects_non_finite() {
        let b = Mat::identity(2, 2);
        assert_eq!(
            bfgs_update_primal(&b, &[f64::NAN, 0.0], &[1.0, 0.0]),
            Err(CurvatureError::NonFinite)
        );
    }

    #[test]
    fn clip_spectrum_bounds() {
        let m = Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![0.01, 5.0, 100.0]));
        let (lo, hi) = linalg::eigen_range(&clip_spectrum(&m, 0.1, 10.0));
        assert!((lo - 0.1).abs() < 1e-12 && (hi - 10.0).abs() < 1e-12);
    }

    #[test]
    fn neumann_zero_terms() {
        let t = build_d_regular_cycle(5, 2).unwrap();
        let w = WeightMatrix::metropolis(&t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b: Vec<Mat> = (0..5).map(|_| random_spd(&mut rng, 3, 0.5)).collect();
        let g = StackedVector::from_flat(3, random_vec(&mut rng, 15));
        let d = neumann_descent(&g, &b, &w, 0.7, 0).unwrap();
        for i in 0..5 {
            let dd = b[i].clone() + Mat::identity(3, 3) * (2.0 * 0.7 * (1.0 - w.self_weight(i)));
            let expect = linalg::solve_spd(&dd, g.block(i)).unwrap();
            let neg: Vec<f64> = expect.iter().map(|v| -v).collect();
            assert!(rel(d.block(i), &neg) < 1e-14);
        }
    }

    #[test]
    fn neumann_single_node_is_newton() {
        let w = WeightMatrix::identity(1);
        let b = vec![Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])];
        let g = StackedVector::from_flat(2, vec![1.0, -3.0]);
        let exact = linalg::solve_spd(&b[0], g.as_slice()).unwrap();
        for k in [0, 1, 5] {
            let d = neumann_descent(&g, &b, &w, 3.0, k).unwrap();
            let neg: Vec<f64> = d.as_slice().iter().map(|v| -v).collect();
            assert!(rel(&neg, &exact) < 1e-14);
        }
    }

    #[test]
    fn neumann_deep_series_matches_dense_inverse() {
        let t = build_d_regular_cycle(5, 2).unwrap();
        let w = WeightMatrix::metropolis(&t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b: Vec<Mat> = (0..5).map(|_| random_spd(&mut rng, 3, 1.0)).collect();
        let g = StackedVector::from_flat(3, random_vec(&mut rng, 15));
        let d = neumann_descent(&g, &b, &w, 0.5, 40).unwrap();
        let dense = dense_primal_hessian(&b, &w, 0.5);
        let exact = linalg::solve_spd(&dense, g.as_slice()).unwrap();
        let neg: Vec<f64> = d.as_slice().iter().map(|v| -v).collect();
        assert!(rel(&neg, &exact) <= 1e-8);
    }

    #[test]
    fn dense_series_inverse_matches_recursion() {
        let t = build_d_regular_cycle(6, 2).unwrap();
        let w = WeightMatrix::metropolis(&t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b: Vec<Mat> = (0..6).map(|_| random_spd(&mut rng, 2, 0.2)).collect();
        let g = StackedVector::from_flat(2, random_vec(&mut rng, 12));
        for k in 0..4 {
            let d = neumann_descent(&g, &b, &w, 1.3, k).unwrap();
            let dense = dense_primal_inverse(&b, &w, 1.3, k).unwrap();
            let mut expect = linalg::mat_vec(&dense, g.as_slice());
            expect.iter_mut().for_each(|v| *v = -*v);
            assert!(rel(d.as_slice(), &expect) < 1e-12);
        }
    }

    #[test]
    fn dual_variation_cases() {
        let ups = [1.0 / 3.0; 3];
        let y = [1.0, 2.0, 3.0];
        let pair = dual_variations(&y, &y, &[1.0, 1.0, 1.0], &[0.5, 0.0, 2.0], 0.1, &ups).unwrap();
        assert_eq!(pair.variable_variation, vec![0.0; 3]);
        assert_eq!(pair.gradient_variation, vec![0.5, 1.0, -1.0]);

        let pair = dual_variations(&[3.0, 3.0, 3.0], &[0.0; 3], &[1.0; 3], &[0.0; 3], 0.0, &ups).unwrap();
        assert_eq!(pair.variable_variation, vec![1.0; 3]);
        assert_eq!(pair.gradient_variation, vec![1.0; 3]);

        let pair = dual_variations(&[3.0, 6.0], &[0.0; 2], &[1.0; 2], &[0.0; 2], 0.5, &[0.5]).unwrap();
        assert_eq!(pair.variable_variation, vec![1.5, 3.0]);
        assert_eq!(pair.gradient_variation, vec![0.25, -0.5]);
    }

    #[test]
    fn dual_skip_rule() {
        let c = Mat::identity(2, 2) * 1.1;
        let pair = VariationPair {
            variable_variation: vec![1.0, 0.0],
            gradient_variation: vec![-1.0, 0.0],
        };
        let (next, out) = bfgs_update_dual(&c, &pair, 0.1).unwrap();
        assert_eq!(out, UpdateOutcome::Skipped);
        assert_eq!(next, c);
    }

    #[test]
    fn dual_direction_trivial_cases() {
        let c = Mat::identity(4, 4);
        let h = [1.0, -2.0, 0.5, 3.0];
        let e = dual_neighborhood_direction(&c, &h, 0.0, &[0.5, 0.5], 0.0, DualDirectionRule::Plain).unwrap();
        assert_eq!(e, h.to_vec());
        let z = dual_neighborhood_direction(&c, &[0.0; 4], 0.3, &[0.5, 0.5], 0.1, DualDirectionRule::Conserving).unwrap();
        assert_eq!(z, vec![0.0; 4]);
    }

    #[test]
    fn rules_agree_at_initial_curvature() {
        let gamma = 0.1;
        let c = Mat::identity(6, 6) * (1.0 + gamma);
        let h = [0.3, -1.0, 2.0, 0.7, -0.2, 1.5];
        let ups = [1.0 / 3.0; 3];
        let a = dual_neighborhood_direction(&c, &h, 0.1, &ups, gamma, DualDirectionRule::Plain).unwrap();
        let b = dual_neighborhood_direction(&c, &h, 0.1, &ups, gamma, DualDirectionRule::Conserving).unwrap();
        assert!(rel(&a, &b) < 1e-14);
    }

    #[test]
    fn triangle_scatter_matches_dense_assembly() {
        let t = build_d_regular_cycle(3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = 2;
        let c: Vec<Mat> = (0..3).map(|_| random_spd(&mut rng, 6, 0.1)).collect();
        let h = StackedVector::from_flat(p, random_vec(&mut rng, 6));
        for rule in [DualDirectionRule::Plain, DualDirectionRule::Conserving] {
            let dist = distributed_dual_direction(&t, &c, &h, 0.1, 0.1, rule).unwrap();
            // independent assembly: Σ S_iᵀ C_i^{-1} S_i with selection
            // matrices built from scratch, plus ΓI
            let mut dense = Mat::identity(6, 6) * 0.1;
            for (i, ci) in c.iter().enumerate() {
                let s = Mat::from_fn(6, 6, |r, col| {
                    let (slot, k) = (r / p, r % p);
                    let node = t.neighborhood(i)[slot];
                    if col == node * p + k { 1.0 } else { 0.0 }
                });
                let inner = match rule {
                    DualDirectionRule::Plain => linalg::inverse_spd(ci).unwrap(),
                    DualDirectionRule::Conserving => {
                        let avg = Mat::from_fn(6, 6, |r, col| if r % p == col % p { 1.0 / 3.0 } else { 0.0 });
                        let proj = Mat::identity(6, 6) - &avg;
                        &proj * linalg::inverse_spd(ci).unwrap() * &proj + avg / 1.1
                    }
                };
                dense += s.transpose() * inner * s;
            }
            let expect = linalg::mat_vec(&dense, h.as_slice());
            assert!(rel(dist.as_slice(), &expect) < 1e-12);
        }
    }

    #[test]
    fn single_node_global_inverse() {
        let t = Topology::from_edges(1, []).unwrap();
        let c = vec![Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5])];
        let h = assemble_global_dual_inverse(&c, 0.2, 0.1, &t, 2, DualDirectionRule::Plain).unwrap();
        let expect = linalg::inverse_spd(&c[0]).unwrap() + Mat::identity(2, 2) * 0.2;
        assert!((h - expect).abs().max() < 1e-14);
    }

    fn random_state(seed: u64, n: usize, p: usize) -> (Topology, WeightMatrix, Vec<Mat>, StackedVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_graph(&mut rng, n);
        let w = WeightMatrix::metropolis(&t).unwrap();
        let b = (0..n).map(|_| random_spd(&mut rng, p, 0.3)).collect();
        let g = StackedVector::from_flat(p, random_vec(&mut rng, n * p));
        (t, w, b, g)
    }

    proptest! {
        #[test]
        fn primal_secant_holds(seed in 0u64..10_000, p in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_spd(&mut rng, p, 0.1);
            let a = random_spd(&mut rng, p, 0.1);
            let u = random_vec(&mut rng, p);
            let r = linalg::mat_vec(&a, &u);
            let (next, out) = bfgs_update_primal(&b, &u, &r).unwrap();
            prop_assert_eq!(out, UpdateOutcome::Accepted);
            prop_assert!(linalg::norm(&linalg::sub(&linalg::mat_vec(&next, &u), &r)) <= 1e-10 * linalg::norm(&r));
            prop_assert!(linalg::eigen_range(&next).0 > 0.0);
        }

        #[test]
        fn dual_secant_and_floor(seed in 0u64..10_000, m in 2usize..5, p in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gamma = 0.1;
            let len = m * p;
            let c = random_spd(&mut rng, len, gamma);
            let ups = vec![1.0 / m as f64; m];
            let y_old = random_vec(&mut rng, len);
            let y_new = random_vec(&mut rng, len);
            let h_old = random_vec(&mut rng, len);
            let a = random_spd(&mut rng, len, 0.5);
            let mut h_new = linalg::mat_vec(&a, &linalg::sub(&y_new, &y_old));
            linalg::axpy(&mut h_new, 1.0, &h_old);
            let pair = dual_variations(&y_new, &y_old, &h_new, &h_old, gamma, &ups).unwrap();
            let (next, out) = bfgs_update_dual(&c, &pair, gamma).unwrap();
            if out == UpdateOutcome::Accepted {
                let dh = linalg::sub(&h_new, &h_old);
                let resid = linalg::sub(&linalg::mat_vec(&next, &pair.variable_variation), &dh);
                prop_assert!(linalg::norm(&resid) <= 1e-10 * linalg::norm(&dh));
                prop_assert!(linalg::eigen_range(&next).0 >= gamma * (1.0 - 1e-9));
            } else {
                prop_assert!(linalg::dot(&pair.variable_variation, &pair.gradient_variation) <= 0.0
                    || next == c);
            }
        }

        #[test]
        fn laplacian_matches_dense(seed in 0u64..10_000, n in 2usize..=10, p in 1usize..=5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_graph(&mut rng, n);
            let w = WeightMatrix::metropolis(&t).unwrap();
            crate::network::validate_weight_matrix(&w, &t).unwrap();
            let x = StackedVector::from_flat(p, random_vec(&mut rng, n * p));
            let fast = apply_laplacian(&w, &x).unwrap();
            let dense = linalg::mat_vec(&linalg::kron_identity(&w.dense_laplacian(), p), x.as_slice());
            prop_assert!(linalg::norm(&linalg::sub(fast.as_slice(), &dense)) <= 1e-12 * linalg::norm(&dense).max(1e-300));
            prop_assert!(linalg::dot(x.as_slice(), fast.as_slice()) >= -1e-14);
        }

        #[test]
        fn series_error_contracts(seed in 0u64..2000, n in 2usize..=6, p in 1usize..=4, alpha in 0.1f64..4.0) {
            let (_, w, b, g) = random_state(seed, n, p);
            let exact = linalg::solve_spd(&dense_primal_hessian(&b, &w, alpha), g.as_slice()).unwrap();
            let delta = (0..n).map(|i| w.self_weight(i)).fold(f64::INFINITY, f64::min);
            let psi = b.iter().map(|bi| linalg::eigen_range(bi).0).fold(f64::INFINITY, f64::min);
            let rho = 2.0 * alpha * (1.0 - delta) / (2.0 * alpha * (1.0 - delta) + psi);
            let mut prev = f64::INFINITY;
            for k in 0..8 {
                let d = neumann_descent(&g, &b, &w, alpha, k).unwrap();
                let err: f64 = d.as_slice().iter().zip(&exact).map(|(a, e)| (a + e) * (a + e)).sum::<f64>().sqrt();
                prop_assert!(err <= prev * (1.0 + 1e-9) + 1e-13);
                prev = err;
            }
            prop_assert!(rho < 1.0);
        }

        #[test]
        fn scatter_matches_global_inverse(seed in 0u64..5000, n in 1usize..=6, p in 1usize..=4, conserving: bool) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_graph(&mut rng, n);
            let c: Vec<Mat> = (0..n).map(|i| random_spd(&mut rng, t.size(i) * p, 0.1)).collect();
            let h = StackedVector::from_flat(p, random_vec(&mut rng, n * p));
            let rule = if conserving { DualDirectionRule::Conserving } else { DualDirectionRule::Plain };
            let dist = distributed_dual_direction(&t, &c, &h, 0.1, 0.1, rule).unwrap();
            let dense = assemble_global_dual_inverse(&c, 0.1, 0.1, &t, p, rule).unwrap();
            let expect = linalg::mat_vec(&dense, h.as_slice());
            prop_assert!(linalg::norm(&linalg::sub(dist.as_slice(), &expect)) <= 1e-10 * linalg::norm(&expect).max(1e-300));
            let (lo, hi) = linalg::eigen_range(&dense);
            prop_assert!(lo >= 0.1 - 1e-9 && hi <= 0.1 + n as f64 / 0.1 + 1e-9);
        }
    }
}
