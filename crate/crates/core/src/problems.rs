//! Problem families: diagonal quadratics with a controlled condition number
//! and distributed regularized logistic regression.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::linalg::{self, Mat};
use crate::network::StackedVector;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProblemError {
    #[error("quadratic generator needs p >= 2, got {0}")]
    DimensionTooSmall(usize),
    #[error("need at least one node")]
    NoNodes,
    #[error("logistic generator needs q >= 1")]
    NoSamples,
    #[error("reg_weight must be positive and finite, got {0}")]
    BadRegularizer(f64),
    #[error("standard deviations must be nonnegative and finite")]
    BadDeviation,
    #[error("the closed-form inner minimizer exists only for quadratic objectives; it is infeasible for logistic regression")]
    NoClosedFormArgmin,
    #[error("aggregate Hessian is singular")]
    Singular,
    #[error("centralized Newton oracle stalled at gradient norm {0}")]
    OracleStalled(f64),
    #[error("inconsistent problem data: {0}")]
    Inconsistent(String),
}

/// `f_i(x) = ½ xᵀ diag(a_i) x + b_iᵀ x`
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuadraticProblem {
    pub diagonals: Vec<Vec<f64>>,
    pub offsets: Vec<Vec<f64>>,
}

/// `f_i(x) = reg_weight/(2n) ‖x‖² + Σ_l log(1 + exp(−v_l u_lᵀ x))`
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LogisticProblem {
    /// `features[i][l]` is sample `l` of node `i`.
    pub features: Vec<Vec<Vec<f64>>>,
    /// Labels in `{−1, +1}`, aligned with `features`.
    pub labels: Vec<Vec<f64>>,
    pub reg_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "family", rename_all = "snake_case"))]
pub enum Problem {
    Quadratic(QuadraticProblem),
    Logistic(LogisticProblem),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SolutionMethod {
    ClosedForm,
    NewtonOracle,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReferenceSolution {
    pub x_star: Vec<f64>,
    pub f_star: f64,
    pub method: SolutionMethod,
    pub residual_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityBounds {
    pub mu: f64,
    pub lipschitz: f64,
}

/// `10^k` by repeated multiplication, exact for the small integer powers
/// used here.
fn pow10(k: u32) -> f64 {
    (0..k).fold(1.0, |acc, _| acc * 10.0)
}

/// Diagonal quadratics whose aggregate spectrum lies in `[n·10^{−η}, n·10^{η}]`.
pub fn generate_quadratic(n: usize, p: usize, eta: u32, seed: u64) -> Result<QuadraticProblem, ProblemError> {
    if p < 2 {
        return Err(ProblemError::DimensionTooSmall(p));
    }
    if n == 0 {
        return Err(ProblemError::NoNodes);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let large = p.div_ceil(2);
    let mut diagonals = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    for _ in 0..n {
        let a: Vec<f64> = (0..p)
            .map(|k| {
                let e = rng.random_range(0..=eta);
                if k < large {
                    pow10(e)
                } else {
                    1.0 / pow10(e)
                }
            })
            .collect();
        let b: Vec<f64> = (0..p).map(|_| rng.random::<f64>()).collect();
        diagonals.push(a);
        offsets.push(b);
    }
    Ok(QuadraticProblem { diagonals, offsets })
}

/// Parameters of the two-Gaussian logistic dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LogisticSpec {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub mean: f64,
    pub std_pos: f64,
    pub std_neg: f64,
    pub reg_weight: f64,
}

impl LogisticSpec {
    /// 20 nodes, 4 features, 100 samples each, class means ±3, unit spread.
    pub fn reference() -> Self {
        Self {
            n: 20,
            p: 4,
            q: 100,
            mean: 3.0,
            std_pos: 1.0,
            std_neg: 1.0,
            reg_weight: 1e-4,
        }
    }
}

pub fn generate_logistic(spec: &LogisticSpec, seed: u64) -> Result<LogisticProblem, ProblemError> {
    if spec.n == 0 {
        return Err(ProblemError::NoNodes);
    }
    if spec.q == 0 {
        return Err(ProblemError::NoSamples);
    }
    if !(spec.reg_weight > 0.0 && spec.reg_weight.is_finite()) {
        return Err(ProblemError::BadRegularizer(spec.reg_weight));
    }
    let pos = Normal::new(spec.mean, spec.std_pos).map_err(|_| ProblemError::BadDeviation)?;
    let neg = Normal::new(-spec.mean, spec.std_neg).map_err(|_| ProblemError::BadDeviation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives = spec.q.div_ceil(2);
    let mut features = Vec::with_capacity(spec.n);
    let mut labels = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let mut u = Vec::with_capacity(spec.q);
        let mut v = Vec::with_capacity(spec.q);
        for l in 0..spec.q {
            let (dist, label) = if l < positives { (&pos, 1.0) } else { (&neg, -1.0) };
            u.push((0..spec.p).map(|_| dist.sample(&mut rng)).collect::<Vec<f64>>());
            v.push(label);
        }
        features.push(u);
        labels.push(v);
    }
    Ok(LogisticProblem {
        features,
        labels,
        reg_weight: spec.reg_weight,
    })
}

/// `log(1 + exp(−z))` without overflow.
fn logistic_loss(z: f64) -> f64 {
    let neg = if z < 0.0 { -z } else { 0.0 };
    neg + libm::log1p(libm::exp(-z.abs()))
}

/// `1/(1 + exp(z))`, never exponentiating a large positive argument.
fn sigmoid_neg(z: f64) -> f64 {
    if z >= 0.0 {
        let e = libm::exp(-z);
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + libm::exp(z))
    }
}

impl QuadraticProblem {
    pub fn n(&self) -> usize {
        self.diagonals.len()
    }

    pub fn p(&self) -> usize {
        self.diagonals.first().map_or(0, Vec::len)
    }
}

impl LogisticProblem {
    pub fn n(&self) -> usize {
        self.features.len()
    }

    pub fn p(&self) -> usize {
        self.features
            .first()
            .and_then(|f| f.first())
            .map_or(0, Vec::len)
    }

    fn local_reg(&self) -> f64 {
        self.reg_weight / self.n() as f64
    }
}

impl Problem {
    pub fn n(&self) -> usize {
        match self {
            Problem::Quadratic(q) => q.n(),
            Problem::Logistic(l) => l.n(),
        }
    }

    pub fn p(&self) -> usize {
        match self {
            Problem::Quadratic(q) => q.p(),
            Problem::Logistic(l) => l.p(),
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, Problem::Quadratic(_))
    }

    /// Shape and sign checks for data that did not come from a generator.
    pub fn check(&self) -> Result<(), ProblemError> {
        let (n, p) = (self.n(), self.p());
        if n == 0 {
            return Err(ProblemError::NoNodes);
        }
        let bad = |m: &str| Err(ProblemError::Inconsistent(m.into()));
        match self {
            Problem::Quadratic(q) => {
                if q.offsets.len() != n {
                    return bad("offsets and diagonals list different node counts");
                }
                for (a, b) in q.diagonals.iter().zip(&q.offsets) {
                    if a.len() != p || b.len() != p {
                        return bad("per-node vectors must share one dimension");
                    }
                    if !a.iter().all(|v| *v > 0.0 && v.is_finite()) {
                        return bad("diagonal entries must be positive and finite");
                    }
                    if !linalg::all_finite(b) {
                        return bad("offsets must be finite");
                    }
                }
            }
            Problem::Logistic(l) => {
                if !(l.reg_weight > 0.0 && l.reg_weight.is_finite()) {
                    return Err(ProblemError::BadRegularizer(l.reg_weight));
                }
                if l.labels.len() != n {
                    return bad("labels and features list different node counts");
                }
                for (u, v) in l.features.iter().zip(&l.labels) {
                    if u.is_empty() {
                        return Err(ProblemError::NoSamples);
                    }
                    if u.len() != v.len() {
                        return bad("each sample needs exactly one label");
                    }
                    if !u.iter().all(|s| s.len() == p && linalg::all_finite(s)) {
                        return bad("features must be finite and share one dimension");
                    }
                    if !v.iter().all(|&y| y == 1.0 || y == -1.0) {
                        return bad("labels must be -1 or +1");
                    }
                }
            }
        }
        Ok(())
    }

    pub fn local_value(&self, i: usize, x: &[f64]) -> f64 {
        match self {
            Problem::Quadratic(q) => q.diagonals[i]
                .iter()
                .zip(&q.offsets[i])
                .zip(x)
                .map(|((a, b), xk)| 0.5 * a * xk * xk + b * xk)
                .sum(),
            Problem::Logistic(l) => {
                let reg = 0.5 * l.local_reg() * linalg::dot(x, x);
                reg + l.features[i]
                    .iter()
                    .zip(&l.labels[i])
                    .map(|(u, v)| logistic_loss(v * linalg::dot(u, x)))
                    .sum::<f64>()
            }
        }
    }

    pub fn local_gradient(&self, i: usize, x: &[f64]) -> Vec<f64> {
        match self {
            Problem::Quadratic(q) => q.diagonals[i]
                .iter()
                .zip(&q.offsets[i])
                .zip(x)
                .map(|((a, b), xk)| a * xk + b)
                .collect(),
            Problem::Logistic(l) => {
                let mut g: Vec<f64> = x.iter().map(|xk| l.local_reg() * xk).collect();
                for (u, v) in l.features[i].iter().zip(&l.labels[i]) {
                    let s = sigmoid_neg(v * linalg::dot(u, x));
                    linalg::axpy(&mut g, -v * s, u);
                }
                g
            }
        }
    }

    pub fn local_hessian(&self, i: usize, x: &[f64]) -> Mat {
        match self {
            Problem::Quadratic(q) => Mat::from_diagonal(&nalgebra::DVector::from_column_slice(&q.diagonals[i])),
            Problem::Logistic(l) => {
                let p = x.len();
                let mut h = Mat::identity(p, p) * l.local_reg();
                for (u, v) in l.features[i].iter().zip(&l.labels[i]) {
                    let s = sigmoid_neg(v * linalg::dot(u, x));
                    let w = s * (1.0 - s);
                    if w == 0.0 {
                        continue;
                    }
                    for r in 0..p {
                        for c in r..p {
                            h[(r, c)] += w * u[r] * u[c];
                        }
                    }
                }
                for r in 0..p {
                    for c in 0..r {
                        h[(r, c)] = h[(c, r)];
                    }
                }
                h
            }
        }
    }

    /// `argmin_x f_i(x) + yᵀx = −A_i^{-1}(b_i + y)`
    pub fn local_argmin_l0(&self, i: usize, y: &[f64]) -> Result<Vec<f64>, ProblemError> {
        match self {
            Problem::Quadratic(q) => Ok(q.diagonals[i]
                .iter()
                .zip(&q.offsets[i])
                .zip(y)
                .map(|((a, b), yk)| -(b + yk) / a)
                .collect()),
            Problem::Logistic(_) => Err(ProblemError::NoClosedFormArgmin),
        }
    }

    /// Stacked `∇f(x)`.
    pub fn gradient(&self, x: &StackedVector) -> StackedVector {
        let blocks: Vec<Vec<f64>> = (0..self.n()).map(|i| self.local_gradient(i, x.block(i))).collect();
        StackedVector::from_blocks(&blocks)
    }

    pub fn aggregate_value(&self, x: &[f64]) -> f64 {
        (0..self.n()).map(|i| self.local_value(i, x)).sum()
    }

    pub fn aggregate_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.p()];
        for i in 0..self.n() {
            linalg::axpy(&mut g, 1.0, &self.local_gradient(i, x));
        }
        g
    }

    pub fn aggregate_hessian(&self, x: &[f64]) -> Mat {
        let p = self.p();
        (0..self.n()).fold(Mat::zeros(p, p), |acc, i| acc + self.local_hessian(i, x))
    }

    pub fn centralized_solution(&self) -> Result<ReferenceSolution, ProblemError> {
        match self {
            Problem::Quadratic(q) => {
                let p = q.p();
                let mut x = vec![0.0; p];
                for (k, xk) in x.iter_mut().enumerate() {
                    let a: f64 = q.diagonals.iter().map(|d| d[k]).sum();
                    let b: f64 = q.offsets.iter().map(|o| o[k]).sum();
                    if a <= 0.0 {
                        return Err(ProblemError::Singular);
                    }
                    *xk = -b / a;
                }
                let residual_norm = linalg::norm(&self.aggregate_gradient(&x));
                Ok(ReferenceSolution {
                    f_star: self.aggregate_value(&x),
                    x_star: x,
                    method: SolutionMethod::ClosedForm,
                    residual_norm,
                })
            }
            Problem::Logistic(_) => self.newton_oracle(),
        }
    }

    /// Damped Newton with Armijo backtracking on the aggregate objective.
    fn newton_oracle(&self) -> Result<ReferenceSolution, ProblemError> {
        let p = self.p();
        let mut x = vec![0.0; p];
        let mut f = self.aggregate_value(&x);
        let mut best = f64::INFINITY;
        for _ in 0..500 {
            let g = self.aggregate_gradient(&x);
            let gn = linalg::norm(&g);
            best = best.min(gn);
            if gn <= 1e-12 * linalg::norm(&x).max(1.0) {
                return Ok(ReferenceSolution {
                    x_star: x,
                    f_star: f,
                    method: SolutionMethod::NewtonOracle,
                    residual_norm: gn,
                });
            }
            let h = self.aggregate_hessian(&x);
            let step = linalg::solve_spd(&h, &g).ok_or(ProblemError::Singular)?;
            let slope = -linalg::dot(&g, &step);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand: Vec<f64> = x.iter().zip(&step).map(|(xk, s)| xk - t * s).collect();
                let fc = self.aggregate_value(&cand);
                if fc <= f + 1e-4 * t * slope {
                    x = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // objective values have run out of resolution; take the pure
                // Newton step and let the gradient test decide
                for (xk, s) in x.iter_mut().zip(&step) {
                    *xk -= s;
                }
                f = self.aggregate_value(&x);
            }
        }
        Err(ProblemError::OracleStalled(best))
    }

    pub fn convexity_bounds(&self) -> ConvexityBounds {
        match self {
            Problem::Quadratic(q) => {
                let all = q.diagonals.iter().flatten().copied();
                ConvexityBounds {
                    mu: all.clone().fold(f64::INFINITY, f64::min),
                    lipschitz: all.fold(f64::NEG_INFINITY, f64::max),
                }
            }
            Problem::Logistic(l) => {
                let p = l.p();
                let worst = l
                    .features
                    .iter()
                    .map(|samples| {
                        let mut m = Mat::zeros(p, p);
                        for u in samples {
                            for r in 0..p {
                                for c in 0..p {
                                    m[(r, c)] += 0.25 * u[r] * u[c];
                                }
                            }
                        }
                        linalg::eigen_range(&m).1
                    })
                    .fold(0.0, f64::max);
                ConvexityBounds {
                    mu: l.local_reg(),
                    lipschitz: l.local_reg() + worst,
                }
            }
        }
    }

    /// FNV-1a over the problem's numeric content.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        match self {
            Problem::Quadratic(q) => {
                eat(0.0);
                q.diagonals.iter().chain(&q.offsets).flatten().for_each(|&v| eat(v));
            }
            Problem::Logistic(l) => {
                eat(1.0);
                eat(l.reg_weight);
                l.features.iter().flatten().flatten().for_each(|&v| eat(v));
                l.labels.iter().flatten().for_each(|&v| eat(v));
            }
        }
        h
    }
}

impl From<QuadraticProblem> for Problem {
    fn from(q: QuadraticProblem) -> Self {
        Problem::Quadratic(q)
    }
}

impl From<LogisticProblem> for Problem {
    fn from(l: LogisticProblem) -> Self {
        Problem::Logistic(l)
    }
}

/// `(1/n) Σ_i ‖x_i − x*‖² / ‖x*‖²`
pub fn relative_error(x: &StackedVector, x_star: &[f64]) -> f64 {
    let denom = linalg::dot(x_star, x_star);
    let n = x.n() as f64;
    let num: f64 = x
        .blocks()
        .map(|b| b.iter().zip(x_star).map(|(a, s)| (a - s) * (a - s)).sum::<f64>())
        .sum();
    num / (n * denom)
}
