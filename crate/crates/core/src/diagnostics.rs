//! Dense convergence diagnostics for primal-dual quasi-Newton runs.
//!
//! Everything here assembles `np × np` matrices and is meant for desk-scale
//! networks only.

use alloc::vec::Vec;

use crate::linalg::{self, Mat};
use crate::network::{StackedVector, Topology, WeightMatrix};
use crate::problems::Problem;
use crate::quasi_newton::{assemble_global_dual_inverse, dense_primal_inverse, DualDirectionRule};

/// Free constants of the contraction factor.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KappaParams {
    pub beta: f64,
    pub phi: f64,
    /// `None` picks the value balancing the last bracket.
    pub zeta: Option<f64>,
}

impl Default for KappaParams {
    fn default() -> Self {
        Self {
            beta: 2.0,
            phi: 2.0,
            zeta: None,
        }
    }
}

/// Measured eigenvalue range against its predicted interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenCheck {
    pub lower: f64,
    pub upper: f64,
    pub min_eig: f64,
    pub max_eig: f64,
}

impl EigenCheck {
    pub fn holds(&self, slack: f64) -> bool {
        self.min_eig >= self.lower - slack && self.max_eig <= self.upper + slack
    }

    /// Smallest distance to either bound; negative when violated.
    pub fn margin(&self) -> f64 {
        (self.min_eig - self.lower).min(self.upper - self.max_eig)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRecord {
    pub sigma_norm: f64,
    /// `‖z_t − z*‖²_J` with the iteration's own `J_t`.
    pub lyapunov_before: f64,
    /// `‖z_{t+1} − z*‖²_J` with the same `J_t`.
    pub lyapunov_after: f64,
    pub kappa: f64,
    pub primal_inverse: EigenCheck,
    pub dual_inverse: EigenCheck,
    pub psi: f64,
    pub big_psi: f64,
    /// Norm of the part of `y` outside the range of `I − Z`.
    pub range_defect: f64,
    pub range_flagged: bool,
}

/// Run-constant pieces of the diagnostics.
pub struct DiagnosticContext {
    p: usize,
    alpha: f64,
    k: usize,
    gamma: f64,
    big_gamma: f64,
    rule: DualDirectionRule,
    params: KappaParams,
    laplacian: Mat,
    pinv_sqrt_laplacian: Mat,
    x_star: StackedVector,
    nu_star: Vec<f64>,
    grad_star: StackedVector,
    delta: f64,
    big_delta: f64,
    delta_hat: f64,
    mu: f64,
    lipschitz: f64,
}

/// Per-iteration inputs: iterates before and after, and the curvature the
/// iteration used.
pub struct IterateData<'a> {
    pub x_prev: &'a StackedVector,
    pub x: &'a StackedVector,
    pub y_prev: &'a StackedVector,
    pub y: &'a StackedVector,
    pub primal_curvature: &'a [Mat],
    pub dual_curvature: &'a [Mat],
}

pub struct RunConstants {
    pub alpha: f64,
    pub k: usize,
    pub gamma: f64,
    pub big_gamma: f64,
    pub rule: DualDirectionRule,
}

impl DiagnosticContext {
    pub fn new(
        problem: &Problem,
        w: &WeightMatrix,
        consts: RunConstants,
        x_star: &[f64],
        params: KappaParams,
    ) -> Self {
        let n = w.n();
        let p = problem.p();
        let laplacian = linalg::kron_identity(&w.dense_laplacian(), p);
        let (_, pinv_sqrt_laplacian) = linalg::psd_sqrt_and_pinv_sqrt(&laplacian, 1e-10);
        let xs = StackedVector::consensus(n, x_star);
        let grad_star = problem.gradient(&xs);
        let y_star: Vec<f64> = grad_star.as_slice().iter().map(|g| -g).collect();
        let nu_star = linalg::mat_vec(&pinv_sqrt_laplacian, &y_star);
        let diag: Vec<f64> = (0..n).map(|i| w.self_weight(i)).collect();
        let ev = linalg::symmetric_eigenvalues(&w.dense_laplacian());
        let bounds = problem.convexity_bounds();
        Self {
            p,
            alpha: consts.alpha,
            k: consts.k,
            gamma: consts.gamma,
            big_gamma: consts.big_gamma,
            rule: consts.rule,
            params,
            laplacian,
            pinv_sqrt_laplacian,
            x_star: xs,
            nu_star,
            grad_star,
            delta: diag.iter().copied().fold(f64::INFINITY, f64::min),
            big_delta: diag.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            delta_hat: ev.get(1).copied().unwrap_or(0.0),
            mu: bounds.mu,
            lipschitz: bounds.lipschitz,
        }
    }

    /// `y* = −∇f(x*)` blockwise.
    pub fn y_star(&self) -> StackedVector {
        let v = self.grad_star.as_slice().iter().map(|g| -g).collect();
        StackedVector::from_flat(self.p, v)
    }

    pub fn evaluate(
        &self,
        problem: &Problem,
        w: &WeightMatrix,
        topology: &Topology,
        it: &IterateData<'_>,
    ) -> Option<DiagnosticRecord> {
        let n = w.n();
        let alpha = self.alpha;

        let g_inv = dense_primal_inverse(it.primal_curvature, w, alpha, self.k)?;
        let g_k = linalg::inverse_spd(&g_inv)?;
        let r_mat = &g_k - &self.laplacian * alpha;
        let h_inv = assemble_global_dual_inverse(
            it.dual_curvature,
            self.big_gamma,
            self.gamma,
            topology,
            self.p,
            self.rule,
        )
        .ok()?;
        let h_mat = linalg::inverse_spd(&h_inv)?;

        let (psi, big_psi) = it
            .primal_curvature
            .iter()
            .map(|b| linalg::eigen_range(b))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| (lo.min(a), hi.max(b)));
        let (lambda, big_lambda) = primal_inverse_bounds(alpha, self.delta, self.big_delta, psi, big_psi, self.k);
        let (g_lo, g_hi) = linalg::eigen_range(&g_inv);
        let (h_lo, h_hi) = linalg::eigen_range(&h_inv);
        let big_p = self.big_gamma + n as f64 / self.gamma;

        // σ_t
        let grad_prev = problem.gradient(it.x_prev);
        let grad = problem.gradient(it.x);
        let dx_star = linalg::sub(it.x.as_slice(), self.x_star.as_slice());
        let step = linalg::sub(it.x.as_slice(), it.x_prev.as_slice());
        let mut sigma = linalg::sub(grad_prev.as_slice(), grad.as_slice());
        let lap_dx = linalg::mat_vec(&self.laplacian, &dx_star);
        linalg::axpy(&mut sigma, -alpha, &linalg::mat_vec(&h_inv, &lap_dx));
        linalg::axpy(&mut sigma, 1.0, &linalg::mat_vec(&r_mat, &step));

        // Lyapunov values with ν recovered from y
        let defect = |y: &StackedVector| {
            let mut mean = alloc::vec![0.0; self.p];
            for b in y.blocks() {
                linalg::axpy(&mut mean, 1.0 / n as f64, b);
            }
            linalg::norm(&mean) * libm::sqrt(n as f64)
        };
        let range_defect = defect(it.y).max(defect(it.y_prev));
        let lyap = |x: &StackedVector, y: &StackedVector| {
            let dx = linalg::sub(x.as_slice(), self.x_star.as_slice());
            let nu = linalg::mat_vec(&self.pinv_sqrt_laplacian, y.as_slice());
            let dnu = linalg::sub(&nu, &self.nu_star);
            alpha * linalg::quadratic_form(&r_mat, &dx) + linalg::quadratic_form(&h_mat, &dnu)
        };

        let sigma_cap = big_lambda.recip() - 2.0 * alpha * (1.0 - self.delta);
        let kappa = kappa(&KappaInputs {
            alpha,
            mu: self.mu,
            lipschitz: self.lipschitz,
            delta: self.delta,
            delta_hat: self.delta_hat,
            big_gamma: self.big_gamma,
            big_p,
            sigma: sigma_cap,
            params: self.params,
        });

        Some(DiagnosticRecord {
            sigma_norm: linalg::norm(&sigma),
            lyapunov_before: lyap(it.x_prev, it.y_prev),
            lyapunov_after: lyap(it.x, it.y),
            kappa,
            primal_inverse: EigenCheck {
                lower: lambda,
                upper: big_lambda,
                min_eig: g_lo,
                max_eig: g_hi,
            },
            dual_inverse: EigenCheck {
                lower: self.big_gamma,
                upper: big_p,
                min_eig: h_lo,
                max_eig: h_hi,
            },
            psi,
            big_psi,
            range_defect,
            range_flagged: range_defect > 1e-8 * it.y.norm().max(1.0),
        })
    }
}

/// `(λ, Λ)` bounding the eigenvalues of the truncated primal inverse.
pub fn primal_inverse_bounds(alpha: f64, delta: f64, big_delta: f64, psi: f64, big_psi: f64, k: usize) -> (f64, f64) {
    let lambda = 1.0 / (2.0 * alpha * (1.0 - delta) + big_psi);
    let rho = 2.0 * alpha * (1.0 - delta) / (2.0 * alpha * (1.0 - delta) + psi);
    let big_lambda = (1.0 - libm::pow(rho, (k + 1) as f64)) / ((1.0 - rho) * (2.0 * alpha * (1.0 - big_delta) + psi));
    (lambda, big_lambda)
}

pub struct KappaInputs {
    pub alpha: f64,
    pub mu: f64,
    pub lipschitz: f64,
    pub delta: f64,
    pub delta_hat: f64,
    pub big_gamma: f64,
    pub big_p: f64,
    pub sigma: f64,
    pub params: KappaParams,
}

/// Minimum of the three contraction brackets.
pub fn kappa(k: &KappaInputs) -> f64 {
    let KappaParams { beta, phi, zeta } = k.params;
    let (a, mu, l, p, dh) = (k.alpha, k.mu, k.lipschitz, k.big_p, k.delta_hat);
    let zeta = zeta.unwrap_or_else(|| 1.0 / libm::sqrt(4.0 * a * a * p * (1.0 - k.delta)));
    let first = (a * k.sigma - 2.0 * a * zeta * l * l / k.sigma)
        / (beta * beta / (p * (beta - 1.0) * dh) - 2.0 * beta * phi * k.big_gamma * k.big_gamma / (p * (phi - 1.0) * dh));
    let second = 2.0 * a * dh / (phi * beta * (mu + l));
    let third = (2.0 * mu * l / (mu + l) - 1.0 / zeta - 4.0 * a * a * p * zeta * (1.0 - k.delta))
        / (k.sigma - 2.0 * beta * phi * a / (p * (phi - 1.0) * dh));
    first.min(second).min(third)
}
