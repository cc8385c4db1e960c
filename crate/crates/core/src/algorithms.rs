//! Node protocols for PD-QN and the baselines, plus stepsize tuning.
//!
//! Round layouts per iteration (`K` = series depth):
//!
//! | method | rounds | payloads in order |
//! |--------|--------|-------------------|
//! | PD-QN  | K+5    | `d⁰ … d^{K−1}`, `x_{t+1}`, `y_t`, `h_t`, `e` scatter, `y_{t+1}` |
//! | ESOM   | K+3    | `d⁰ … d^{K−1}`, `x_{t+1}`, `h_t`, `y_{t+1}` |
//! | DA     | 2      | `x_{t+1}`, `y_{t+1}` |
//! | DGD    | 1      | `x_{t+1}` |
//! | EXTRA  | 1      | `x_{t+1}` |

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::diagnostics::{DiagnosticContext, IterateData, KappaParams, RunConstants};
use crate::linalg::{self, Mat};
use crate::network::{StackedVector, Topology, WeightMatrix};
use crate::problems::Problem;
use crate::quasi_newton::{
    bfgs_update_dual, bfgs_update_primal, clip_spectrum, dual_neighborhood_direction, dual_variations,
    DualDirectionRule, NeumannNode, UpdateOutcome,
};
use crate::simulator::{
    self, ConvergenceTrace, Executor, ExchangeLedger, Inbox, IterationView, Network, NodeContext, NodeFault,
    NodeProtocol, Payload, Phase, RunOptions, SimError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Variant {
    Pdqn,
    Da,
    Dgd,
    Extra,
    Esom,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Pdqn, Variant::Da, Variant::Dgd, Variant::Extra, Variant::Esom];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Pdqn => "pdqn",
            Variant::Da => "da",
            Variant::Dgd => "dgd",
            Variant::Extra => "extra",
            Variant::Esom => "esom",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }

    pub fn rounds_per_iteration(self, k: usize) -> usize {
        match self {
            Variant::Pdqn => k + 5,
            Variant::Esom => k + 3,
            Variant::Da => 2,
            Variant::Dgd | Variant::Extra => 1,
        }
    }

    /// Whether the method converges to the exact consensus solution.
    pub fn is_exact(self) -> bool {
        !matches!(self, Variant::Dgd)
    }
}

/// Which gradient difference feeds the primal BFGS pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PrimalVariation {
    /// `r = ∇f_i(x_{t+1}) − ∇f_i(x_t)`: curvature of the local objective only.
    #[default]
    Objective,
    /// `r = g_{t+1} − g_t` with the full augmented-Lagrangian gradient.
    Augmented,
}

/// Orientation of the dual gradient variation fed to the dual BFGS pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DualCurvatureSign {
    /// `s̃ = Δh − γṽ`.
    AsWritten,
    /// `s̃ = −Δh − γṽ`: the curvature of the negated (convex) dual.
    #[default]
    Negated,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AlgorithmConfig {
    pub variant: Variant,
    pub alpha: f64,
    pub eps_d: f64,
    #[cfg_attr(feature = "serde", serde(rename = "K"))]
    pub k: usize,
    pub gamma: f64,
    #[cfg_attr(feature = "serde", serde(rename = "Gamma"))]
    pub big_gamma: f64,
    pub primal_step: f64,
    pub dual_rule: DualDirectionRule,
    pub primal_variation: PrimalVariation,
    pub dual_curvature_sign: DualCurvatureSign,
    /// Optional `[lo, hi]` clamp on the spectrum of every `B_i`.
    pub curvature_clip: Option<[f64; 2]>,
    /// `B_i` starts at this multiple of the identity.
    pub initial_curvature: f64,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        Self::new(Variant::Pdqn)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AlgoError {
    #[error("invalid algorithm configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("{variant} cannot run on this problem: {reason}")]
    Unsupported { variant: &'static str, reason: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("no candidate in the grid converged for {0}")]
    NoConvergentStep(&'static str),
}

impl AlgorithmConfig {
    pub fn new(variant: Variant) -> Self {
        let (alpha, eps_d) = match variant {
            Variant::Pdqn => (2.0, 0.5),
            _ => (1.0, 1.0),
        };
        Self {
            variant,
            alpha,
            eps_d,
            k: 2,
            gamma: 0.1,
            big_gamma: 0.1,
            primal_step: 0.1,
            dual_rule: DualDirectionRule::default(),
            primal_variation: PrimalVariation::default(),
            dual_curvature_sign: DualCurvatureSign::default(),
            curvature_clip: None,
            initial_curvature: 1.0,
        }
    }

    /// Every violated condition, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let positive = |name: &str, v: f64, out: &mut Vec<String>| {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("{name} must be positive and finite, got {v}"));
            }
        };
        positive("alpha", self.alpha, &mut out);
        positive("eps_d", self.eps_d, &mut out);
        positive("gamma", self.gamma, &mut out);
        positive("Gamma", self.big_gamma, &mut out);
        positive("initial_curvature", self.initial_curvature, &mut out);
        if self.big_gamma > 1.0 {
            out.push(format!("Gamma must be at most 1, got {}", self.big_gamma));
        }
        if matches!(self.variant, Variant::Dgd | Variant::Extra) {
            positive("primal_step", self.primal_step, &mut out);
        }
        if let Some([lo, hi]) = self.curvature_clip {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                out.push(format!("curvature_clip needs 0 < lo <= hi, got [{lo}, {hi}]"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), AlgoError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(AlgoError::Invalid(p))
        }
    }

    pub fn rounds_per_iteration(&self) -> usize {
        self.variant.rounds_per_iteration(self.k)
    }
}

/// Curvature bookkeeping kept by each node.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CurvatureStats {
    pub primal_accepted: usize,
    pub primal_skipped: usize,
    pub dual_accepted: usize,
    pub dual_skipped: usize,
    /// Largest `‖B⁺u − r‖/‖r‖` over accepted primal updates.
    pub max_primal_secant: f64,
    /// Largest `‖C⁺ṽ − Δh‖/‖Δh‖` over accepted dual updates.
    pub max_dual_secant: f64,
}

impl CurvatureStats {
    pub fn merge(&mut self, o: &CurvatureStats) {
        self.primal_accepted += o.primal_accepted;
        self.primal_skipped += o.primal_skipped;
        self.dual_accepted += o.dual_accepted;
        self.dual_skipped += o.dual_skipped;
        self.max_primal_secant = self.max_primal_secant.max(o.max_primal_secant);
        self.max_dual_secant = self.max_dual_secant.max(o.max_dual_secant);
    }
}

/// Variations this small relative to the iterate carry rounding noise, not
/// curvature.
pub const VARIATION_FLOOR: f64 = 1e-10;

fn below_rounding(step: &[f64], at: &[f64]) -> bool {
    linalg::norm(step) <= VARIATION_FLOOR * linalg::norm(at)
}

fn store_slots(ctx: &NodeContext<'_>, slots: &mut [Vec<f64>], inbox: &Inbox) -> Result<(), NodeFault> {
    let mut seen = 0;
    for (j, v) in inbox.iter() {
        let s = ctx.slot(j).ok_or(NodeFault::MissingMessage(j))?;
        slots[s].clear();
        slots[s].extend_from_slice(v);
        seen += 1;
    }
    if seen + 1 != ctx.neighborhood.len() {
        let missing = ctx
            .neighborhood
            .iter()
            .copied()
            .find(|&j| j != ctx.id && inbox.from(j).is_none())
            .unwrap_or(ctx.id);
        return Err(NodeFault::MissingMessage(missing));
    }
    Ok(())
}

fn flatten(slots: &[Vec<f64>]) -> Vec<f64> {
    slots.iter().flatten().copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PrimalCurvature {
    Bfgs,
    ExactHessian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DualStep {
    QuasiNewton,
    FirstOrder,
}

/// Shared skeleton of PD-QN and ESOM.
pub struct PrimalDualProtocol {
    cfg: AlgorithmConfig,
    curvature: PrimalCurvature,
    dual: DualStep,
}

#[derive(Debug, Clone)]
pub struct PrimalDualState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// `x_t` of the iteration just completed.
    pub x_prev: Vec<f64>,
    pub y_prev: Vec<f64>,
    pub b: Mat,
    pub c: Mat,
    pub stats: CurvatureStats,
    nbr_x: Vec<Vec<f64>>,
    nbr_y: Vec<Vec<f64>>,
    nbr_h: Vec<Vec<f64>>,
    primal_lag: Option<(Vec<f64>, Vec<f64>)>,
    dual_lag: Option<(Vec<f64>, Vec<f64>)>,
    g: Vec<f64>,
    d: Vec<f64>,
    h: Vec<f64>,
    e_own: Vec<f64>,
    upsilon: Vec<f64>,
    neumann: Option<NeumannNode>,
}

impl PrimalDualProtocol {
    pub fn pdqn(cfg: &AlgorithmConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            curvature: PrimalCurvature::Bfgs,
            dual: DualStep::QuasiNewton,
        }
    }

    pub fn esom(cfg: &AlgorithmConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            curvature: PrimalCurvature::ExactHessian,
            dual: DualStep::FirstOrder,
        }
    }

    /// Any pairing of primal curvature source and dual step, for ablations.
    /// The round count follows the dual step.
    pub fn hybrid(cfg: &AlgorithmConfig, exact_hessian: bool, quasi_newton_dual: bool) -> Self {
        Self {
            cfg: cfg.clone(),
            curvature: if exact_hessian { PrimalCurvature::ExactHessian } else { PrimalCurvature::Bfgs },
            dual: if quasi_newton_dual { DualStep::QuasiNewton } else { DualStep::FirstOrder },
        }
    }

    /// Gradient, curvature refresh and the first series term.
    fn begin_primal(&self, ctx: &NodeContext<'_>, s: &mut PrimalDualState) -> Result<(), NodeFault> {
        let own = ctx.slot(ctx.id).expect("self slot");
        s.nbr_x[own].clone_from(&s.x);
        let lap = ctx.laplacian(&s.nbr_x);
        let grad = ctx.objective.gradient(&s.x);
        let mut g = grad.clone();
        linalg::axpy(&mut g, 1.0, &s.y);
        linalg::axpy(&mut g, self.cfg.alpha, &lap);

        match self.curvature {
            PrimalCurvature::Bfgs => {
                let source = match self.cfg.primal_variation {
                    PrimalVariation::Objective => grad,
                    PrimalVariation::Augmented => g.clone(),
                };
                if let Some((xl, sl)) = &s.primal_lag {
                    let u = linalg::sub(&s.x, xl);
                    let r = linalg::sub(&source, sl);
                    let (b, outcome) = if below_rounding(&u, &s.x) {
                        (s.b.clone(), UpdateOutcome::Skipped)
                    } else {
                        bfgs_update_primal(&s.b, &u, &r)?
                    };
                    match outcome {
                        UpdateOutcome::Accepted => {
                            let resid = linalg::norm(&linalg::sub(&linalg::mat_vec(&b, &u), &r)) / linalg::norm(&r);
                            s.stats.max_primal_secant = s.stats.max_primal_secant.max(resid);
                            s.stats.primal_accepted += 1;
                            s.b = match self.cfg.curvature_clip {
                                Some([lo, hi]) => clip_spectrum(&b, lo, hi),
                                None => b,
                            };
                        }
                        UpdateOutcome::Skipped => s.stats.primal_skipped += 1,
                    }
                }
                s.primal_lag = Some((s.x.clone(), source));
            }
            PrimalCurvature::ExactHessian => s.b = ctx.objective.hessian(&s.x),
        }

        let node = NeumannNode::from_parts(ctx.id, &s.b, ctx.self_weight(), self.cfg.alpha);
        s.d = node.start(&g)?;
        s.g = g;
        s.neumann = Some(node);
        Ok(())
    }

    fn series_step(&self, ctx: &NodeContext<'_>, s: &mut PrimalDualState, inbox: &Inbox) -> Result<(), NodeFault> {
        let node = s.neumann.as_ref().expect("series started");
        let mut nbrs = Vec::with_capacity(ctx.weights.len());
        for &(j, w) in ctx.weights {
            if j != ctx.id {
                nbrs.push((w, inbox.from(j).ok_or(NodeFault::MissingMessage(j))?));
            }
        }
        s.d = node.step(&s.d, nbrs, &s.g)?;
        Ok(())
    }

    fn finish_primal(&self, ctx: &NodeContext<'_>, s: &mut PrimalDualState) -> Payload {
        s.x_prev.clone_from(&s.x);
        linalg::axpy(&mut s.x, 1.0, &s.d);
        let own = ctx.slot(ctx.id).expect("self slot");
        s.nbr_x[own].clone_from(&s.x);
        Payload::Broadcast(s.x.clone())
    }

    fn dual_quasi_newton(&self, ctx: &NodeContext<'_>, s: &mut PrimalDualState) -> Result<Payload, NodeFault> {
        let own = ctx.slot(ctx.id).expect("self slot");
        s.nbr_h[own].clone_from(&s.h);
        s.nbr_y[own].clone_from(&s.y);
        let cfg = &self.cfg;
        let y_n = flatten(&s.nbr_y);
        let mut h_n = flatten(&s.nbr_h);
        let orient = match cfg.dual_curvature_sign {
            DualCurvatureSign::AsWritten => 1.0,
            DualCurvatureSign::Negated => -1.0,
        };
        h_n.iter_mut().for_each(|v| *v *= orient);
        if let Some((y_old, h_old)) = &s.dual_lag {
            let pair = dual_variations(&y_n, y_old, &h_n, h_old, cfg.gamma, &s.upsilon)?;
            let (c, outcome) = if below_rounding(&linalg::sub(&y_n, y_old), &y_n) {
                (s.c.clone(), UpdateOutcome::Skipped)
            } else {
                bfgs_update_dual(&s.c, &pair, cfg.gamma)?
            };
            match outcome {
                UpdateOutcome::Accepted => {
                    let dh = linalg::sub(&h_n, h_old);
                    let resid =
                        linalg::norm(&linalg::sub(&linalg::mat_vec(&c, &pair.variable_variation), &dh)) / linalg::norm(&dh);
                    s.stats.max_dual_secant = s.stats.max_dual_secant.max(resid);
                    s.stats.dual_accepted += 1;
                    s.c = c;
                }
                UpdateOutcome::Skipped => s.stats.dual_skipped += 1,
            }
        }
        let e = dual_neighborhood_direction(&s.c, &flatten(&s.nbr_h), cfg.big_gamma, &s.upsilon, cfg.gamma, cfg.dual_rule)?;
        s.dual_lag = Some((y_n, h_n));
        let p = ctx.p;
        let mut parts = Vec::with_capacity(ctx.neighborhood.len() - 1);
        for (slot, &j) in ctx.neighborhood.iter().enumerate() {
            let blk = e[slot * p..(slot + 1) * p].to_vec();
            if j == ctx.id {
                s.e_own = blk;
            } else {
                parts.push((j, blk));
            }
        }
        Ok(Payload::Scatter(parts))
    }

    fn dual_ascent(&self, s: &mut PrimalDualState, direction: &[f64]) -> Payload {
        s.y_prev.clone_from(&s.y);
        linalg::axpy(&mut s.y, self.cfg.eps_d * self.cfg.alpha, direction);
        Payload::Broadcast(s.y.clone())
    }
}

impl NodeProtocol for PrimalDualProtocol {
    type State = PrimalDualState;

    fn setup_rounds(&self) -> usize {
        2
    }

    fn rounds_per_iteration(&self) -> usize {
        match self.dual {
            DualStep::QuasiNewton => self.cfg.k + 5,
            DualStep::FirstOrder => self.cfg.k + 3,
        }
    }

    fn init(&self, ctx: &NodeContext<'_>, x0: &[f64], y0: &[f64]) -> PrimalDualState {
        let p = ctx.p;
        let m = ctx.neighborhood.len();
        let c = match self.dual {
            DualStep::QuasiNewton => Mat::identity(m * p, m * p) * (1.0 + self.cfg.gamma),
            DualStep::FirstOrder => Mat::zeros(0, 0),
        };
        PrimalDualState {
            x: x0.to_vec(),
            y: y0.to_vec(),
            x_prev: x0.to_vec(),
            y_prev: y0.to_vec(),
            b: Mat::identity(p, p) * self.cfg.initial_curvature,
            c,
            stats: CurvatureStats::default(),
            nbr_x: vec![vec![0.0; p]; m],
            nbr_y: vec![vec![0.0; p]; m],
            nbr_h: vec![vec![0.0; p]; m],
            primal_lag: None,
            dual_lag: None,
            g: vec![0.0; p],
            d: vec![0.0; p],
            h: vec![0.0; p],
            e_own: vec![0.0; p],
            upsilon: ctx.neighborhood_sizes.iter().map(|&mj| 1.0 / mj as f64).collect(),
            neumann: None,
        }
    }

    fn compute(
        &self,
        phase: Phase,
        ctx: &NodeContext<'_>,
        s: &mut PrimalDualState,
        inbox: &Inbox,
    ) -> Result<Payload, NodeFault> {
        let k = self.cfg.k;
        let r = match phase {
            Phase::Setup(0) => return Ok(Payload::Broadcast(s.x.clone())),
            Phase::Setup(_) => {
                store_slots(ctx, &mut s.nbr_x, inbox)?;
                return Ok(Payload::Broadcast(s.y.clone()));
            }
            Phase::Round(r) => r,
        };

        if r == 0 {
            store_slots(ctx, &mut s.nbr_y, inbox)?;
            self.begin_primal(ctx, s)?;
        } else if r <= k {
            self.series_step(ctx, s, inbox)?;
        }
        if r < k {
            return Ok(Payload::Broadcast(s.d.clone()));
        }
        if r == k {
            return Ok(self.finish_primal(ctx, s));
        }
        if r == k + 1 {
            store_slots(ctx, &mut s.nbr_x, inbox)?;
            let own = ctx.slot(ctx.id).expect("self slot");
            s.nbr_x[own].clone_from(&s.x);
            s.h = ctx.laplacian(&s.nbr_x);
            return Ok(match self.dual {
                DualStep::QuasiNewton => Payload::Broadcast(s.y.clone()),
                DualStep::FirstOrder => Payload::Broadcast(s.h.clone()),
            });
        }
        match (self.dual, r - k) {
            (DualStep::QuasiNewton, 2) => {
                store_slots(ctx, &mut s.nbr_y, inbox)?;
                Ok(Payload::Broadcast(s.h.clone()))
            }
            (DualStep::QuasiNewton, 3) => {
                store_slots(ctx, &mut s.nbr_h, inbox)?;
                self.dual_quasi_newton(ctx, s)
            }
            (DualStep::QuasiNewton, 4) => {
                let mut e = s.e_own.clone();
                for &j in ctx.neighborhood {
                    if j != ctx.id {
                        linalg::axpy(&mut e, 1.0, inbox.from(j).ok_or(NodeFault::MissingMessage(j))?);
                    }
                }
                Ok(self.dual_ascent(s, &e))
            }
            (DualStep::FirstOrder, 2) => {
                store_slots(ctx, &mut s.nbr_h, inbox)?;
                let h = s.h.clone();
                Ok(self.dual_ascent(s, &h))
            }
            _ => unreachable!("round {r} outside the schedule"),
        }
    }

    fn primal<'s>(&self, s: &'s PrimalDualState) -> &'s [f64] {
        &s.x
    }

    fn dual<'s>(&self, s: &'s PrimalDualState) -> &'s [f64] {
        &s.y
    }
}

/// Dual ascent with exact local minimization.
pub struct DualAscentProtocol {
    eps_d: f64,
}

#[derive(Debug, Clone)]
pub struct DualAscentState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    nbr_x: Vec<Vec<f64>>,
    nbr_y: Vec<Vec<f64>>,
}

impl NodeProtocol for DualAscentProtocol {
    type State = DualAscentState;

    fn setup_rounds(&self) -> usize {
        0
    }

    fn rounds_per_iteration(&self) -> usize {
        2
    }

    fn init(&self, ctx: &NodeContext<'_>, x0: &[f64], y0: &[f64]) -> DualAscentState {
        let m = ctx.neighborhood.len();
        DualAscentState {
            x: x0.to_vec(),
            y: y0.to_vec(),
            nbr_x: vec![vec![0.0; ctx.p]; m],
            nbr_y: vec![vec![0.0; ctx.p]; m],
        }
    }

    fn compute(&self, phase: Phase, ctx: &NodeContext<'_>, s: &mut DualAscentState, inbox: &Inbox) -> Result<Payload, NodeFault> {
        let own = ctx.slot(ctx.id).expect("self slot");
        match phase {
            Phase::Round(0) => {
                if !inbox.is_empty() {
                    store_slots(ctx, &mut s.nbr_y, inbox)?;
                }
                s.x = ctx.objective.argmin_l0(&s.y)?;
                s.nbr_x[own].clone_from(&s.x);
                Ok(Payload::Broadcast(s.x.clone()))
            }
            Phase::Round(1) => {
                store_slots(ctx, &mut s.nbr_x, inbox)?;
                let h = ctx.laplacian(&s.nbr_x);
                linalg::axpy(&mut s.y, self.eps_d, &h);
                s.nbr_y[own].clone_from(&s.y);
                Ok(Payload::Broadcast(s.y.clone()))
            }
            _ => unreachable!("dual ascent has no setup and two rounds"),
        }
    }

    fn primal<'s>(&self, s: &'s DualAscentState) -> &'s [f64] {
        &s.x
    }

    fn dual<'s>(&self, s: &'s DualAscentState) -> &'s [f64] {
        &s.y
    }
}

/// DGD, and EXTRA written with a running correction
/// `z^{k+1} = z^k + ½(x^k − Σ w_ij x_j^k)` so that
/// `x^{k+1} = Σ w_ij x_j^k − ε∇f_i(x^k) − z^k`.
pub struct GradientProtocol {
    step: f64,
    corrected: bool,
}

#[derive(Debug, Clone)]
pub struct GradientState {
    pub x: Vec<f64>,
    /// `z/ε`, the multiplier-like quantity matching the dual variable of
    /// the augmented Lagrangian methods at a fixed point.
    pub y: Vec<f64>,
    z: Vec<f64>,
    nbr_x: Vec<Vec<f64>>,
}

impl NodeProtocol for GradientProtocol {
    type State = GradientState;

    fn setup_rounds(&self) -> usize {
        1
    }

    fn rounds_per_iteration(&self) -> usize {
        1
    }

    fn init(&self, ctx: &NodeContext<'_>, x0: &[f64], y0: &[f64]) -> GradientState {
        let (y, z) = if self.corrected {
            (y0.to_vec(), y0.iter().map(|v| v * self.step).collect())
        } else {
            (vec![0.0; ctx.p], vec![0.0; ctx.p])
        };
        GradientState {
            x: x0.to_vec(),
            y,
            z,
            nbr_x: vec![vec![0.0; ctx.p]; ctx.neighborhood.len()],
        }
    }

    fn compute(&self, phase: Phase, ctx: &NodeContext<'_>, s: &mut GradientState, inbox: &Inbox) -> Result<Payload, NodeFault> {
        if let Phase::Setup(_) = phase {
            return Ok(Payload::Broadcast(s.x.clone()));
        }
        store_slots(ctx, &mut s.nbr_x, inbox)?;
        let own = ctx.slot(ctx.id).expect("self slot");
        s.nbr_x[own].clone_from(&s.x);
        let mut mixed = vec![0.0; ctx.p];
        for &(j, w) in ctx.weights {
            linalg::axpy(&mut mixed, w, &s.nbr_x[ctx.slot(j).expect("weights on neighborhood")]);
        }
        let grad = ctx.objective.gradient(&s.x);
        let mut next = mixed.clone();
        linalg::axpy(&mut next, -self.step, &grad);
        if self.corrected {
            linalg::axpy(&mut next, -1.0, &s.z);
            let disagreement = linalg::sub(&s.x, &mixed);
            linalg::axpy(&mut s.z, 0.5, &disagreement);
            s.y = s.z.iter().map(|v| v / self.step).collect();
        }
        s.x = next;
        Ok(Payload::Broadcast(s.x.clone()))
    }

    fn primal<'s>(&self, s: &'s GradientState) -> &'s [f64] {
        &s.x
    }

    fn dual<'s>(&self, s: &'s GradientState) -> &'s [f64] {
        &s.y
    }
}

/// Everything needed to run one configured method.
pub struct Setup<'a> {
    pub problem: &'a Problem,
    pub topology: &'a Topology,
    pub weights: &'a WeightMatrix,
    pub x_star: &'a [f64],
}

/// Type-erased outcome of a run.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub trace: ConvergenceTrace,
    pub ledger: ExchangeLedger,
    pub x: StackedVector,
    pub y: StackedVector,
    pub stats: Option<CurvatureStats>,
}

fn finish<P: NodeProtocol>(
    protocol: &P,
    out: simulator::RunOutput<P::State>,
    p: usize,
    stats: Option<CurvatureStats>,
) -> VariantRun {
    let x = StackedVector::from_flat(p, out.states.iter().flat_map(|s| protocol.primal(s).to_vec()).collect());
    let y = StackedVector::from_flat(p, out.states.iter().flat_map(|s| protocol.dual(s).to_vec()).collect());
    VariantRun {
        trace: out.trace,
        ledger: out.ledger,
        x,
        y,
        stats,
    }
}

/// Runs `cfg.variant` through the simulator. With `diagnostics` set, PD-QN
/// rows carry dense diagnostic records.
pub fn run_variant<E: Executor>(
    cfg: &AlgorithmConfig,
    setup: &Setup<'_>,
    opts: &RunOptions,
    exec: &E,
    diagnostics: Option<KappaParams>,
) -> Result<VariantRun, AlgoError> {
    cfg.validate()?;
    let net = Network {
        problem: setup.problem,
        topology: setup.topology,
        weights: setup.weights,
    };
    let p = setup.problem.p();
    match cfg.variant {
        Variant::Pdqn | Variant::Esom => {
            let protocol = if cfg.variant == Variant::Pdqn {
                PrimalDualProtocol::pdqn(cfg)
            } else {
                PrimalDualProtocol::esom(cfg)
            };
            let ctx = match (cfg.variant, diagnostics) {
                (Variant::Pdqn, Some(params)) => Some(DiagnosticContext::new(
                    setup.problem,
                    setup.weights,
                    RunConstants {
                        alpha: cfg.alpha,
                        k: cfg.k,
                        gamma: cfg.gamma,
                        big_gamma: cfg.big_gamma,
                        rule: cfg.dual_rule,
                    },
                    setup.x_star,
                    params,
                )),
                _ => None,
            };
            let observer = |view: &IterationView<'_, PrimalDualState>| {
                let ctx = ctx.as_ref()?;
                let x_prev = StackedVector::from_flat(p, view.states.iter().flat_map(|s| s.x_prev.clone()).collect());
                let y_prev = StackedVector::from_flat(p, view.states.iter().flat_map(|s| s.y_prev.clone()).collect());
                let b: Vec<Mat> = view.states.iter().map(|s| s.b.clone()).collect();
                let c: Vec<Mat> = view.states.iter().map(|s| s.c.clone()).collect();
                ctx.evaluate(
                    setup.problem,
                    setup.weights,
                    setup.topology,
                    &IterateData {
                        x_prev: &x_prev,
                        x: view.x,
                        y_prev: &y_prev,
                        y: view.y,
                        primal_curvature: &b,
                        dual_curvature: &c,
                    },
                )
            };
            let out = simulator::run(&protocol, &net, setup.x_star, opts, exec, observer)?;
            let mut stats = CurvatureStats::default();
            for s in &out.states {
                stats.merge(&s.stats);
            }
            let stats = (cfg.variant == Variant::Pdqn).then_some(stats);
            Ok(finish(&protocol, out, p, stats))
        }
        Variant::Da => {
            if !setup.problem.is_quadratic() {
                return Err(AlgoError::Unsupported {
                    variant: "da",
                    reason: "exact local minimization has no closed form for logistic objectives".to_string(),
                });
            }
            let protocol = DualAscentProtocol { eps_d: cfg.eps_d };
            let out = simulator::run(&protocol, &net, setup.x_star, opts, exec, |_| None)?;
            Ok(finish(&protocol, out, p, None))
        }
        Variant::Dgd | Variant::Extra => {
            let protocol = GradientProtocol {
                step: cfg.primal_step,
                corrected: cfg.variant == Variant::Extra,
            };
            let out = simulator::run(&protocol, &net, setup.x_star, opts, exec, |_| None)?;
            Ok(finish(&protocol, out, p, None))
        }
    }
}

/// The knob a tuning sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TuneTarget {
    Alpha,
    EpsD,
    PrimalStep,
}

impl TuneTarget {
    pub fn apply(self, cfg: &mut AlgorithmConfig, v: f64) {
        match self {
            TuneTarget::Alpha => cfg.alpha = v,
            TuneTarget::EpsD => cfg.eps_d = v,
            TuneTarget::PrimalStep => cfg.primal_step = v,
        }
    }

    pub fn read(self, cfg: &AlgorithmConfig) -> f64 {
        match self {
            TuneTarget::Alpha => cfg.alpha,
            TuneTarget::EpsD => cfg.eps_d,
            TuneTarget::PrimalStep => cfg.primal_step,
        }
    }
}

/// Powers of two from `2^lo` to `2^hi`.
pub fn power_grid(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|e| libm::pow(2.0, e as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TuneAxis {
    pub target: TuneTarget,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TuneOptions {
    /// Searched as a cross product.
    pub axes: Vec<TuneAxis>,
    pub probe_iterations: usize,
}

impl TuneOptions {
    /// Default search for quadratic problems.
    pub fn for_variant(v: Variant) -> Self {
        let axis = |target, lo, hi| TuneAxis {
            target,
            grid: power_grid(lo, hi),
        };
        let axes = match v {
            Variant::Pdqn => vec![axis(TuneTarget::EpsD, -5, 2)],
            Variant::Da => vec![axis(TuneTarget::EpsD, -6, 6)],
            Variant::Esom => vec![axis(TuneTarget::Alpha, -6, 6)],
            Variant::Dgd | Variant::Extra => vec![axis(TuneTarget::PrimalStep, -8, 2)],
        };
        Self {
            axes,
            probe_iterations: 400,
        }
    }

    fn candidates(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in &self.axes {
            let mut grid = axis.grid.clone();
            grid.sort_by(f64::total_cmp);
            grid.dedup();
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    grid.iter().rev().map(move |&v| {
                        let mut c = prefix.clone();
                        c.push(v);
                        c
                    })
                })
                .collect();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub config: AlgorithmConfig,
    /// `(values per axis, converged)` for every probe.
    pub probes: Vec<(Vec<f64>, bool)>,
}

/// Probe acceptance: finite, below the start, and still falling over the
/// final quartile unless already at the floor.
pub fn probe_converges(errors: &[f64]) -> bool {
    let (Some(&first), Some(&last)) = (errors.first(), errors.last()) else {
        return false;
    };
    if !errors.iter().all(|e| e.is_finite()) || !(last < first) {
        return false;
    }
    if last <= 1e-20 {
        return true;
    }
    let q = errors.len() * 3 / 4;
    last < errors[q.min(errors.len() - 1)]
}

/// Error level at which probes count as solved for ranking.
pub const TUNE_FLOOR: f64 = 1e-10;

/// Probe ranking: earliest iteration at the floor, else smallest final error.
fn probe_score(errors: &[f64]) -> (usize, f64) {
    match errors.iter().position(|&e| e <= TUNE_FLOOR) {
        Some(t) => (t, 0.0),
        None => (usize::MAX, errors.last().copied().unwrap_or(f64::INFINITY)),
    }
}

/// Fastest converging point of the grid. Ties go to the larger values,
/// which are probed first.
pub fn tune_stepsize<E: Executor>(
    base: &AlgorithmConfig,
    setup: &Setup<'_>,
    opts: &TuneOptions,
    exec: &E,
) -> Result<TuneOutcome, AlgoError> {
    base.validate()?;
    let mut probes = Vec::new();
    let mut best: Option<((usize, f64), AlgorithmConfig)> = None;
    for values in opts.candidates() {
        let mut cfg = base.clone();
        for (axis, &v) in opts.axes.iter().zip(&values) {
            axis.target.apply(&mut cfg, v);
        }
        if cfg.validate().is_err() {
            probes.push((values, false));
            continue;
        }
        let errors = match run_variant(&cfg, setup, &RunOptions::iterations(opts.probe_iterations), exec, None) {
            Ok(run) => run.trace.errors(),
            Err(AlgoError::Sim(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        let ok = probe_converges(&errors);
        probes.push((values, ok));
        if ok {
            let score = probe_score(&errors);
            if best.as_ref().map_or(true, |(b, _)| score.0 < b.0 || (score.0 == b.0 && score.1 < b.1)) {
                best = Some((score, cfg));
            }
        }
    }
    match best {
        Some((_, config)) => Ok(TuneOutcome { config, probes }),
        None => Err(AlgoError::NoConvergentStep(base.variant.tag())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{generate_logistic, generate_quadratic, relative_error, LogisticSpec};
    use crate::simulator::Sequential;

    struct Fixture {
        problem: Problem,
        topology: Topology,
        weights: WeightMatrix,
        x_star: Vec<f64>,
    }

    impl Fixture {
        fn quadratic(n: usize, p: usize, d: usize, eta: u32, seed: u64) -> Self {
            let problem = Problem::Quadratic(generate_quadratic(n, p, eta, seed).unwrap());
            let topology = Topology::d_regular_cycle(n, d).unwrap();
            let weights = WeightMatrix::metropolis(&topology).unwrap();
            let x_star = problem.centralized_solution().unwrap().x_star;
            Self { problem, topology, weights, x_star }
        }

        fn setup(&self) -> Setup<'_> {
            Setup {
                problem: &self.problem,
                topology: &self.topology,
                weights: &self.weights,
                x_star: &self.x_star,
            }
        }

        fn optimum(&self) -> (StackedVector, StackedVector) {
            let n = self.topology.n();
            let x = StackedVector::consensus(n, &self.x_star);
            let y = self.problem.gradient(&x);
            let y = StackedVector::from_flat(self.problem.p(), y.as_slice().iter().map(|g| -g).collect());
            (x, y)
        }
    }

    fn config(v: Variant) -> AlgorithmConfig {
        let mut c = AlgorithmConfig::new(v);
        match v {
            Variant::Da => c.eps_d = 1.0,
            Variant::Esom => c.alpha = 4.0,
            Variant::Dgd => c.primal_step = 1.0 / 32.0,
            Variant::Extra => c.primal_step = 0.25,
            Variant::Pdqn => {}
        }
        c
    }

    #[test]
    fn ledger_matches_declared_rounds_for_every_variant() {
        let fx = Fixture::quadratic(8, 3, 2, 0, 1);
        for k in 0..=3 {
            for v in Variant::ALL {
                let mut cfg = config(v);
                cfg.k = k;
                let out = run_variant(&cfg, &fx.setup(), &RunOptions::iterations(7), &Sequential, None).unwrap();
                let per = v.rounds_per_iteration(k);
                assert_eq!(out.ledger.rounds_per_iteration, vec![per; 7], "{v:?} K={k}");
                assert_eq!(out.ledger.total_rounds(), 7 * per);
                assert_eq!(out.trace.rows.last().unwrap().exchanges, 7 * per);
            }
        }
    }

    #[test]
    fn pdqn_depth_two_ten_iterations_is_seventy_rounds() {
        let fx = Fixture::quadratic(8, 3, 2, 0, 2);
        let out = run_variant(&config(Variant::Pdqn), &fx.setup(), &RunOptions::iterations(10), &Sequential, None).unwrap();
        assert_eq!(out.ledger.total_rounds(), 70);
        assert_eq!(out.ledger.setup_rounds, 2);
    }

    #[test]
    fn optimum_is_a_fixed_point_of_every_exact_method() {
        let fx = Fixture::quadratic(8, 3, 4, 0, 5);
        let (x, y) = fx.optimum();
        for v in Variant::ALL.into_iter().filter(|v| v.is_exact()) {
            let opts = RunOptions {
                iterations: 20,
                x0: Some(x.clone()),
                y0: Some(y.clone()),
                ..RunOptions::default()
            };
            let out = run_variant(&config(v), &fx.setup(), &opts, &Sequential, None).unwrap();
            let worst = out.trace.rows.iter().map(|r| r.update_norm).fold(0.0, f64::max);
            assert!(worst <= 1e-12, "{v:?} moved by {worst:e}");
        }
    }

    #[test]
    fn exact_methods_converge_and_dgd_plateaus() {
        let fx = Fixture::quadratic(10, 3, 4, 0, 7);
        for v in Variant::ALL {
            let out = run_variant(&config(v), &fx.setup(), &RunOptions::iterations(600), &Sequential, None).unwrap();
            let fin = out.trace.final_error();
            if v.is_exact() {
                assert!(fin <= 1e-8, "{v:?} ended at {fin:e}");
            } else {
                assert!(fin >= 1e-4, "{v:?} ended at {fin:e}");
            }
        }
    }

    #[test]
    fn error_metric_matches_final_states() {
        let fx = Fixture::quadratic(8, 3, 2, 0, 3);
        let out = run_variant(&config(Variant::Pdqn), &fx.setup(), &RunOptions::iterations(5), &Sequential, None).unwrap();
        let direct = relative_error(&out.x, &fx.x_star);
        assert!((direct - out.trace.final_error()).abs() <= 1e-14);
    }

    #[test]
    fn accepted_curvature_updates_satisfy_secant() {
        let fx = Fixture::quadratic(10, 4, 4, 1, 2);
        let out = run_variant(&config(Variant::Pdqn), &fx.setup(), &RunOptions::iterations(150), &Sequential, None).unwrap();
        let stats = out.stats.unwrap();
        assert!(stats.primal_accepted > 0 && stats.dual_accepted > 0);
        assert!(stats.max_primal_secant <= 1e-10, "{:e}", stats.max_primal_secant);
        assert!(stats.max_dual_secant <= 1e-10, "{:e}", stats.max_dual_secant);
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let fx = Fixture::quadratic(8, 3, 2, 1, 9);
        let a = run_variant(&config(Variant::Pdqn), &fx.setup(), &RunOptions::iterations(30), &Sequential, None).unwrap();
        let b = run_variant(&config(Variant::Pdqn), &fx.setup(), &RunOptions::iterations(30), &Sequential, None).unwrap();
        let bits = |r: &VariantRun| r.trace.rows.iter().map(|x| x.error.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn dual_ascent_refuses_logistic() {
        let spec = LogisticSpec { n: 4, q: 5, ..LogisticSpec::reference() };
        let problem = Problem::Logistic(generate_logistic(&spec, 0).unwrap());
        let topology = Topology::d_regular_cycle(4, 2).unwrap();
        let weights = WeightMatrix::metropolis(&topology).unwrap();
        let x_star = problem.centralized_solution().unwrap().x_star;
        let setup = Setup { problem: &problem, topology: &topology, weights: &weights, x_star: &x_star };
        let err = run_variant(&config(Variant::Da), &setup, &RunOptions::iterations(1), &Sequential, None).err();
        assert!(matches!(err, Some(AlgoError::Unsupported { variant: "da", .. })));
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut cfg = AlgorithmConfig::new(Variant::Pdqn);
        cfg.big_gamma = 1.5;
        cfg.alpha = -1.0;
        cfg.gamma = f64::NAN;
        let issues = cfg.problems();
        assert_eq!(issues.len(), 3, "{issues:?}");
        assert!(issues.iter().any(|m| m.contains("Gamma must be at most 1")));
        assert!(matches!(cfg.validate(), Err(AlgoError::Invalid(v)) if v.len() == 3));
        cfg = AlgorithmConfig::new(Variant::Extra);
        cfg.primal_step = 0.0;
        assert_eq!(cfg.problems().len(), 1);
        cfg.curvature_clip = Some([2.0, 1.0]);
        assert_eq!(cfg.problems().len(), 2);
    }

    #[test]
    fn variant_tags_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_tag(v.tag()), Some(v));
        }
        assert_eq!(Variant::from_tag("admm"), None);
    }

    #[test]
    fn probe_acceptance() {
        assert!(probe_converges(&[1.0, 0.5, 0.25, 0.1, 0.05]));
        assert!(!probe_converges(&[1.0, 0.5, 0.25, 0.1, 0.2]));
        assert!(!probe_converges(&[1.0, f64::NAN, 0.1]));
        assert!(!probe_converges(&[1.0, 2.0, 3.0]));
        assert!(probe_converges(&[1.0, 1e-25, 1e-25, 1e-25, 1e-25]));
        assert!(!probe_converges(&[]));
    }

    #[test]
    fn tuning_picks_a_convergent_grid_point() {
        let fx = Fixture::quadratic(8, 3, 2, 0, 4);
        let opts = TuneOptions {
            axes: vec![TuneAxis {
                target: TuneTarget::PrimalStep,
                grid: power_grid(-6, 3),
            }],
            probe_iterations: 200,
        };
        let out = tune_stepsize(&AlgorithmConfig::new(Variant::Extra), &fx.setup(), &opts, &Sequential).unwrap();
        assert_eq!(out.probes.len(), 10);
        assert!(out.probes.iter().any(|p| !p.1), "the largest steps diverge");
        let chosen = TuneTarget::PrimalStep.read(&out.config);
        assert!(out.probes.iter().any(|p| p.0 == vec![chosen] && p.1));
    }

    #[test]
    fn cross_product_grid_order() {
        let opts = TuneOptions {
            axes: vec![
                TuneAxis { target: TuneTarget::Alpha, grid: vec![1.0, 2.0] },
                TuneAxis { target: TuneTarget::EpsD, grid: vec![0.5, 0.25, 0.5] },
            ],
            probe_iterations: 1,
        };
        assert_eq!(
            opts.candidates(),
            vec![vec![2.0, 0.5], vec![2.0, 0.25], vec![1.0, 0.5], vec![1.0, 0.25]]
        );
    }

    #[test]
    fn diagnostics_are_attached_for_pdqn_only() {
        let fx = Fixture::quadratic(4, 2, 2, 0, 1);
        let params = KappaParams::default();
        let out = run_variant(&config(Variant::Pdqn), &fx.setup(), &RunOptions::iterations(5), &Sequential, Some(params)).unwrap();
        assert!(out.trace.rows[1..].iter().all(|r| r.diagnostics.is_some()));
        let out = run_variant(&config(Variant::Esom), &fx.setup(), &RunOptions::iterations(5), &Sequential, Some(params)).unwrap();
        assert!(out.trace.rows.iter().all(|r| r.diagnostics.is_none()));
    }

    #[test]
    fn diagnostics_vanish_at_the_optimum() {
        let fx = Fixture::quadratic(4, 2, 2, 0, 6);
        let (x, y) = fx.optimum();
        let opts = RunOptions { iterations: 3, x0: Some(x), y0: Some(y), ..RunOptions::default() };
        let out = run_variant(&config(Variant::Pdqn), &fx.setup(), &opts, &Sequential, Some(KappaParams::default())).unwrap();
        for row in &out.trace.rows[1..] {
            let d = row.diagnostics.as_ref().unwrap();
            assert!(d.sigma_norm < 1e-9, "{}", d.sigma_norm);
            assert!(d.lyapunov_after < 1e-18, "{}", d.lyapunov_after);
            assert!(!d.range_flagged);
        }
    }
}
