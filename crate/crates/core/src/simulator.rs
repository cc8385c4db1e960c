//! Synchronous round-based execution with enforced locality.
//!
//! A protocol describes what one node does in each round given only its own
//! state, its [`NodeContext`] and the messages delivered in the previous
//! round. The harness owns every node state; node code never sees another
//! node's state. Every round ends with a delivery that is metered in the
//! [`ExchangeLedger`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::diagnostics::DiagnosticRecord;
use crate::linalg;
use crate::network::{apply_laplacian, StackedVector, Topology, WeightMatrix};
use crate::problems::{relative_error, Problem, ProblemError};
use crate::quasi_newton::CurvatureError;

/// What a node sends at the end of a round.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// The same vector to every neighbor.
    Broadcast(Vec<f64>),
    /// One vector per listed neighbor.
    Scatter(Vec<(usize, Vec<f64>)>),
    Silent,
}

/// Messages delivered to one node, sorted by sender.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Inbox {
    messages: Vec<(usize, Vec<f64>)>,
}

impl Inbox {
    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.messages.iter().map(|(j, v)| (*j, v.as_slice()))
    }

    pub fn from(&self, sender: usize) -> Option<&[f64]> {
        self.messages
            .binary_search_by_key(&sender, |m| m.0)
            .ok()
            .map(|k| self.messages[k].1.as_slice())
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

/// One round's deliveries for every node.
#[derive(Debug, Clone, Default)]
pub struct Mailbox {
    inboxes: Vec<Inbox>,
}

impl Mailbox {
    pub fn empty(n: usize) -> Self {
        Self {
            inboxes: vec![Inbox::default(); n],
        }
    }

    pub fn inbox(&self, i: usize) -> &Inbox {
        &self.inboxes[i]
    }

    /// Routes payloads along graph edges. Sending to anything outside
    /// `n_i \ {i}` is a programming error and panics.
    pub fn deliver(topology: &Topology, payloads: Vec<Payload>, dim: usize) -> Result<(Self, u64, Vec<u64>), SimError> {
        let n = topology.n();
        let mut inboxes = vec![Inbox::default(); n];
        let mut total = 0u64;
        let mut sent = vec![0u64; n];
        for (i, payload) in payloads.into_iter().enumerate() {
            match payload {
                Payload::Silent => {}
                Payload::Broadcast(v) => {
                    if v.len() != dim {
                        return Err(SimError::PayloadLength { node: i, expected: dim, got: v.len() });
                    }
                    for j in topology.neighbors(i) {
                        inboxes[j].messages.push((i, v.clone()));
                        sent[i] += 1;
                    }
                }
                Payload::Scatter(parts) => {
                    for (j, v) in parts {
                        assert!(
                            j != i && topology.in_neighborhood(i, j),
                            "locality violation: node {i} tried to send to non-neighbor {j}"
                        );
                        if v.len() != dim {
                            return Err(SimError::PayloadLength { node: i, expected: dim, got: v.len() });
                        }
                        assert!(
                            inboxes[j].messages.last().map_or(true, |m| m.0 != i),
                            "node {i} scattered twice to node {j} in one round"
                        );
                        inboxes[j].messages.push((i, v));
                        sent[i] += 1;
                    }
                }
            }
        }
        for s in &sent {
            total += s;
        }
        Ok((Self { inboxes }, total, sent))
    }
}

/// The local objective of a single node: the only problem data node code
/// can reach.
#[derive(Debug, Clone, Copy)]
pub struct LocalObjective<'a> {
    problem: &'a Problem,
    node: usize,
}

impl LocalObjective<'_> {
    pub fn value(&self, x: &[f64]) -> f64 {
        self.problem.local_value(self.node, x)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.problem.local_gradient(self.node, x)
    }

    pub fn hessian(&self, x: &[f64]) -> linalg::Mat {
        self.problem.local_hessian(self.node, x)
    }

    pub fn argmin_l0(&self, y: &[f64]) -> Result<Vec<f64>, ProblemError> {
        self.problem.local_argmin_l0(self.node, y)
    }
}

/// Everything a node may consult besides its own state and inbox.
#[derive(Debug, Clone, Copy)]
pub struct NodeContext<'a> {
    pub id: usize,
    /// `n_i`, sorted, including `id`.
    pub neighborhood: &'a [usize],
    /// `(j, w_ij)` for `j ∈ n_i`.
    pub weights: &'a [(usize, f64)],
    /// `m_j` for each `j ∈ n_i`, aligned with `neighborhood`.
    pub neighborhood_sizes: &'a [usize],
    pub objective: LocalObjective<'a>,
    pub p: usize,
}

impl NodeContext<'_> {
    pub fn self_weight(&self) -> f64 {
        self.weights
            .iter()
            .find(|e| e.0 == self.id)
            .map_or(0.0, |e| e.1)
    }

    pub fn slot(&self, j: usize) -> Option<usize> {
        self.neighborhood.binary_search(&j).ok()
    }

    /// `x_i − Σ_{j∈n_i} w_ij x_j` from the node's own block and neighbor
    /// blocks stored in neighborhood order.
    pub fn laplacian(&self, nbhd: &[Vec<f64>]) -> Vec<f64> {
        let own = self.slot(self.id).expect("neighborhood includes self");
        let mut out = nbhd[own].clone();
        for &(j, w) in self.weights {
            let s = self.slot(j).expect("weights live on the neighborhood");
            linalg::axpy(&mut out, -w, &nbhd[s]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Setup(usize),
    Round(usize),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NodeFault {
    #[error(transparent)]
    Curvature(#[from] CurvatureError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("expected a message from neighbor {0}")]
    MissingMessage(usize),
}

/// Per-node behavior of a decentralized method.
pub trait NodeProtocol: Sync {
    type State: Clone + Send + Sync;

    /// Rounds run once before the first iteration.
    fn setup_rounds(&self) -> usize;
    fn rounds_per_iteration(&self) -> usize;
    fn init(&self, ctx: &NodeContext<'_>, x0: &[f64], y0: &[f64]) -> Self::State;
    /// `inbox` holds what neighbors sent at the end of the previous round.
    fn compute(
        &self,
        phase: Phase,
        ctx: &NodeContext<'_>,
        state: &mut Self::State,
        inbox: &Inbox,
    ) -> Result<Payload, NodeFault>;
    fn primal<'s>(&self, state: &'s Self::State) -> &'s [f64];
    fn dual<'s>(&self, state: &'s Self::State) -> &'s [f64];
}

/// Runs one phase for every node; implementations decide the scheduling
/// but must return results in node order.
pub trait Executor {
    fn map_nodes<S, R, F>(&self, states: &mut [S], f: F) -> Vec<R>
    where
        S: Send,
        R: Send,
        F: Fn(usize, &mut S) -> R + Sync + Send;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map_nodes<S, R, F>(&self, states: &mut [S], f: F) -> Vec<R>
    where
        S: Send,
        R: Send,
        F: Fn(usize, &mut S) -> R + Sync + Send,
    {
        states.iter_mut().enumerate().map(|(i, s)| f(i, s)).collect()
    }
}

/// Metered exchanges: one entry per iteration counting synchronous rounds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExchangeLedger {
    pub setup_rounds: usize,
    pub rounds_per_iteration: Vec<usize>,
    pub payload_dim: usize,
    /// Directed messages sent by each node, setup included.
    pub messages_per_node: Vec<u64>,
    pub total_messages: u64,
}

impl ExchangeLedger {
    pub fn total_rounds(&self) -> usize {
        self.rounds_per_iteration.iter().sum()
    }

    /// Rounds spent by the end of iteration `t` (zero for `t = 0`).
    pub fn cumulative(&self, t: usize) -> usize {
        self.rounds_per_iteration[..t].iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub error: f64,
    pub consensus_residual: f64,
    pub exchanges: usize,
    /// Largest absolute entry change of `x` or `y` over the iteration.
    pub update_norm: f64,
    pub diagnostics: Option<DiagnosticRecord>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceMeta {
    pub label: String,
    pub seed: u64,
    pub problem_digest: u64,
    pub config: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvergenceTrace {
    pub meta: TraceMeta,
    pub rows: Vec<TraceRow>,
}

impl ConvergenceTrace {
    pub fn errors(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.error).collect()
    }

    pub fn final_error(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.error)
    }

    /// First row at or below `threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<&TraceRow> {
        self.rows.iter().find(|r| r.error <= threshold)
    }
}

/// Full iterate dump taken when a run aborts.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub x: StackedVector,
    pub y: StackedVector,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("non-finite iterate at iteration {iteration}")]
    NonFinite { iteration: usize, snapshot: Snapshot },
    #[error("node {node} failed at iteration {iteration}: {fault}")]
    Node { node: usize, iteration: usize, fault: NodeFault },
    #[error("node {node} sent a payload of length {got}, expected {expected}")]
    PayloadLength { node: usize, expected: usize, got: usize },
    #[error("invalid run setup: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOptions {
    pub iterations: usize,
    /// Stop once the error reaches this value.
    pub stop_below: Option<f64>,
    pub x0: Option<StackedVector>,
    pub y0: Option<StackedVector>,
}

impl RunOptions {
    pub fn iterations(t: usize) -> Self {
        Self {
            iterations: t,
            ..Self::default()
        }
    }
}

pub struct RunOutput<S> {
    pub trace: ConvergenceTrace,
    pub ledger: ExchangeLedger,
    pub states: Vec<S>,
}

/// Read-only view handed to observers after each iteration.
pub struct IterationView<'a, S> {
    pub iteration: usize,
    pub states: &'a [S],
    pub x: &'a StackedVector,
    pub y: &'a StackedVector,
}

pub struct Network<'a> {
    pub problem: &'a Problem,
    pub topology: &'a Topology,
    pub weights: &'a WeightMatrix,
}

impl Network<'_> {
    fn neighborhood_sizes(&self) -> Vec<Vec<usize>> {
        (0..self.topology.n())
            .map(|i| self.topology.neighborhood(i).iter().map(|&j| self.topology.size(j)).collect())
            .collect()
    }
}

fn gather_views<P: NodeProtocol>(protocol: &P, states: &[P::State], p: usize) -> (StackedVector, StackedVector) {
    let mut x = Vec::with_capacity(states.len() * p);
    let mut y = Vec::with_capacity(states.len() * p);
    for s in states {
        x.extend_from_slice(protocol.primal(s));
        y.extend_from_slice(protocol.dual(s));
    }
    (StackedVector::from_flat(p, x), StackedVector::from_flat(p, y))
}

fn max_abs_change(a: &StackedVector, b: &StackedVector) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(0.0, |m, (u, v)| m.max((u - v).abs()))
}

/// Executes `protocol` for up to `opts.iterations` iterations.
///
/// `observer` runs after every iteration with the gathered iterates and may
/// return a diagnostic record for that trace row.
pub fn run<P, E, O>(
    protocol: &P,
    net: &Network<'_>,
    x_star: &[f64],
    opts: &RunOptions,
    exec: &E,
    mut observer: O,
) -> Result<RunOutput<P::State>, SimError>
where
    P: NodeProtocol,
    E: Executor,
    O: FnMut(&IterationView<'_, P::State>) -> Option<DiagnosticRecord>,
{
    let n = net.topology.n();
    let p = net.problem.p();
    if net.problem.n() != n || net.weights.n() != n {
        return Err(SimError::Setup("problem, topology and weights disagree on n".into()));
    }
    if x_star.len() != p {
        return Err(SimError::Setup("reference solution has the wrong dimension".into()));
    }
    let x0 = opts.x0.clone().unwrap_or_else(|| StackedVector::zeros(n, p));
    let y0 = opts.y0.clone().unwrap_or_else(|| StackedVector::zeros(n, p));
    if x0.n() != n || x0.p() != p || y0.n() != n || y0.p() != p {
        return Err(SimError::Setup("initial iterates have the wrong shape".into()));
    }

    let sizes = net.neighborhood_sizes();
    let ctxs: Vec<NodeContext<'_>> = (0..n)
        .map(|i| NodeContext {
            id: i,
            neighborhood: net.topology.neighborhood(i),
            weights: net.weights.row(i),
            neighborhood_sizes: &sizes[i],
            objective: LocalObjective {
                problem: net.problem,
                node: i,
            },
            p,
        })
        .collect();
    let mut states: Vec<P::State> = ctxs
        .iter()
        .map(|c| protocol.init(c, x0.block(c.id), y0.block(c.id)))
        .collect();

    let mut ledger = ExchangeLedger {
        setup_rounds: protocol.setup_rounds(),
        payload_dim: p,
        messages_per_node: vec![0; n],
        ..ExchangeLedger::default()
    };
    let mut mailbox = Mailbox::empty(n);

    let phase = |ph: Phase, it: usize, states: &mut [P::State], mailbox: &mut Mailbox, ledger: &mut ExchangeLedger| {
        let mb = &*mailbox;
        let results = exec.map_nodes(states, |i, s| protocol.compute(ph, &ctxs[i], s, mb.inbox(i)));
        let mut payloads = Vec::with_capacity(n);
        for (i, r) in results.into_iter().enumerate() {
            payloads.push(r.map_err(|fault| SimError::Node { node: i, iteration: it, fault })?);
        }
        let (next, total, sent) = Mailbox::deliver(net.topology, payloads, p)?;
        ledger.total_messages += total;
        for (acc, s) in ledger.messages_per_node.iter_mut().zip(sent) {
            *acc += s;
        }
        *mailbox = next;
        Ok::<(), SimError>(())
    };

    for k in 0..protocol.setup_rounds() {
        phase(Phase::Setup(k), 0, &mut states, &mut mailbox, &mut ledger)?;
    }

    let residual = |x: &StackedVector| apply_laplacian(net.weights, x).map(|r| r.norm()).unwrap_or(f64::NAN);
    let (mut x_prev, mut y_prev) = gather_views(protocol, &states, p);
    let mut trace = ConvergenceTrace::default();
    trace.rows.push(TraceRow {
        iteration: 0,
        error: relative_error(&x_prev, x_star),
        consensus_residual: residual(&x_prev),
        exchanges: 0,
        update_norm: 0.0,
        diagnostics: None,
    });

    for t in 0..opts.iterations {
        if let Some(thr) = opts.stop_below {
            if trace.final_error() <= thr {
                break;
            }
        }
        let rounds = protocol.rounds_per_iteration();
        for r in 0..rounds {
            phase(Phase::Round(r), t, &mut states, &mut mailbox, &mut ledger)?;
        }
        ledger.rounds_per_iteration.push(rounds);

        let (x, y) = gather_views(protocol, &states, p);
        if !linalg::all_finite(x.as_slice()) || !linalg::all_finite(y.as_slice()) {
            return Err(SimError::NonFinite {
                iteration: t + 1,
                snapshot: Snapshot { iteration: t + 1, x, y },
            });
        }
        let diagnostics = observer(&IterationView {
            iteration: t + 1,
            states: &states,
            x: &x,
            y: &y,
        });
        let update_norm = max_abs_change(&x, &x_prev).max(max_abs_change(&y, &y_prev));
        trace.rows.push(TraceRow {
            iteration: t + 1,
            error: relative_error(&x, x_star),
            consensus_residual: residual(&x),
            exchanges: ledger.total_rounds(),
            update_norm,
            diagnostics,
        });
        x_prev = x;
        y_prev = y;
    }

    Ok(RunOutput { trace, ledger, states })
}

/// Iteration and exchange count at the first crossing of `threshold`.
pub fn exchanges_to_threshold(trace: &ConvergenceTrace, threshold: f64) -> Option<(usize, usize)> {
    trace.first_below(threshold).map(|r| (r.iteration, r.exchanges))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    /// `None` when the trial never crossed (censored) or failed.
    pub exchanges: Option<usize>,
    pub iterations: Option<usize>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SeedSweep {
    pub threshold: f64,
    pub outcomes: Vec<SeedOutcome>,
}

impl SeedSweep {
    pub fn crossed(&self) -> Vec<usize> {
        self.outcomes.iter().filter_map(|o| o.exchanges).collect()
    }

    pub fn censored(&self) -> usize {
        self.outcomes.iter().filter(|o| o.exchanges.is_none()).count()
    }

    /// Median over all trials with censored ones ranked above every
    /// crossing; `None` when the median trial itself is censored.
    pub fn median_exchanges(&self) -> Option<f64> {
        let mut v: Vec<f64> = self
            .outcomes
            .iter()
            .map(|o| o.exchanges.map_or(f64::INFINITY, |e| e as f64))
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let k = v.len();
        let med = if k % 2 == 1 {
            v[k / 2]
        } else {
            0.5 * (v[k / 2 - 1] + v[k / 2])
        };
        med.is_finite().then_some(med)
    }

    /// Equal-width histogram of crossing exchange counts.
    pub fn histogram(&self, bins: usize) -> Vec<(f64, f64, usize)> {
        let data = self.crossed();
        if data.is_empty() || bins == 0 {
            return Vec::new();
        }
        let lo = *data.iter().min().unwrap() as f64;
        let hi = *data.iter().max().unwrap() as f64;
        let width = ((hi - lo) / bins as f64).max(1.0);
        let mut counts = vec![0usize; bins];
        for &d in &data {
            let k = (((d as f64 - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(k, c)| (lo + k as f64 * width, lo + (k + 1) as f64 * width, c))
            .collect()
    }
}

/// Runs one trial per seed and records exchanges-to-threshold.
pub fn sweep_seeds<F>(seeds: &[u64], threshold: f64, mut trial: F) -> SeedSweep
where
    F: FnMut(u64) -> Result<ConvergenceTrace, String>,
{
    let outcomes = seeds
        .iter()
        .map(|&seed| match trial(seed) {
            Ok(trace) => {
                let hit = exchanges_to_threshold(&trace, threshold);
                SeedOutcome {
                    seed,
                    exchanges: hit.map(|h| h.1),
                    iterations: hit.map(|h| h.0),
                    failure: None,
                }
            }
            Err(e) => SeedOutcome {
                seed,
                exchanges: None,
                iterations: None,
                failure: Some(e),
            },
        })
        .collect();
    SeedSweep { threshold, outcomes }
}
