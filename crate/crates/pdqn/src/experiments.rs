//! Command implementations: run, compare, validate, rate-fit and sweep.
//!
//! Every command writes its files under the config's output directory and
//! returns a report; [`CmdError::exit_code`] maps failures onto the CLI's
//! exit codes.

use std::fmt;
use std::path::{Path, PathBuf};

use pdqn_core::algorithms::{
    run_variant, tune_stepsize, AlgoError, AlgorithmConfig, TuneTarget, Variant, VariantRun,
};
use pdqn_core::diagnostics::KappaParams;
use pdqn_core::linalg::{self, Mat};
use pdqn_core::network::{apply_laplacian, validate_weight_matrix, StackedVector};
use pdqn_core::quasi_newton::{
    assemble_global_dual_inverse, dense_primal_hessian, distributed_dual_direction, neumann_descent, DualDirectionRule,
};
use pdqn_core::rate::{fit_linear_rate, RateError, RateFit};
use pdqn_core::simulator::{exchanges_to_threshold, Executor, RunOptions, SeedOutcome, SeedSweep, Sequential, SimError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{AlgorithmEntry, ConfigError, ExperimentConfig, Instance, SweepAxis, SweepSpec, Tuning};
use crate::exec::Parallel;
use crate::io::{self, FormatError, SeedRow, SeedTable, SnapshotFile, SummaryRow, TraceTable};
use crate::svg::{self, XAxis};

/// Slack allowed on the eigenvalue interval checks.
pub const EIGEN_SLACK: f64 = 1e-9;
/// Largest accepted secant residual, relative to the matched variation.
pub const SECANT_TOL: f64 = 1e-10;
/// Largest per-iteration movement at an injected optimum.
pub const FIXED_POINT_TOL: f64 = 1e-12;
pub const ORACLE_TRIALS: usize = 50;
pub const NEUMANN_DEPTH: usize = 40;
pub const NEUMANN_TOL: f64 = 1e-8;
pub const DUAL_DIRECTION_TOL: f64 = 1e-10;
pub const LAPLACIAN_TOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum CmdError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("refused: {0}")]
    Refused(String),
    #[error("invariant failure: {0}")]
    Invariant(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CmdError {
    /// 1 for anything rejected before running, 2 for failed checks and
    /// aborted runs.
    pub fn exit_code(&self) -> u8 {
        match self {
            CmdError::Config(_) | CmdError::Refused(_) | CmdError::Format(_) | CmdError::Io { .. } => 1,
            CmdError::Invariant(_) => 2,
        }
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub threshold: Option<f64>,
    pub diagnostics: Option<bool>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.problem = cfg.problem.with_seed(s);
        }
        if let Some(t) = self.iterations {
            cfg.iterations = t;
        }
        if let Some(e) = self.threshold {
            cfg.thresholds = vec![e];
        }
        if let Some(d) = self.diagnostics {
            cfg.diagnostics = d;
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<(), CmdError> {
    io::write_atomic(path, contents).map_err(|source| CmdError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One configured method after tuning and running.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub label: String,
    pub config: AlgorithmConfig,
    pub run: Result<VariantRun, String>,
    pub snapshot: Option<SnapshotFile>,
}

impl MethodOutcome {
    pub fn table(&self) -> Option<TraceTable> {
        self.run.as_ref().ok().map(|r| TraceTable::from_trace(&r.trace))
    }

    pub fn summary(&self, cell: &str, thresholds: &[f64]) -> Vec<SummaryRow> {
        thresholds
            .iter()
            .map(|&threshold| {
                let hit = self.run.as_ref().ok().and_then(|r| exchanges_to_threshold(&r.trace, threshold));
                SummaryRow {
                    cell: cell.to_string(),
                    label: self.label.clone(),
                    variant: self.config.variant.tag().to_string(),
                    threshold,
                    iterations: hit.map(|h| h.0),
                    exchanges: hit.map(|h| h.1),
                    final_error: self.run.as_ref().map_or(f64::NAN, |r| r.trace.final_error()),
                    alpha: self.config.alpha,
                    eps_d: self.config.eps_d,
                    k: self.config.k,
                    primal_step: self.config.primal_step,
                    status: match &self.run {
                        Ok(_) => "ok".to_string(),
                        Err(e) => e.clone(),
                    },
                }
            })
            .collect()
    }
}

fn with_executor<T>(parallel: bool, f: impl FnOnce(&dyn ErasedExec) -> T) -> T {
    if parallel {
        f(&Parallel)
    } else {
        f(&Sequential)
    }
}

/// Object-safe shim over the two executors.
trait ErasedExec: Sync {
    fn tune(&self, base: &AlgorithmConfig, inst: &Instance, entry: &AlgorithmEntry) -> Option<Result<AlgorithmConfig, AlgoError>>;
    fn run(&self, cfg: &AlgorithmConfig, inst: &Instance, opts: &RunOptions, diag: Option<KappaParams>) -> Result<VariantRun, AlgoError>;
}

impl<E: Executor + Sync> ErasedExec for E {
    fn tune(&self, base: &AlgorithmConfig, inst: &Instance, entry: &AlgorithmEntry) -> Option<Result<AlgorithmConfig, AlgoError>> {
        let opts = entry.tune_options()?;
        Some(tune_stepsize(base, &inst.setup(), &opts, self).map(|o| o.config))
    }

    fn run(&self, cfg: &AlgorithmConfig, inst: &Instance, opts: &RunOptions, diag: Option<KappaParams>) -> Result<VariantRun, AlgoError> {
        run_variant(cfg, &inst.setup(), opts, self, diag)
    }
}

/// Tunes `entry` on `inst` if requested; returns the config to run.
pub fn tuned_config(entry: &AlgorithmEntry, inst: &Instance, parallel: bool) -> Result<AlgorithmConfig, String> {
    with_executor(parallel, |ex| match ex.tune(&entry.config, inst, entry) {
        None => Ok(entry.config.clone()),
        Some(r) => r.map_err(|e| format!("tuning failed: {e}")),
    })
}

/// Runs one method with an already-tuned config.
pub fn run_config(
    label: &str,
    config: &AlgorithmConfig,
    inst: &Instance,
    opts: &RunOptions,
    diagnostics: Option<KappaParams>,
    parallel: bool,
) -> MethodOutcome {
    let result = with_executor(parallel, |ex| ex.run(config, inst, opts, diagnostics));
    let mut snapshot = None;
    let run = match result {
        Ok(mut r) => {
            r.trace.meta.label = label.to_string();
            r.trace.meta.seed = 0;
            r.trace.meta.problem_digest = inst.problem.digest();
            r.trace.meta.config = serde_json::to_string(config).expect("config serializes");
            Ok(r)
        }
        Err(e) => {
            if let AlgoError::Sim(SimError::NonFinite { snapshot: s, .. }) = &e {
                snapshot = Some(SnapshotFile::new(label, &e.to_string(), s));
            }
            Err(e.to_string())
        }
    };
    MethodOutcome {
        label: label.to_string(),
        config: config.clone(),
        run,
        snapshot,
    }
}

/// Tunes (if asked) and runs one entry.
pub fn run_entry(entry: &AlgorithmEntry, inst: &Instance, cfg: &ExperimentConfig, seed: u64) -> MethodOutcome {
    let diag = cfg.diagnostics.then_some(cfg.kappa);
    let mut out = match tuned_config(entry, inst, cfg.parallel) {
        Ok(c) => run_config(&entry.label, &c, inst, &RunOptions::iterations(cfg.iterations), diag, cfg.parallel),
        Err(e) => MethodOutcome {
            label: entry.label.clone(),
            config: entry.config.clone(),
            run: Err(e),
            snapshot: None,
        },
    };
    if let Ok(r) = &mut out.run {
        r.trace.meta.seed = seed;
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub outcomes: Vec<MethodOutcome>,
    pub summary: Vec<SummaryRow>,
    /// Trace CSV per successful method, in config order.
    pub trace_files: Vec<PathBuf>,
    pub summary_file: PathBuf,
}

impl RunReport {
    pub fn failures(&self) -> Vec<String> {
        self.outcomes
            .iter()
            .filter_map(|o| o.run.as_ref().err().map(|e| format!("{}: {e}", o.label)))
            .collect()
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>10} {:>10} {:>10} {:>12}  status", "label", "threshold", "iters", "exchanges", "final")?;
        for r in &self.summary {
            let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
            writeln!(
                f,
                "{:<14} {:>10.1e} {:>10} {:>10} {:>12.3e}  {}",
                r.label,
                r.threshold,
                opt(r.iterations),
                opt(r.exchanges),
                r.final_error,
                r.status
            )?;
        }
        Ok(())
    }
}

fn run_all(cfg: &ExperimentConfig) -> Result<(RunReport, Vec<TraceTable>), CmdError> {
    let inst = cfg.build()?;
    let seed = cfg.problem.seed();
    let outcomes: Vec<MethodOutcome> = cfg.algorithms.iter().map(|e| run_entry(e, &inst, cfg, seed)).collect();
    let dir = &cfg.output_dir;
    let mut trace_files = Vec::new();
    let mut tables = Vec::new();
    let mut summary = Vec::new();
    for o in &outcomes {
        summary.extend(o.summary("", &cfg.thresholds));
        if let Some(t) = o.table() {
            let path = dir.join(format!("{}.csv", o.label));
            let text = t.to_csv();
            write(&path, &text)?;
            tables.push(TraceTable::parse(&text)?);
            trace_files.push(path);
        }
        if let Some(s) = &o.snapshot {
            write(
                &dir.join(format!("{}.snapshot.json", o.label)),
                &serde_json::to_string_pretty(s).expect("snapshot serializes"),
            )?;
        }
    }
    let summary_file = dir.join("summary.csv");
    write(&summary_file, &io::summary_to_csv(&summary)?)?;
    write(&dir.join("config.json"), &cfg.to_json())?;
    Ok((
        RunReport {
            outcomes,
            summary,
            trace_files,
            summary_file,
        },
        tables,
    ))
}

fn aborted(report: &RunReport) -> Result<(), CmdError> {
    let f = report.failures();
    if f.is_empty() {
        Ok(())
    } else {
        Err(CmdError::Invariant(format!("runs did not complete: {}", f.join("; "))))
    }
}

/// Runs every configured method on the shared problem.
///
/// The report is returned even when a method aborts; the second element
/// carries that failure.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<(RunReport, Result<(), CmdError>), CmdError> {
    let (report, _) = run_all(cfg)?;
    let status = aborted(&report);
    Ok((report, status))
}

/// Like [`cmd_run`] plus error charts on the iteration and exchange axes.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<(RunReport, Result<(), CmdError>), CmdError> {
    if cfg.algorithms.len() < 2 {
        return Err(CmdError::Refused(format!(
            "compare needs at least two methods, got {}",
            cfg.algorithms.len()
        )));
    }
    let (report, tables) = run_all(cfg)?;
    write_compare_charts(&cfg.output_dir, &tables)?;
    let status = aborted(&report);
    Ok((report, status))
}

pub fn write_compare_charts(dir: &Path, tables: &[TraceTable]) -> Result<(), CmdError> {
    write(
        &dir.join("compare_iterations.svg"),
        &svg::trace_chart("relative error by iteration", tables, XAxis::Iterations),
    )?;
    write(
        &dir.join("compare_exchanges.svg"),
        &svg::trace_chart("relative error by information exchanges", tables, XAxis::Exchanges),
    )
}

/// Outcome of one invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Informational checks never fail the suite.
    pub informational: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            informational: false,
            detail: detail.into(),
        });
    }

    fn info(&mut self, name: impl Into<String>, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed: true,
            informational: true,
            detail: detail.into(),
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = match (c.informational, c.passed) {
                (true, _) => "INFO",
                (false, true) => "PASS",
                (false, false) => "FAIL",
            };
            writeln!(f, "{tag} {:<34} {}", c.name, c.detail)?;
        }
        Ok(())
    }
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    linalg::norm(&linalg::sub(a, b)) / linalg::norm(b).max(f64::MIN_POSITIVE)
}

fn random_spd(rng: &mut ChaCha8Rng, p: usize, lo: f64) -> Mat {
    let a = Mat::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
    let mut m = &a * a.transpose() + Mat::identity(p, p) * lo;
    linalg::symmetrize(&mut m);
    m
}

fn random_stacked(rng: &mut ChaCha8Rng, n: usize, p: usize) -> StackedVector {
    StackedVector::from_flat(p, (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Distributed operators against dense assemblies on random inputs.
pub fn oracle_checks(inst: &Instance, seed: u64, report: &mut ValidationReport) {
    let (n, p) = (inst.problem.n(), inst.problem.p());
    let (t, w) = (&inst.topology, &inst.weights);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut worst = 0.0f64;
    let mut failed = None;
    for trial in 0..ORACLE_TRIALS {
        let b: Vec<Mat> = (0..n).map(|_| random_spd(&mut rng, p, 1.0)).collect();
        let g = random_stacked(&mut rng, n, p);
        let alpha = 0.5;
        let exact = linalg::solve_spd(&dense_primal_hessian(&b, w, alpha), g.as_slice());
        let err = match (neumann_descent(&g, &b, w, alpha, NEUMANN_DEPTH), exact) {
            (Ok(d), Some(e)) => {
                let neg: Vec<f64> = d.as_slice().iter().map(|v| -v).collect();
                rel_diff(&neg, &e)
            }
            _ => f64::INFINITY,
        };
        worst = worst.max(err);
        if err > NEUMANN_TOL && failed.is_none() {
            failed = Some(trial);
        }
    }
    report.push(
        "oracle:neumann-series",
        failed.is_none(),
        format!("depth {NEUMANN_DEPTH}, worst relative gap {worst:.2e} over {ORACLE_TRIALS} trials (tol {NEUMANN_TOL:e}){}", trial_note(failed)),
    );

    for rule in [DualDirectionRule::Conserving, DualDirectionRule::Plain] {
        let mut worst = 0.0f64;
        let mut failed = None;
        for trial in 0..ORACLE_TRIALS {
            let c: Vec<Mat> = (0..n).map(|i| random_spd(&mut rng, t.size(i) * p, 0.1)).collect();
            let h = random_stacked(&mut rng, n, p);
            let err = match (
                distributed_dual_direction(t, &c, &h, 0.1, 0.1, rule),
                assemble_global_dual_inverse(&c, 0.1, 0.1, t, p, rule),
            ) {
                (Ok(d), Ok(dense)) => rel_diff(d.as_slice(), &linalg::mat_vec(&dense, h.as_slice())),
                _ => f64::INFINITY,
            };
            worst = worst.max(err);
            if err > DUAL_DIRECTION_TOL && failed.is_none() {
                failed = Some(trial);
            }
        }
        let name = match rule {
            DualDirectionRule::Conserving => "oracle:dual-direction(conserving)",
            DualDirectionRule::Plain => "oracle:dual-direction(plain)",
        };
        report.push(
            name,
            failed.is_none(),
            format!("worst relative gap {worst:.2e} (tol {DUAL_DIRECTION_TOL:e}){}", trial_note(failed)),
        );
    }

    let dense_l = linalg::kron_identity(&w.dense_laplacian(), p);
    let mut worst = 0.0f64;
    let mut failed = None;
    for trial in 0..ORACLE_TRIALS {
        let x = random_stacked(&mut rng, n, p);
        let err = match apply_laplacian(w, &x) {
            Ok(l) => rel_diff(l.as_slice(), &linalg::mat_vec(&dense_l, x.as_slice())),
            Err(_) => f64::INFINITY,
        };
        worst = worst.max(err);
        if err > LAPLACIAN_TOL && failed.is_none() {
            failed = Some(trial);
        }
    }
    report.push(
        "oracle:laplacian",
        failed.is_none(),
        format!("worst relative gap {worst:.2e} (tol {LAPLACIAN_TOL:e}){}", trial_note(failed)),
    );
}

fn trial_note(failed: Option<usize>) -> String {
    failed.map_or(String::new(), |t| format!("; first failure at trial {t}"))
}

/// Eigenvalue intervals, secant residuals, ledger counts and the
/// Lyapunov/contraction diagnostics along one PD-QN run.
pub fn pdqn_checks(label: &str, config: &AlgorithmConfig, inst: &Instance, cfg: &ExperimentConfig, report: &mut ValidationReport) {
    let out = run_config(
        label,
        config,
        inst,
        &RunOptions::iterations(cfg.iterations),
        Some(cfg.kappa),
        cfg.parallel,
    );
    let run = match &out.run {
        Ok(r) => r,
        Err(e) => {
            report.push(format!("{label}:run"), false, e.clone());
            return;
        }
    };
    let rows: Vec<_> = run.trace.rows.iter().filter_map(|r| r.diagnostics.as_ref().map(|d| (r.iteration, d))).collect();
    let interval = |pick: &dyn Fn(&pdqn_core::diagnostics::DiagnosticRecord) -> pdqn_core::diagnostics::EigenCheck| {
        let mut margin = f64::INFINITY;
        let mut first_bad = None;
        for (it, d) in &rows {
            let c = pick(d);
            margin = margin.min(c.margin());
            if !c.holds(EIGEN_SLACK) && first_bad.is_none() {
                first_bad = Some((*it, c));
            }
        }
        (margin, first_bad)
    };
    let (m, bad) = interval(&|d| d.primal_inverse);
    let detail = match (bad, rows.first()) {
        (Some((it, c)), _) => format!("iteration {it}: eigenvalues [{:.6e}, {:.6e}] outside [{:.6e}, {:.6e}]", c.min_eig, c.max_eig, c.lower, c.upper),
        (None, Some((_, d))) => format!(
            "{} iterations, min margin {m:.3e}, interval [{:.6e}, {:.6e}]",
            rows.len(),
            d.primal_inverse.lower,
            d.primal_inverse.upper
        ),
        (None, None) => "no diagnostics recorded".to_string(),
    };
    report.push(format!("{label}:primal-inverse-interval"), bad.is_none() && !rows.is_empty(), detail);

    let (m, bad) = interval(&|d| d.dual_inverse);
    let detail = match (bad, rows.first()) {
        (Some((it, c)), _) => format!("iteration {it}: eigenvalues [{:.6e}, {:.6e}] outside [{:.6e}, {:.6e}]", c.min_eig, c.max_eig, c.lower, c.upper),
        (None, Some((_, d))) => format!(
            "{} iterations, min margin {m:.3e}, interval [{:.6e}, {:.6e}]",
            rows.len(),
            d.dual_inverse.lower,
            d.dual_inverse.upper
        ),
        (None, None) => "no diagnostics recorded".to_string(),
    };
    report.push(format!("{label}:dual-inverse-interval"), bad.is_none() && !rows.is_empty(), detail);

    if let Some(s) = &run.stats {
        report.push(
            format!("{label}:primal-secant"),
            s.max_primal_secant <= SECANT_TOL,
            format!(
                "max residual {:.2e} over {} accepted updates ({} skipped)",
                s.max_primal_secant, s.primal_accepted, s.primal_skipped
            ),
        );
        report.push(
            format!("{label}:dual-secant"),
            s.max_dual_secant <= SECANT_TOL,
            format!(
                "max residual {:.2e} over {} accepted updates ({} skipped)",
                s.max_dual_secant, s.dual_accepted, s.dual_skipped
            ),
        );
    }
    ledger_check(label, config, run, report);

    let increases = rows
        .iter()
        .filter(|(_, d)| d.lyapunov_after > d.lyapunov_before * (1.0 + 1e-9) + 1e-24)
        .count();
    let positive = rows.iter().filter(|(_, d)| d.kappa > 0.0).count();
    let flagged = rows.iter().filter(|(_, d)| d.range_flagged).count();
    report.info(
        format!("{label}:lyapunov"),
        format!(
            "{increases} of {} iterations increased the Lyapunov value; contraction factor positive on {positive}; dual outside range on {flagged}",
            rows.len()
        ),
    );
}

fn ledger_check(label: &str, config: &AlgorithmConfig, run: &VariantRun, report: &mut ValidationReport) {
    let expect = config.rounds_per_iteration();
    let bad = run.ledger.rounds_per_iteration.iter().position(|&r| r != expect);
    let detail = match bad {
        Some(t) => format!("iteration {} used {} rounds, expected {expect}", t + 1, run.ledger.rounds_per_iteration[t]),
        None => format!(
            "{} rounds per iteration over {} iterations, {} total",
            expect,
            run.ledger.rounds_per_iteration.len(),
            run.ledger.total_rounds()
        ),
    };
    report.push(format!("{label}:ledger"), bad.is_none(), detail);
}

/// Starts every exact method at the optimum and checks nothing moves.
pub fn fixed_point_check(label: &str, config: &AlgorithmConfig, inst: &Instance, parallel: bool, report: &mut ValidationReport) {
    let n = inst.topology.n();
    let x = StackedVector::consensus(n, &inst.reference.x_star);
    let g = inst.problem.gradient(&x);
    let y = StackedVector::from_flat(inst.problem.p(), g.as_slice().iter().map(|v| -v).collect());
    let opts = RunOptions {
        iterations: 20,
        x0: Some(x),
        y0: Some(y),
        ..RunOptions::default()
    };
    let out = run_config(label, config, inst, &opts, None, parallel);
    match &out.run {
        Ok(r) => {
            let worst = r.trace.rows.iter().map(|row| row.update_norm).fold(0.0, f64::max);
            report.push(
                format!("{label}:fixed-point"),
                worst <= FIXED_POINT_TOL,
                format!("largest update {worst:.2e} over 20 iterations (tol {FIXED_POINT_TOL:e})"),
            );
            ledger_check(label, config, r, report);
        }
        Err(e) => report.push(format!("{label}:fixed-point"), false, e.clone()),
    }
}

/// The full invariant suite.
pub fn cmd_validate(cfg: &ExperimentConfig) -> Result<ValidationReport, CmdError> {
    let inst = cfg.build()?;
    if inst.problem.n() * inst.problem.p() > crate::config::DENSE_LIMIT {
        return Err(CmdError::Refused(format!(
            "validation assembles dense matrices and needs n*p <= {}",
            crate::config::DENSE_LIMIT
        )));
    }
    let mut report = ValidationReport::default();
    match validate_weight_matrix(&inst.weights, &inst.topology) {
        Ok(w) => report.push("weights", true, format!("{w:?}")),
        Err(e) => report.push("weights", false, e.to_string()),
    }
    oracle_checks(&inst, cfg.problem.seed(), &mut report);

    let mut pdqn_entries: Vec<AlgorithmEntry> = cfg
        .algorithms
        .iter()
        .filter(|e| e.config.variant == Variant::Pdqn)
        .cloned()
        .collect();
    if pdqn_entries.is_empty() {
        pdqn_entries.push(AlgorithmEntry::new(Variant::Pdqn));
    }
    for e in &pdqn_entries {
        match tuned_config(e, &inst, cfg.parallel) {
            Ok(c) => pdqn_checks(&e.label, &c, &inst, cfg, &mut report),
            Err(msg) => report.push(format!("{}:tuning", e.label), false, msg),
        }
    }
    for e in &cfg.algorithms {
        if e.config.variant.is_exact() && inst.problem.is_quadratic() {
            match tuned_config(e, &inst, cfg.parallel) {
                Ok(c) => fixed_point_check(&e.label, &c, &inst, cfg.parallel, &mut report),
                Err(msg) => report.push(format!("{}:tuning", e.label), false, msg),
            }
        }
    }
    let dir = &cfg.output_dir;
    write(&dir.join("validate.txt"), &report.to_string())?;
    Ok(report)
}

/// Fits the linear rate of a trace over the configured window.
pub fn rate_fit_table(table: &TraceTable, start: f64, end: f64) -> Result<RateFit, RateError> {
    fit_linear_rate(&table.errors(), start, end)
}

#[derive(Debug, Clone)]
pub struct RateReport {
    pub label: String,
    pub fit: Result<RateFit, RateError>,
}

impl fmt::Display for RateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.fit {
            Ok(r) => write!(
                f,
                "{}: rate {:.6} per iteration, r^2 {:.6}, window iterations {}..={}",
                self.label, r.rate, r.r_squared, r.window.0, r.window.1
            ),
            Err(e) => write!(f, "{}: no fit: {e}", self.label),
        }
    }
}

/// Runs the first configured method and fits its trace.
pub fn cmd_rate_fit(cfg: &ExperimentConfig) -> Result<RateReport, CmdError> {
    let inst = cfg.build()?;
    let entry = &cfg.algorithms[0];
    let out = run_entry(entry, &inst, cfg, cfg.problem.seed());
    let table = out
        .table()
        .ok_or_else(|| CmdError::Invariant(format!("{}: {}", entry.label, out.run.as_ref().err().cloned().unwrap_or_default())))?;
    write(&cfg.output_dir.join(format!("{}.csv", entry.label)), &table.to_csv())?;
    let report = RateReport {
        label: entry.label.clone(),
        fit: rate_fit_table(&table, cfg.rate_window.start, cfg.rate_window.end),
    };
    write(&cfg.output_dir.join("rate_fit.txt"), &format!("{report}\n"))?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct SeedSummary {
    pub label: String,
    pub sweep: SeedSweep,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub summary: Vec<SummaryRow>,
    pub seeds: Option<SeedTable>,
    pub seed_summaries: Vec<SeedSummary>,
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.seeds.is_some() {
            for s in &self.seed_summaries {
                let med = s.sweep.median_exchanges().map_or("censored".to_string(), |m| format!("{m}"));
                writeln!(
                    f,
                    "{:<14} trials {:>4}  median exchanges {:>10}  censored {}",
                    s.label,
                    s.sweep.outcomes.len(),
                    med,
                    s.sweep.censored()
                )?;
            }
            return Ok(());
        }
        for r in &self.summary {
            let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
            writeln!(
                f,
                "{:<10} {:<14} {:>9.1e} iters {:>6} exchanges {:>7} final {:.3e} {}",
                r.cell,
                r.label,
                r.threshold,
                opt(r.iterations),
                opt(r.exchanges),
                r.final_error,
                r.status
            )?;
        }
        Ok(())
    }
}

fn cell_label(axis: SweepAxis, v: f64) -> String {
    format!("{}={}", axis.name(), v)
}

/// Config for one cell of an eta, K or alpha sweep.
fn cell_config(cfg: &ExperimentConfig, axis: SweepAxis, v: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::Eta => {
            if let crate::config::ProblemSpec::Quadratic { eta, .. } = &mut c.problem {
                *eta = v as u32;
            }
        }
        SweepAxis::K => {
            for e in &mut c.algorithms {
                e.config.k = v as usize;
            }
        }
        SweepAxis::Alpha => {
            for e in &mut c.algorithms {
                if matches!(e.config.variant, Variant::Pdqn | Variant::Esom) {
                    e.config.alpha = v;
                    if let Some(mut opts) = e.tune_options() {
                        opts.axes.retain(|a| a.target != TuneTarget::Alpha);
                        e.tune = if opts.axes.is_empty() { Tuning::Off } else { Tuning::Grid(opts) };
                    }
                }
            }
        }
        SweepAxis::Seeds => {}
    }
    c.output_dir = cfg.output_dir.join(cell_label(axis, v));
    c
}

/// Sweeps one axis; a failing cell is recorded and the sweep continues.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepReport, CmdError> {
    cfg.validate()?;
    let spec: &SweepSpec = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CmdError::Refused("sweep needs an axis and a list of values".into()))?;
    if spec.values.is_empty() {
        return Err(CmdError::Refused(format!("sweep over {} has no values", spec.axis.name())));
    }
    if spec.axis == SweepAxis::Seeds {
        return seed_sweep(cfg, spec);
    }
    let cells: Vec<Result<Vec<SummaryRow>, String>> = spec
        .values
        .par_iter()
        .map(|&v| {
            let c = cell_config(cfg, spec.axis, v);
            let cell = cell_label(spec.axis, v);
            match run_all(&c) {
                Ok((report, _)) => Ok(report.summary.into_iter().map(|mut r| {
                    r.cell = cell.clone();
                    r
                }).collect()),
                Err(e) => Err(e.to_string()),
            }
        })
        .collect();
    let mut summary = Vec::new();
    for (&v, cell) in spec.values.iter().zip(cells) {
        match cell {
            Ok(rows) => summary.extend(rows),
            Err(e) => {
                for entry in &cfg.algorithms {
                    for &threshold in &cfg.thresholds {
                        summary.push(SummaryRow {
                            cell: cell_label(spec.axis, v),
                            label: entry.label.clone(),
                            variant: entry.config.variant.tag().to_string(),
                            threshold,
                            iterations: None,
                            exchanges: None,
                            final_error: f64::NAN,
                            alpha: entry.config.alpha,
                            eps_d: entry.config.eps_d,
                            k: entry.config.k,
                            primal_step: entry.config.primal_step,
                            status: e.clone(),
                        });
                    }
                }
            }
        }
    }
    let text = io::summary_to_csv(&summary)?;
    write(&cfg.output_dir.join("sweep.csv"), &text)?;
    let parsed = io::parse_summary(&text)?;
    write(
        &cfg.output_dir.join("sweep.svg"),
        &svg::sweep_chart(&format!("sweep over {}", spec.axis.name()), spec.axis.name(), &parsed),
    )?;
    Ok(SweepReport {
        axis: spec.axis,
        summary,
        seeds: None,
        seed_summaries: Vec::new(),
    })
}

/// Tunes each method once on the base seed, then runs every seed until
/// the first threshold or the iteration budget.
fn seed_sweep(cfg: &ExperimentConfig, spec: &SweepSpec) -> Result<SweepReport, CmdError> {
    let base = cfg.build()?;
    let threshold = cfg.thresholds[0];
    let configs: Vec<(String, Result<AlgorithmConfig, String>)> = cfg
        .algorithms
        .iter()
        .map(|e| (e.label.clone(), tuned_config(e, &base, cfg.parallel)))
        .collect();
    let seeds: Vec<u64> = spec.values.iter().map(|&v| v as u64).collect();
    let opts = RunOptions {
        iterations: cfg.iterations,
        stop_below: Some(threshold),
        ..RunOptions::default()
    };
    let trials: Vec<Vec<SeedOutcome>> = seeds
        .par_iter()
        .map(|&seed| {
            let inst = cfg.build_with(&cfg.problem.with_seed(seed));
            configs
                .iter()
                .map(|(label, c)| {
                    let failure = |f: String| SeedOutcome {
                        seed,
                        exchanges: None,
                        iterations: None,
                        failure: Some(f),
                    };
                    let (inst, c) = match (&inst, c) {
                        (Ok(i), Ok(c)) => (i, c),
                        (Err(e), _) => return failure(e.to_string()),
                        (_, Err(e)) => return failure(e.clone()),
                    };
                    let out = run_config(label, c, inst, &opts, None, false);
                    match out.run {
                        Ok(r) => {
                            let hit = exchanges_to_threshold(&r.trace, threshold);
                            SeedOutcome {
                                seed,
                                exchanges: hit.map(|h| h.1),
                                iterations: hit.map(|h| h.0),
                                failure: None,
                            }
                        }
                        Err(e) => failure(e),
                    }
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    let mut seed_summaries: Vec<SeedSummary> = configs
        .iter()
        .map(|(label, _)| SeedSummary {
            label: label.clone(),
            sweep: SeedSweep {
                threshold,
                outcomes: Vec::new(),
            },
        })
        .collect();
    for per_seed in trials {
        for (k, o) in per_seed.into_iter().enumerate() {
            rows.push(SeedRow {
                label: configs[k].0.clone(),
                seed: o.seed,
                iterations: o.iterations,
                exchanges: o.exchanges,
                failure: o.failure.clone().unwrap_or_default(),
            });
            seed_summaries[k].sweep.outcomes.push(o);
        }
    }
    let table = SeedTable {
        threshold,
        budget: cfg.iterations,
        rows,
    };
    let text = table.to_csv()?;
    write(&cfg.output_dir.join("seeds.csv"), &text)?;
    let parsed = SeedTable::parse(&text)?;
    write(
        &cfg.output_dir.join("seeds.svg"),
        &svg::histogram_chart(
            &format!("exchanges to {threshold:e} over {} seeds", seeds.len()),
            &parsed,
            cfg.histogram_bins,
        ),
    )?;
    let summary = configs
        .iter()
        .zip(&seed_summaries)
        .map(|((label, c), s)| {
            let c = c.as_ref().ok();
            let med = s.sweep.median_exchanges();
            SummaryRow {
                cell: format!("seeds={}", seeds.len()),
                label: label.clone(),
                variant: c.map_or(String::new(), |c| c.variant.tag().to_string()),
                threshold,
                iterations: None,
                exchanges: med.map(|m| m.round() as usize),
                final_error: f64::NAN,
                alpha: c.map_or(f64::NAN, |c| c.alpha),
                eps_d: c.map_or(f64::NAN, |c| c.eps_d),
                k: c.map_or(0, |c| c.k),
                primal_step: c.map_or(f64::NAN, |c| c.primal_step),
                status: format!("median of crossings; {} censored", s.sweep.censored()),
            }
        })
        .collect::<Vec<_>>();
    write(&cfg.output_dir.join("sweep.csv"), &io::summary_to_csv(&summary)?)?;
    Ok(SweepReport {
        axis: SweepAxis::Seeds,
        summary,
        seeds: Some(parsed),
        seed_summaries,
    })
}
