//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always print. The process
//! fails when a criterion outside [`UNATTAINED`] fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use pdqn::config::{AlgorithmEntry, ExperimentConfig, ProblemSpec, SweepAxis, SweepSpec, Tuning};
use pdqn::experiments::{self, ValidationReport};
use pdqn::io::{parse_summary, SummaryRow, TraceTable};
use pdqn_core::algorithms::{power_grid, AlgorithmConfig, TuneAxis, TuneOptions, TuneTarget, Variant};
use pdqn_core::simulator::RunOptions;

/// Criteria that fail on this implementation; see the decisions ledger.
const UNATTAINED: &[usize] = &[11];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn desk(eta: u32, variants: &[Variant], out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::quadratic(eta, 0, variants);
    for e in &mut cfg.algorithms {
        if e.config.variant != Variant::Dgd {
            e.tune = Tuning::Default;
        }
    }
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn row<'a>(rows: &'a [SummaryRow], label: &str, threshold: f64) -> Option<&'a SummaryRow> {
    rows.iter().find(|r| r.label == label && r.threshold == threshold)
}

fn iters(rows: &[SummaryRow], label: &str, threshold: f64) -> Option<usize> {
    row(rows, label, threshold).and_then(|r| r.iterations)
}

fn fmt_opt(v: Option<usize>) -> String {
    v.map_or("never".into(), |v| v.to_string())
}

/// Criteria 1, 2 and 10 share this run.
struct DeskRun {
    summary: Vec<SummaryRow>,
    pdqn_trace: TraceTable,
    stats_ok: (bool, String),
}

fn desk_run(out: &Path) -> DeskRun {
    let mut cfg = desk(0, &Variant::ALL, out);
    cfg.iterations = 2000;
    cfg.thresholds = vec![1e-8];
    let (report, _) = experiments::cmd_run(&cfg).expect("desk run");
    let summary = parse_summary(&fs::read_to_string(&report.summary_file).unwrap()).unwrap();
    let pdqn_trace = TraceTable::parse(&fs::read_to_string(out.join("pdqn.csv")).unwrap()).unwrap();
    let stats = report.outcomes[0].run.as_ref().unwrap().stats.clone().unwrap();
    let ok = stats.max_primal_secant <= 1e-10 && stats.max_dual_secant <= 1e-10 && stats.primal_accepted > 0 && stats.dual_accepted > 0;
    let detail = format!(
        "n=20 run: primal {:.1e} over {}, dual {:.1e} over {}",
        stats.max_primal_secant, stats.primal_accepted, stats.max_dual_secant, stats.dual_accepted
    );
    DeskRun {
        summary,
        pdqn_trace,
        stats_ok: (ok, detail),
    }
}

fn criterion_1(d: &DeskRun) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for label in ["pdqn", "extra", "esom", "da"] {
        let it = iters(&d.summary, label, 1e-8);
        ok &= it.is_some_and(|t| t <= 2000);
        parts.push(format!("{label} {}", fmt_opt(it)));
    }
    let dgd = row(&d.summary, "dgd", 1e-8).map_or(f64::NAN, |r| r.final_error);
    ok &= dgd >= 1e-4;
    parts.push(format!("dgd final {dgd:.2e}"));
    outcome(ok, format!("iterations to 1e-8: {}", parts.join(", ")))
}

fn criterion_2(d: &DeskRun) -> Outcome {
    let it = iters(&d.summary, "pdqn", 1e-8);
    outcome(it.is_some_and(|t| t <= 150), format!("pdqn reaches 1e-8 at iteration {}", fmt_opt(it)))
}

fn criterion_3(out: &Path) -> Outcome {
    let mut cfg = desk(0, &[Variant::Pdqn, Variant::Da], out);
    cfg.iterations = 2000;
    cfg.thresholds = vec![1e-5];
    cfg.sweep = Some(SweepSpec {
        axis: SweepAxis::Eta,
        values: vec![0.0, 1.0],
    });
    let report = experiments::cmd_sweep(&cfg).expect("eta sweep");
    let rows = parse_summary(&fs::read_to_string(out.join("sweep.csv")).unwrap()).unwrap();
    assert_eq!(rows, report.summary);
    let at = |cell: &str, label: &str| {
        rows.iter()
            .find(|r| r.cell == cell && r.label == label)
            .and_then(|r| r.iterations)
    };
    let (p0, p1, d0, d1) = (at("eta=0", "pdqn"), at("eta=1", "pdqn"), at("eta=0", "da"), at("eta=1", "da"));
    let (Some(p0), Some(p1), Some(d0), Some(d1)) = (p0, p1, d0, d1) else {
        return outcome(false, format!("missing crossings: pdqn {p0:?}/{p1:?}, da {d0:?}/{d1:?}"));
    };
    let (gp, gd) = (p1 as f64 / p0.max(1) as f64, d1 as f64 / d0.max(1) as f64);
    outcome(
        p1 < d1 && gd > gp,
        format!("iterations to 1e-5 at eta=1: pdqn {p1}, da {d1}; growth from eta=0: pdqn x{gp:.2}, da x{gd:.2}"),
    )
}

fn criterion_4() -> Outcome {
    let cfg = ExperimentConfig::quadratic(0, 0, &[]);
    let inst = cfg.build_with(&cfg.problem).unwrap();
    let t = 10;
    let mut ok = true;
    let mut parts = Vec::new();
    for k in 0..=3 {
        for (v, extra) in [(Variant::Pdqn, 5), (Variant::Esom, 3)] {
            let mut c = AlgorithmConfig::new(v);
            c.k = k;
            let out = experiments::run_config(v.tag(), &c, &inst, &RunOptions::iterations(t), None, false);
            let rounds = out.run.as_ref().map_or(0, |r| r.ledger.total_rounds());
            ok &= rounds == (k + extra) * t;
            parts.push(format!("{}(K={k})={rounds}", v.tag()));
        }
    }
    outcome(ok, format!("rounds over {t} iterations: {}", parts.join(" ")))
}

fn criterion_5(out: &Path) -> Outcome {
    let mut cfg = desk(0, &[Variant::Pdqn, Variant::Da, Variant::Esom], out);
    cfg.iterations = 1000;
    cfg.thresholds = vec![1e-5];
    cfg.sweep = Some(SweepSpec {
        axis: SweepAxis::Seeds,
        values: (0..100).map(f64::from).collect(),
    });
    let report = experiments::cmd_sweep(&cfg).expect("seed sweep");
    let med = |label: &str| {
        report
            .seed_summaries
            .iter()
            .find(|s| s.label == label)
            .and_then(|s| s.sweep.median_exchanges())
    };
    let censored: usize = report.seed_summaries.iter().map(|s| s.sweep.censored()).sum();
    let (p, d, e) = (med("pdqn"), med("da"), med("esom"));
    let ok = matches!((p, d, e), (Some(p), Some(d), Some(e)) if p < d && p < e);
    outcome(
        ok,
        format!("median exchanges to 1e-5 over 100 seeds: pdqn {p:?}, da {d:?}, esom {e:?}; {censored} censored"),
    )
}

/// Small configurations for the dense eigenvalue and secant checks.
fn small_reports(out: &Path) -> Vec<(String, ValidationReport)> {
    let mut reports = Vec::new();
    for (eta, seed, degree) in [(0u32, 0u64, 2usize), (1, 1, 2), (1, 2, 4)] {
        let mut cfg = ExperimentConfig::quadratic(eta, seed, &[Variant::Pdqn]);
        cfg.problem = ProblemSpec::Quadratic { n: 6, p: 3, eta, seed };
        cfg.topology.n = 6;
        cfg.topology.degree = degree;
        cfg.iterations = 200;
        cfg.diagnostics = true;
        cfg.output_dir = out.join(format!("small-{eta}-{seed}-{degree}"));
        let inst = cfg.build().unwrap();
        let mut report = ValidationReport::default();
        experiments::pdqn_checks("pdqn", &cfg.algorithms[0].config, &inst, &cfg, &mut report);
        reports.push((format!("eta={eta} seed={seed} d={degree}"), report));
    }
    reports
}

fn interval_criterion(reports: &[(String, ValidationReport)], check: &str) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, r) in reports {
        match r.get(&format!("pdqn:{check}")) {
            Some(c) => {
                ok &= c.passed;
                parts.push(format!("[{name}] {}", c.detail));
            }
            None => {
                ok = false;
                parts.push(format!("[{name}] not evaluated"));
            }
        }
    }
    outcome(ok, parts.join("; "))
}

fn criterion_8(reports: &[(String, ValidationReport)], desk: &DeskRun) -> Outcome {
    let mut ok = desk.stats_ok.0;
    let mut parts = vec![desk.stats_ok.1.clone()];
    for (name, r) in reports {
        for check in ["primal-secant", "dual-secant"] {
            let c = r.get(&format!("pdqn:{check}"));
            ok &= c.is_some_and(|c| c.passed && !c.detail.contains("over 0 accepted"));
            parts.push(format!("[{name}] {check}: {}", c.map_or("missing", |c| c.detail.as_str())));
        }
    }
    outcome(ok, parts.join("; "))
}

fn criterion_9() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (n, p, degree) in [(20usize, 5usize, 4usize), (6, 3, 2)] {
        let mut cfg = ExperimentConfig::quadratic(0, 3, &[Variant::Pdqn]);
        cfg.problem = ProblemSpec::Quadratic { n, p, eta: 0, seed: 3 };
        cfg.topology.n = n;
        cfg.topology.degree = degree;
        let inst = cfg.build().unwrap();
        let mut r = ValidationReport::default();
        experiments::oracle_checks(&inst, 11, &mut r);
        for c in &r.checks {
            ok &= c.passed;
            parts.push(format!("[n={n}] {}: {}", c.name.trim_start_matches("oracle:"), c.detail.split(" (tol").next().unwrap_or("")));
        }
    }
    outcome(ok, parts.join("; "))
}

fn criterion_10(d: &DeskRun) -> Outcome {
    match experiments::rate_fit_table(&d.pdqn_trace, 1e-1, 1e-8) {
        Ok(f) => outcome(
            f.r_squared >= 0.95,
            format!(
                "rate {:.4} per iteration, r^2 {:.4} over iterations {}..={}",
                f.rate, f.r_squared, f.window.0, f.window.1
            ),
        ),
        Err(e) => outcome(false, format!("no fit: {e}")),
    }
}

fn criterion_11(out: &Path) -> Outcome {
    let mut cfg = ExperimentConfig::quadratic(0, 0, &[]);
    cfg.problem = ProblemSpec::logistic_reference(0);
    cfg.iterations = 1000;
    cfg.thresholds = vec![1e-6];
    cfg.output_dir = out.to_path_buf();
    let mut pdqn = AlgorithmEntry::new(Variant::Pdqn);
    pdqn.config.k = 4;
    pdqn.tune = Tuning::Grid(TuneOptions {
        axes: vec![
            TuneAxis {
                target: TuneTarget::Alpha,
                grid: power_grid(-16, -8),
            },
            TuneAxis {
                target: TuneTarget::EpsD,
                grid: power_grid(-2, 1),
            },
        ],
        probe_iterations: 400,
    });
    let mut esom = AlgorithmEntry::new(Variant::Esom);
    esom.tune = Tuning::Grid(TuneOptions {
        axes: vec![TuneAxis {
            target: TuneTarget::Alpha,
            grid: power_grid(-16, -6),
        }],
        probe_iterations: 400,
    });
    cfg.algorithms = vec![pdqn, esom];
    let (report, _) = experiments::cmd_run(&cfg).expect("logistic run");
    let (p, e) = (iters(&report.summary, "pdqn", 1e-6), iters(&report.summary, "esom", 1e-6));
    let ok = matches!((p, e), (Some(p), Some(e)) if p <= 2 * e);
    let ratio = match (p, e) {
        (Some(p), Some(e)) => format!("{:.2}", p as f64 / e as f64),
        _ => "n/a".into(),
    };
    outcome(
        ok,
        format!("iterations to 1e-6: pdqn {}, esom {}; ratio {ratio} (limit 2)", fmt_opt(p), fmt_opt(e)),
    )
}

fn criterion_12(out: &Path) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, mut cfg) in [
        ("eta=0 n=20", desk(0, &[Variant::Pdqn, Variant::Esom, Variant::Da, Variant::Extra], out)),
        ("eta=1 n=6", {
            let mut c = desk(1, &[Variant::Pdqn, Variant::Esom, Variant::Da, Variant::Extra], out);
            c.problem = ProblemSpec::Quadratic { n: 6, p: 3, eta: 1, seed: 0 };
            c.topology.n = 6;
            c.topology.degree = 2;
            c.algorithms[0].config.initial_curvature = 10.0;
            c
        }),
    ] {
        cfg.iterations = 20;
        let inst = cfg.build().unwrap();
        let mut r = ValidationReport::default();
        for e in &cfg.algorithms {
            let c = experiments::tuned_config(e, &inst, false).unwrap();
            experiments::fixed_point_check(&e.label, &c, &inst, false, &mut r);
        }
        let worst: Vec<String> = r
            .checks
            .iter()
            .filter(|c| c.name.ends_with("fixed-point"))
            .map(|c| {
                ok &= c.passed;
                format!("{} {}", c.name.trim_end_matches(":fixed-point"), c.detail.split(' ').nth(2).unwrap_or("?"))
            })
            .collect();
        parts.push(format!("[{name}] largest update {}", worst.join(", ")));
    }

    let mut bytes = Vec::new();
    for parallel in [false, true] {
        let dir = out.join(if parallel { "det-par" } else { "det-seq" });
        let mut cfg = desk(1, &[Variant::Pdqn, Variant::Esom, Variant::Da, Variant::Extra, Variant::Dgd], &dir);
        cfg.iterations = 150;
        cfg.parallel = parallel;
        let _ = experiments::cmd_compare(&cfg).expect("determinism run");
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "csv" || x == "svg"))
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        files.sort();
        bytes.push(files);
    }
    let identical = bytes[0] == bytes[1] && !bytes[0].is_empty();
    ok &= identical;
    parts.push(format!(
        "{} CSV/SVG files {} with parallel rounds on and off",
        bytes[0].len(),
        if identical { "byte-identical" } else { "DIFFER" }
    ));
    outcome(ok, parts.join("; "))
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut timed = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        let tag = match (o.passed, UNATTAINED.contains(&id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("criterion {id:>2} {tag}: {name} ({secs:.1}s): {}", o.detail);
        results.push((id, name, o, secs));
    };

    let start = Instant::now();
    let desk_dir = root.join("desk");
    let d = desk_run(&desk_dir);
    let desk_secs = start.elapsed().as_secs_f64();
    println!("shared desk run with all five methods took {desk_secs:.1}s");
    timed(1, "exactness", &mut || criterion_1(&d));
    timed(2, "PD-QN reaches 1e-8 within 150 iterations", &mut || criterion_2(&d));
    timed(3, "conditioning robustness", &mut || criterion_3(&root.join("eta")));
    timed(4, "exchange ledger", &mut criterion_4);
    timed(5, "communication efficiency over 100 seeds", &mut || criterion_5(&root.join("seeds")));
    let small = small_reports(&root.join("small"));
    timed(6, "primal inverse eigenvalue interval", &mut || interval_criterion(&small, "primal-inverse-interval"));
    timed(7, "dual inverse eigenvalue interval", &mut || interval_criterion(&small, "dual-inverse-interval"));
    timed(8, "secant conditions", &mut || criterion_8(&small, &d));
    timed(9, "oracle equivalences", &mut criterion_9);
    timed(10, "linear rate fit", &mut || criterion_10(&d));
    timed(11, "logistic parity with ESOM", &mut || criterion_11(&root.join("logistic")));
    timed(12, "fixed point and determinism", &mut || criterion_12(&root.join("fixed")));

    let passed = results.iter().filter(|r| r.2.passed).count();
    let unexpected: Vec<usize> = results
        .iter()
        .filter(|r| !r.2.passed && !UNATTAINED.contains(&r.0))
        .map(|r| r.0)
        .collect();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
