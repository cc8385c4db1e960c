use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pdqn::io::{parse_summary, SeedTable, SnapshotFile, TraceTable};
use pdqn::svg::{trace_chart, XAxis};
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pdqn"))
}

fn small(algorithms: Value) -> Value {
    json!({
        "problem": {"family": "quadratic", "n": 6, "p": 3, "eta": 0, "seed": 1},
        "topology": {"n": 6, "degree": 2},
        "algorithms": algorithms,
        "iterations": 60,
        "thresholds": [1e-5, 1e-8]
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.in.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn pdqn(dir: &Path, sub: &str, cfg: &Value, extra: &[&str]) -> Output {
    let path = write_config(dir, cfg);
    let out = dir.join("out");
    bin()
        .arg(sub)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn two_methods() -> Value {
    json!([{"variant": "pdqn"}, {"variant": "esom", "alpha": 1.0}])
}

#[test]
fn run_writes_parseable_traces_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pdqn(tmp.path(), "run", &small(two_methods()), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("out");
    let text = fs::read_to_string(out.join("pdqn.csv")).unwrap();
    let table = TraceTable::parse(&text).unwrap();
    assert_eq!(table.meta.label, "pdqn");
    assert_eq!(table.rows.len(), 61);
    assert_eq!(table.to_csv(), text);
    let rows = parse_summary(&fs::read_to_string(out.join("summary.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.status == "ok"));
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(two_methods());
    let mut files = Vec::new();
    for _ in 0..2 {
        let o = pdqn(tmp.path(), "run", &cfg, &[]);
        assert!(o.status.success(), "{}", stderr(&o));
        files.push(fs::read(tmp.path().join("out/pdqn.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn compare_charts_regenerate_from_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pdqn(tmp.path(), "compare", &small(two_methods()), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("out");
    let tables: Vec<TraceTable> = ["pdqn", "esom"]
        .iter()
        .map(|l| TraceTable::parse(&fs::read_to_string(out.join(format!("{l}.csv"))).unwrap()).unwrap())
        .collect();
    let svg = fs::read_to_string(out.join("compare_exchanges.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    let regenerated = trace_chart("relative error by information exchanges", &tables, XAxis::Exchanges);
    assert_eq!(regenerated, svg);
}

#[test]
fn compare_refuses_single_method() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pdqn(tmp.path(), "compare", &small(json!([{"variant": "pdqn"}])), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("refused"), "{}", stderr(&o));
}

#[test]
fn empty_algorithm_list_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pdqn(tmp.path(), "run", &small(json!([])), &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn big_gamma_above_one_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pdqn(tmp.path(), "run", &small(json!([{"variant": "pdqn", "Gamma": 1.5}])), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Gamma") || stderr(&o).contains("gamma"), "{}", stderr(&o));
}

#[test]
fn asymmetric_weights_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(two_methods());
    let mut entries = Vec::new();
    for i in 0..6usize {
        entries.push(json!([i, i, 0.5]));
        entries.push(json!([i, (i + 1) % 6, 0.3]));
        entries.push(json!([i, (i + 5) % 6, 0.2]));
    }
    cfg["topology"]["weights"] = json!({"kind": "entries", "entries": entries});
    let o = pdqn(tmp.path(), "run", &cfg, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("weights"), "{}", stderr(&o));
}

#[test]
fn divergent_run_aborts_with_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(json!([{"variant": "dgd", "primal_step": 50.0}]));
    cfg["iterations"] = json!(2000);
    let o = pdqn(tmp.path(), "run", &cfg, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let snap: SnapshotFile = serde_json::from_str(&fs::read_to_string(tmp.path().join("out/dgd.snapshot.json")).unwrap()).unwrap();
    assert_eq!(snap.label, "dgd");
    assert_eq!((snap.n, snap.p), (6, 3));
    let rows = parse_summary(&fs::read_to_string(tmp.path().join("out/summary.csv")).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.status != "ok"));
}

#[test]
fn dgd_rate_fit_has_no_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(json!([{"variant": "dgd", "primal_step": 0.1}]));
    let o = pdqn(tmp.path(), "rate-fit", &cfg, &["--iters", "200"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn rate_fit_reads_existing_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pdqn(tmp.path(), "run", &small(json!([{"variant": "pdqn"}])), &["--iters", "150"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = tmp.path().join("out/pdqn.csv");
    let o = bin().arg("rate-fit").arg("--trace").arg(&trace).arg("--end").arg("1e-6").output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("rate"));
}

#[test]
fn empty_sweep_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(json!([{"variant": "pdqn"}]));
    cfg["sweep"] = json!({"axis": "eta", "values": []});
    let o = pdqn(tmp.path(), "sweep", &cfg, &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seed_sweep_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(json!([{"variant": "pdqn"}, {"variant": "da"}]));
    let o = pdqn(tmp.path(), "sweep", &cfg, &["--axis", "seeds", "--values", "0,1,2", "--threshold", "1e-4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = SeedTable::parse(&fs::read_to_string(tmp.path().join("out/seeds.csv")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 6);
    assert_eq!(table.labels(), vec!["pdqn".to_string(), "da".to_string()]);
    assert!(tmp.path().join("out/seeds.svg").exists());
}

#[test]
fn k_sweep_writes_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(json!([{"variant": "pdqn"}]));
    let o = pdqn(tmp.path(), "sweep", &cfg, &["--axis", "K", "--values", "0,2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = parse_summary(&fs::read_to_string(tmp.path().join("out/sweep.csv")).unwrap()).unwrap();
    let cells: Vec<&str> = rows.iter().map(|r| r.cell.as_str()).collect();
    assert!(cells.contains(&"K=0") && cells.contains(&"K=2"), "{cells:?}");
}

#[test]
fn validate_passes_on_small_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(json!([{"variant": "pdqn", "tune": true}, {"variant": "esom", "tune": true}]));
    cfg["iterations"] = json!(100);
    let o = pdqn(tmp.path(), "validate", &cfg, &[]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}{}", stderr(&o));
    assert!(stdout.contains("PASS"));
    assert!(!stdout.contains("FAIL"));
    assert!(tmp.path().join("out/validate.txt").exists());
}

#[test]
fn missing_config_is_an_error() {
    let o = bin().arg("run").arg("--config").arg("/nonexistent/cfg.json").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let cfg = pdqn::config::ExperimentConfig::load(&path).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 5);
}
