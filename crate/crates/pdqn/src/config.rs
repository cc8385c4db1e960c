//! JSON experiment configuration.
//!
//! ```json
//! {
//!   "problem": {"family": "quadratic", "n": 20, "p": 5, "eta": 0, "seed": 0},
//!   "topology": {"n": 20, "degree": 4},
//!   "algorithms": [{"variant": "pdqn", "tune": true}, {"variant": "da", "eps_d": 1.0}],
//!   "iterations": 300,
//!   "thresholds": [1e-5, 1e-8]
//! }
//! ```
//!
//! Algorithm entries start from the variant's defaults; any
//! [`AlgorithmConfig`] field may be overridden, plus `label` and `tune`
//! (`true` for the default grid or an explicit [`TuneOptions`] object).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use pdqn_core::algorithms::{AlgorithmConfig, TuneOptions, Variant};
use pdqn_core::diagnostics::KappaParams;
use pdqn_core::network::{validate_weight_matrix, Topology, WeightMatrix};
use pdqn_core::problems::{generate_logistic, generate_quadratic, LogisticSpec, Problem, ReferenceSolution};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

/// Largest `n·p` for which dense diagnostics are allowed.
pub const DENSE_LIMIT: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("config rejected:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Quadratic {
        n: usize,
        p: usize,
        eta: u32,
        #[serde(default)]
        seed: u64,
    },
    Logistic {
        n: usize,
        p: usize,
        q: usize,
        mean: f64,
        std_pos: f64,
        std_neg: f64,
        reg_weight: f64,
        #[serde(default)]
        seed: u64,
    },
    /// A serialized [`Problem`].
    File { path: PathBuf },
}

impl ProblemSpec {
    pub fn logistic_reference(seed: u64) -> Self {
        let s = LogisticSpec::reference();
        ProblemSpec::Logistic {
            n: s.n,
            p: s.p,
            q: s.q,
            mean: s.mean,
            std_pos: s.std_pos,
            std_neg: s.std_neg,
            reg_weight: s.reg_weight,
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ProblemSpec::Quadratic { seed, .. } | ProblemSpec::Logistic { seed, .. } => *seed,
            ProblemSpec::File { .. } => 0,
        }
    }

    pub fn with_seed(&self, s: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            ProblemSpec::Quadratic { seed, .. } | ProblemSpec::Logistic { seed, .. } => *seed = s,
            ProblemSpec::File { .. } => {}
        }
        out
    }

    pub fn is_logistic(&self) -> bool {
        matches!(self, ProblemSpec::Logistic { .. })
    }

    fn shape(&self) -> Option<(usize, usize)> {
        match self {
            ProblemSpec::Quadratic { n, p, .. } | ProblemSpec::Logistic { n, p, .. } => Some((*n, *p)),
            ProblemSpec::File { .. } => None,
        }
    }

    fn problems(&self, out: &mut Vec<String>) {
        if let Some((n, p)) = self.shape() {
            if n < 2 {
                out.push(format!("problem.n must be at least 2, got {n}"));
            }
            if p == 0 {
                out.push("problem.p must be at least 1".into());
            }
        }
        match self {
            ProblemSpec::Quadratic { eta, .. } if *eta > 8 => {
                out.push(format!("problem.eta must be at most 8, got {eta}"));
            }
            ProblemSpec::Logistic {
                q,
                mean,
                std_pos,
                std_neg,
                reg_weight,
                ..
            } => {
                if *q == 0 {
                    out.push("problem.q must be at least 1".into());
                }
                if !mean.is_finite() {
                    out.push(format!("problem.mean must be finite, got {mean}"));
                }
                for (name, v) in [("std_pos", std_pos), ("std_neg", std_neg), ("reg_weight", reg_weight)] {
                    if !(*v > 0.0 && v.is_finite()) {
                        out.push(format!("problem.{name} must be positive and finite, got {v}"));
                    }
                }
            }
            _ => {}
        }
    }

    pub fn generate(&self, base: &Path) -> Result<Problem, ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(vec![format!("problem: {e}")]);
        match self {
            ProblemSpec::Quadratic { n, p, eta, seed } => generate_quadratic(*n, *p, *eta, *seed)
                .map(Problem::from)
                .map_err(|e| invalid(&e)),
            ProblemSpec::Logistic {
                n,
                p,
                q,
                mean,
                std_pos,
                std_neg,
                reg_weight,
                seed,
            } => {
                let spec = LogisticSpec {
                    n: *n,
                    p: *p,
                    q: *q,
                    mean: *mean,
                    std_pos: *std_pos,
                    std_neg: *std_neg,
                    reg_weight: *reg_weight,
                };
                generate_logistic(&spec, *seed).map(Problem::from).map_err(|e| invalid(&e))
            }
            ProblemSpec::File { path } => {
                let path = base.join(path);
                let text = read(&path)?;
                let problem: Problem = serde_json::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
                problem.check().map_err(|e| invalid(&e))?;
                Ok(problem)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSpec {
    #[default]
    Metropolis,
    /// Nonzero entries `[i, j, w_ij]`, diagonal included.
    Entries { entries: Vec<(usize, usize, f64)> },
    /// A JSON file holding `{"entries": [[i, j, w], ...]}`.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub n: usize,
    /// Degree of the circulant cycle; each node links to `degree/2` nodes
    /// on either side.
    pub degree: usize,
    #[serde(default)]
    pub weights: WeightSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightFile {
    entries: Vec<(usize, usize, f64)>,
}

impl TopologySpec {
    pub fn build(&self, base: &Path) -> Result<(Topology, WeightMatrix), ConfigError> {
        let fail = |e: &dyn std::fmt::Display| ConfigError::Invalid(vec![format!("topology: {e}")]);
        let topo = Topology::d_regular_cycle(self.n, self.degree).map_err(|e| fail(&e))?;
        let bad_w = |e: &dyn std::fmt::Display| ConfigError::Invalid(vec![format!("weights: {e}")]);
        let w = match &self.weights {
            WeightSpec::Metropolis => WeightMatrix::metropolis(&topo).map_err(|e| fail(&e))?,
            WeightSpec::Entries { entries } => WeightMatrix::from_entries(self.n, entries).map_err(|e| bad_w(&e))?,
            WeightSpec::File { path } => {
                let path = base.join(path);
                let text = read(&path)?;
                let f: WeightFile = serde_json::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
                WeightMatrix::from_entries(self.n, &f.entries).map_err(|e| bad_w(&e))?
            }
        };
        validate_weight_matrix(&w, &topo).map_err(|e| bad_w(&e))?;
        Ok((topo, w))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum Tuning {
    #[default]
    Off,
    Default,
    Grid(TuneOptions),
}

/// One method to run, with its label and tuning request.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmEntry {
    pub label: String,
    pub config: AlgorithmConfig,
    pub tune: Tuning,
}

impl AlgorithmEntry {
    pub fn new(variant: Variant) -> Self {
        Self {
            label: variant.tag().to_string(),
            config: AlgorithmConfig::new(variant),
            tune: Tuning::Off,
        }
    }

    pub fn tuned(mut self) -> Self {
        self.tune = Tuning::Default;
        self
    }

    pub fn tune_options(&self) -> Option<TuneOptions> {
        match &self.tune {
            Tuning::Off => None,
            Tuning::Default => Some(TuneOptions::for_variant(self.config.variant)),
            Tuning::Grid(g) => Some(g.clone()),
        }
    }
}

impl Serialize for AlgorithmEntry {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = match serde_json::to_value(&self.config).map_err(serde::ser::Error::custom)? {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        map.insert("label".into(), Value::String(self.label.clone()));
        match &self.tune {
            Tuning::Off => {}
            Tuning::Default => {
                map.insert("tune".into(), Value::Bool(true));
            }
            Tuning::Grid(g) => {
                map.insert("tune".into(), serde_json::to_value(g).map_err(serde::ser::Error::custom)?);
            }
        }
        Value::Object(map).serialize(s)
    }
}

impl<'de> Deserialize<'de> for AlgorithmEntry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let mut map = Map::deserialize(d)?;
        let variant: Variant = match map.get("variant") {
            Some(v) => serde_json::from_value(v.clone()).map_err(D::Error::custom)?,
            None => return Err(D::Error::missing_field("variant")),
        };
        let label = match map.remove("label") {
            None => variant.tag().to_string(),
            Some(Value::String(s)) => s,
            Some(other) => return Err(D::Error::custom(format!("label must be a string, got {other}"))),
        };
        let tune = match map.remove("tune") {
            None | Some(Value::Bool(false)) => Tuning::Off,
            Some(Value::Bool(true)) => Tuning::Default,
            Some(v) => Tuning::Grid(serde_json::from_value(v).map_err(D::Error::custom)?),
        };
        let mut base = match serde_json::to_value(AlgorithmConfig::new(variant)).map_err(D::Error::custom)? {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        base.extend(map);
        let config = serde_json::from_value(Value::Object(base)).map_err(D::Error::custom)?;
        Ok(Self { label, config, tune })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Eta,
    #[serde(rename = "K")]
    K,
    Alpha,
    Seeds,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "eta" => Some(SweepAxis::Eta),
            "K" | "k" => Some(SweepAxis::K),
            "alpha" => Some(SweepAxis::Alpha),
            "seeds" => Some(SweepAxis::Seeds),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Eta => "eta",
            SweepAxis::K => "K",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Seeds => "seeds",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateWindow {
    pub start: f64,
    pub end: f64,
}

impl Default for RateWindow {
    fn default() -> Self {
        Self { start: 1e-1, end: 1e-8 }
    }
}

fn default_iterations() -> usize {
    300
}

fn default_thresholds() -> Vec<f64> {
    vec![1e-5, 1e-8]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_bins() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub topology: TopologySpec,
    pub algorithms: Vec<AlgorithmEntry>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub diagnostics: bool,
    #[serde(default)]
    pub kappa: KappaParams,
    /// Run each phase's node updates on the thread pool.
    #[serde(default)]
    pub parallel: bool,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default)]
    pub rate_window: RateWindow,
    /// Directory relative paths in the config resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

impl ExperimentConfig {
    /// The quadratic setup used throughout the tests: 20 nodes, 5
    /// dimensions, degree-4 cycle.
    pub fn quadratic(eta: u32, seed: u64, variants: &[Variant]) -> Self {
        Self {
            problem: ProblemSpec::Quadratic { n: 20, p: 5, eta, seed },
            topology: TopologySpec {
                n: 20,
                degree: 4,
                weights: WeightSpec::Metropolis,
            },
            algorithms: variants.iter().map(|&v| AlgorithmEntry::new(v)).collect(),
            iterations: default_iterations(),
            thresholds: default_thresholds(),
            diagnostics: false,
            kappa: KappaParams::default(),
            parallel: false,
            output_dir: default_out(),
            sweep: None,
            histogram_bins: default_bins(),
            rate_window: RateWindow::default(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::from_json(&read(path)?)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every violated rule.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.problem.problems(&mut out);
        if let Some((n, _)) = self.problem.shape() {
            if n != self.topology.n {
                out.push(format!("problem.n = {n} but topology.n = {}", self.topology.n));
            }
        }
        let (n, d) = (self.topology.n, self.topology.degree);
        if d % 2 == 1 || d < 2 || d + 1 > n {
            out.push(format!("topology.degree must be even with 2 <= degree <= n - 1, got n = {n}, degree = {d}"));
        }
        if self.algorithms.is_empty() {
            out.push("algorithms must list at least one method".into());
        }
        let mut labels = BTreeSet::new();
        for (i, a) in self.algorithms.iter().enumerate() {
            for p in a.config.problems() {
                out.push(format!("algorithms[{i}] ({}): {p}", a.label));
            }
            if !labels.insert(a.label.as_str()) {
                out.push(format!("algorithms[{i}]: duplicate label {:?}", a.label));
            }
            if a.label.is_empty() || !a.label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                out.push(format!("algorithms[{i}]: label {:?} must be non-empty and use only [A-Za-z0-9-_.]", a.label));
            }
            if a.config.variant == Variant::Da && self.problem.is_logistic() {
                out.push(format!("algorithms[{i}] ({}): dual ascent needs a closed-form local minimizer, so it cannot run on logistic problems", a.label));
            }
            if let Some(t) = a.tune_options() {
                if t.axes.is_empty() || t.axes.iter().any(|ax| ax.grid.is_empty()) {
                    out.push(format!("algorithms[{i}] ({}): tuning grid must have at least one axis and no empty axis", a.label));
                }
                if t.axes.iter().flat_map(|ax| &ax.grid).any(|v| !(*v > 0.0 && v.is_finite())) {
                    out.push(format!("algorithms[{i}] ({}): tuning grid values must be positive and finite", a.label));
                }
                if t.probe_iterations == 0 {
                    out.push(format!("algorithms[{i}] ({}): probe_iterations must be at least 1", a.label));
                }
            }
        }
        if self.iterations == 0 {
            out.push("iterations must be at least 1".into());
        }
        if self.thresholds.is_empty() {
            out.push("thresholds must list at least one error level".into());
        }
        for t in &self.thresholds {
            if !(*t > 0.0 && t.is_finite()) {
                out.push(format!("thresholds must be positive and finite, got {t}"));
            }
        }
        if self.diagnostics {
            if let Some((n, p)) = self.problem.shape() {
                if n * p > DENSE_LIMIT {
                    out.push(format!("diagnostics assemble dense matrices and need n*p <= {DENSE_LIMIT}, got {}", n * p));
                }
            }
        }
        if self.histogram_bins == 0 {
            out.push("histogram_bins must be at least 1".into());
        }
        let RateWindow { start, end } = self.rate_window;
        if !(start > end && end > 0.0 && start.is_finite()) {
            out.push(format!("rate_window needs start > end > 0, got start = {start}, end = {end}"));
        }
        if let Some(s) = &self.sweep {
            sweep_problems(s, &self.problem, &mut out);
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(p))
        }
    }

    /// Validates and materializes problem, graph, weights and reference.
    pub fn build(&self) -> Result<Instance, ConfigError> {
        self.validate()?;
        self.build_with(&self.problem)
    }

    pub fn build_with(&self, spec: &ProblemSpec) -> Result<Instance, ConfigError> {
        let problem = spec.generate(&self.base_dir)?;
        let (topology, weights) = self.topology.build(&self.base_dir)?;
        if problem.n() != topology.n() {
            return Err(ConfigError::Invalid(vec![format!(
                "problem has {} nodes but topology has {}",
                problem.n(),
                topology.n()
            )]));
        }
        if self.diagnostics && problem.n() * problem.p() > DENSE_LIMIT {
            return Err(ConfigError::Invalid(vec![format!(
                "diagnostics assemble dense matrices and need n*p <= {DENSE_LIMIT}"
            )]));
        }
        let reference = problem
            .centralized_solution()
            .map_err(|e| ConfigError::Invalid(vec![format!("reference solution: {e}")]))?;
        Ok(Instance {
            problem,
            topology,
            weights,
            reference,
        })
    }
}

fn sweep_problems(s: &SweepSpec, problem: &ProblemSpec, out: &mut Vec<String>) {
    if s.values.is_empty() {
        out.push(format!("sweep over {} needs at least one value", s.axis.name()));
    }
    let integral = |v: f64| v.is_finite() && v >= 0.0 && v.fract() == 0.0;
    for &v in &s.values {
        let ok = match s.axis {
            SweepAxis::Eta => integral(v) && v <= 8.0,
            SweepAxis::K | SweepAxis::Seeds => integral(v),
            SweepAxis::Alpha => v > 0.0 && v.is_finite(),
        };
        if !ok {
            out.push(format!("sweep value {v} is not valid for axis {}", s.axis.name()));
        }
    }
    if s.axis == SweepAxis::Eta && !matches!(problem, ProblemSpec::Quadratic { .. }) {
        out.push("sweep over eta needs a quadratic problem".into());
    }
}

/// A materialized experiment: the shared problem, graph and reference.
#[derive(Debug, Clone)]
pub struct Instance {
    pub problem: Problem,
    pub topology: Topology,
    pub weights: WeightMatrix,
    pub reference: ReferenceSolution,
}

impl Instance {
    pub fn setup(&self) -> pdqn_core::algorithms::Setup<'_> {
        pdqn_core::algorithms::Setup {
            problem: &self.problem,
            topology: &self.topology,
            weights: &self.weights,
            x_star: &self.reference.x_star,
        }
    }
}
