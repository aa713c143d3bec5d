//! Experiment runner: binds a graph, a compiler, an adversary and a master
//! seed into reproducible batches of trials with machine-readable output.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use multicoding::adversaries::{
    cut_blocker, random_noise, star_sequential, walk_segment_attack, AlternativeReality, AttackError, BudgetCapped,
    EnumerableTarget, PosteriorTable,
};
use multicoding::compilers::{self, CompileConfig, CompileError, CompiledProtocol, CompilerKind, GvTarget, Manifest};
use multicoding::graph::{self, generators, Digraph, GraphError, GraphMetrics};
use multicoding::netsim::{
    self, Adversary, Budget, BudgetModel, DirectParty, ErrorLedger, ExecOptions, NetsimError, NullAdversary,
};
use multicoding::protocol::{run_noiseless, Protocol, ProtocolError, UniversalProtocol};
use multicoding::rs;
use multicoding::util::{derived_rng, hash_words, stream};

pub const SCHEMA_VERSION: u32 = 1;
/// Overrides the resampling budgets of the routing pipeline.
pub const RETRY_ENV: &str = "MULTICODING_RETRY_BUDGET";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{field}: {message}")]
    Config { field: String, message: String },
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: io::Error },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Netsim(#[from] NetsimError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Rs(#[from] rs::RsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn config_err(field: &str, message: impl fmt::Display) -> CliError {
    CliError::Config { field: field.into(), message: message.to_string() }
}

// ---------------------------------------------------------------------------
// graphs

/// `name:args` for a generator, or a path to an arc-list file.
#[derive(Clone, Debug, PartialEq)]
pub enum GraphSpec {
    Complete(usize),
    DirectedCycle(usize),
    BidirectedCycle(usize),
    DirectedPath(usize),
    BidirectedPath(usize),
    Star(usize),
    Tournament(usize),
    RandomUndirected(usize, f64),
    RandomDigraph(usize, f64),
    File(PathBuf),
}

impl FromStr for GraphSpec {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        let parts: Vec<&str> = s.split(':').collect();
        let size = |i: usize| -> Result<usize, CliError> {
            parts.get(i).and_then(|p| p.parse().ok()).ok_or_else(|| config_err("graph", format!("'{s}' needs a vertex count")))
        };
        let prob = || -> Result<f64, CliError> {
            parts
                .get(2)
                .and_then(|p| p.parse().ok())
                .filter(|p: &f64| (0.0..=1.0).contains(p))
                .ok_or_else(|| config_err("graph", format!("'{s}' needs a probability in [0, 1]")))
        };
        Ok(match parts[0] {
            "complete" => GraphSpec::Complete(size(1)?),
            "directed-cycle" => GraphSpec::DirectedCycle(size(1)?),
            "bidirected-cycle" => GraphSpec::BidirectedCycle(size(1)?),
            "directed-path" => GraphSpec::DirectedPath(size(1)?),
            "bidirected-path" => GraphSpec::BidirectedPath(size(1)?),
            "star" => GraphSpec::Star(size(1)?),
            "tournament" => GraphSpec::Tournament(size(1)?),
            "random-undirected" => GraphSpec::RandomUndirected(size(1)?, prob()?),
            "random-digraph" => GraphSpec::RandomDigraph(size(1)?, prob()?),
            "file" => GraphSpec::File(PathBuf::from(&s[5..])),
            _ if Path::new(s).exists() => GraphSpec::File(PathBuf::from(s)),
            _ => return Err(config_err("graph", format!("unknown generator or missing file '{s}'"))),
        })
    }
}

impl GraphSpec {
    /// Random generators draw from `seed`.
    pub fn build(&self, seed: u64) -> Result<Digraph, CliError> {
        let mut rng = derived_rng(seed, &[stream::INPUTS, 0x6772]);
        let g = match *self {
            GraphSpec::Complete(n) => generators::complete(n),
            GraphSpec::DirectedCycle(n) => generators::directed_cycle(n),
            GraphSpec::BidirectedCycle(n) => generators::bidirected_cycle(n),
            GraphSpec::DirectedPath(n) => generators::directed_path(n),
            GraphSpec::BidirectedPath(n) => generators::bidirected_path(n),
            GraphSpec::Star(q) => generators::inward_star(q),
            GraphSpec::Tournament(n) => generators::transitive_tournament(n),
            GraphSpec::RandomUndirected(n, p) => generators::random_connected_undirected(n, p, &mut rng),
            GraphSpec::RandomDigraph(n, p) => generators::random_weakly_connected(n, p, &mut rng),
            GraphSpec::File(ref path) => return read_graph(path),
        };
        Ok(g)
    }
}

/// Arc-list file: one `u v` pair per line, `#` comments, and an optional
/// `n <count>` line for isolated trailing vertices.
pub fn read_graph(path: &Path) -> Result<Digraph, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read { path: path.display().to_string(), source })?;
    parse_graph(&text)
}

pub fn parse_graph(text: &str) -> Result<Digraph, CliError> {
    let mut n = 0;
    let mut arcs = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || config_err("graph", format!("line {}: expected 'u v' or 'n <count>'", no + 1));
        match f.as_slice() {
            ["n", k] => n = n.max(k.parse().map_err(|_| bad())?),
            [u, v] => {
                let (u, v): (usize, usize) = (u.parse().map_err(|_| bad())?, v.parse().map_err(|_| bad())?);
                n = n.max(u.max(v) + 1);
                arcs.push((u, v));
            }
            _ => return Err(bad()),
        }
    }
    if arcs.is_empty() {
        return Err(GraphError::NoArcs.into());
    }
    Ok(Digraph::new(n, arcs)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub graph: String,
    #[serde(flatten)]
    pub metrics: GraphMetrics,
    /// `exact` or `heuristic`.
    pub med_method: String,
}

pub fn cmd_metrics(graph: &str, seed: u64) -> Result<MetricsReport, CliError> {
    let g = graph.parse::<GraphSpec>()?.build(seed)?;
    let metrics = graph::metrics(&g)?;
    let med_method = if metrics.med_exact { "exact" } else { "heuristic" }.into();
    Ok(MetricsReport { graph: graph.into(), metrics, med_method })
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversaryKind {
    Null,
    Random,
    CutBlocker,
    Star,
    Walk,
    AltReality,
}

impl AdversaryKind {
    const NAMES: [(&'static str, AdversaryKind); 6] = [
        ("null", AdversaryKind::Null),
        ("random", AdversaryKind::Random),
        ("cut-blocker", AdversaryKind::CutBlocker),
        ("star", AdversaryKind::Star),
        ("walk", AdversaryKind::Walk),
        ("alt-reality", AdversaryKind::AltReality),
    ];
}

impl FromStr for AdversaryKind {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        Self::NAMES.iter().find(|(n, _)| *n == s).map(|&(_, k)| k).ok_or_else(|| {
            let names: Vec<&str> = Self::NAMES.iter().map(|(n, _)| *n).collect();
            config_err("adversary", format!("unknown adversary '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

/// Fully determines a batch of trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub graph: String,
    /// A compiler name, or `none` to run the protocol uncoded.
    pub compiler: String,
    pub adversary: AdversaryKind,
    pub budget: BudgetModel,
    /// Noise rate for `random`; a cap on every other adversary when set.
    pub rate: Option<f64>,
    #[serde(rename = "T")]
    pub rounds: usize,
    pub trials: usize,
    pub seed: u64,
    pub out: Option<String>,
    /// Directory for per-trial RS instrumentation CSVs.
    pub instrument: Option<String>,
    /// Rate grid for sweeps.
    pub rates: Vec<f64>,
    pub retry_budget: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            graph: "complete:3".into(),
            compiler: "rs".into(),
            adversary: AdversaryKind::Null,
            budget: BudgetModel::Global,
            rate: None,
            rounds: 4,
            trials: 10,
            seed: 0,
            out: None,
            instrument: None,
            rates: Vec::new(),
            retry_budget: None,
        }
    }
}

fn parse_field<T: FromStr>(field: &str, value: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| config_err(field, format!("'{value}': {e}")))
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        match key.trim() {
            "graph" => self.graph = value.into(),
            "compiler" => self.compiler = value.into(),
            "adversary" => self.adversary = value.parse()?,
            "budget" => {
                self.budget = match value {
                    "global" => BudgetModel::Global,
                    "per-edge" => BudgetModel::PerEdge,
                    _ => return Err(config_err("budget", format!("'{value}': expected global or per-edge"))),
                }
            }
            "rate" => self.rate = Some(parse_field("rate", value)?),
            "T" => self.rounds = parse_field("T", value)?,
            "trials" => self.trials = parse_field("trials", value)?,
            "seed" => self.seed = parse_field("seed", value)?,
            "out" => self.out = Some(value.into()),
            "instrument" => self.instrument = Some(value.into()),
            "rates" => {
                self.rates = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_field("rates", s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "retry_budget" => self.retry_budget = Some(parse_field("retry_budget", value)?),
            other => return Err(config_err(other, "unknown key")),
        }
        Ok(())
    }

    /// Plain-text `key = value` lines; `#` starts a comment.
    pub fn parse_file_text(&mut self, text: &str) -> Result<(), CliError> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(&format!("line {}", no + 1), "expected key = value"))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Read { path: path.display().to_string(), source })?;
        self.parse_file_text(&text)
    }

    /// Picks up the retry budget from the environment unless already set.
    pub fn apply_env(&mut self) -> Result<(), CliError> {
        if self.retry_budget.is_none() {
            if let Ok(v) = std::env::var(RETRY_ENV) {
                self.retry_budget = Some(parse_field(RETRY_ENV, &v)?);
            }
        }
        Ok(())
    }

    pub fn compiler_kind(&self) -> Result<Option<CompilerKind>, CliError> {
        if self.compiler == "none" {
            return Ok(None);
        }
        self.compiler.parse().map(Some).map_err(|e: CompileError| config_err("compiler", e))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.graph.parse::<GraphSpec>()?;
        let kind = self.compiler_kind()?;
        if self.rounds == 0 {
            return Err(config_err("T", "must be at least 1"));
        }
        for &r in self.rate.iter().chain(&self.rates) {
            if !(0.0..=1.0).contains(&r) {
                return Err(config_err("rate", format!("{r} is outside [0, 1]")));
            }
        }
        if self.adversary == AdversaryKind::Random && self.rate.is_none() && self.rates.is_empty() {
            return Err(config_err("rate", "the random adversary needs a rate"));
        }
        if self.adversary == AdversaryKind::AltReality && kind != Some(CompilerKind::Gv) {
            return Err(config_err("adversary", "alt-reality needs compiler gv"));
        }
        if self.retry_budget == Some(0) {
            return Err(config_err("retry_budget", "must be at least 1"));
        }
        Ok(())
    }

    fn compile_config(&self) -> CompileConfig {
        let mut cfg = CompileConfig { code_seed: self.seed, ..CompileConfig::default() };
        cfg.gv.seed = self.seed;
        cfg.magi.shared_seed = self.seed;
        if let Some(r) = self.retry_budget {
            cfg.pipeline.path_retries = r;
            cfg.pipeline.sparsify.retries = r;
            cfg.gv.attempts = r;
        }
        cfg
    }

    fn trial_seed(&self, trial: usize) -> u64 {
        hash_words(&[self.seed, stream::TRIAL, trial as u64])
    }
}

// ---------------------------------------------------------------------------
// running

/// A compiled (or uncoded) protocol ready for trials.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub graph: Digraph,
    pub protocol: Arc<UniversalProtocol>,
    pub compiled: Option<CompiledProtocol>,
    expected: Vec<Vec<bool>>,
    reality: Option<(Arc<GvTarget>, Arc<PosteriorTable>)>,
}

impl Prepared {
    pub fn new(config: &ExperimentConfig) -> Result<Self, CliError> {
        config.validate()?;
        let graph = config.graph.parse::<GraphSpec>()?.build(config.seed)?;
        let protocol = Arc::new(UniversalProtocol::random(graph.clone(), config.rounds, config.seed)?);
        let compiled = match config.compiler_kind()? {
            Some(kind) => Some(compilers::compile(kind, protocol.clone(), config.seed, &config.compile_config())?),
            None => None,
        };
        let expected = run_noiseless(protocol.as_ref()).outputs;
        let reality = match (config.adversary, &compiled) {
            (AdversaryKind::AltReality, Some(c)) => {
                let gv = c.gv().expect("validated: gv compiler").clone();
                let source = (0..graph.n()).find(|&v| graph.out_degree(v) > 0).ok_or(GraphError::NoArcs)?;
                let target = Arc::new(GvTarget::new(gv, source));
                let table = Arc::new(AlternativeReality::table_for(target.as_ref())?);
                Some((target, table))
            }
            _ => None,
        };
        Ok(Prepared { config: config.clone(), graph, protocol, compiled, expected, reality })
    }

    /// Horizon of what actually runs.
    pub fn rounds(&self) -> usize {
        self.compiled.as_ref().map_or(self.config.rounds, |c| c.rounds())
    }

    pub fn manifest(&self) -> Option<&Manifest> {
        self.compiled.as_ref().map(|c| c.manifest())
    }

    /// The arcs attacks are aimed at.
    fn attack_graph(&self) -> &Digraph {
        self.compiled.as_ref().map_or(&self.graph, |c| c.target())
    }

    fn adversary(&self, rate: Option<f64>, seed: u64) -> Result<Box<dyn Adversary + Send>, CliError> {
        let model = self.config.budget;
        let rounds = self.rounds();
        let adv: Box<dyn Adversary + Send> = match self.config.adversary {
            AdversaryKind::Null => Box::new(NullAdversary),
            AdversaryKind::Random => {
                let rate = rate.ok_or_else(|| config_err("rate", "the random adversary needs a rate"))?;
                return Ok(Box::new(random_noise(Budget { model, rate }, seed)));
            }
            AdversaryKind::CutBlocker => Box::new(cut_blocker(self.attack_graph())?.0),
            AdversaryKind::Star => {
                let q = self.graph.n().saturating_sub(2);
                Box::new(star_sequential(&self.graph, q, rounds)?)
            }
            AdversaryKind::Walk => Box::new(walk_segment_attack(self.attack_graph(), rounds)?.0),
            AdversaryKind::AltReality => unreachable!("handled by the reality trial"),
        };
        Ok(match rate {
            Some(rate) => Box::new(BudgetCapped::new(adv, Budget { model, rate })),
            None => adv,
        })
    }

    /// Runs trial `index` at `rate` (the configured rate when `None`).
    pub fn trial(&self, index: usize, rate: Option<f64>) -> Result<TrialResult, CliError> {
        let rate = rate.or(self.config.rate);
        let seed = self.config.trial_seed(index);
        let rounds = self.rounds();
        let mut instrumentation = None;
        let (success, ledger) = if let Some((target, table)) = &self.reality {
            let x = derived_rng(seed, &[stream::INPUTS]).gen_range(0..1u64 << target.input_bits());
            let mut adv: Box<dyn Adversary + Send> = Box::new(AlternativeReality::new(target.clone(), table.clone(), seed)?);
            if let Some(rate) = rate {
                adv = Box::new(BudgetCapped::new(adv, Budget { model: self.config.budget, rate }));
            }
            let mut parties = target.machines(x);
            let opts = ExecOptions { rounds, seed, record_trace: false };
            let ex = netsim::execute(&self.graph, &mut parties, &mut adv, opts)?;
            (ex.outputs == target.compiled(x).expected_outputs(), ex.ledger)
        } else {
            let mut adv = self.adversary(rate, seed)?;
            match &self.compiled {
                Some(c) if self.config.instrument.is_some() && c.gv().is_none() && c.magi().is_none() => {
                    let run = rs::run(c.rs().expect("rs-based"), &self.graph, &mut adv, seed)?;
                    let dir = PathBuf::from(self.config.instrument.as_ref().unwrap());
                    fs::create_dir_all(&dir)?;
                    let path = dir.join(format!("trial-{index}.csv"));
                    run.instrumentation.write_csv(fs::File::create(&path)?)?;
                    instrumentation = Some(path.display().to_string());
                    (run.execution.outputs == c.expected_outputs(), run.execution.ledger)
                }
                Some(c) => {
                    let run = c.run(&self.graph, &mut adv, seed, false)?;
                    (run.success, run.execution.ledger)
                }
                None => {
                    let p: Arc<dyn Protocol> = self.protocol.clone();
                    let mut parties = DirectParty::all(&p);
                    let opts = ExecOptions { rounds, seed, record_trace: false };
                    let ex = netsim::execute(&self.graph, &mut parties, &mut adv, opts)?;
                    (ex.outputs == self.expected, ex.ledger)
                }
            }
        };
        Ok(TrialResult::new(index, seed, success, &ledger, instrumentation))
    }

    /// All trials at `rate`, ordered by index.
    pub fn trials(&self, rate: Option<f64>) -> Result<Vec<TrialResult>, CliError> {
        (0..self.config.trials).into_par_iter().map(|i| self.trial(i, rate)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub success: bool,
    pub flips: usize,
    pub rounds: usize,
    pub active_arcs: usize,
    pub global_rate: f64,
    pub max_per_edge_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instrumentation: Option<String>,
}

impl TrialResult {
    fn new(trial: usize, seed: u64, success: bool, ledger: &ErrorLedger, instrumentation: Option<String>) -> Self {
        TrialResult {
            trial,
            seed,
            success,
            flips: ledger.total,
            rounds: ledger.rounds,
            active_arcs: ledger.active_arcs,
            global_rate: ledger.global_rate(),
            max_per_edge_rate: ledger.max_per_edge_rate(),
            instrumentation,
        }
    }

    pub fn rate(&self, model: BudgetModel) -> f64 {
        match model {
            BudgetModel::Global => self.global_rate,
            BudgetModel::PerEdge => self.max_per_edge_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Largest realized rate `r` (in the configured model) such that every
    /// trial at rate `≤ r` succeeded.
    pub frontier: f64,
}

pub fn summarize(results: &[TrialResult], model: BudgetModel) -> RunSummary {
    let successes = results.iter().filter(|r| r.success).count();
    let first_failure = results.iter().filter(|r| !r.success).map(|r| r.rate(model)).fold(f64::INFINITY, f64::min);
    let frontier = results.iter().map(|r| r.rate(model)).filter(|&r| r < first_failure).fold(0.0, f64::max);
    RunSummary {
        trials: results.len(),
        successes,
        success_rate: if results.is_empty() { 1.0 } else { successes as f64 / results.len() as f64 },
        frontier,
    }
}

/// JSON-lines: a header with the config and manifest, one line per trial,
/// then the summary.
pub fn cmd_run<W: Write>(config: &ExperimentConfig, mut out: W) -> Result<RunSummary, CliError> {
    let prepared = Prepared::new(config)?;
    let header = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "kind": "run",
        "config": config,
        "rounds": prepared.rounds(),
        "manifest": prepared.manifest(),
    });
    writeln!(out, "{header}")?;
    let results = prepared.trials(None)?;
    for r in &results {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    let summary = summarize(&results, config.budget);
    writeln!(out, "{}", serde_json::json!({ "summary": summary }))?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rate: f64,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_flips: f64,
    pub max_global_rate: f64,
    pub max_per_edge_rate: f64,
}

/// CSV of success rate against noise rate, preceded by `#` lines holding the
/// schema version and config.
pub fn cmd_sweep<W: Write>(config: &ExperimentConfig, mut out: W) -> Result<Vec<SweepRow>, CliError> {
    if config.rates.is_empty() {
        return Err(config_err("rates", "a sweep needs at least one rate"));
    }
    let prepared = Prepared::new(config)?;
    writeln!(out, "# schema_version={SCHEMA_VERSION}")?;
    writeln!(out, "# config={}", serde_json::to_string(config)?)?;
    let mut rows = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for &rate in &config.rates {
            let results = prepared.trials(Some(rate))?;
            let s = summarize(&results, config.budget);
            let row = SweepRow {
                rate,
                trials: s.trials,
                successes: s.successes,
                success_rate: s.success_rate,
                mean_flips: results.iter().map(|r| r.flips as f64).sum::<f64>() / results.len().max(1) as f64,
                max_global_rate: results.iter().map(|r| r.global_rate).fold(0.0, f64::max),
                max_per_edge_rate: results.iter().map(|r| r.max_per_edge_rate).fold(0.0, f64::max),
            };
            w.serialize(&row)?;
            rows.push(row);
        }
        w.flush()?;
    }
    Ok(rows)
}

/// Writes to `path`, or stdout when `None`.
pub fn with_output<T>(path: Option<&str>, f: impl FnOnce(&mut dyn Write) -> Result<T, CliError>) -> Result<T, CliError> {
    match path {
        Some(p) => {
            let mut file = io::BufWriter::new(fs::File::create(p)?);
            let v = f(&mut file)?;
            file.flush()?;
            Ok(v)
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)
        }
    }
}
