//! The top-level compilers. Each takes a protocol on a graph and produces
//! party machines for a (sub)network together with the noise it is declared
//! to tolerate.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::graph::{self, Digraph, GraphError};
use crate::netsim::{self, Adversary, BudgetModel, ExecOptions, Execution, NetsimError, PartyMachine};
use crate::protocol::{run_noiseless, Protocol, ProtocolError, UniversalProtocol};
use crate::routing::{self, PathSet, PipelineConfig, RoutedProtocol, RoutingError};
use crate::rs::{RsCompiled, RsError};
use crate::treecode::TreeCodeConfig;

mod gv;
mod magi;

pub use gv::{DistanceAudit, GvCompiled, GvConfig, GvParty, GvTarget, LinearCode, GV_MAX_FREE_BITS};
pub use magi::{
    calibrate_eta, common_neighbors, magi_segment, min_common_fraction, EtaCalibration, FixedBits, MagiCompiled,
    MagiConfig, MagiLayer, MagiParams, MagiParty, SegmentOutcome, DEFAULT_ETA,
};

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Rs(#[from] RsError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Netsim(#[from] NetsimError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("{what} is {found}, above the limit {limit}")]
    SizeLimit { what: &'static str, found: usize, limit: usize },
    #[error("ε = {eps} must lie in (0, {max})")]
    Epsilon { eps: f64, max: f64 },
    #[error("arc ({u}, {v}) has {found} common neighbours, fewer than the required {need:.2}")]
    CommonNeighbors { u: usize, v: usize, found: usize, need: f64 },
    #[error("no linear code of length at most {max_length} reached relative distance {target:.3}")]
    NoCode { target: f64, max_length: usize },
    #[error("unknown compiler '{0}' (expected rs, undirected, med, gv or magi)")]
    UnknownCompiler(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompilerKind {
    Rs,
    Undirected,
    Med,
    Gv,
    Magi,
}

impl CompilerKind {
    pub const ALL: [CompilerKind; 5] =
        [CompilerKind::Rs, CompilerKind::Undirected, CompilerKind::Med, CompilerKind::Gv, CompilerKind::Magi];

    pub fn name(self) -> &'static str {
        match self {
            CompilerKind::Rs => "rs",
            CompilerKind::Undirected => "undirected",
            CompilerKind::Med => "med",
            CompilerKind::Gv => "gv",
            CompilerKind::Magi => "magi",
        }
    }
}

impl fmt::Display for CompilerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CompilerKind {
    type Err = CompileError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CompilerKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| CompileError::UnknownCompiler(s.into()))
    }
}

/// A declared noise tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub model: BudgetModel,
    pub rate: f64,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub compiler: CompilerKind,
    pub n: usize,
    /// Arcs of the original protocol graph.
    pub m: usize,
    pub inner_rounds: usize,
    /// Horizon of the compiled protocol.
    pub rounds: usize,
    /// Arcs the compiled machines transmit on.
    pub target_arcs: Vec<(usize, usize)>,
    pub tolerances: Vec<Tolerance>,
    pub params: BTreeMap<String, Value>,
    pub measured: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }

    pub fn tolerance(&self, model: BudgetModel) -> Option<&Tolerance> {
        self.tolerances.iter().find(|t| t.model == model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompileConfig {
    pub code_seed: u64,
    pub tree: TreeCodeConfig,
    pub pipeline: PipelineConfig,
    pub gv: GvConfig,
    pub magi: MagiConfig,
}

impl Default for CompileConfig {
    fn default() -> Self {
        CompileConfig {
            code_seed: 1,
            tree: TreeCodeConfig { max_depth: 1 << 14, ..TreeCodeConfig::default() },
            pipeline: PipelineConfig::default(),
            gv: GvConfig::default(),
            magi: MagiConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
enum Backend {
    Rs(RsCompiled),
    Gv(Arc<GvCompiled>),
    Magi(Arc<MagiCompiled>),
}

#[derive(Debug)]
pub struct CompiledProtocol {
    inner: Arc<dyn Protocol>,
    target: Digraph,
    backend: Backend,
    manifest: Manifest,
    expected: OnceLock<Vec<Vec<bool>>>,
}

#[derive(Debug)]
pub struct CompiledRun {
    pub execution: Execution,
    pub success: bool,
}

impl CompiledProtocol {
    fn assemble(inner: Arc<dyn Protocol>, target: Digraph, backend: Backend, manifest: Manifest) -> Self {
        debug_assert!(target.is_subgraph_of(inner.graph()) || manifest.compiler == CompilerKind::Rs);
        CompiledProtocol { inner, target, backend, manifest, expected: OnceLock::new() }
    }

    pub fn kind(&self) -> CompilerKind {
        self.manifest.compiler
    }

    pub fn inner(&self) -> &Arc<dyn Protocol> {
        &self.inner
    }

    /// The subnetwork the machines transmit on.
    pub fn target(&self) -> &Digraph {
        &self.target
    }

    pub fn rounds(&self) -> usize {
        self.manifest.rounds
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// The RS layer, for every compiler except GV.
    pub fn rs(&self) -> Option<&RsCompiled> {
        match &self.backend {
            Backend::Rs(rs) => Some(rs),
            Backend::Magi(m) => Some(m.rs()),
            Backend::Gv(_) => None,
        }
    }

    pub fn gv(&self) -> Option<&Arc<GvCompiled>> {
        match &self.backend {
            Backend::Gv(g) => Some(g),
            _ => None,
        }
    }

    pub fn magi(&self) -> Option<&Arc<MagiCompiled>> {
        match &self.backend {
            Backend::Magi(m) => Some(m),
            _ => None,
        }
    }

    /// Noiseless outputs of the original protocol.
    pub fn expected_outputs(&self) -> &[Vec<bool>] {
        self.expected.get_or_init(|| run_noiseless(self.inner.as_ref()).outputs)
    }

    /// Party machines transmitting on `exec`, which must contain the target arcs.
    pub fn parties_on(&self, exec: &Digraph) -> Result<Vec<Box<dyn PartyMachine + Send>>, CompileError> {
        Ok(match &self.backend {
            Backend::Rs(rs) => {
                rs.parties_on(exec)?.into_iter().map(|p| Box::new(p) as Box<dyn PartyMachine + Send>).collect()
            }
            Backend::Gv(gv) => {
                GvCompiled::parties_on(gv, exec)?.into_iter().map(|p| Box::new(p) as Box<dyn PartyMachine + Send>).collect()
            }
            Backend::Magi(m) => {
                MagiCompiled::parties_on(m, exec)?.into_iter().map(|p| Box::new(p) as Box<dyn PartyMachine + Send>).collect()
            }
        })
    }

    pub fn run<A: Adversary + ?Sized>(
        &self,
        exec: &Digraph,
        adversary: &mut A,
        seed: u64,
        record_trace: bool,
    ) -> Result<CompiledRun, CompileError> {
        let mut parties = self.parties_on(exec)?;
        let opts = ExecOptions { rounds: self.rounds(), seed, record_trace };
        let execution = netsim::execute(exec, &mut parties, adversary, opts)?;
        let success = execution.outputs == self.expected_outputs();
        Ok(CompiledRun { execution, success })
    }
}

fn base_manifest(kind: CompilerKind, inner: &dyn Protocol, rounds: usize, target: &Digraph) -> Manifest {
    Manifest {
        compiler: kind,
        n: inner.graph().n(),
        m: inner.graph().m(),
        inner_rounds: inner.rounds(),
        rounds,
        target_arcs: target.arcs().to_vec(),
        tolerances: Vec::new(),
        params: BTreeMap::new(),
        measured: BTreeMap::new(),
    }
}

/// Global tolerance of the RS layer: `⌊T̃/1296⌋` flips in total over the
/// `active` arcs it transmits on.
fn rs_global(active: usize) -> Tolerance {
    Tolerance {
        model: BudgetModel::Global,
        rate: 1.0 / (1296.0 * active.max(1) as f64),
        note: "at most floor(rounds/1296) flips in total; no failure expected".into(),
    }
}

/// The RS compiler alone, on the protocol's own graph.
pub fn compile_rs(inner: Arc<dyn Protocol>, cfg: &CompileConfig) -> Result<CompiledProtocol, CompileError> {
    let g = inner.graph().clone();
    g.require_no_isolated()?;
    let rs = RsCompiled::new(inner.clone(), cfg.code_seed, &cfg.tree)?;
    let mut manifest = base_manifest(CompilerKind::Rs, inner.as_ref(), rs.rounds(), &g);
    manifest.tolerances.push(rs_global(g.m()));
    manifest.params.insert("code_seed".into(), cfg.code_seed.into());
    manifest.params.insert("tree_code".into(), serde_json::to_value(&cfg.tree).unwrap());
    manifest.measured.insert("steps".into(), rs.steps() as f64);
    manifest.measured.insert("tree_code_alpha".into(), rs.code().alpha());
    Ok(CompiledProtocol::assemble(inner, g, Backend::Rs(rs), manifest))
}

/// Sparsify, route, schedule, then RS-compile the routed protocol. Needs a
/// connected symmetric graph.
pub fn compile_undirected(
    inner: Arc<dyn Protocol>,
    seed: u64,
    cfg: &CompileConfig,
) -> Result<CompiledProtocol, CompileError> {
    let g = inner.graph().clone();
    g.require_undirected_connected()?;
    let pipeline = routing::sparsifying_compile(inner.clone(), seed, &cfg.pipeline)?;
    let routed: Arc<dyn Protocol> = pipeline.protocol.clone();
    let target = routed.graph().clone();
    let rs = RsCompiled::new(routed, cfg.code_seed, &cfg.tree)?;
    let n = g.n() as f64;
    let active = target.m();
    let mut manifest = base_manifest(CompilerKind::Undirected, inner.as_ref(), rs.rounds(), &target);
    let mut tol = rs_global(active);
    tol.note = format!("{}; equals c/n with c = {:.3e}", tol.note, n * tol.rate);
    manifest.tolerances.push(tol);
    manifest.params.insert("seed".into(), seed.into());
    manifest.params.insert("code_seed".into(), cfg.code_seed.into());
    manifest.params.insert("pipeline".into(), serde_json::to_value(cfg.pipeline).unwrap());
    let r = &pipeline.report;
    let scale = g.m() as f64 * n.ln().max(1.0) / n * inner.rounds() as f64;
    for (k, v) in [
        ("c", n / (1296.0 * active as f64)),
        ("c2", r.c2),
        ("c4", r.c4),
        ("lambda", r.lambda),
        ("congestion", r.congestion as f64),
        ("dilation", r.dilation as f64),
        ("makespan", r.makespan as f64),
        ("sparse_edges", r.sparse_edges as f64),
        ("path_attempts", r.path_attempts as f64),
        ("rounds_over_m_log_n_over_n_t", rs.rounds() as f64 / scale),
        ("tree_code_alpha", rs.code().alpha()),
    ] {
        manifest.measured.insert(k.into(), v);
    }
    Ok(CompiledProtocol::assemble(inner, target, Backend::Rs(rs), manifest))
}

/// Reroute every arc along a shortest path inside a minimum equivalent
/// digraph, schedule, then RS-compile.
pub fn compile_med(inner: Arc<dyn Protocol>, seed: u64, cfg: &CompileConfig) -> Result<CompiledProtocol, CompileError> {
    let g = inner.graph().clone();
    g.require_no_isolated()?;
    let med = graph::med_heuristic(&g);
    let paths = PathSet::shortest(&med, g.arcs())?;
    let target = g.subgraph(paths.arcs_used());
    let sched = routing::schedule(&paths, &target, seed, cfg.pipeline.schedule_attempts);
    let routed: Arc<dyn Protocol> = Arc::new(RoutedProtocol::new(inner.clone(), target.clone(), paths, sched.schedule)?);
    let rs = RsCompiled::new(routed.clone(), cfg.code_seed, &cfg.tree)?;
    let chain = graph::chain_length_walk(&g)?.chain_length;
    let t_routed = routed.rounds();
    let t_tilde = rs.rounds();
    // A failure leaves ⌈T'/48⌉ character errors on a walk of at most 3R arcs,
    // so fewer than T'/(144R) flips on every arc cannot cause one.
    let safe_per_arc = (t_routed as f64 / (144.0 * chain as f64)).ceil() as usize - 1;
    let mut manifest = base_manifest(CompilerKind::Med, inner.as_ref(), t_tilde, &target);
    let mut tol = rs_global(target.m());
    tol.note = format!("{}; MED size s = {}", tol.note, med.m());
    manifest.tolerances.push(tol);
    manifest.tolerances.push(Tolerance {
        model: BudgetModel::PerEdge,
        rate: safe_per_arc as f64 / t_tilde as f64,
        note: format!("fewer than {t_routed}/(144·{chain}) flips per arc; Ω(1/R) with R = {chain}"),
    });
    manifest.params.insert("seed".into(), seed.into());
    manifest.params.insert("code_seed".into(), cfg.code_seed.into());
    for (k, v) in [
        ("med_size", med.m() as f64),
        ("chain_length", chain as f64),
        ("congestion", sched.congestion as f64),
        ("dilation", sched.dilation as f64),
        ("makespan", sched.makespan as f64),
        ("c5", t_tilde as f64 / (g.m() * inner.rounds()) as f64),
        ("tree_code_alpha", rs.code().alpha()),
    ] {
        manifest.measured.insert(k.into(), v);
    }
    Ok(CompiledProtocol::assemble(inner, target, Backend::Rs(rs), manifest))
}

/// Segment-wise broadcast of transmission-function tables under a verified
/// random linear code.
pub fn compile_gv(inner: Arc<UniversalProtocol>, cfg: &CompileConfig) -> Result<CompiledProtocol, CompileError> {
    let gv = Arc::new(GvCompiled::new(&inner, &cfg.gv)?);
    let target = inner.graph().clone();
    let mut manifest = base_manifest(CompilerKind::Gv, inner.as_ref(), gv.rounds(), &target);
    let eps = gv.epsilon();
    let d = gv.diameter();
    manifest.tolerances.push(Tolerance {
        model: BudgetModel::PerEdge,
        rate: 1.0 / (4.0 * d as f64) - eps,
        note: format!(
            "failure needs at least {} flips on one arc within one segment of {} rounds",
            gv.code().min_distance.div_ceil(2),
            gv.code().length
        ),
    });
    manifest.params.insert("epsilon".into(), eps.into());
    manifest.params.insert("gv".into(), serde_json::to_value(&cfg.gv).unwrap());
    let code = gv.code();
    for (k, v) in [
        ("diameter", d as f64),
        ("segment_length", code.length as f64),
        ("dimension", code.dimension as f64),
        ("min_distance", code.min_distance as f64),
        ("relative_distance", code.min_distance as f64 / code.length as f64),
        ("required_relative_distance", 0.5 - d as f64 * eps),
        ("max_free_bits", gv.max_free_bits() as f64),
        ("distance_exhaustive", f64::from(u8::from(code.audit == DistanceAudit::Exhaustive))),
    ] {
        manifest.measured.insert(k.into(), v);
    }
    let inner: Arc<dyn Protocol> = inner;
    Ok(CompiledProtocol::assemble(inner, target, Backend::Gv(gv), manifest))
}

/// RS-compile, then simulate every round of the result with one segment of
/// relayed, padded and majority-voted copies through common neighbours.
pub fn compile_magi(inner: Arc<dyn Protocol>, cfg: &CompileConfig) -> Result<CompiledProtocol, CompileError> {
    let g = inner.graph().clone();
    let rs = RsCompiled::new(inner.clone(), cfg.code_seed, &cfg.tree)?;
    let magi = Arc::new(MagiCompiled::new(rs, &cfg.magi)?);
    let p = magi.params();
    let mut manifest = base_manifest(CompilerKind::Magi, inner.as_ref(), magi.rounds(), &g);
    manifest.tolerances.push(Tolerance {
        model: BudgetModel::Global,
        rate: p.declared_rate(g.n()),
        note: "rate η·ε·n/(128m); failure probability exp(−Ω(T)), reported empirically".into(),
    });
    manifest.params.insert("epsilon".into(), p.epsilon.into());
    manifest.params.insert("eta".into(), p.eta.into());
    manifest.params.insert("alpha".into(), p.alpha.into());
    manifest.params.insert("shared_seed".into(), cfg.magi.shared_seed.into());
    manifest.params.insert("code_seed".into(), cfg.code_seed.into());
    for (k, v) in [
        ("ell", p.ell as f64),
        ("segment_rounds", p.segment_rounds() as f64),
        ("rs_rounds", magi.rs().rounds() as f64),
        ("segment_flips", p.segment_flips(g.n()) as f64),
        ("min_common_fraction", min_common_fraction(&g)),
    ] {
        manifest.measured.insert(k.into(), v);
    }
    Ok(CompiledProtocol::assemble(inner, g, Backend::Magi(magi), manifest))
}

/// Dispatch by name; GV needs the explicit universal protocol.
pub fn compile(
    kind: CompilerKind,
    inner: Arc<UniversalProtocol>,
    seed: u64,
    cfg: &CompileConfig,
) -> Result<CompiledProtocol, CompileError> {
    match kind {
        CompilerKind::Rs => compile_rs(inner, cfg),
        CompilerKind::Undirected => compile_undirected(inner, seed, cfg),
        CompilerKind::Med => compile_med(inner, seed, cfg),
        CompilerKind::Gv => compile_gv(inner, cfg),
        CompilerKind::Magi => {
            let cfg = CompileConfig { magi: MagiConfig { shared_seed: seed, ..cfg.magi }, ..cfg.clone() };
            compile_magi(inner, &cfg)
        }
    }
}

/// Exec arc ids of `party`'s out- and in-arcs in `g`, in `g`'s order.
fn map_arcs(g: &Digraph, exec: &Digraph, party: usize) -> Result<(Vec<usize>, Vec<usize>), CompileError> {
    let find = |u: usize, v: usize| exec.arc_id(u, v).ok_or(CompileError::Rs(RsError::MissingArc(u, v)));
    let outs = g.out_neighbors(party).map(|v| find(party, v)).collect::<Result<_, _>>()?;
    let ins = g.in_neighbors(party).map(|u| find(u, party)).collect::<Result<_, _>>()?;
    Ok((outs, ins))
}

fn check_vertices(g: &Digraph, exec: &Digraph) -> Result<(), CompileError> {
    if exec.n() != g.n() {
        return Err(RsError::VertexCount { expected: g.n(), found: exec.n() }.into());
    }
    Ok(())
}
