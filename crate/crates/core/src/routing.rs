//! Rerouting pipeline for dense undirected networks: a cut-preserving sparse
//! subgraph, a concurrent multicommodity flow on it, randomized rounding to
//! one path per arc, truncation of long paths, and a packet schedule. The
//! result is an intermediate protocol that simulates each round of the
//! original by one routing block.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Digraph, GraphError};
use crate::protocol::{Protocol, QueryCounter};
use crate::util::{derived_rng, stream};

#[derive(Debug, Error)]
pub enum RoutingError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("no sparse subgraph passed the cut check in {attempts} attempts (worst ratio {worst:.3} > {factor:.3})")]
    Sparsify { attempts: usize, worst: f64, factor: f64 },
    #[error("commodity {commodity}: {to} is unreachable from {from}")]
    Unreachable { commodity: usize, from: usize, to: usize },
    #[error("flow value is zero")]
    ZeroFlow,
    #[error("path sampling gave up after {attempts} attempts (best congestion {best}, bound {bound:.2})")]
    Congestion { attempts: usize, best: usize, bound: f64 },
    #[error("invalid path set: {0}")]
    Paths(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("flow check failed: {0}")]
    Flow(String),
}

// ---------------------------------------------------------------------------
// cut sparsifier

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsifyConfig {
    /// Target edge budget is `c1 · n`.
    pub c1: f64,
    pub retries: usize,
    /// Cuts sampled when `n` is too large for enumeration.
    pub sampled_cuts: usize,
}

impl Default for SparsifyConfig {
    fn default() -> Self {
        SparsifyConfig { c1: 8.0, retries: 64, sampled_cuts: 10_000 }
    }
}

/// Largest `n` for which every cut is enumerated.
pub const EXHAUSTIVE_CUT_LIMIT: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CutCheck {
    /// Input already sparse; returned unchanged.
    Identity,
    Exhaustive { cuts: u64 },
    Sampled { cuts: u64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sparsified {
    /// Symmetric subgraph of the input.
    pub graph: Digraph,
    /// `5m/n` with `m` the input's undirected edge count.
    pub factor: f64,
    /// Largest observed `|δ(U)| / |δ̃(U)|`.
    pub worst_ratio: f64,
    pub check: CutCheck,
    pub attempts: usize,
}

impl Sparsified {
    pub fn edges(&self) -> usize {
        self.graph.m() / 2
    }
}

fn symmetric_from_edges(n: usize, edges: &[(usize, usize)]) -> Digraph {
    Digraph::new(n, edges.iter().flat_map(|&(u, v)| [(u, v), (v, u)])).expect("edges are simple")
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut x = x;
        while self.0[x] != r {
            let next = self.0[x];
            self.0[x] = r;
            x = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        self.0[ra] = rb;
        ra != rb
    }
}

/// Counts of crossing edges in `g` and `h` for the cut `U = {v : mask bit v}`.
fn cut_sizes(g_edges: &[(usize, usize)], h_edges: &[(usize, usize)], inside: impl Fn(usize) -> bool) -> (usize, usize) {
    let cross = |es: &[(usize, usize)]| es.iter().filter(|&&(u, v)| inside(u) != inside(v)).count();
    (cross(g_edges), cross(h_edges))
}

/// Checks `|δ_g(U)| ≤ factor · |δ_h(U)|` over every cut (or a sample of
/// cuts) and returns the check performed, whether it passed, and the worst
/// observed ratio (`∞` if some cut of `g` is empty in `h`).
pub fn verify_cut_contract(g: &Digraph, h: &Digraph, factor: f64, samples: usize, rng: &mut ChaCha8Rng) -> (CutCheck, bool, f64) {
    let n = g.n();
    let ge = g.undirected_edges();
    let he = h.undirected_edges();
    let mut worst = 0.0f64;
    let mut judge = |d: usize, dh: usize| {
        let ratio = if dh == 0 {
            if d == 0 { 0.0 } else { f64::INFINITY }
        } else {
            d as f64 / dh as f64
        };
        worst = worst.max(ratio);
    };
    let check = if n <= EXHAUSTIVE_CUT_LIMIT {
        // fix the last vertex outside U: each cut appears once
        let total = (1u64 << (n - 1)) - 1;
        for mask in 1..=total {
            let (d, dh) = cut_sizes(&ge, &he, |v| v < n - 1 && mask >> v & 1 == 1);
            judge(d, dh);
        }
        CutCheck::Exhaustive { cuts: total }
    } else {
        let mut inside = vec![false; n];
        for _ in 0..samples {
            loop {
                for b in inside.iter_mut() {
                    *b = rng.gen();
                }
                if inside.iter().any(|&b| b) && !inside.iter().all(|&b| b) {
                    break;
                }
            }
            let (d, dh) = cut_sizes(&ge, &he, |v| inside[v]);
            judge(d, dh);
        }
        CutCheck::Sampled { cuts: samples as u64 }
    };
    (check, worst <= factor + 1e-12, worst)
}

/// Keeps a random spanning tree plus each remaining edge independently with
/// a probability chosen so the expected size is about half the `c1·n`
/// budget, then verifies the cut contract and the size bound, retrying with
/// fresh randomness on failure.
pub fn cut_sparsify(g: &Digraph, seed: u64, cfg: &SparsifyConfig) -> Result<Sparsified, RoutingError> {
    g.require_undirected_connected()?;
    let n = g.n();
    let edges = g.undirected_edges();
    let m = edges.len();
    let factor = 5.0 * m as f64 / n as f64;
    let budget = (cfg.c1 * n as f64).floor() as usize;
    if m <= budget {
        return Ok(Sparsified { graph: g.clone(), factor, worst_ratio: 1.0, check: CutCheck::Identity, attempts: 0 });
    }
    let mut worst_seen = f64::INFINITY;
    for attempt in 1..=cfg.retries.max(1) {
        let mut rng = derived_rng(seed, &[stream::ROUTING, 1, attempt as u64]);
        let mut order = edges.clone();
        order.shuffle(&mut rng);
        let mut uf = UnionFind((0..n).collect());
        let (tree, rest): (Vec<_>, Vec<_>) = order.into_iter().partition(|&(u, v)| uf.union(u, v));
        let spare = budget.saturating_sub(tree.len()) as f64;
        let p = (spare / (2.0 * rest.len() as f64)).min(1.0);
        let mut kept = tree;
        kept.extend(rest.into_iter().filter(|_| rng.gen_bool(p)));
        if kept.len() > budget {
            continue;
        }
        kept.sort_unstable();
        let h = symmetric_from_edges(n, &kept);
        let (check, ok, worst) = verify_cut_contract(g, &h, factor, cfg.sampled_cuts, &mut rng);
        if ok {
            return Ok(Sparsified { graph: h, factor, worst_ratio: worst, check, attempts: attempt });
        }
        worst_seen = worst_seen.min(worst);
    }
    Err(RoutingError::Sparsify { attempts: cfg.retries.max(1), worst: worst_seen, factor })
}

// ---------------------------------------------------------------------------
// concurrent flow

/// Unit-capacity network with one unit-demand commodity per arc of the
/// protocol graph.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowNetwork {
    pub graph: Digraph,
    /// `(source, sink)` per commodity.
    pub commodities: Vec<(usize, usize)>,
}

impl FlowNetwork {
    /// Commodities are the arcs of `demand`, routed over `graph`.
    pub fn new(graph: Digraph, demand: &Digraph) -> Self {
        FlowNetwork { graph, commodities: demand.arcs().to_vec() }
    }

    fn check_reachable(&self) -> Result<(), RoutingError> {
        for (c, &(s, t)) in self.commodities.iter().enumerate() {
            if self.graph.distances_from(s)[t].is_none() {
                return Err(RoutingError::Unreachable { commodity: c, from: s, to: t });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConcurrentFlow {
    /// Every commodity ships exactly `lambda`.
    pub lambda: f64,
    /// Certified upper bound on the optimum.
    pub upper_bound: f64,
    /// `flow[c][a]`: commodity `c` on arc `a`.
    pub flow: Vec<Vec<f64>>,
    pub phases: usize,
}

impl ConcurrentFlow {
    pub fn load(&self) -> Vec<f64> {
        let m = self.flow.first().map_or(0, Vec::len);
        (0..m).map(|a| self.flow.iter().map(|f| f[a]).sum()).collect()
    }

    /// Capacity and per-commodity conservation, to absolute tolerance `tol`.
    pub fn verify(&self, net: &FlowNetwork, tol: f64) -> Result<(), RoutingError> {
        let g = &net.graph;
        for (a, l) in self.load().into_iter().enumerate() {
            if l > 1.0 + tol {
                return Err(RoutingError::Flow(format!("arc {:?} carries {l}", g.arc(a))));
            }
        }
        for (c, &(s, t)) in net.commodities.iter().enumerate() {
            let f = &self.flow[c];
            if f.iter().any(|&x| x < -tol) {
                return Err(RoutingError::Flow(format!("commodity {c} has negative flow")));
            }
            for v in 0..g.n() {
                let out: f64 = g.out_arc_ids(v).iter().map(|&a| f[a]).sum();
                let inn: f64 = g.in_arc_ids(v).iter().map(|&a| f[a]).sum();
                let want = if v == s {
                    self.lambda
                } else if v == t {
                    -self.lambda
                } else {
                    0.0
                };
                if (out - inn - want).abs() > tol {
                    return Err(RoutingError::Flow(format!("commodity {c} unbalanced at {v}: {}", out - inn)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest `s → t` path under nonnegative arc lengths, as arc ids.
fn dijkstra(g: &Digraph, len: &[f64], s: usize, t: usize) -> Option<(f64, Vec<usize>)> {
    let mut dist = vec![f64::INFINITY; g.n()];
    let mut via = vec![usize::MAX; g.n()];
    dist[s] = 0.0;
    let mut heap = BinaryHeap::from([HeapItem(0.0, s)]);
    while let Some(HeapItem(d, v)) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        if v == t {
            break;
        }
        for &a in g.out_arc_ids(v) {
            let w = g.arc(a).1;
            let nd = d + len[a];
            if nd < dist[w] {
                dist[w] = nd;
                via[w] = a;
                heap.push(HeapItem(nd, w));
            }
        }
    }
    if !dist[t].is_finite() {
        return None;
    }
    let mut arcs = Vec::new();
    let mut v = t;
    while v != s {
        let a = via[v];
        arcs.push(a);
        v = g.arc(a).0;
    }
    arcs.reverse();
    Some((dist[t], arcs))
}

/// Hard cap on multiplicative-weights phases.
pub const MAX_FLOW_PHASES: usize = 200_000;

/// Multiplicative-weights concurrent flow. Each phase routes every
/// commodity's (prescaled) demand along a shortest path under the current
/// arc lengths and inflates the lengths it used. After every phase the
/// accumulated flow is scaled to feasibility, and the run stops once that
/// value is within `1 − ε` of the best dual bound `D(l)/α(l)` seen so far.
pub fn max_concurrent_flow(net: &FlowNetwork, eps: f64) -> Result<ConcurrentFlow, RoutingError> {
    net.check_reachable()?;
    let g = &net.graph;
    let k = net.commodities.len();
    let m = g.m();
    if k == 0 {
        return Ok(ConcurrentFlow { lambda: 1.0, upper_bound: 1.0, flow: Vec::new(), phases: 0 });
    }
    let step = (eps / 3.0).clamp(1e-4, 0.1);

    // prescale demands by the hop-shortest-path congestion so the optimum is ≥ 1
    let unit = vec![1.0; m];
    let mut load0 = vec![0usize; m];
    for &(s, t) in &net.commodities {
        for a in dijkstra(g, &unit, s, t).expect("reachable").1 {
            load0[a] += 1;
        }
    }
    let demand = 1.0 / *load0.iter().max().unwrap() as f64;

    let mut length = vec![1.0; m];
    let mut flow = vec![vec![0.0; m]; k];
    let mut load = vec![0.0; m];
    let mut best_ub = f64::INFINITY;
    let mut lambda = 0.0;
    let mut phases = 0;
    while phases < MAX_FLOW_PHASES {
        phases += 1;
        for (c, &(s, t)) in net.commodities.iter().enumerate() {
            let (_, path) = dijkstra(g, &length, s, t).expect("reachable");
            for a in path {
                flow[c][a] += demand;
                load[a] += demand;
                length[a] *= 1.0 + step * demand;
            }
        }
        let top = length.iter().cloned().fold(0.0, f64::max);
        for l in length.iter_mut() {
            *l /= top;
        }
        // dual bound for unit demands: λ* ≤ Σ l(a) / Σ_c dist_l(c)
        let d_l: f64 = length.iter().sum();
        let alpha: f64 = net.commodities.iter().map(|&(s, t)| dijkstra(g, &length, s, t).unwrap().0).sum();
        best_ub = best_ub.min(d_l / alpha);
        let max_load = load.iter().cloned().fold(0.0, f64::max);
        lambda = phases as f64 * demand / max_load;
        if lambda >= (1.0 - eps) * best_ub {
            break;
        }
    }
    let scale = lambda / (phases as f64 * demand);
    for f in flow.iter_mut() {
        for x in f.iter_mut() {
            *x *= scale;
        }
    }
    Ok(ConcurrentFlow { lambda, upper_bound: best_ub, flow, phases })
}

// ---------------------------------------------------------------------------
// paths

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSet {
    pub commodities: Vec<(usize, usize)>,
    /// Vertex sequence per commodity.
    pub paths: Vec<Vec<usize>>,
}

impl PathSet {
    /// A hop-shortest path per commodity (lowest-index tie-break).
    pub fn shortest(graph: &Digraph, commodities: &[(usize, usize)]) -> Result<Self, RoutingError> {
        let paths = commodities
            .iter()
            .enumerate()
            .map(|(c, &(s, t))| graph.shortest_path(s, t).ok_or(RoutingError::Unreachable { commodity: c, from: s, to: t }))
            .collect::<Result<_, _>>()?;
        Ok(PathSet { commodities: commodities.to_vec(), paths })
    }

    /// Paths per arc of `graph`.
    pub fn arc_loads(&self, graph: &Digraph) -> Vec<usize> {
        let mut load = vec![0; graph.m()];
        for p in &self.paths {
            for w in p.windows(2) {
                load[graph.arc_id(w[0], w[1]).expect("path arc")] += 1;
            }
        }
        load
    }

    pub fn congestion(&self, graph: &Digraph) -> usize {
        self.arc_loads(graph).into_iter().max().unwrap_or(0)
    }

    pub fn dilation(&self) -> usize {
        self.paths.iter().map(|p| p.len() - 1).max().unwrap_or(0)
    }

    /// Arcs used by at least one path, in first-use order.
    pub fn arcs_used(&self) -> Vec<(usize, usize)> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for p in &self.paths {
            for w in p.windows(2) {
                if seen.insert((w[0], w[1])) {
                    out.push((w[0], w[1]));
                }
            }
        }
        out
    }

    /// Endpoints, simplicity, and arc membership.
    pub fn validate(&self, graph: &Digraph) -> Result<(), RoutingError> {
        if self.paths.len() != self.commodities.len() {
            return Err(RoutingError::Paths(format!("{} paths for {} commodities", self.paths.len(), self.commodities.len())));
        }
        for (c, (p, &(s, t))) in self.paths.iter().zip(&self.commodities).enumerate() {
            if p.first() != Some(&s) || p.last() != Some(&t) || p.len() < 2 {
                return Err(RoutingError::Paths(format!("commodity {c}: path {p:?} does not join {s} to {t}")));
            }
            let mut seen = vec![false; graph.n()];
            for &v in p {
                if std::mem::replace(&mut seen[v], true) {
                    return Err(RoutingError::Paths(format!("commodity {c}: path {p:?} revisits {v}")));
                }
            }
            if let Some(w) = p.windows(2).find(|w| !graph.has_arc(w[0], w[1])) {
                return Err(RoutingError::Paths(format!("commodity {c}: ({}, {}) is not an arc", w[0], w[1])));
            }
        }
        Ok(())
    }
}

/// Cuts out the cycle between repeated visits to a vertex, leaving a simple path.
pub fn excise_loops(walk: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(walk.len());
    for &v in walk {
        if let Some(i) = out.iter().position(|&u| u == v) {
            out.truncate(i + 1);
        } else {
            out.push(v);
        }
    }
    out
}

/// Acceptance threshold for sampled paths: `9(1/λ + ln k)`, `k` commodities.
pub fn congestion_bound(lambda: f64, commodities: usize) -> f64 {
    9.0 * (1.0 / lambda + (commodities.max(1) as f64).ln())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampledPaths {
    pub paths: PathSet,
    /// Whole path sets drawn, including the accepted one.
    pub attempts: usize,
    pub congestion: usize,
    pub bound: f64,
}

fn sample_walk(g: &Digraph, f: &[f64], s: usize, t: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let floor = 1e-12 * f.iter().cloned().fold(0.0, f64::max);
    let mut walk = vec![s];
    let mut v = s;
    for _ in 0..(4 * g.n() * g.n()).max(16) {
        if v == t {
            return Some(walk);
        }
        let outs = g.out_arc_ids(v);
        let total: f64 = outs.iter().map(|&a| f[a]).filter(|&x| x > floor).sum();
        if total <= 0.0 {
            return None;
        }
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = *outs.iter().rev().find(|&&a| f[a] > floor).unwrap();
        for &a in outs {
            if f[a] <= floor {
                continue;
            }
            if pick < f[a] {
                chosen = a;
                break;
            }
            pick -= f[a];
        }
        v = g.arc(chosen).1;
        walk.push(v);
    }
    (v == t).then_some(walk)
}

/// Draws one walk per commodity, stepping along outgoing arcs with
/// probability proportional to that commodity's flow, removes loops, and
/// resamples the whole set until its congestion meets [`congestion_bound`].
pub fn flow_to_paths(net: &FlowNetwork, flow: &ConcurrentFlow, seed: u64, retries: usize) -> Result<SampledPaths, RoutingError> {
    if flow.lambda <= 0.0 {
        return Err(RoutingError::ZeroFlow);
    }
    let g = &net.graph;
    let bound = congestion_bound(flow.lambda, net.commodities.len());
    let mut best = usize::MAX;
    for attempt in 1..=retries.max(1) {
        let mut rng = derived_rng(seed, &[stream::ROUTING, 2, attempt as u64]);
        let mut paths = Vec::with_capacity(net.commodities.len());
        for (c, &(s, t)) in net.commodities.iter().enumerate() {
            let walk = loop {
                if let Some(w) = sample_walk(g, &flow.flow[c], s, t, &mut rng) {
                    break w;
                }
            };
            paths.push(excise_loops(&walk));
        }
        let ps = PathSet { commodities: net.commodities.clone(), paths };
        let congestion = ps.congestion(g);
        if congestion as f64 <= bound {
            return Ok(SampledPaths { paths: ps, attempts: attempt, congestion, bound });
        }
        best = best.min(congestion);
    }
    Err(RoutingError::Congestion { attempts: retries.max(1), best, bound })
}

/// Length threshold `(k ln k)/n` for `k` commodities on `n` vertices.
pub fn truncation_threshold(commodities: usize, n: usize) -> f64 {
    let k = commodities.max(1) as f64;
    k * k.ln() / n as f64
}

/// Replaces every path longer than [`truncation_threshold`] by the direct arc.
pub fn truncate_paths(ps: &PathSet, n: usize) -> PathSet {
    let limit = truncation_threshold(ps.commodities.len(), n);
    let paths = ps
        .paths
        .iter()
        .zip(&ps.commodities)
        .map(|(p, &(s, t))| if (p.len() - 1) as f64 > limit { vec![s, t] } else { p.clone() })
        .collect();
    PathSet { commodities: ps.commodities.clone(), paths }
}

// ---------------------------------------------------------------------------
// scheduling

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Move {
    pub packet: usize,
    /// Index of the arc within the packet's path.
    pub hop: usize,
    pub arc: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    /// `steps[s]` are the moves made in step `s + 1`.
    pub steps: Vec<Vec<Move>>,
}

impl Schedule {
    pub fn makespan(&self) -> usize {
        self.steps.len()
    }

    /// At most one packet per arc per step; each packet crosses its path's
    /// arcs once each, in order.
    pub fn validate(&self, ps: &PathSet) -> Result<(), RoutingError> {
        let mut next_hop = vec![0usize; ps.paths.len()];
        for (s, moves) in self.steps.iter().enumerate() {
            let mut arcs: Vec<(usize, usize)> = moves.iter().map(|m| m.arc).collect();
            arcs.sort_unstable();
            if let Some(w) = arcs.windows(2).find(|w| w[0] == w[1]) {
                return Err(RoutingError::Schedule(format!("step {}: arc {:?} used twice", s + 1, w[0])));
            }
            let mut moved = std::collections::BTreeSet::new();
            for mv in moves {
                let p = ps.paths.get(mv.packet).ok_or_else(|| RoutingError::Schedule(format!("unknown packet {}", mv.packet)))?;
                if !moved.insert(mv.packet) {
                    return Err(RoutingError::Schedule(format!("step {}: packet {} moves twice", s + 1, mv.packet)));
                }
                if mv.hop != next_hop[mv.packet] || mv.hop + 1 >= p.len() || mv.arc != (p[mv.hop], p[mv.hop + 1]) {
                    return Err(RoutingError::Schedule(format!("step {}: packet {} out of order", s + 1, mv.packet)));
                }
                next_hop[mv.packet] += 1;
            }
        }
        if let Some(p) = (0..ps.paths.len()).find(|&p| next_hop[p] + 1 != ps.paths[p].len()) {
            return Err(RoutingError::Schedule(format!("packet {p} never arrives")));
        }
        Ok(())
    }
}

/// Store-and-forward: each step every arc forwards the highest-priority
/// released packet waiting at its tail. With no delays this is
/// work-conserving, so a packet waits fewer than `c` steps per arc and the
/// makespan is at most `c·ℓ`.
fn greedy_schedule(ps: &PathSet, release: &[usize], priority: &[u64]) -> Schedule {
    let k = ps.paths.len();
    let mut pos = vec![0usize; k];
    let mut done = ps.paths.iter().filter(|p| p.len() < 2).count();
    let mut steps = Vec::new();
    let mut step = 0;
    while done < k {
        step += 1;
        let mut claims: std::collections::BTreeMap<(usize, usize), usize> = std::collections::BTreeMap::new();
        for p in 0..k {
            let path = &ps.paths[p];
            if pos[p] + 1 >= path.len() || release[p] >= step {
                continue;
            }
            let arc = (path[pos[p]], path[pos[p] + 1]);
            let e = claims.entry(arc).or_insert(p);
            if priority[p] < priority[*e] {
                *e = p;
            }
        }
        let mut moves: Vec<Move> = claims.into_iter().map(|(arc, p)| Move { packet: p, hop: pos[p], arc }).collect();
        moves.sort_by_key(|m| m.packet);
        for m in &moves {
            pos[m.packet] += 1;
            if pos[m.packet] + 1 == ps.paths[m.packet].len() {
                done += 1;
            }
        }
        steps.push(moves);
    }
    Schedule { steps }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub schedule: Schedule,
    pub congestion: usize,
    pub dilation: usize,
    pub makespan: usize,
    /// Attempt that produced the returned schedule (0 = undelayed greedy).
    pub chosen_attempt: usize,
}

/// Tries the undelayed farthest-to-go greedy schedule plus `attempts`
/// schedules with random initial delays in `[0, c)` and random priorities,
/// and keeps the shortest. The undelayed one bounds the result by `c·ℓ`.
pub fn schedule(ps: &PathSet, graph: &Digraph, seed: u64, attempts: usize) -> ScheduleReport {
    let c = ps.congestion(graph);
    let l = ps.dilation();
    let k = ps.paths.len();
    let far: Vec<u64> = ps.paths.iter().map(|p| (usize::MAX - p.len()) as u64).collect();
    let mut best = greedy_schedule(ps, &vec![0; k], &far);
    let mut chosen = 0;
    for attempt in 1..=attempts {
        let mut rng = derived_rng(seed, &[stream::ROUTING, 3, attempt as u64]);
        let release: Vec<usize> = (0..k).map(|_| rng.gen_range(0..c.max(1))).collect();
        let priority: Vec<u64> = (0..k).map(|_| rng.gen()).collect();
        let s = greedy_schedule(ps, &release, &priority);
        if s.makespan() < best.makespan() {
            best = s;
            chosen = attempt;
        }
    }
    ScheduleReport { makespan: best.makespan(), schedule: best, congestion: c, dilation: l, chosen_attempt: chosen }
}

// ---------------------------------------------------------------------------
// routed protocol

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BitSource {
    Idle,
    /// The party's own transmission on its `k`th out-arc of the inner graph.
    Own(usize),
    /// Relay of what arrived on routing in-arc `in_pos` at step `step`.
    Relay { in_pos: usize, step: usize },
}

/// Runs `inner` on a routing graph: every inner round becomes a block of
/// `makespan` rounds in which each inner bit travels along its path under
/// the schedule. Arcs idle in a step carry 0.
#[derive(Debug)]
pub struct RoutedProtocol {
    inner: Arc<dyn Protocol>,
    graph: Digraph,
    paths: PathSet,
    schedule: Schedule,
    block: usize,
    /// `sends[party][step - 1][out_pos]`.
    sends: Vec<Vec<Vec<BitSource>>>,
    /// `arrivals[party][inner in-arc position] = (routing in_pos, step)`.
    arrivals: Vec<Vec<(usize, usize)>>,
}

impl RoutedProtocol {
    /// `graph` must contain every arc used by `paths`, which must carry one
    /// path per arc of the inner graph (in arc-id order).
    pub fn new(inner: Arc<dyn Protocol>, graph: Digraph, paths: PathSet, schedule: Schedule) -> Result<Self, RoutingError> {
        let ig = inner.graph();
        if graph.n() != ig.n() || paths.commodities != ig.arcs() {
            return Err(RoutingError::Paths("path set does not match the protocol graph".into()));
        }
        paths.validate(&graph)?;
        schedule.validate(&paths)?;
        let block = schedule.makespan().max(1);
        let n = graph.n();
        let mut sends: Vec<Vec<Vec<BitSource>>> =
            (0..n).map(|v| vec![vec![BitSource::Idle; graph.out_degree(v)]; block]).collect();
        let mut arrivals: Vec<Vec<(usize, usize)>> = (0..n).map(|v| vec![(0, 0); ig.in_degree(v)]).collect();
        // step at which each packet crossed each hop
        let mut crossed: Vec<Vec<usize>> = paths.paths.iter().map(|p| vec![0; p.len() - 1]).collect();
        for (s, moves) in schedule.steps.iter().enumerate() {
            for mv in moves {
                crossed[mv.packet][mv.hop] = s + 1;
            }
        }
        let in_pos = |v: usize, from: usize| graph.in_neighbors(v).position(|u| u == from).expect("routing arc");
        let out_pos = |v: usize, to: usize| graph.out_neighbors(v).position(|u| u == to).expect("routing arc");
        for (c, p) in paths.paths.iter().enumerate() {
            let (src, dst) = ig.arc(c);
            for h in 0..p.len() - 1 {
                let (u, v) = (p[h], p[h + 1]);
                let source = if h == 0 {
                    BitSource::Own(ig.out_neighbors(src).position(|w| w == dst).expect("inner arc"))
                } else {
                    BitSource::Relay { in_pos: in_pos(u, p[h - 1]), step: crossed[c][h - 1] }
                };
                sends[u][crossed[c][h] - 1][out_pos(u, v)] = source;
            }
            let q = ig.in_neighbors(dst).position(|w| w == src).expect("inner arc");
            arrivals[dst][q] = (in_pos(dst, p[p.len() - 2]), crossed[c][p.len() - 2]);
        }
        Ok(RoutedProtocol { inner, graph, paths, schedule, block, sends, arrivals })
    }

    pub fn inner(&self) -> &Arc<dyn Protocol> {
        &self.inner
    }

    pub fn paths(&self) -> &PathSet {
        &self.paths
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// Rounds per simulated inner round.
    pub fn block(&self) -> usize {
        self.block
    }

    fn inner_incoming(&self, party: usize, incoming: &[&[bool]], rounds: usize) -> Vec<Vec<bool>> {
        self.arrivals[party]
            .iter()
            .map(|&(pos, step)| (0..rounds).map(|r| incoming[pos][r * self.block + step - 1]).collect())
            .collect()
    }
}

impl Protocol for RoutedProtocol {
    fn graph(&self) -> &Digraph {
        &self.graph
    }

    fn rounds(&self) -> usize {
        self.inner.rounds() * self.block
    }

    fn transmissions(&self, party: usize, incoming: &[&[bool]], len: usize, queries: &QueryCounter) -> Vec<Vec<bool>> {
        let t = self.inner.rounds();
        let known = (len / self.block).min(t - 1);
        let inc = self.inner_incoming(party, incoming, known);
        let refs: Vec<&[bool]> = inc.iter().map(Vec::as_slice).collect();
        let inner_rows = self.inner.transmissions(party, &refs, known, queries);
        (0..=len)
            .map(|r| {
                let (b, s) = (r / self.block, r % self.block);
                self.sends[party][s]
                    .iter()
                    .map(|&src| {
                        b < t
                            && match src {
                                BitSource::Idle => false,
                                BitSource::Own(k) => inner_rows[b][k],
                                BitSource::Relay { in_pos, step } => incoming[in_pos][b * self.block + step - 1],
                            }
                    })
                    .collect()
            })
            .collect()
    }

    fn output(&self, party: usize, incoming: &[&[bool]]) -> Vec<bool> {
        let inc = self.inner_incoming(party, incoming, self.inner.rounds());
        let refs: Vec<&[bool]> = inc.iter().map(Vec::as_slice).collect();
        self.inner.output(party, &refs)
    }
}

// ---------------------------------------------------------------------------
// pipeline

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub sparsify: SparsifyConfig,
    pub epsilon: f64,
    pub path_retries: usize,
    pub schedule_attempts: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { sparsify: SparsifyConfig::default(), epsilon: 0.1, path_retries: 1000, schedule_attempts: 16 }
    }
}

/// Measurements from one pipeline run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineReport {
    pub sparse_edges: usize,
    pub cut_check: CutCheck,
    pub sparsify_attempts: usize,
    pub lambda: f64,
    pub lambda_upper_bound: f64,
    pub path_attempts: usize,
    pub congestion: usize,
    pub dilation: usize,
    pub makespan: usize,
    /// `max(c, ℓ) / ((k ln n)/n)` for `k` commodities.
    pub c2: f64,
    /// `block / ((k ln n)/n)`.
    pub c4: f64,
}

#[derive(Debug)]
pub struct Pipeline {
    pub sparsified: Sparsified,
    pub flow: ConcurrentFlow,
    pub sampled: SampledPaths,
    pub truncated: PathSet,
    pub schedule: ScheduleReport,
    pub protocol: Arc<RoutedProtocol>,
    pub report: PipelineReport,
}

/// Sparsify, route, truncate and schedule for the undirected graph of
/// `inner`, returning the routed protocol on the union of used arcs.
pub fn sparsifying_compile(inner: Arc<dyn Protocol>, seed: u64, cfg: &PipelineConfig) -> Result<Pipeline, RoutingError> {
    let g = inner.graph().clone();
    let n = g.n();
    let sparsified = cut_sparsify(&g, seed, &cfg.sparsify)?;
    let net = FlowNetwork::new(sparsified.graph.clone(), &g);
    let flow = max_concurrent_flow(&net, cfg.epsilon)?;
    let sampled = flow_to_paths(&net, &flow, seed, cfg.path_retries)?;
    let truncated = truncate_paths(&sampled.paths, n);
    let routing = g.subgraph(truncated.arcs_used());
    let sched = schedule(&truncated, &routing, seed, cfg.schedule_attempts);
    let scale = (g.m() as f64 * (n as f64).ln() / n as f64).max(1.0);
    let report = PipelineReport {
        sparse_edges: sparsified.edges(),
        cut_check: sparsified.check,
        sparsify_attempts: sparsified.attempts,
        lambda: flow.lambda,
        lambda_upper_bound: flow.upper_bound,
        path_attempts: sampled.attempts,
        congestion: sched.congestion,
        dilation: sched.dilation,
        makespan: sched.makespan,
        c2: sched.congestion.max(sched.dilation) as f64 / scale,
        c4: sched.makespan.max(1) as f64 / scale,
    };
    let protocol = Arc::new(RoutedProtocol::new(inner, routing, truncated.clone(), sched.schedule.clone())?);
    Ok(Pipeline { sparsified, flow, sampled, truncated, schedule: sched, protocol, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::generators;

    #[test]
    fn excision_keeps_endpoints() {
        assert_eq!(excise_loops(&[0, 1, 2, 1, 3]), vec![0, 1, 3]);
        assert_eq!(excise_loops(&[0, 1, 0, 2]), vec![0, 2]);
        assert_eq!(excise_loops(&[4, 5]), vec![4, 5]);
    }

    #[test]
    fn dijkstra_prefers_cheap_detour() {
        let g = Digraph::new(3, [(0, 1), (1, 2), (0, 2)]).unwrap();
        let mut len = vec![1.0; 3];
        len[g.arc_id(0, 2).unwrap()] = 5.0;
        let (d, p) = dijkstra(&g, &len, 0, 2).unwrap();
        assert_eq!((d, p), (2.0, vec![g.arc_id(0, 1).unwrap(), g.arc_id(1, 2).unwrap()]));
    }

    #[test]
    fn sparse_input_is_kept() {
        let g = generators::bidirected_cycle(8);
        let s = cut_sparsify(&g, 0, &SparsifyConfig::default()).unwrap();
        assert_eq!(s.graph, g);
        assert_eq!(s.check, CutCheck::Identity);
    }
}
