use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{Digraph, GraphError};

/// Largest vertex count accepted by [`med_exact`].
pub const MED_EXACT_LIMIT: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condensation {
    /// Strongly connected components in topological order, each sorted.
    pub components: Vec<Vec<usize>>,
    pub component_of: Vec<usize>,
    pub dag: Digraph,
    /// Number of original arcs between each pair of components joined in `dag`.
    pub weights: BTreeMap<(usize, usize), usize>,
}

impl Condensation {
    pub fn is_trivial(&self, c: usize) -> bool {
        self.components[c].len() == 1
    }
}

/// Tarjan's algorithm, followed by a deterministic topological numbering of
/// the components (ties broken by lowest member vertex).
pub fn condensation(g: &Digraph) -> Condensation {
    let n = g.n();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut raw: Vec<Vec<usize>> = Vec::new();
    let mut counter = 0;

    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        // (vertex, next out-arc position)
        let mut call: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = counter;
        low[root] = counter;
        counter += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut pos)) = call.last_mut() {
            let outs = g.out_arc_ids(v);
            if *pos < outs.len() {
                let w = g.arc(outs[*pos]).1;
                *pos += 1;
                if index[w] == usize::MAX {
                    index[w] = counter;
                    low[w] = counter;
                    counter += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some(&(parent, _)) = call.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().unwrap();
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comp.sort_unstable();
                    raw.push(comp);
                }
            }
        }
    }

    let mut raw_of = vec![0; n];
    for (c, comp) in raw.iter().enumerate() {
        for &v in comp {
            raw_of[v] = c;
        }
    }
    let k = raw.len();
    let mut raw_weights: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for &(u, v) in g.arcs() {
        let (a, b) = (raw_of[u], raw_of[v]);
        if a != b {
            *raw_weights.entry((a, b)).or_default() += 1;
        }
    }
    let mut indeg = vec![0; k];
    let mut succ = vec![Vec::new(); k];
    for &(a, b) in raw_weights.keys() {
        indeg[b] += 1;
        succ[a].push(b);
    }
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = (0..k)
        .filter(|&c| indeg[c] == 0)
        .map(|c| Reverse((raw[c][0], c)))
        .collect();
    let mut order = Vec::with_capacity(k);
    while let Some(Reverse((_, c))) = heap.pop() {
        order.push(c);
        for &d in &succ[c] {
            indeg[d] -= 1;
            if indeg[d] == 0 {
                heap.push(Reverse((raw[d][0], d)));
            }
        }
    }
    let mut rank = vec![0; k];
    for (i, &c) in order.iter().enumerate() {
        rank[c] = i;
    }
    let components: Vec<Vec<usize>> = order.iter().map(|&c| raw[c].clone()).collect();
    let component_of: Vec<usize> = raw_of.iter().map(|&c| rank[c]).collect();
    let weights: BTreeMap<(usize, usize), usize> =
        raw_weights.into_iter().map(|((a, b), w)| ((rank[a], rank[b]), w)).collect();
    let dag = Digraph::new(k, weights.keys().copied()).expect("condensation is simple");
    Condensation { components, component_of, dag, weights }
}

/// Arcs of a DAG that are not implied by a longer path.
pub fn transitive_reduction_dag(dag: &Digraph) -> Vec<(usize, usize)> {
    let reach = dag.reachability();
    dag.arcs()
        .iter()
        .copied()
        .filter(|&(a, b)| !dag.out_neighbors(a).any(|c| c != b && reach.reaches(c, b)))
        .collect()
}

/// Reachability-equivalent subgraph built from an in- and out-branching per
/// strongly connected component plus one arc per required condensation arc.
pub fn med_heuristic(g: &Digraph) -> Digraph {
    let cond = condensation(g);
    let mut keep = BTreeSet::new();
    for comp in cond.components.iter().filter(|c| c.len() > 1) {
        let c = cond.component_of[comp[0]];
        let inside = |v: usize| cond.component_of[v] == c;
        let root = comp[0];
        // out-branching
        let mut seen = vec![false; g.n()];
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            for w in g.out_neighbors(v) {
                if inside(w) && !seen[w] {
                    seen[w] = true;
                    keep.insert((v, w));
                    queue.push_back(w);
                }
            }
        }
        // in-branching
        let mut seen = vec![false; g.n()];
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            for u in g.in_neighbors(v) {
                if inside(u) && !seen[u] {
                    seen[u] = true;
                    keep.insert((u, v));
                    queue.push_back(u);
                }
            }
        }
    }
    for (a, b) in transitive_reduction_dag(&cond.dag) {
        let rep = g
            .arcs()
            .iter()
            .copied()
            .find(|&(u, v)| cond.component_of[u] == a && cond.component_of[v] == b)
            .expect("condensation arc has a representative");
        keep.insert(rep);
    }
    g.subgraph(keep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseSubgraph {
    pub graph: Digraph,
    pub rec: usize,
    /// `5m/k`
    pub bound: f64,
}

pub fn sparse_reachability_subgraph(g: &Digraph) -> Result<SparseSubgraph, GraphError> {
    g.require_no_isolated()?;
    let rec = relative_edge_connectivity(g)?;
    let graph = med_heuristic(g);
    let bound = 5.0 * g.m() as f64 / rec as f64;
    debug_assert!(graph.m() as f64 <= bound);
    Ok(SparseSubgraph { graph, rec, bound })
}

/// Closure of an arc subset on at most 8 vertices, as one byte per row.
fn small_closure(n: usize, arcs: &[(usize, usize)], present: impl Fn(usize) -> bool) -> [u8; 8] {
    let mut rows = [0u8; 8];
    for (v, row) in rows.iter_mut().enumerate().take(n) {
        *row = 1 << v;
    }
    for (id, &(u, v)) in arcs.iter().enumerate() {
        if present(id) {
            rows[u] |= 1 << v;
        }
    }
    loop {
        let mut changed = false;
        for u in 0..n {
            let mut r = rows[u];
            let mut bits = rows[u];
            while bits != 0 {
                let w = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                r |= rows[w];
            }
            if r != rows[u] {
                rows[u] = r;
                changed = true;
            }
        }
        if !changed {
            return rows;
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Choice {
    Undecided,
    In,
    Out,
}

struct MedSearch<'a> {
    n: usize,
    arcs: &'a [(usize, usize)],
    target: [u8; 8],
    intra: Vec<bool>,
    /// For each arc, the required condensation arc it represents (if any).
    required_of: Vec<Option<usize>>,
    required: usize,
    nontrivial: Vec<bool>,
    choice: Vec<Choice>,
}

impl MedSearch<'_> {
    fn lower_bound(&self) -> usize {
        let mut has_out = [false; 8];
        let mut has_in = [false; 8];
        let mut covered = vec![false; self.required];
        for (id, &(u, v)) in self.arcs.iter().enumerate() {
            if self.choice[id] != Choice::In {
                continue;
            }
            if self.intra[id] {
                has_out[u] = true;
                has_in[v] = true;
            }
            if let Some(r) = self.required_of[id] {
                covered[r] = true;
            }
        }
        let need_out = (0..self.n).filter(|&v| self.nontrivial[v] && !has_out[v]).count();
        let need_in = (0..self.n).filter(|&v| self.nontrivial[v] && !has_in[v]).count();
        need_out.max(need_in) + covered.iter().filter(|&&c| !c).count()
    }

    fn closure_ok(&self, allow_undecided: bool) -> bool {
        small_closure(self.n, self.arcs, |id| match self.choice[id] {
            Choice::In => true,
            Choice::Undecided => allow_undecided,
            Choice::Out => false,
        }) == self.target
    }

    fn dfs(&mut self, pos: usize, included: usize, k: usize) -> bool {
        if included + self.lower_bound() > k {
            return false;
        }
        if included == k || pos == self.arcs.len() {
            return self.closure_ok(false);
        }
        self.choice[pos] = Choice::In;
        if self.dfs(pos + 1, included + 1, k) {
            return true;
        }
        self.choice[pos] = Choice::Out;
        if self.closure_ok(true) && self.dfs(pos + 1, included, k) {
            return true;
        }
        self.choice[pos] = Choice::Undecided;
        false
    }
}

/// Minimum equivalent digraph by exhaustive search; among minimum solutions
/// the lexicographically smallest sorted arc list is returned.
pub fn med_exact(g: &Digraph) -> Result<Digraph, GraphError> {
    let n = g.n();
    if n > MED_EXACT_LIMIT {
        return Err(GraphError::TooLarge { n, limit: MED_EXACT_LIMIT });
    }
    let cond = condensation(g);
    let required_arcs = transitive_reduction_dag(&cond.dag);
    let arcs = g.arcs();
    let mut search = MedSearch {
        n,
        arcs,
        target: small_closure(n, arcs, |_| true),
        intra: arcs.iter().map(|&(u, v)| cond.component_of[u] == cond.component_of[v]).collect(),
        required_of: arcs
            .iter()
            .map(|&(u, v)| {
                let key = (cond.component_of[u], cond.component_of[v]);
                required_arcs.iter().position(|&r| r == key)
            })
            .collect(),
        required: required_arcs.len(),
        nontrivial: (0..n).map(|v| !cond.is_trivial(cond.component_of[v])).collect(),
        choice: vec![Choice::Undecided; arcs.len()],
    };
    let start = search.lower_bound();
    for k in start..=arcs.len() {
        search.choice.iter_mut().for_each(|c| *c = Choice::Undecided);
        if search.dfs(0, 0, k) {
            let keep: Vec<_> = (0..arcs.len())
                .filter(|&id| search.choice[id] == Choice::In)
                .map(|id| arcs[id])
                .collect();
            return Ok(g.subgraph(keep));
        }
    }
    unreachable!("the full arc set is always a solution")
}

/// Unit-capacity maximum flow from `s` to `t`; returns its value and the
/// ids of a minimum arc cut (arcs leaving the residual source side).
pub fn min_arc_cut(g: &Digraph, s: usize, t: usize) -> (usize, Vec<usize>) {
    assert_ne!(s, t);
    let m = g.m();
    let mut flow = vec![false; m];
    let mut value = 0;
    let mut parent: Vec<Option<(usize, bool)>> = vec![None; g.n()];
    loop {
        parent.iter_mut().for_each(|p| *p = None);
        let mut seen = vec![false; g.n()];
        seen[s] = true;
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            if v == t {
                break;
            }
            for &a in g.out_arc_ids(v) {
                let w = g.arc(a).1;
                if !flow[a] && !seen[w] {
                    seen[w] = true;
                    parent[w] = Some((a, true));
                    queue.push_back(w);
                }
            }
            for &a in g.in_arc_ids(v) {
                let u = g.arc(a).0;
                if flow[a] && !seen[u] {
                    seen[u] = true;
                    parent[u] = Some((a, false));
                    queue.push_back(u);
                }
            }
        }
        if !seen[t] {
            let cut = (0..m)
                .filter(|&a| {
                    let (u, v) = g.arc(a);
                    seen[u] && !seen[v]
                })
                .collect::<Vec<_>>();
            debug_assert_eq!(cut.len(), value);
            return (value, cut);
        }
        let mut v = t;
        while v != s {
            let (a, forward) = parent[v].unwrap();
            flow[a] = forward;
            v = if forward { g.arc(a).0 } else { g.arc(a).1 };
        }
        value += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecWitness {
    pub rec: usize,
    pub source: usize,
    pub sink: usize,
    /// Arc ids whose removal disconnects `sink` from `source`.
    pub cut: Vec<usize>,
}

/// The reachable pair with the smallest minimum cut (first in lexicographic
/// pair order on ties) and one such cut.
pub fn rec_witness(g: &Digraph) -> Result<RecWitness, GraphError> {
    if g.m() == 0 {
        return Err(GraphError::NoArcs);
    }
    let reach = g.reachability();
    let mut best: Option<RecWitness> = None;
    for (s, t) in reach.pairs() {
        let (rec, cut) = min_arc_cut(g, s, t);
        if best.as_ref().is_none_or(|b| rec < b.rec) {
            best = Some(RecWitness { rec, source: s, sink: t, cut });
            if rec == 1 {
                break;
            }
        }
    }
    best.ok_or(GraphError::NoReachablePair)
}

pub fn relative_edge_connectivity(g: &Digraph) -> Result<usize, GraphError> {
    rec_witness(g).map(|w| w.rec)
}

pub fn signal_diameter(g: &Digraph) -> Result<usize, GraphError> {
    let mut best = None;
    for s in 0..g.n() {
        for (t, d) in g.distances_from(s).into_iter().enumerate() {
            if t != s {
                if let Some(d) = d {
                    best = best.max(Some(d));
                }
            }
        }
    }
    best.ok_or(GraphError::NoReachablePair)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainWalk {
    pub chain_length: usize,
    pub walk: Vec<usize>,
    /// Occurrences of each vertex in `walk`.
    pub visits: Vec<usize>,
}

impl ChainWalk {
    pub fn distinct(&self) -> usize {
        self.visits.iter().filter(|&&f| f > 0).count()
    }
}

/// Chain-length via a longest-path DP over the condensation (each component
/// weighted by its size), together with a walk attaining it.
pub fn chain_length_walk(g: &Digraph) -> Result<ChainWalk, GraphError> {
    if g.m() == 0 {
        return Err(GraphError::NoArcs);
    }
    let cond = condensation(g);
    let k = cond.components.len();
    let mut best = vec![0usize; k];
    let mut pred = vec![None; k];
    for c in 0..k {
        // components are in topological order, so predecessors come first
        let mut top = 0;
        for p in cond.dag.in_neighbors(c) {
            if best[p] > top {
                top = best[p];
                pred[c] = Some(p);
            }
        }
        best[c] = top + cond.components[c].len();
    }
    let mut end = 0;
    for c in 0..k {
        if best[c] > best[end] {
            end = c;
        }
    }
    let mut chain = vec![end];
    while let Some(p) = pred[*chain.last().unwrap()] {
        chain.push(p);
    }
    chain.reverse();
    let targets: Vec<usize> = chain.iter().flat_map(|&c| cond.components[c].iter().copied()).collect();
    let mut walk = vec![targets[0]];
    for &t in &targets[1..] {
        let from = *walk.last().unwrap();
        let path = g.shortest_path(from, t).expect("chain targets are reachable in order");
        walk.extend_from_slice(&path[1..]);
    }
    let mut visits = vec![0; g.n()];
    for &v in &walk {
        visits[v] += 1;
    }
    Ok(ChainWalk { chain_length: best[end], walk, visits })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphMetrics {
    pub n: usize,
    pub m: usize,
    pub edge_connectivity_relative: usize,
    pub signal_diameter: usize,
    pub chain_length: usize,
    pub med_size: usize,
    /// Whether `med_size` came from the exact search.
    pub med_exact: bool,
}

pub fn metrics(g: &Digraph) -> Result<GraphMetrics, GraphError> {
    let (med_size, exact) = match med_exact(g) {
        Ok(med) => (med.m(), true),
        Err(_) => (med_heuristic(g).m(), false),
    };
    Ok(GraphMetrics {
        n: g.n(),
        m: g.m(),
        edge_connectivity_relative: relative_edge_connectivity(g)?,
        signal_diameter: signal_diameter(g)?,
        chain_length: chain_length_walk(g)?.chain_length,
        med_size,
        med_exact: exact,
    })
}
