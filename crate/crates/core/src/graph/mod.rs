//! Simple digraphs on parties `0..n` and the graph parameters the compilers
//! and adversaries consume.

mod algo;
pub mod generators;

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use algo::{
    chain_length_walk, condensation, med_exact, med_heuristic, metrics, min_arc_cut,
    relative_edge_connectivity, rec_witness, signal_diameter, sparse_reachability_subgraph,
    transitive_reduction_dag, ChainWalk, Condensation, GraphMetrics, RecWitness, SparseSubgraph,
    MED_EXACT_LIMIT,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("arc ({0}, {0}) is a loop")]
    Loop(usize),
    #[error("arc ({0}, {1}) references a vertex outside 0..{2}")]
    OutOfRange(usize, usize, usize),
    #[error("duplicate arc ({0}, {1})")]
    Duplicate(usize, usize),
    #[error("graph has no arcs")]
    NoArcs,
    #[error("no ordered pair of distinct vertices is reachable")]
    NoReachablePair,
    #[error("exact search is limited to n <= {limit}, got n = {n}")]
    TooLarge { n: usize, limit: usize },
    #[error("vertex {0} is isolated")]
    IsolatedVertex(usize),
    #[error("graph is not symmetric (arc ({0}, {1}) has no reverse)")]
    NotSymmetric(usize, usize),
    #[error("graph is not connected")]
    NotConnected,
    #[error("edge list line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// A simple directed graph. Arcs are kept sorted, so an arc id is its rank
/// in lexicographic `(tail, head)` order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DigraphRepr", into = "DigraphRepr")]
pub struct Digraph {
    n: usize,
    arcs: Vec<(usize, usize)>,
    out_ids: Vec<Vec<usize>>,
    in_ids: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct DigraphRepr {
    n: usize,
    arcs: Vec<(usize, usize)>,
}

impl TryFrom<DigraphRepr> for Digraph {
    type Error = GraphError;
    fn try_from(r: DigraphRepr) -> Result<Self, GraphError> {
        Digraph::new(r.n, r.arcs)
    }
}

impl From<Digraph> for DigraphRepr {
    fn from(g: Digraph) -> Self {
        DigraphRepr { n: g.n, arcs: g.arcs }
    }
}

impl Digraph {
    pub fn new(n: usize, arcs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, GraphError> {
        let mut set = BTreeSet::new();
        for (u, v) in arcs {
            if u >= n || v >= n {
                return Err(GraphError::OutOfRange(u, v, n));
            }
            if u == v {
                return Err(GraphError::Loop(u));
            }
            if !set.insert((u, v)) {
                return Err(GraphError::Duplicate(u, v));
            }
        }
        let arcs: Vec<_> = set.into_iter().collect();
        let mut out_ids = vec![Vec::new(); n];
        let mut in_ids = vec![Vec::new(); n];
        for (id, &(u, v)) in arcs.iter().enumerate() {
            out_ids[u].push(id);
            in_ids[v].push(id);
        }
        Ok(Digraph { n, arcs, out_ids, in_ids })
    }

    /// The graph on `n` vertices with no arcs.
    pub fn empty(n: usize) -> Self {
        Digraph::new(n, []).expect("empty graph is valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.arcs.len()
    }

    pub fn arcs(&self) -> &[(usize, usize)] {
        &self.arcs
    }

    pub fn arc(&self, id: usize) -> (usize, usize) {
        self.arcs[id]
    }

    pub fn arc_id(&self, u: usize, v: usize) -> Option<usize> {
        self.arcs.binary_search(&(u, v)).ok()
    }

    pub fn has_arc(&self, u: usize, v: usize) -> bool {
        self.arc_id(u, v).is_some()
    }

    /// Ids of arcs leaving `v`, ordered by head.
    pub fn out_arc_ids(&self, v: usize) -> &[usize] {
        &self.out_ids[v]
    }

    /// Ids of arcs entering `v`, ordered by tail.
    pub fn in_arc_ids(&self, v: usize) -> &[usize] {
        &self.in_ids[v]
    }

    pub fn out_neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.out_ids[v].iter().map(move |&a| self.arcs[a].1)
    }

    pub fn in_neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.in_ids[v].iter().map(move |&a| self.arcs[a].0)
    }

    pub fn out_degree(&self, v: usize) -> usize {
        self.out_ids[v].len()
    }

    pub fn in_degree(&self, v: usize) -> usize {
        self.in_ids[v].len()
    }

    /// Subgraph on the same vertex set keeping only `arcs` (which must be arcs of `self`).
    pub fn subgraph(&self, arcs: impl IntoIterator<Item = (usize, usize)>) -> Digraph {
        let sub = Digraph::new(self.n, arcs).expect("subgraph arcs are valid");
        debug_assert!(sub.arcs.iter().all(|&(u, v)| self.has_arc(u, v)));
        sub
    }

    pub fn is_subgraph_of(&self, other: &Digraph) -> bool {
        self.n == other.n && self.arcs.iter().all(|&(u, v)| other.has_arc(u, v))
    }

    pub fn reverse(&self) -> Digraph {
        Digraph::new(self.n, self.arcs.iter().map(|&(u, v)| (v, u))).expect("reverse is simple")
    }

    pub fn is_symmetric(&self) -> bool {
        self.asymmetric_arc().is_none()
    }

    fn asymmetric_arc(&self) -> Option<(usize, usize)> {
        self.arcs.iter().copied().find(|&(u, v)| !self.has_arc(v, u))
    }

    /// Fails unless the graph is symmetric and connected.
    pub fn require_undirected_connected(&self) -> Result<(), GraphError> {
        if let Some((u, v)) = self.asymmetric_arc() {
            return Err(GraphError::NotSymmetric(u, v));
        }
        if !self.is_weakly_connected() {
            return Err(GraphError::NotConnected);
        }
        Ok(())
    }

    pub fn isolated_vertices(&self) -> Vec<usize> {
        (0..self.n)
            .filter(|&v| self.out_ids[v].is_empty() && self.in_ids[v].is_empty())
            .collect()
    }

    pub fn require_no_isolated(&self) -> Result<(), GraphError> {
        match self.isolated_vertices().first() {
            Some(&v) => Err(GraphError::IsolatedVertex(v)),
            None => Ok(()),
        }
    }

    pub fn is_weakly_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for w in self.out_neighbors(v).chain(self.in_neighbors(v)) {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Unordered edges `{u, v}` with `u < v` present in either direction.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let set: BTreeSet<_> = self.arcs.iter().map(|&(u, v)| (u.min(v), u.max(v))).collect();
        set.into_iter().collect()
    }

    /// BFS distances from `src`; `None` where unreachable.
    pub fn distances_from(&self, src: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(v) = queue.pop_front() {
            let d = dist[v].unwrap();
            for w in self.out_neighbors(v) {
                if dist[w].is_none() {
                    dist[w] = Some(d + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    pub fn all_pairs_distances(&self) -> Vec<Vec<Option<usize>>> {
        (0..self.n).map(|s| self.distances_from(s)).collect()
    }

    /// A shortest directed path from `src` to `dst` as a vertex sequence,
    /// preferring lower-index vertices on ties.
    pub fn shortest_path(&self, src: usize, dst: usize) -> Option<Vec<usize>> {
        let mut parent = vec![usize::MAX; self.n];
        parent[src] = src;
        let mut queue = VecDeque::from([src]);
        while let Some(v) = queue.pop_front() {
            if v == dst {
                break;
            }
            for w in self.out_neighbors(v) {
                if parent[w] == usize::MAX {
                    parent[w] = v;
                    queue.push_back(w);
                }
            }
        }
        if parent[dst] == usize::MAX {
            return None;
        }
        let mut path = vec![dst];
        let mut v = dst;
        while v != src {
            v = parent[v];
            path.push(v);
        }
        path.reverse();
        Some(path)
    }

    /// Reflexive-transitive closure.
    pub fn reachability(&self) -> Reachability {
        Reachability::of(self, None)
    }

    /// Closure of the subgraph keeping arcs whose `present` flag is set.
    pub fn reachability_masked(&self, present: &[bool]) -> Reachability {
        Reachability::of(self, Some(present))
    }

    pub fn is_reachability_equivalent(&self, other: &Digraph) -> bool {
        self.n == other.n && self.reachability() == other.reachability()
    }

    /// Plain-text edge list: `n` on the first line, then one `i j` per arc.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("{}\n", self.n);
        for &(u, v) in &self.arcs {
            let _ = writeln!(s, "{u} {v}");
        }
        s
    }

    pub fn parse_edge_list(text: &str) -> Result<Digraph, GraphError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let (line, first) = lines.next().ok_or(GraphError::Parse {
            line: 1,
            msg: "missing vertex count".into(),
        })?;
        let n: usize = first.parse().map_err(|_| GraphError::Parse {
            line,
            msg: format!("expected vertex count, got {first:?}"),
        })?;
        let mut arcs = Vec::new();
        for (line, l) in lines {
            let mut it = l.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(u)), Some(Ok(v)), None) => arcs.push((u, v)),
                _ => {
                    return Err(GraphError::Parse {
                        line,
                        msg: format!("expected `i j`, got {l:?}"),
                    })
                }
            }
        }
        Digraph::new(n, arcs)
    }
}

/// Reachability relation as bitset rows; `row(u)` contains `u` itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reachability {
    n: usize,
    words: usize,
    bits: Vec<u64>,
}

impl Reachability {
    fn of(g: &Digraph, present: Option<&[bool]>) -> Self {
        let n = g.n;
        let words = n.div_ceil(64).max(1);
        let mut bits = vec![0u64; n * words];
        let mut stack = Vec::with_capacity(n);
        for s in 0..n {
            let row = &mut bits[s * words..(s + 1) * words];
            row[s / 64] |= 1 << (s % 64);
            stack.push(s);
            while let Some(v) = stack.pop() {
                for &a in &g.out_ids[v] {
                    if present.is_some_and(|p| !p[a]) {
                        continue;
                    }
                    let w = g.arcs[a].1;
                    if row[w / 64] & (1 << (w % 64)) == 0 {
                        row[w / 64] |= 1 << (w % 64);
                        stack.push(w);
                    }
                }
            }
        }
        Reachability { n, words, bits }
    }

    pub fn reaches(&self, u: usize, v: usize) -> bool {
        self.bits[u * self.words + v / 64] & (1 << (v % 64)) != 0
    }

    /// Ordered pairs `(u, v)`, `u != v`, with `v` reachable from `u`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |u| {
            (0..self.n).filter(move |&v| v != u && self.reaches(u, v)).map(move |v| (u, v))
        })
    }
}
