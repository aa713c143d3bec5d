//! Deterministic synchronous protocols: the universal protocol driven by
//! lazily materialized transmission functions, the dummy-party wrapper, and
//! the noiseless reference executor.

use std::cell::Cell;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Digraph;
use crate::util::{absorb, hash_words, mix64, stream};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("protocol horizon must be at least one round")]
    ZeroRounds,
    #[error("degree {0} exceeds the 64-bit block limit")]
    DegreeTooLarge(usize),
    #[error("party {party}: transmission function is ({found_in}, {found_out}, T={found_t}) but the graph requires ({want_in}, {want_out}, T={want_t})")]
    Mismatch {
        party: usize,
        found_in: usize,
        found_out: usize,
        found_t: usize,
        want_in: usize,
        want_out: usize,
        want_t: usize,
    },
    #[error("expected {expected} transmission functions, got {found}")]
    PartyCount { expected: usize, found: usize },
    #[error("invalid tree address: {0}")]
    InvalidAddress(String),
}

/// Counts black-box queries made during one execution.
#[derive(Debug, Default)]
pub struct QueryCounter(Cell<u64>);

impl QueryCounter {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn bump(&self, k: u64) {
        self.0.set(self.0.get() + k);
    }
    pub fn get(&self) -> u64 {
        self.0.get()
    }
}

/// A node of a transmission-function tree: one `d⁻`-bit block per round of
/// received history, bit `k` of a block being the bit from the `k`-th in-arc.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeAddress(pub Vec<u64>);

impl NodeAddress {
    pub fn root() -> Self {
        NodeAddress(Vec::new())
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    /// Canonical byte serialization: each block as little-endian bytes,
    /// `⌈d⁻/8⌉` bytes per block.
    pub fn to_bytes(&self, in_degree: usize) -> Vec<u8> {
        let width = in_degree.div_ceil(8);
        self.0.iter().flat_map(|b| b.to_le_bytes().into_iter().take(width)).collect()
    }
}

/// Packs per-arc bits at one round into a block.
pub fn pack_block(bits: impl IntoIterator<Item = bool>) -> u64 {
    bits.into_iter().enumerate().fold(0, |acc, (k, b)| acc | (u64::from(b) << k))
}

/// A party's input to the universal protocol: a complete `2^{d⁻}`-ary tree of
/// depth `T` with `d⁺`-bit labels, generated on demand from a seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransmissionFunction {
    pub seed: u64,
    pub in_degree: usize,
    pub out_degree: usize,
    pub depth: usize,
}

const LABEL_SALT: u64 = 0x5bd1_e995_7f4a_7c15;

impl TransmissionFunction {
    pub fn random(seed: u64, in_degree: usize, out_degree: usize, depth: usize) -> Result<Self, ProtocolError> {
        if depth == 0 {
            return Err(ProtocolError::ZeroRounds);
        }
        for d in [in_degree, out_degree] {
            if d > 64 {
                return Err(ProtocolError::DegreeTooLarge(d));
            }
        }
        Ok(TransmissionFunction { seed, in_degree, out_degree, depth })
    }

    fn block_mask(d: usize) -> u64 {
        if d == 64 {
            u64::MAX
        } else {
            (1u64 << d) - 1
        }
    }

    pub fn root_state(&self) -> u64 {
        hash_words(&[self.seed, self.in_degree as u64, self.out_degree as u64, self.depth as u64])
    }

    pub fn child_state(&self, state: u64, block: u64) -> u64 {
        absorb(state, block)
    }

    /// Label of the node whose hash state is `state` (no query accounting).
    pub fn label_at_state(&self, state: u64) -> u64 {
        mix64(state ^ LABEL_SALT) & Self::block_mask(self.out_degree)
    }

    pub fn validate(&self, node: &NodeAddress) -> Result<(), ProtocolError> {
        if node.depth() >= self.depth {
            return Err(ProtocolError::InvalidAddress(format!(
                "depth {} but labels exist only to depth {}",
                node.depth(),
                self.depth - 1
            )));
        }
        let mask = Self::block_mask(self.in_degree);
        if let Some(b) = node.0.iter().find(|&&b| b & !mask != 0) {
            return Err(ProtocolError::InvalidAddress(format!(
                "block {b:#x} wider than {} bits",
                self.in_degree
            )));
        }
        Ok(())
    }

    /// Black-box query: the label at `node`, counted against `queries`.
    pub fn query(&self, node: &NodeAddress, queries: &QueryCounter) -> Result<u64, ProtocolError> {
        self.validate(node)?;
        queries.bump(1);
        let state = node.0.iter().fold(self.root_state(), |s, &b| self.child_state(s, b));
        Ok(self.label_at_state(state))
    }
}

/// The root-to-leaf path followed in a noiseless run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruePath {
    pub blocks: Vec<u64>,
}

impl TruePath {
    pub fn from_incoming(incoming: &[Vec<bool>], rounds: usize) -> Self {
        TruePath { blocks: (0..rounds).map(|t| pack_block(incoming.iter().map(|tr| tr[t]))).collect() }
    }

    /// Nodes visited, root first.
    pub fn nodes(&self) -> Vec<NodeAddress> {
        (0..=self.blocks.len()).map(|d| NodeAddress(self.blocks[..d].to_vec())).collect()
    }
}

/// A deterministic protocol where round `τ` bits depend only on the first
/// `τ − 1` bits of each incoming transcript.
pub trait Protocol: Send + Sync + fmt::Debug {
    fn graph(&self) -> &Digraph;

    fn rounds(&self) -> usize;

    /// Rows for rounds `1..=len+1` of `party`'s out-arcs (in out-arc order),
    /// given the first `len` bits of each incoming transcript (in in-arc
    /// order). Rounds beyond the horizon are all zero.
    fn transmissions(&self, party: usize, incoming: &[&[bool]], len: usize, queries: &QueryCounter) -> Vec<Vec<bool>>;

    /// Output given complete incoming transcripts of `rounds()` bits.
    fn output(&self, party: usize, incoming: &[&[bool]]) -> Vec<bool>;
}

/// The universal protocol: every party follows its transmission function and
/// outputs everything it received.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniversalProtocol {
    graph: Digraph,
    rounds: usize,
    functions: Vec<TransmissionFunction>,
}

impl UniversalProtocol {
    pub fn new(graph: Digraph, rounds: usize, functions: Vec<TransmissionFunction>) -> Result<Self, ProtocolError> {
        if rounds == 0 {
            return Err(ProtocolError::ZeroRounds);
        }
        if functions.len() != graph.n() {
            return Err(ProtocolError::PartyCount { expected: graph.n(), found: functions.len() });
        }
        for (party, f) in functions.iter().enumerate() {
            let (want_in, want_out) = (graph.in_degree(party), graph.out_degree(party));
            if (f.in_degree, f.out_degree, f.depth) != (want_in, want_out, rounds) {
                return Err(ProtocolError::Mismatch {
                    party,
                    found_in: f.in_degree,
                    found_out: f.out_degree,
                    found_t: f.depth,
                    want_in,
                    want_out,
                    want_t: rounds,
                });
            }
        }
        Ok(UniversalProtocol { graph, rounds, functions })
    }

    /// Independent uniformly random inputs, one seed per party derived from `seed`.
    pub fn random(graph: Digraph, rounds: usize, seed: u64) -> Result<Self, ProtocolError> {
        let functions = (0..graph.n())
            .map(|p| {
                let s = hash_words(&[seed, stream::INPUTS, p as u64]);
                TransmissionFunction::random(s, graph.in_degree(p), graph.out_degree(p), rounds)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(graph, rounds, functions)
    }

    pub fn functions(&self) -> &[TransmissionFunction] {
        &self.functions
    }
}

impl Protocol for UniversalProtocol {
    fn graph(&self) -> &Digraph {
        &self.graph
    }

    fn rounds(&self) -> usize {
        self.rounds
    }

    fn transmissions(&self, party: usize, incoming: &[&[bool]], len: usize, queries: &QueryCounter) -> Vec<Vec<bool>> {
        let f = &self.functions[party];
        let d_out = f.out_degree;
        let mut rows = Vec::with_capacity(len + 1);
        let mut state = f.root_state();
        for t in 0..=len {
            if t >= self.rounds {
                rows.push(vec![false; d_out]);
                continue;
            }
            let label = f.label_at_state(state);
            queries.bump(1);
            rows.push((0..d_out).map(|k| label >> k & 1 == 1).collect());
            if t < len {
                state = f.child_state(state, pack_block(incoming.iter().map(|tr| tr[t])));
            }
        }
        rows
    }

    fn output(&self, _party: usize, incoming: &[&[bool]]) -> Vec<bool> {
        incoming.iter().flat_map(|tr| tr[..self.rounds].iter().copied()).collect()
    }
}

/// Adds a dummy copy `n + j` of every party; each ordinary arc `(j, i)` gets
/// a dummy arc `(i, n + j)` on which `i` echoes, one round late, what it
/// received from `j`. The horizon grows by one round.
#[derive(Debug, Clone)]
pub struct DummyWrapped {
    inner: Arc<dyn Protocol>,
    graph: Digraph,
}

impl DummyWrapped {
    pub fn new(inner: Arc<dyn Protocol>) -> Self {
        let g = inner.graph();
        let n = g.n();
        let arcs = g.arcs().iter().copied().chain(g.arcs().iter().map(|&(j, i)| (i, n + j)));
        let graph = Digraph::new(2 * n, arcs).expect("dummy arcs are fresh");
        DummyWrapped { inner, graph }
    }

    pub fn inner(&self) -> &Arc<dyn Protocol> {
        &self.inner
    }

    pub fn original_n(&self) -> usize {
        self.inner.graph().n()
    }
}

impl Protocol for DummyWrapped {
    fn graph(&self) -> &Digraph {
        &self.graph
    }

    fn rounds(&self) -> usize {
        self.inner.rounds() + 1
    }

    fn transmissions(&self, party: usize, incoming: &[&[bool]], len: usize, queries: &QueryCounter) -> Vec<Vec<bool>> {
        let n = self.original_n();
        if party >= n {
            return vec![Vec::new(); len + 1];
        }
        let t = self.inner.rounds();
        let inner_len = len.min(t - 1);
        let inner_rows = self.inner.transmissions(party, incoming, inner_len, queries);
        let d_out = self.inner.graph().out_degree(party);
        (0..=len)
            .map(|r| {
                // r is the zero-based round index
                let mut row = if r < t { inner_rows[r].clone() } else { vec![false; d_out] };
                row.extend(incoming.iter().map(|tr| r >= 1 && r <= t && tr[r - 1]));
                row
            })
            .collect()
    }

    fn output(&self, party: usize, incoming: &[&[bool]]) -> Vec<bool> {
        let n = self.original_n();
        if party >= n {
            return incoming.iter().flat_map(|tr| tr.iter().copied()).collect();
        }
        let t = self.inner.rounds();
        let trimmed: Vec<&[bool]> = incoming.iter().map(|tr| &tr[..t]).collect();
        self.inner.output(party, &trimmed)
    }
}

/// Relays an `L`-bit input from the first vertex of a path to the last,
/// one bit per round per hop. The last vertex outputs the `L` bits it
/// received; every other party outputs nothing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayProtocol {
    graph: Digraph,
    path: Vec<usize>,
    input: Vec<bool>,
}

impl RelayProtocol {
    /// `path` must be a directed path in `graph`; other arcs stay silent at zero.
    pub fn new(graph: Digraph, path: Vec<usize>, input: Vec<bool>) -> Result<Self, ProtocolError> {
        if input.is_empty() {
            return Err(ProtocolError::ZeroRounds);
        }
        if path.len() < 2 || path.windows(2).any(|w| !graph.has_arc(w[0], w[1])) {
            return Err(ProtocolError::InvalidAddress(format!("{path:?} is not a path of the graph")));
        }
        Ok(RelayProtocol { graph, path, input })
    }

    /// Input bits packed little-endian from `x`.
    pub fn with_input_word(graph: Digraph, path: Vec<usize>, bits: usize, x: u64) -> Result<Self, ProtocolError> {
        Self::new(graph, path, (0..bits).map(|k| x >> k & 1 == 1).collect())
    }

    pub fn input(&self) -> &[bool] {
        &self.input
    }

    fn hop(&self, party: usize) -> Option<usize> {
        self.path.iter().position(|&v| v == party)
    }
}

impl Protocol for RelayProtocol {
    fn graph(&self) -> &Digraph {
        &self.graph
    }

    fn rounds(&self) -> usize {
        self.input.len() + self.path.len() - 2
    }

    fn transmissions(&self, party: usize, incoming: &[&[bool]], len: usize, _queries: &QueryCounter) -> Vec<Vec<bool>> {
        let outs = self.graph.out_arc_ids(party);
        let mut rows = vec![vec![false; outs.len()]; len + 1];
        let Some(h) = self.hop(party) else { return rows };
        let Some(&next) = self.path.get(h + 1) else { return rows };
        let k = self.graph.out_neighbors(party).position(|v| v == next).expect("path arc");
        let from = (h > 0).then(|| {
            let prev = self.path[h - 1];
            self.graph.in_neighbors(party).position(|v| v == prev).expect("path arc")
        });
        for (r, row) in rows.iter_mut().enumerate() {
            // zero-based round r carries input bit r − h
            row[k] = match from {
                None => self.input.get(r).copied().unwrap_or(false),
                Some(q) => r >= 1 && r - 1 < len && r - 1 >= h - 1 && r - h < self.input.len() && incoming[q][r - 1],
            };
        }
        rows
    }

    fn output(&self, party: usize, incoming: &[&[bool]]) -> Vec<bool> {
        let h = self.path.len() - 1;
        if self.hop(party) != Some(h) {
            return Vec::new();
        }
        let prev = self.path[h - 1];
        let q = self.graph.in_neighbors(party).position(|v| v == prev).expect("path arc");
        incoming[q][h - 1..h - 1 + self.input.len()].to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiselessRun {
    /// Per arc id, the bit sent in each round.
    pub transcripts: Vec<Vec<bool>>,
    pub outputs: Vec<Vec<bool>>,
    pub true_paths: Vec<TruePath>,
    pub queries: u64,
}

impl NoiselessRun {
    /// Incoming transcripts of `party` in in-arc order.
    pub fn incoming(&self, g: &Digraph, party: usize) -> Vec<&[bool]> {
        g.in_arc_ids(party).iter().map(|&a| self.transcripts[a].as_slice()).collect()
    }
}

/// Runs `p` with no channel noise.
pub fn run_noiseless(p: &dyn Protocol) -> NoiselessRun {
    let g = p.graph();
    let t = p.rounds();
    let queries = QueryCounter::new();
    let mut transcripts = vec![Vec::with_capacity(t); g.m()];
    for r in 0..t {
        let rows: Vec<Vec<bool>> = (0..g.n())
            .map(|party| {
                let incoming: Vec<&[bool]> =
                    g.in_arc_ids(party).iter().map(|&a| transcripts[a].as_slice()).collect();
                p.transmissions(party, &incoming, r, &queries).swap_remove(r)
            })
            .collect();
        for (party, row) in rows.into_iter().enumerate() {
            for (k, &a) in g.out_arc_ids(party).iter().enumerate() {
                transcripts[a].push(row[k]);
            }
        }
    }
    let mut outputs = Vec::with_capacity(g.n());
    let mut true_paths = Vec::with_capacity(g.n());
    for party in 0..g.n() {
        let incoming: Vec<&[bool]> = g.in_arc_ids(party).iter().map(|&a| transcripts[a].as_slice()).collect();
        outputs.push(p.output(party, &incoming));
        let owned: Vec<Vec<bool>> = incoming.iter().map(|s| s.to_vec()).collect();
        true_paths.push(TruePath::from_incoming(&owned, t));
    }
    NoiselessRun { transcripts, outputs, true_paths, queries: queries.get() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_counts_and_validation() {
        let f = TransmissionFunction::random(1, 2, 1, 3).unwrap();
        let q = QueryCounter::new();
        let root = f.query(&NodeAddress::root(), &q).unwrap();
        assert_eq!(q.get(), 1);
        assert_eq!(f.query(&NodeAddress::root(), &q).unwrap(), root);
        assert_eq!(q.get(), 2);
        assert!(f.query(&NodeAddress(vec![4]), &q).is_err());
        assert!(f.query(&NodeAddress(vec![0, 0, 0]), &q).is_err());
        assert_eq!(q.get(), 2);
        assert!(TransmissionFunction::random(1, 1, 1, 0).is_err());
    }

    #[test]
    fn address_bytes_are_little_endian() {
        assert_eq!(NodeAddress(vec![0x0102, 3]).to_bytes(9), vec![2, 1, 3, 0]);
    }

    #[test]
    fn dummy_graph_shape() {
        let g = Digraph::new(2, [(0, 1)]).unwrap();
        let p = UniversalProtocol::random(g, 2, 0).unwrap();
        let w = DummyWrapped::new(Arc::new(p));
        assert_eq!(w.graph().arcs(), &[(0, 1), (1, 2)]);
        assert_eq!(w.rounds(), 3);
    }

    #[test]
    fn relay_delivers_input() {
        let g = crate::graph::generators::directed_path(3);
        let input = vec![true, false, true, true];
        let p = RelayProtocol::new(g, vec![0, 1, 2], input.clone()).unwrap();
        assert_eq!(p.rounds(), 5);
        let run = run_noiseless(&p);
        assert_eq!(run.outputs[2], input);
        assert!(run.outputs[0].is_empty());
        assert_eq!(run.transcripts[1], vec![false, true, false, true, true]);
    }
}
