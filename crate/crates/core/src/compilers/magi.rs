use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{check_vertices, map_arcs, CompileError};
use crate::adversaries::random_noise;
use crate::graph::{generators, Digraph};
use crate::netsim::{self, Adversary, AdversaryView, Budget, ExecOptions, PartyContext, PartyMachine};
use crate::protocol::UniversalProtocol;
use crate::rs::{self, RsCompiled, RsParty, STEP_ROUNDS};
use crate::treecode::TreeCodeConfig;
use crate::util::{hash_words, stream};

/// Round-error constant used when none is supplied; half the smallest
/// fraction of noisy rounds seen in the [`calibrate_eta`] suite.
pub const DEFAULT_ETA: f64 = 1.0 / 63.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagiConfig {
    /// Common-neighbour fraction to design for; defaults to the graph's own.
    pub epsilon: Option<f64>,
    pub eta: f64,
    pub shared_seed: u64,
}

impl Default for MagiConfig {
    fn default() -> Self {
        MagiConfig { epsilon: None, eta: DEFAULT_ETA, shared_seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagiParams {
    pub epsilon: f64,
    pub eta: f64,
    pub alpha: f64,
    /// Arc count entering the segment length.
    pub arcs: usize,
    pub ell: usize,
}

impl MagiParams {
    /// `α = η/4`, `ℓ = ⌈(24/ε)·ln(2m/α)⌉`.
    pub fn new(arcs: usize, epsilon: f64, eta: f64) -> Self {
        let alpha = eta / 4.0;
        let ell = ((24.0 / epsilon) * (2.0 * arcs as f64 / alpha).ln()).ceil() as usize;
        MagiParams { epsilon, eta, alpha, arcs, ell }
    }

    pub fn segment_rounds(&self) -> usize {
        2 * self.ell
    }

    /// Flips per segment under which a simulated bit is wrong with
    /// probability at most `α`: `⌊εnℓ/32⌋`.
    pub fn segment_flips(&self, n: usize) -> usize {
        (self.epsilon * n as f64 * self.ell as f64 / 32.0).floor() as usize
    }

    /// Global rate `ηεn/(128m)`.
    pub fn declared_rate(&self, n: usize) -> f64 {
        self.eta * self.epsilon * n as f64 / (128.0 * self.arcs as f64)
    }
}

/// Relays `k` that can carry arc `(u, v)`: `u → k → v` both present.
pub fn common_neighbors(g: &Digraph, u: usize, v: usize) -> usize {
    g.out_neighbors(u).filter(|&k| k != v && g.has_arc(k, v)).count()
}

/// Smallest relay count over all arcs, divided by `n`.
pub fn min_common_fraction(g: &Digraph) -> f64 {
    g.arcs().iter().map(|&(u, v)| common_neighbors(g, u, v)).min().unwrap_or(0) as f64 / g.n() as f64
}

/// Shared randomness and topology of one magi-coded network.
#[derive(Debug, Clone)]
pub struct MagiLayer {
    graph: Arc<Digraph>,
    params: MagiParams,
    shared_seed: u64,
}

impl MagiLayer {
    pub fn new(graph: Digraph, params: MagiParams, shared_seed: u64) -> Result<Self, CompileError> {
        if let Some(&(u, v)) = graph.arcs().iter().find(|&&(u, v)| !graph.has_arc(v, u)) {
            return Err(crate::graph::GraphError::NotSymmetric(u, v).into());
        }
        let need = params.epsilon * graph.n() as f64;
        for &(u, v) in graph.arcs() {
            let found = common_neighbors(&graph, u, v);
            if (found as f64) < need || found == 0 {
                return Err(CompileError::CommonNeighbors { u, v, found, need });
            }
        }
        Ok(MagiLayer { graph: Arc::new(graph), params, shared_seed })
    }

    pub fn graph(&self) -> &Digraph {
        &self.graph
    }

    pub fn params(&self) -> &MagiParams {
        &self.params
    }

    pub fn with_seed(&self, shared_seed: u64) -> Self {
        MagiLayer { shared_seed, ..self.clone() }
    }

    fn draw(&self, seg: usize, it: usize) -> usize {
        (hash_words(&[self.shared_seed, stream::SHARED, seg as u64, it as u64]) % self.graph.n() as u64) as usize
    }

    fn pad(&self, seg: usize, it: usize, i: usize, j: usize, which: u64) -> bool {
        hash_words(&[self.shared_seed, stream::SHARED, seg as u64, it as u64, i as u64, j as u64, which]) & 1 == 1
    }

    fn filler(&self, seg: usize, it: usize, u: usize, v: usize, phase: usize) -> bool {
        self.pad(seg, it, u, v, 2 + phase as u64)
    }

    /// The third index completing `a + b + c ≡ r (mod n)`.
    fn third(&self, r: usize, a: usize, b: usize) -> usize {
        let n = self.graph.n();
        (r + 2 * n - a - b) % n
    }
}

/// Wraps a party machine so that each of its rounds becomes one segment of
/// `ℓ` two-round relay iterations followed by a majority vote.
#[derive(Debug, Clone)]
pub struct MagiParty<M> {
    layer: Arc<MagiLayer>,
    party: usize,
    inner: M,
    out_arcs: Vec<usize>,
    in_arcs: Vec<usize>,
    out_to: Vec<usize>,
    in_from: Vec<usize>,
    /// Vertex → position among the inner machine's out-arcs / in-arcs.
    inner_out_pos: Vec<Option<usize>>,
    inner_in_pos: Vec<Option<usize>>,
    inner_in_count: usize,
    bits: Vec<bool>,
    /// Per in-arc, the padded bit received in the first half of an iteration.
    relay: Vec<Option<bool>>,
    votes: Vec<[u32; 2]>,
}

impl<M: PartyMachine> MagiParty<M> {
    pub fn new(layer: Arc<MagiLayer>, exec: &Digraph, party: usize, inner: M) -> Result<Self, CompileError> {
        let g = layer.graph.clone();
        let (out_arcs, in_arcs) = map_arcs(&g, exec, party)?;
        let n = g.n();
        let mut inner_out_pos = vec![None; n];
        for (k, &a) in inner.out_arcs().iter().enumerate() {
            inner_out_pos[exec.arc(a).1] = Some(k);
        }
        let mut inner_in_pos = vec![None; n];
        for (k, &a) in inner.in_arcs().iter().enumerate() {
            inner_in_pos[exec.arc(a).0] = Some(k);
        }
        let inner_in_count = inner.in_arcs().len();
        Ok(MagiParty {
            out_to: g.out_neighbors(party).collect(),
            in_from: g.in_neighbors(party).collect(),
            relay: vec![None; in_arcs.len()],
            votes: vec![[0, 0]; inner_in_count],
            bits: Vec::new(),
            layer,
            party,
            inner,
            out_arcs,
            in_arcs,
            inner_out_pos,
            inner_in_pos,
            inner_in_count,
        })
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    fn clock(&self, round: usize) -> (usize, usize, usize) {
        let s = self.layer.params.segment_rounds();
        let rho = (round - 1) % s;
        ((round - 1) / s, rho / 2, rho % 2)
    }
}

impl<M: PartyMachine> PartyMachine for MagiParty<M> {
    fn out_arcs(&self) -> &[usize] {
        &self.out_arcs
    }

    fn in_arcs(&self) -> &[usize] {
        &self.in_arcs
    }

    fn send(&mut self, round: usize, ctx: &mut PartyContext<'_>, out: &mut Vec<bool>) {
        let (seg, it, phase) = self.clock(round);
        if it == 0 && phase == 0 {
            self.bits.clear();
            self.inner.send(seg + 1, ctx, &mut self.bits);
            self.votes.iter_mut().for_each(|v| *v = [0, 0]);
        }
        let l = &*self.layer;
        let g = &*l.graph;
        let r = l.draw(seg, it);
        let i = self.party;
        for &to in &self.out_to {
            let bit = if phase == 0 {
                // `to` is the relay for our arc to j
                let j = l.third(r, i, to);
                match self.inner_out_pos[j] {
                    Some(pos) if j != i && j != to && g.has_arc(to, j) => self.bits[pos] ^ l.pad(seg, it, i, j, 0),
                    _ => l.filler(seg, it, i, to, 0),
                }
            } else {
                // we relay for source src's arc to `to`
                let src = l.third(r, to, i);
                let y = self.in_from.iter().position(|&u| u == src).and_then(|q| self.relay[q]);
                match y {
                    Some(y) if src != to && g.has_arc(src, to) => y ^ l.pad(seg, it, src, to, 1),
                    _ => l.filler(seg, it, i, to, 1),
                }
            };
            out.push(bit);
        }
    }

    fn receive(&mut self, round: usize, bits: &[bool]) {
        let (seg, it, phase) = self.clock(round);
        let l = self.layer.clone();
        let g = &*l.graph;
        let r = l.draw(seg, it);
        let i = self.party;
        for (q, (&from, &b)) in self.in_from.iter().zip(bits).enumerate() {
            if phase == 0 {
                let j = l.third(r, from, i);
                self.relay[q] = (j != from && j != i && g.has_arc(from, j) && g.has_arc(i, j)).then_some(b);
            } else {
                let src = l.third(r, i, from);
                if src != from && src != i && g.has_arc(src, from) {
                    if let Some(pos) = self.inner_in_pos[src] {
                        let z = b ^ l.pad(seg, it, src, i, 0) ^ l.pad(seg, it, src, i, 1);
                        self.votes[pos][usize::from(z)] += 1;
                    }
                }
            }
        }
        if phase == 1 {
            self.relay.iter_mut().for_each(|y| *y = None);
        }
        if it + 1 == l.params.ell && phase == 1 {
            let decided: Vec<bool> = (0..self.inner_in_count).map(|k| self.votes[k][1] > self.votes[k][0]).collect();
            self.inner.receive(seg + 1, &decided);
        }
    }

    fn output(&self) -> Vec<bool> {
        self.inner.output()
    }
}

/// RS followed by the magi layer.
#[derive(Debug, Clone)]
pub struct MagiCompiled {
    rs: RsCompiled,
    layer: Arc<MagiLayer>,
}

impl MagiCompiled {
    pub fn new(rs: RsCompiled, cfg: &MagiConfig) -> Result<Self, CompileError> {
        let g = rs.inner().graph().clone();
        let epsilon = match cfg.epsilon {
            Some(e) => e,
            None => min_common_fraction(&g),
        };
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            let (u, v) = g.arcs().iter().copied().min_by_key(|&(u, v)| common_neighbors(&g, u, v)).unwrap_or((0, 0));
            return Err(CompileError::CommonNeighbors { u, v, found: 0, need: 1.0 });
        }
        let params = MagiParams::new(g.m(), epsilon, cfg.eta);
        let layer = Arc::new(MagiLayer::new(g, params, cfg.shared_seed)?);
        Ok(MagiCompiled { rs, layer })
    }

    pub fn rs(&self) -> &RsCompiled {
        &self.rs
    }

    pub fn layer(&self) -> &Arc<MagiLayer> {
        &self.layer
    }

    pub fn params(&self) -> &MagiParams {
        &self.layer.params
    }

    /// `2ℓ·T'` with `T'` the RS horizon.
    pub fn rounds(&self) -> usize {
        self.layer.params.segment_rounds() * self.rs.rounds()
    }

    pub fn parties_on(this: &Arc<Self>, exec: &Digraph) -> Result<Vec<MagiParty<RsParty>>, CompileError> {
        check_vertices(this.layer.graph(), exec)?;
        this.rs
            .parties_on(exec)?
            .into_iter()
            .enumerate()
            .map(|(p, inner)| MagiParty::new(this.layer.clone(), exec, p, inner))
            .collect()
    }
}

/// Sends fixed bits in round 1 and records what arrives.
#[derive(Debug, Clone)]
pub struct FixedBits {
    out_arcs: Vec<usize>,
    in_arcs: Vec<usize>,
    bits: Vec<bool>,
    received: Vec<bool>,
}

impl FixedBits {
    pub fn new(g: &Digraph, party: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), g.out_degree(party));
        FixedBits { out_arcs: g.out_arc_ids(party).to_vec(), in_arcs: g.in_arc_ids(party).to_vec(), bits, received: Vec::new() }
    }
}

impl PartyMachine for FixedBits {
    fn out_arcs(&self) -> &[usize] {
        &self.out_arcs
    }
    fn in_arcs(&self) -> &[usize] {
        &self.in_arcs
    }
    fn send(&mut self, _round: usize, _ctx: &mut PartyContext<'_>, out: &mut Vec<bool>) {
        out.extend_from_slice(&self.bits);
    }
    fn receive(&mut self, _round: usize, bits: &[bool]) {
        self.received = bits.to_vec();
    }
    fn output(&self) -> Vec<bool> {
        self.received.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentOutcome {
    /// Arcs whose voted bit differs from the bit sent.
    pub bit_errors: usize,
    pub arcs: usize,
    pub flips: usize,
}

/// One magi segment carrying `bits[p]` on `p`'s out-arcs (in arc order),
/// against `adversary`.
pub fn magi_segment<A: Adversary + ?Sized>(
    layer: &Arc<MagiLayer>,
    bits: &[Vec<bool>],
    adversary: &mut A,
    seed: u64,
) -> Result<SegmentOutcome, CompileError> {
    let g = layer.graph().clone();
    let mut parties = (0..g.n())
        .map(|p| MagiParty::new(layer.clone(), &g, p, FixedBits::new(&g, p, bits[p].clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let opts = ExecOptions { rounds: layer.params.segment_rounds(), seed, record_trace: false };
    let ex = netsim::execute(&g, &mut parties, adversary, opts)?;
    let mut bit_errors = 0;
    for (v, out) in ex.outputs.iter().enumerate() {
        for (k, u) in g.in_neighbors(v).enumerate() {
            let pos = g.out_neighbors(u).position(|w| w == v).expect("arc exists");
            bit_errors += usize::from(out[k] != bits[u][pos]);
        }
    }
    Ok(SegmentOutcome { bit_errors, arcs: g.m(), flips: ex.ledger.total })
}

/// Flips the first bit of every `period`-th RS step on one arc.
struct PeriodicFlip {
    arc: usize,
    period: usize,
}

impl Adversary for PeriodicFlip {
    fn act(&mut self, view: &AdversaryView<'_>) -> Vec<usize> {
        let step = (view.round - 1) / STEP_ROUNDS + 1;
        if (view.round - 1) % STEP_ROUNDS == 0 && step % self.period == 0 && view.active.contains(&self.arc) {
            vec![self.arc]
        } else {
            Vec::new()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaCalibration {
    pub eta: f64,
    /// Smallest fraction of rounds carrying a flip among failed runs.
    pub min_fraction: f64,
    pub failing_runs: usize,
    pub runs: usize,
}

/// Runs a fixed suite of RS executions forced into failure (random noise at
/// high rates, and periodic single-arc flips) and reports half the smallest
/// fraction of noisy rounds among the runs that failed.
pub fn calibrate_eta(seed: u64, noise_runs: usize) -> Result<EtaCalibration, CompileError> {
    let cfg = TreeCodeConfig::default();
    let instances =
        [generators::directed_cycle(3), generators::complete(3), generators::directed_path(3), generators::bidirected_path(3)];
    let mut runs = 0;
    let mut failing = 0;
    let mut min_fraction = f64::INFINITY;
    let mut record = |run: &rs::RsRun| {
        runs += 1;
        if run.success {
            return;
        }
        failing += 1;
        let trace = run.execution.trace.as_ref().expect("trace recorded");
        let noisy = trace.rounds.iter().filter(|r| r.sent != r.delivered).count();
        min_fraction = min_fraction.min(noisy as f64 / trace.rounds.len() as f64);
    };
    for (idx, g) in instances.iter().enumerate() {
        let p = UniversalProtocol::random(g.clone(), 3, hash_words(&[seed, idx as u64]))?;
        let c = RsCompiled::new(Arc::new(p), seed, &cfg)?;
        for &rate in &[0.02f64, 0.05, 0.1] {
            for trial in 0..noise_runs as u64 {
                let s = hash_words(&[seed, idx as u64, trial, rate.to_bits()]);
                record(&rs::run(&c, g, &mut random_noise(Budget::global(rate), s), s)?);
            }
        }
        for arc in 0..g.m() {
            for period in 1..=8 {
                record(&rs::run(&c, g, &mut PeriodicFlip { arc, period }, seed)?);
            }
        }
    }
    let eta = if failing > 0 { min_fraction / 2.0 } else { f64::NAN };
    Ok(EtaCalibration { eta, min_fraction, failing_runs: failing, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::NullAdversary;

    #[test]
    fn segment_length_formula() {
        let p = MagiParams::new(12, 0.5, 0.01);
        assert_eq!(p.ell, ((24.0 / 0.5) * (24.0f64 / 0.0025).ln()).ceil() as usize);
        assert_eq!(p.segment_rounds(), 2 * p.ell);
    }

    #[test]
    fn clean_segment_delivers_every_bit() {
        let g = generators::complete(4);
        let params = MagiParams::new(g.m(), 0.5, 0.01);
        let layer = Arc::new(MagiLayer::new(g.clone(), params, 5).unwrap());
        let bits: Vec<Vec<bool>> = (0..4).map(|p| (0..3).map(|k| (p + k) % 2 == 0).collect()).collect();
        let out = magi_segment(&layer, &bits, &mut NullAdversary, 0).unwrap();
        assert_eq!(out.bit_errors, 0);
    }

    #[test]
    fn sparse_graph_is_rejected() {
        let g = generators::bidirected_path(3);
        let params = MagiParams::new(g.m(), 0.3, 0.01);
        assert!(matches!(MagiLayer::new(g, params, 0), Err(CompileError::CommonNeighbors { .. })));
    }
}
