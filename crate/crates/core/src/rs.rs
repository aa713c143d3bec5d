//! The tree-code simulation compiler: a dummy-party wrapper around the
//! protocol, a 9-round step machine that sends one tree-code symbol per arc
//! per step, and post-hoc instrumentation of progress and error chains.
//!
//! Each step a party decodes everything received so far, parses the
//! estimates (a backspace deletes its predecessor), and checks its own parsed
//! outgoing transcripts against what the protocol prescribes given those
//! estimates. Consistent: send the next prescribed bits. Otherwise send a
//! backspace on every out-arc.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Digraph;
use crate::netsim::{self, Adversary, ExecOptions, Execution, ExecutionTrace, NetsimError, PartyContext, PartyMachine};
use crate::protocol::{run_noiseless, DummyWrapped, Protocol, QueryCounter};
use crate::treecode::{parse, Encoder, Source, TreeCode, TreeCodeConfig, TreeCodeError, SYMBOL_BITS};

/// Rounds per step: one tree-code symbol.
pub const STEP_ROUNDS: usize = SYMBOL_BITS;

#[derive(Debug, Error)]
pub enum RsError {
    #[error(transparent)]
    TreeCode(#[from] TreeCodeError),
    #[error(transparent)]
    Netsim(#[from] NetsimError),
    #[error("execution graph lacks arc ({0}, {1}) used by the protocol")]
    MissingArc(usize, usize),
    #[error("execution graph has {found} vertices, protocol has {expected}")]
    VertexCount { expected: usize, found: usize },
    #[error("trace does not come from this compiled protocol: {0}")]
    ForeignTrace(String),
    #[error("no party failed; there is no failure walk")]
    NoFailure,
}

/// A protocol compiled for noisy channels.
#[derive(Debug, Clone)]
pub struct RsCompiled {
    inner: Arc<dyn Protocol>,
    wrapped: Arc<DummyWrapped>,
    code: Arc<TreeCode>,
    steps: usize,
}

impl RsCompiled {
    /// `code_seed` selects the tree-code labeling; the code has depth `2T + 1`.
    pub fn new(inner: Arc<dyn Protocol>, code_seed: u64, cfg: &TreeCodeConfig) -> Result<Self, RsError> {
        let steps = 2 * inner.rounds() + 1;
        let code = TreeCode::shared(steps, code_seed, cfg)?;
        let wrapped = Arc::new(DummyWrapped::new(inner.clone()));
        Ok(RsCompiled { inner, wrapped, code, steps })
    }

    pub fn inner(&self) -> &Arc<dyn Protocol> {
        &self.inner
    }

    pub fn wrapped(&self) -> &Arc<DummyWrapped> {
        &self.wrapped
    }

    pub fn code(&self) -> &Arc<TreeCode> {
        &self.code
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn rounds(&self) -> usize {
        STEP_ROUNDS * self.steps
    }

    /// Party machines on the protocol's own graph.
    pub fn parties(&self) -> Vec<RsParty> {
        self.parties_on(self.inner.graph()).expect("protocol graph carries its own arcs")
    }

    /// Party machines transmitting on `exec`, which must contain every arc of
    /// the protocol graph (it may contain more; those stay silent).
    pub fn parties_on(&self, exec: &Digraph) -> Result<Vec<RsParty>, RsError> {
        let g = self.inner.graph();
        if exec.n() != g.n() {
            return Err(RsError::VertexCount { expected: g.n(), found: exec.n() });
        }
        let map = arc_map(g, exec)?;
        Ok((0..g.n()).map(|p| RsParty::new(self, p, &map)).collect())
    }
}

/// Protocol-graph arc id → execution-graph arc id.
fn arc_map(g: &Digraph, exec: &Digraph) -> Result<Vec<usize>, RsError> {
    g.arcs().iter().map(|&(u, v)| exec.arc_id(u, v).ok_or(RsError::MissingArc(u, v))).collect()
}

#[derive(Debug, Clone)]
struct OutArc {
    y: Vec<Source>,
    w: Vec<bool>,
    enc: Encoder,
}

#[derive(Debug, Clone, Default)]
struct InArc {
    partial: u16,
    symbols: Vec<u16>,
    decoded: Vec<Source>,
}

/// Decoder effort for one party over a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub decodes: u64,
    pub nodes: u64,
    /// Decodes that hit the node budget.
    pub exhausted: u64,
}

#[derive(Debug)]
pub struct RsParty {
    party: usize,
    inner: Arc<dyn Protocol>,
    wrapped: Arc<DummyWrapped>,
    code: Arc<TreeCode>,
    out_exec: Vec<usize>,
    in_exec: Vec<usize>,
    /// All out-arcs of the wrapped graph: ordinary ones first, then dummies.
    outgoing: Vec<OutArc>,
    ordinary_out: usize,
    incoming: Vec<InArc>,
    current: Vec<u16>,
    at: usize,
    /// Per step: did the party back up.
    backups: Vec<bool>,
    queries: QueryCounter,
    stats: DecodeStats,
}

impl RsParty {
    fn new(c: &RsCompiled, party: usize, map: &[usize]) -> Self {
        let g = c.inner.graph();
        let out_exec: Vec<usize> = g.out_arc_ids(party).iter().map(|&a| map[a]).collect();
        let in_exec: Vec<usize> = g.in_arc_ids(party).iter().map(|&a| map[a]).collect();
        let total_out = c.wrapped.graph().out_degree(party);
        let outgoing =
            (0..total_out).map(|_| OutArc { y: Vec::new(), w: Vec::new(), enc: c.code.encoder() }).collect();
        RsParty {
            party,
            inner: c.inner.clone(),
            wrapped: c.wrapped.clone(),
            code: c.code.clone(),
            ordinary_out: out_exec.len(),
            current: vec![0; out_exec.len()],
            incoming: vec![InArc::default(); in_exec.len()],
            out_exec,
            in_exec,
            outgoing,
            at: 0,
            backups: Vec::new(),
            queries: QueryCounter::new(),
            stats: DecodeStats::default(),
        }
    }

    /// Unparsed outgoing transcripts, one per out-arc of the wrapped graph
    /// (ordinary arcs first, then dummy arcs in in-arc order).
    pub fn transcripts(&self) -> Vec<&[Source]> {
        self.outgoing.iter().map(|o| o.y.as_slice()).collect()
    }

    /// Per step, whether this party backed up.
    pub fn backups(&self) -> &[bool] {
        &self.backups
    }

    pub fn decode_stats(&self) -> DecodeStats {
        self.stats
    }

    pub fn queries(&self) -> u64 {
        self.queries.get()
    }

    fn begin_step(&mut self) {
        let mut estimates = Vec::with_capacity(self.incoming.len());
        for inc in &mut self.incoming {
            if !inc.symbols.is_empty() {
                let d = self.code.decode_with_hint(&inc.symbols, &inc.decoded);
                self.stats.decodes += 1;
                self.stats.nodes += d.nodes;
                self.stats.exhausted += u64::from(d.exhausted);
                inc.decoded = d.path;
            }
            estimates.push(parse(&inc.decoded));
        }
        let at = self.at;
        let mut next = None;
        if estimates.iter().all(|e| e.len() >= at) {
            let slices: Vec<&[bool]> = estimates.iter().map(Vec::as_slice).collect();
            let rows = self.wrapped.transmissions(self.party, &slices, at, &self.queries);
            let consistent = self.outgoing.iter().enumerate().all(|(k, o)| (0..at).all(|t| o.w[t] == rows[t][k]));
            if consistent {
                next = Some(rows[at].clone());
            }
        }
        self.backups.push(next.is_none());
        match &next {
            Some(_) => self.at += 1,
            None => self.at -= 1,
        }
        for (k, o) in self.outgoing.iter_mut().enumerate() {
            let s = match &next {
                Some(row) => {
                    o.w.push(row[k]);
                    Source::from_bit(row[k])
                }
                None => {
                    o.w.pop();
                    Source::Backspace
                }
            };
            o.y.push(s);
            if k < self.ordinary_out {
                self.current[k] = self.code.push(&mut o.enc, s).expect("code depth covers every step");
            }
        }
    }
}

impl PartyMachine for RsParty {
    fn out_arcs(&self) -> &[usize] {
        &self.out_exec
    }

    fn in_arcs(&self) -> &[usize] {
        &self.in_exec
    }

    fn send(&mut self, round: usize, _ctx: &mut PartyContext<'_>, out: &mut Vec<bool>) {
        let k = (round - 1) % STEP_ROUNDS;
        if k == 0 {
            self.begin_step();
        }
        out.extend(self.current.iter().map(|&c| c >> k & 1 == 1));
    }

    fn receive(&mut self, round: usize, bits: &[bool]) {
        let k = (round - 1) % STEP_ROUNDS;
        for (inc, &b) in self.incoming.iter_mut().zip(bits) {
            inc.partial |= u16::from(b) << k;
            if k == STEP_ROUNDS - 1 {
                inc.symbols.push(std::mem::take(&mut inc.partial));
            }
        }
    }

    /// Reads the received transcripts off the dummy arcs, which echo them
    /// one round late.
    fn output(&self) -> Vec<bool> {
        let t = self.inner.rounds();
        let rebuilt: Vec<Vec<bool>> = self.outgoing[self.ordinary_out..]
            .iter()
            .map(|o| (1..=t).map(|r| o.w.get(r).copied().unwrap_or(false)).collect())
            .collect();
        let slices: Vec<&[bool]> = rebuilt.iter().map(Vec::as_slice).collect();
        self.inner.output(self.party, &slices)
    }
}

/// A corrupted tree-code symbol: sent in step `step − 1`, dated `step`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CharError {
    pub step: usize,
    /// Arc id in the protocol graph.
    pub arc: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub party: usize,
    pub step: usize,
    #[serde(rename = "RP")]
    pub rp: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "AT")]
    pub at: usize,
    #[serde(rename = "Y")]
    pub y: usize,
}

impl StepRecord {
    /// The progress inequality `τ ≤ RP + 24·Y + B`.
    pub fn progress_bound_holds(&self) -> bool {
        self.step <= self.rp + 24 * self.y + self.b
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instrumentation {
    pub parties: usize,
    pub steps: usize,
    /// Party-major: `records[party * steps + step − 1]`.
    pub records: Vec<StepRecord>,
    pub errors: Vec<CharError>,
    /// Longest time-like chain ending at each error, and its predecessor.
    chain_len: Vec<usize>,
    chain_prev: Vec<Option<usize>>,
    /// Earliest step at which each error enters each party's history cone.
    cone_entry: Vec<Vec<Option<usize>>>,
    bit_errors: Vec<usize>,
    graph: Digraph,
    /// Rounds of the wrapped protocol; a party succeeds when its final RP reaches this.
    target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureWalk {
    pub party: usize,
    pub final_rp: usize,
    /// Time-like chain of character errors, earliest first.
    pub chain: Vec<CharError>,
    /// Vertex sequence of a walk through every chain arc in order.
    pub walk: Vec<usize>,
    /// Character errors per arc `(u, v)` of the walk.
    pub errors_per_arc: BTreeMap<String, usize>,
    /// Flipped bits inside the chain's symbols.
    pub bit_errors: usize,
}

impl FailureWalk {
    pub fn distinct_arcs(&self) -> usize {
        let arcs: std::collections::BTreeSet<(usize, usize)> = self.walk.windows(2).map(|p| (p[0], p[1])).collect();
        arcs.len()
    }
}

impl Instrumentation {
    pub fn record(&self, party: usize, step: usize) -> &StepRecord {
        &self.records[party * self.steps + step - 1]
    }

    pub fn violations(&self) -> Vec<StepRecord> {
        self.records.iter().filter(|r| !r.progress_bound_holds()).copied().collect()
    }

    pub fn final_rp(&self, party: usize) -> usize {
        if self.steps == 0 {
            return 0;
        }
        self.record(party, self.steps).rp
    }

    pub fn failed_parties(&self) -> Vec<usize> {
        (0..self.parties).filter(|&p| self.final_rp(p) < self.target).collect()
    }

    /// Longest time-like chain of character errors in the final history
    /// cone of the first failed party, rendered as a walk.
    pub fn extract_failure_walk(&self) -> Result<FailureWalk, RsError> {
        let party = *self.failed_parties().first().ok_or(RsError::NoFailure)?;
        let tail = (0..self.errors.len())
            .filter(|&x| self.cone_entry[party][x].is_some_and(|s| s <= self.steps))
            .max_by_key(|&x| (self.chain_len[x], std::cmp::Reverse(x)));
        let mut idx = Vec::new();
        let mut cur = tail;
        while let Some(x) = cur {
            idx.push(x);
            cur = self.chain_prev[x];
        }
        idx.reverse();
        let chain: Vec<CharError> = idx.iter().map(|&x| self.errors[x]).collect();
        let mut walk: Vec<usize> = Vec::new();
        let mut errors_per_arc = BTreeMap::new();
        for e in &chain {
            let (u, v) = self.graph.arc(e.arc);
            *errors_per_arc.entry(format!("{u}->{v}")).or_insert(0) += 1;
            match walk.last() {
                Some(&last) if last == v && walk.len() >= 2 && walk[walk.len() - 2] == u => {}
                Some(&last) => {
                    let path = self.graph.shortest_path(last, u).expect("time-like errors are joined by walks");
                    walk.extend_from_slice(&path[1..]);
                    walk.push(v);
                }
                None => walk.extend([u, v]),
            }
        }
        Ok(FailureWalk {
            party,
            final_rp: self.final_rp(party),
            chain,
            walk,
            errors_per_arc,
            bit_errors: idx.iter().map(|&x| self.bit_errors[x]).sum(),
        })
    }

    /// CSV with columns `party,step,RP,B,AT,Y`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.records {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Computes progress, blank counts and error chains for a finished run.
/// `exec` is the graph the run executed on.
pub fn instrument(
    compiled: &RsCompiled,
    exec: &Digraph,
    parties: &[RsParty],
    trace: &ExecutionTrace,
) -> Result<Instrumentation, RsError> {
    let g = compiled.inner.graph();
    let steps = compiled.steps;
    if trace.rounds.len() != compiled.rounds() {
        return Err(RsError::ForeignTrace(format!(
            "{} rounds, expected {}",
            trace.rounds.len(),
            compiled.rounds()
        )));
    }
    if parties.len() != g.n() || parties.iter().any(|p| p.backups.len() != steps) {
        return Err(RsError::ForeignTrace("party machines did not run every step".into()));
    }
    let map = arc_map(g, exec)?;

    // edge character errors, from the trace
    let mut errors = Vec::new();
    let mut bit_errors = Vec::new();
    for (a, &ea) in map.iter().enumerate() {
        let pos = trace.position(ea).ok_or_else(|| RsError::ForeignTrace(format!("arc {ea} inactive")))?;
        for s in 1..=steps {
            let flipped = trace.rounds[(s - 1) * STEP_ROUNDS..s * STEP_ROUNDS]
                .iter()
                .filter(|r| r.sent[pos] != r.delivered[pos])
                .count();
            if flipped > 0 {
                errors.push(CharError { step: s + 1, arc: a });
                bit_errors.push(flipped);
            }
        }
    }
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by_key(|&x| errors[x]);
    let errors: Vec<CharError> = order.iter().map(|&x| errors[x]).collect();
    let bit_errors: Vec<usize> = order.iter().map(|&x| bit_errors[x]).collect();

    // longest time-like chains; same-step pairs are never related unless identical
    let dist = g.all_pairs_distances();
    let mut chain_len = vec![1usize; errors.len()];
    let mut chain_prev = vec![None; errors.len()];
    for y in 0..errors.len() {
        let (ey, ty) = (g.arc(errors[y].arc), errors[y].step);
        for x in 0..y {
            let (ex, tx) = (g.arc(errors[x].arc), errors[x].step);
            if tx >= ty {
                break;
            }
            let linked = if errors[x].arc == errors[y].arc {
                true
            } else {
                dist[ex.1][ey.0].is_some_and(|d| 2 + d <= ty - tx + 1)
            };
            if linked && chain_len[x] + 1 > chain_len[y] {
                chain_len[y] = chain_len[x] + 1;
                chain_prev[y] = Some(x);
            }
        }
    }
    let cone_entry: Vec<Vec<Option<usize>>> = (0..g.n())
        .map(|p| errors.iter().map(|e| dist[g.arc(e.arc).1][p].map(|d| e.step + d)).collect())
        .collect();

    // RP against the noiseless wrapped run
    let reference = run_noiseless(compiled.wrapped.as_ref());
    let gw = compiled.wrapped.graph();
    let mut records = Vec::with_capacity(g.n() * steps);
    for (p, party) in parties.iter().enumerate() {
        let refs: Vec<&[bool]> = gw.out_arc_ids(p).iter().map(|&a| reference.transcripts[a].as_slice()).collect();
        let mut acc = vec![0usize; refs.len()];
        let mut lens = vec![0usize; refs.len()];
        let mut y_at = vec![0usize; steps + 2];
        for x in 0..errors.len() {
            if let Some(s) = cone_entry[p][x] {
                if s <= steps {
                    y_at[s] = y_at[s].max(chain_len[x]);
                }
            }
        }
        let mut b = 0;
        let mut y = 0;
        for s in 1..=steps {
            for (k, o) in party.outgoing.iter().enumerate() {
                match o.y[s - 1] {
                    Source::Backspace => {
                        lens[k] -= 1;
                        acc[k] = acc[k].min(lens[k]);
                    }
                    sym => {
                        let bit = sym == Source::One;
                        if acc[k] == lens[k] && refs[k].get(lens[k]).copied().unwrap_or(false) == bit {
                            acc[k] += 1;
                        }
                        lens[k] += 1;
                    }
                }
            }
            b += usize::from(party.backups[s - 1]);
            y = y.max(y_at[s]);
            let rp = acc.iter().copied().min().unwrap_or(s - 2 * b);
            records.push(StepRecord { party: p, step: s, rp, b, at: s - 2 * b, y });
        }
    }
    Ok(Instrumentation {
        parties: g.n(),
        steps,
        records,
        errors,
        chain_len,
        chain_prev,
        cone_entry,
        bit_errors,
        graph: g.clone(),
        target: compiled.wrapped.rounds(),
    })
}

#[derive(Debug)]
pub struct RsRun {
    pub execution: Execution,
    pub instrumentation: Instrumentation,
    pub success: bool,
    pub decode: DecodeStats,
}

/// Executes the compiled protocol on `exec` against `adversary` and
/// instruments the result. Success means every party's output equals the
/// noiseless output of the original protocol.
pub fn run<A: Adversary + ?Sized>(
    compiled: &RsCompiled,
    exec: &Digraph,
    adversary: &mut A,
    seed: u64,
) -> Result<RsRun, RsError> {
    let mut parties = compiled.parties_on(exec)?;
    let opts = ExecOptions { rounds: compiled.rounds(), seed, record_trace: true };
    let execution = netsim::execute(exec, &mut parties, adversary, opts)?;
    let instrumentation = instrument(compiled, exec, &parties, execution.trace.as_ref().expect("trace recorded"))?;
    let expected = run_noiseless(compiled.inner.as_ref()).outputs;
    let success = execution.outputs == expected;
    let mut decode = DecodeStats::default();
    for p in &parties {
        decode.decodes += p.stats.decodes;
        decode.nodes += p.stats.nodes;
        decode.exhausted += p.stats.exhausted;
    }
    Ok(RsRun { execution, instrumentation, success, decode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::generators;
    use crate::netsim::NullAdversary;
    use crate::protocol::UniversalProtocol;

    #[test]
    fn noiseless_run_is_clean() {
        let p = UniversalProtocol::random(generators::directed_cycle(3), 3, 1).unwrap();
        let c = RsCompiled::new(Arc::new(p), 1, &TreeCodeConfig::default()).unwrap();
        assert_eq!(c.rounds(), 9 * 7);
        let r = run(&c, c.inner().graph(), &mut NullAdversary, 0).unwrap();
        assert!(r.success);
        for rec in &r.instrumentation.records {
            assert_eq!((rec.rp, rec.b, rec.y, rec.at), (rec.step, 0, 0, rec.step));
        }
        assert!(r.instrumentation.extract_failure_walk().is_err());
    }
}
