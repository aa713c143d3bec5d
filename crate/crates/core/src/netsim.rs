//! Synchronous round engine: one bit per active arc per round, an adversary
//! interposed on every channel, and exact error accounting.

use std::io::{self, Write};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Digraph;
use crate::protocol::{Protocol, QueryCounter};
use crate::util::{derived_rng, stream};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetsimError {
    #[error("expected {expected} parties, got {found}")]
    PartyCount { expected: usize, found: usize },
    #[error("party {party} declares arc {arc}, which it does not own or which is not in the graph")]
    ForeignArc { party: usize, arc: usize },
    #[error("arc {arc} is declared as an out-arc by more than one party")]
    DuplicateArc { arc: usize },
    #[error("party {party} listens on arc {arc}, which nobody transmits on")]
    SilentInArc { party: usize, arc: usize },
    #[error("round {round}: party {party} emitted {found} bits for {expected} out-arcs")]
    WrongBitCount { round: usize, party: usize, expected: usize, found: usize },
    #[error("round {round}: adversary flipped arc {arc}, which carries no transmission")]
    InactiveFlip { round: usize, arc: usize },
}

/// Per-party view handed to [`PartyMachine::send`].
pub struct PartyContext<'a> {
    pub party: usize,
    /// Private randomness, derived from the master seed and the party id.
    pub rng: &'a mut ChaCha8Rng,
}

/// One party of a protocol execution, driven round by round.
pub trait PartyMachine {
    /// Arc ids (in the execution graph) this party transmits on, in the
    /// order bits are emitted.
    fn out_arcs(&self) -> &[usize];
    /// Arc ids this party listens on, in the order bits are delivered.
    fn in_arcs(&self) -> &[usize];
    /// Pushes one bit per out-arc onto `out` (which arrives empty).
    fn send(&mut self, round: usize, ctx: &mut PartyContext<'_>, out: &mut Vec<bool>);
    fn receive(&mut self, round: usize, bits: &[bool]);
    fn output(&self) -> Vec<bool>;
}

impl<P: PartyMachine + ?Sized> PartyMachine for Box<P> {
    fn out_arcs(&self) -> &[usize] {
        (**self).out_arcs()
    }
    fn in_arcs(&self) -> &[usize] {
        (**self).in_arcs()
    }
    fn send(&mut self, round: usize, ctx: &mut PartyContext<'_>, out: &mut Vec<bool>) {
        (**self).send(round, ctx, out)
    }
    fn receive(&mut self, round: usize, bits: &[bool]) {
        (**self).receive(round, bits)
    }
    fn output(&self) -> Vec<bool> {
        (**self).output()
    }
}

/// What the adversary sees each round. Party-private and shared randomness
/// never appear here; adversaries keep their own history of past views.
pub struct AdversaryView<'a> {
    pub round: usize,
    pub rounds: usize,
    pub graph: &'a Digraph,
    /// Arc ids that carry transmissions, ascending.
    pub active: &'a [usize],
    /// Bit sent this round, indexed by arc id (`false` on inactive arcs).
    pub sent: &'a [bool],
}

pub trait Adversary {
    /// Arc ids whose bit is flipped this round.
    fn act(&mut self, view: &AdversaryView<'_>) -> Vec<usize>;
}

impl<A: Adversary + ?Sized> Adversary for Box<A> {
    fn act(&mut self, view: &AdversaryView<'_>) -> Vec<usize> {
        (**self).act(view)
    }
}

/// Never interferes.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullAdversary;

impl Adversary for NullAdversary {
    fn act(&mut self, _view: &AdversaryView<'_>) -> Vec<usize> {
        Vec::new()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Indexed like [`ExecutionTrace::active`].
    pub sent: Vec<bool>,
    pub delivered: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub active: Vec<usize>,
    pub rounds: Vec<RoundRecord>,
}

impl ExecutionTrace {
    pub fn position(&self, arc: usize) -> Option<usize> {
        self.active.binary_search(&arc).ok()
    }

    pub fn flipped_positions(&self) -> usize {
        self.rounds
            .iter()
            .map(|r| r.sent.iter().zip(&r.delivered).filter(|(a, b)| a != b).count())
            .sum()
    }

    /// One JSON object per round, then a ledger summary record.
    pub fn write_jsonl<W: Write>(&self, g: &Digraph, ledger: &ErrorLedger, mut w: W) -> io::Result<()> {
        for r in &self.rounds {
            let rec = serde_json::json!({
                "round": r.round,
                "arcs": self.active.iter().map(|&a| g.arc(a)).collect::<Vec<_>>(),
                "sent": r.sent,
                "delivered": r.delivered,
            });
            writeln!(w, "{rec}")?;
        }
        let summary = serde_json::json!({ "ledger": ledger });
        writeln!(w, "{summary}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorLedger {
    /// Flips per arc id of the execution graph.
    pub flips: Vec<usize>,
    pub total: usize,
    pub rounds: usize,
    /// Number of arcs carrying transmissions.
    pub active_arcs: usize,
}

impl ErrorLedger {
    pub fn global_rate(&self) -> f64 {
        if self.active_arcs == 0 || self.rounds == 0 {
            return 0.0;
        }
        self.total as f64 / (self.active_arcs * self.rounds) as f64
    }

    pub fn per_edge_rate(&self, arc: usize) -> f64 {
        if self.rounds == 0 {
            return 0.0;
        }
        self.flips[arc] as f64 / self.rounds as f64
    }

    pub fn max_per_edge_rate(&self) -> f64 {
        (0..self.flips.len()).map(|a| self.per_edge_rate(a)).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetModel {
    Global,
    PerEdge,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub model: BudgetModel,
    pub rate: f64,
}

impl Budget {
    pub fn global(rate: f64) -> Self {
        Budget { model: BudgetModel::Global, rate }
    }

    pub fn per_edge(rate: f64) -> Self {
        Budget { model: BudgetModel::PerEdge, rate }
    }

    /// Allowed flips: in total (global) or on each arc (per-edge).
    pub fn allowance(&self, active_arcs: usize, rounds: usize) -> usize {
        let raw = match self.model {
            BudgetModel::Global => self.rate * (active_arcs * rounds) as f64,
            BudgetModel::PerEdge => self.rate * rounds as f64,
        };
        // guard against 0.1 * 10 = 0.999…
        (raw + 1e-9).floor().max(0.0) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetCheck {
    pub pass: bool,
    pub allowance: usize,
    /// Arcs over their allowance (per-edge), or every flipped arc when the
    /// global total is exceeded.
    pub offending: Vec<usize>,
}

pub fn check_budget(ledger: &ErrorLedger, budget: Budget) -> BudgetCheck {
    let allowance = budget.allowance(ledger.active_arcs, ledger.rounds);
    let offending: Vec<usize> = match budget.model {
        BudgetModel::Global if ledger.total > allowance => {
            (0..ledger.flips.len()).filter(|&a| ledger.flips[a] > 0).collect()
        }
        BudgetModel::Global => Vec::new(),
        BudgetModel::PerEdge => (0..ledger.flips.len()).filter(|&a| ledger.flips[a] > allowance).collect(),
    };
    let pass = match budget.model {
        BudgetModel::Global => ledger.total <= allowance,
        BudgetModel::PerEdge => offending.is_empty(),
    };
    BudgetCheck { pass, allowance, offending }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecOptions {
    pub rounds: usize,
    pub seed: u64,
    pub record_trace: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Execution {
    pub trace: Option<ExecutionTrace>,
    pub ledger: ErrorLedger,
    pub outputs: Vec<Vec<bool>>,
}

/// Active arcs (ascending) after validating every party's declarations.
pub fn validate_parties<M: PartyMachine>(g: &Digraph, parties: &[M]) -> Result<Vec<usize>, NetsimError> {
    if parties.len() != g.n() {
        return Err(NetsimError::PartyCount { expected: g.n(), found: parties.len() });
    }
    let mut owner = vec![None; g.m()];
    for (party, p) in parties.iter().enumerate() {
        for &arc in p.out_arcs() {
            if arc >= g.m() || g.arc(arc).0 != party {
                return Err(NetsimError::ForeignArc { party, arc });
            }
            if owner[arc].replace(party).is_some() {
                return Err(NetsimError::DuplicateArc { arc });
            }
        }
    }
    for (party, p) in parties.iter().enumerate() {
        for &arc in p.in_arcs() {
            if arc >= g.m() || g.arc(arc).1 != party {
                return Err(NetsimError::ForeignArc { party, arc });
            }
            if owner[arc].is_none() {
                return Err(NetsimError::SilentInArc { party, arc });
            }
        }
    }
    Ok((0..g.m()).filter(|&a| owner[a].is_some()).collect())
}

/// Runs `parties` on `g` for `opts.rounds` rounds. Each round every party
/// emits its bits, the adversary sees them and picks flips, then every
/// party receives the (possibly corrupted) bits on its in-arcs.
pub fn execute<M: PartyMachine, A: Adversary + ?Sized>(
    g: &Digraph,
    parties: &mut [M],
    adversary: &mut A,
    opts: ExecOptions,
) -> Result<Execution, NetsimError> {
    let active = validate_parties(g, parties)?;
    let mut is_active = vec![false; g.m()];
    for &a in &active {
        is_active[a] = true;
    }
    let mut rngs: Vec<ChaCha8Rng> =
        (0..g.n()).map(|p| derived_rng(opts.seed, &[stream::PARTY, p as u64])).collect();
    let mut sent = vec![false; g.m()];
    let mut delivered = vec![false; g.m()];
    let mut flips = vec![0usize; g.m()];
    let mut buf = Vec::new();
    let mut inbox = Vec::new();
    let mut records = Vec::new();

    for round in 1..=opts.rounds {
        for (party, p) in parties.iter_mut().enumerate() {
            buf.clear();
            let mut ctx = PartyContext { party, rng: &mut rngs[party] };
            p.send(round, &mut ctx, &mut buf);
            let outs = p.out_arcs();
            if buf.len() != outs.len() {
                return Err(NetsimError::WrongBitCount { round, party, expected: outs.len(), found: buf.len() });
            }
            for (k, &a) in outs.iter().enumerate() {
                sent[a] = buf[k];
            }
        }
        delivered.copy_from_slice(&sent);
        let view = AdversaryView { round, rounds: opts.rounds, graph: g, active: &active, sent: &sent };
        let mut chosen = adversary.act(&view);
        chosen.sort_unstable();
        chosen.dedup();
        for a in chosen {
            if a >= g.m() || !is_active[a] {
                return Err(NetsimError::InactiveFlip { round, arc: a });
            }
            delivered[a] = !delivered[a];
            flips[a] += 1;
        }
        for p in parties.iter_mut() {
            inbox.clear();
            inbox.extend(p.in_arcs().iter().map(|&a| delivered[a]));
            p.receive(round, &inbox);
        }
        if opts.record_trace {
            records.push(RoundRecord {
                round,
                sent: active.iter().map(|&a| sent[a]).collect(),
                delivered: active.iter().map(|&a| delivered[a]).collect(),
            });
        }
    }

    let ledger = ErrorLedger {
        total: flips.iter().sum(),
        flips,
        rounds: opts.rounds,
        active_arcs: active.len(),
    };
    let trace = opts.record_trace.then_some(ExecutionTrace { active, rounds: records });
    let outputs = parties.iter().map(|p| p.output()).collect();
    Ok(Execution { trace, ledger, outputs })
}

/// Runs a [`Protocol`] uncoded: each party sends exactly what the protocol
/// prescribes given the (possibly corrupted) bits it has received.
pub struct DirectParty {
    protocol: Arc<dyn Protocol>,
    party: usize,
    out_arcs: Vec<usize>,
    in_arcs: Vec<usize>,
    incoming: Vec<Vec<bool>>,
    queries: QueryCounter,
}

impl DirectParty {
    pub fn new(protocol: Arc<dyn Protocol>, party: usize) -> Self {
        let g = protocol.graph();
        let out_arcs = g.out_arc_ids(party).to_vec();
        let in_arcs = g.in_arc_ids(party).to_vec();
        let incoming = vec![Vec::new(); in_arcs.len()];
        DirectParty { protocol, party, out_arcs, in_arcs, incoming, queries: QueryCounter::new() }
    }

    pub fn all(protocol: &Arc<dyn Protocol>) -> Vec<DirectParty> {
        (0..protocol.graph().n()).map(|p| DirectParty::new(protocol.clone(), p)).collect()
    }

    pub fn queries(&self) -> u64 {
        self.queries.get()
    }
}

impl PartyMachine for DirectParty {
    fn out_arcs(&self) -> &[usize] {
        &self.out_arcs
    }
    fn in_arcs(&self) -> &[usize] {
        &self.in_arcs
    }
    fn send(&mut self, round: usize, _ctx: &mut PartyContext<'_>, out: &mut Vec<bool>) {
        let slices: Vec<&[bool]> = self.incoming.iter().map(Vec::as_slice).collect();
        let mut rows = self.protocol.transmissions(self.party, &slices, round - 1, &self.queries);
        out.extend(rows.swap_remove(round - 1));
    }
    fn receive(&mut self, _round: usize, bits: &[bool]) {
        for (tr, &b) in self.incoming.iter_mut().zip(bits) {
            tr.push(b);
        }
    }
    fn output(&self) -> Vec<bool> {
        let t = self.protocol.rounds();
        let padded: Vec<Vec<bool>> = self
            .incoming
            .iter()
            .map(|tr| (0..t).map(|i| tr.get(i).copied().unwrap_or(false)).collect())
            .collect();
        let slices: Vec<&[bool]> = padded.iter().map(Vec::as_slice).collect();
        self.protocol.output(self.party, &slices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allowance_floors() {
        assert_eq!(Budget::per_edge(0.04).allowance(3, 100), 4);
        assert_eq!(Budget::global(0.1).allowance(1, 10), 1);
        assert_eq!(Budget::global(0.0).allowance(5, 1000), 0);
    }

    #[test]
    fn per_edge_check_reports_arc() {
        let ledger = ErrorLedger { flips: vec![0, 5], total: 5, rounds: 100, active_arcs: 2 };
        let c = check_budget(&ledger, Budget::per_edge(0.04));
        assert!(!c.pass);
        assert_eq!(c.offending, vec![1]);
        assert!(check_budget(&ledger, Budget::global(0.025)).pass);
    }
}
