//! Attack constructions against the round engine: budgeted random noise,
//! arc-zeroing plans (cut blocker, star sequential, walk segments), the
//! alternative-reality substitution attack, and a budget-capping wrapper.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{self, Digraph, GraphError};
use crate::netsim::{
    self, Adversary, AdversaryView, Budget, BudgetModel, DirectParty, ExecOptions, NullAdversary, PartyContext, PartyMachine,
};
use crate::protocol::{Protocol, RelayProtocol};
use crate::util::{derived_rng, stream};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttackError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("expected an inward star with {q} leaves: missing arc ({u}, {v})")]
    NotAStar { q: usize, u: usize, v: usize },
    #[error("input space of 2^{bits} is too large to enumerate (limit 2^{limit})")]
    InputsTooLarge { bits: usize, limit: usize },
    #[error("vertex {0} is not reachable from the source")]
    Unreachable(usize),
    #[error("target is not deterministic: {0}")]
    Randomized(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    /// Deliver 0 whatever was sent.
    Zero,
    /// Deliver the complement.
    Flip,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    /// Inclusive round range.
    pub first: usize,
    pub last: usize,
    pub arcs: Vec<(usize, usize)>,
    pub action: Action,
}

/// A fixed schedule of arc-level actions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub entries: Vec<PlanEntry>,
}

impl AttackPlan {
    /// Rounds in which `arc` is acted on (counting overlaps once).
    pub fn rounds_on(&self, arc: (usize, usize), horizon: usize) -> usize {
        (1..=horizon)
            .filter(|&r| self.entries.iter().any(|e| e.first <= r && r <= e.last && e.arcs.contains(&arc)))
            .count()
    }
}

/// Executes an [`AttackPlan`]; actions on arcs that carry nothing are skipped.
#[derive(Clone, Debug)]
pub struct PlannedAttack {
    plan: AttackPlan,
    cursor: usize,
}

impl PlannedAttack {
    pub fn new(mut plan: AttackPlan) -> Self {
        plan.entries.sort_by_key(|e| e.first);
        PlannedAttack { plan, cursor: 0 }
    }

    pub fn plan(&self) -> &AttackPlan {
        &self.plan
    }
}

impl Adversary for PlannedAttack {
    fn act(&mut self, view: &AdversaryView<'_>) -> Vec<usize> {
        while self.cursor < self.plan.entries.len() && self.plan.entries[self.cursor].last < view.round {
            self.cursor += 1;
        }
        let mut out = Vec::new();
        for e in &self.plan.entries[self.cursor..] {
            if e.first > view.round {
                break;
            }
            if e.last < view.round {
                continue;
            }
            for &(u, v) in &e.arcs {
                let Some(a) = view.graph.arc_id(u, v) else { continue };
                if view.active.binary_search(&a).is_err() {
                    continue;
                }
                match e.action {
                    Action::Zero if view.sent[a] => out.push(a),
                    Action::Zero => {}
                    Action::Flip => out.push(a),
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Flips uniformly random transmitted bits, exactly as many as the budget
/// allows (all on the first round's view of the active arcs and horizon).
#[derive(Debug)]
pub struct RandomNoise {
    budget: Budget,
    rng: ChaCha8Rng,
    /// Round → arc ids.
    schedule: Option<HashMap<usize, Vec<usize>>>,
}

pub fn random_noise(budget: Budget, seed: u64) -> RandomNoise {
    RandomNoise { budget, rng: derived_rng(seed, &[stream::ADVERSARY, 1]), schedule: None }
}

impl RandomNoise {
    fn plan(&mut self, active: &[usize], rounds: usize) -> HashMap<usize, Vec<usize>> {
        let allowance = self.budget.allowance(active.len(), rounds);
        let mut sched: HashMap<usize, Vec<usize>> = HashMap::new();
        match self.budget.model {
            BudgetModel::Global => {
                let slots = active.len() * rounds;
                for s in index::sample(&mut self.rng, slots, allowance.min(slots)) {
                    sched.entry(s / active.len() + 1).or_default().push(active[s % active.len()]);
                }
            }
            BudgetModel::PerEdge => {
                for &a in active {
                    for r in index::sample(&mut self.rng, rounds, allowance.min(rounds)) {
                        sched.entry(r + 1).or_default().push(a);
                    }
                }
            }
        }
        sched
    }
}

impl Adversary for RandomNoise {
    fn act(&mut self, view: &AdversaryView<'_>) -> Vec<usize> {
        if self.schedule.is_none() {
            let s = self.plan(view.active, view.rounds);
            self.schedule = Some(s);
        }
        self.schedule.as_mut().unwrap().remove(&view.round).unwrap_or_default()
    }
}

/// Zeroes a minimum reachability-changing arc set of `target` for the whole
/// run. An explicit arc set can be given instead via [`cut_blocker_on`].
pub fn cut_blocker(target: &Digraph) -> Result<(PlannedAttack, graph::RecWitness), AttackError> {
    let w = graph::rec_witness(target)?;
    let arcs = w.cut.iter().map(|&a| target.arc(a)).collect();
    Ok((cut_blocker_on(arcs), w))
}

pub fn cut_blocker_on(arcs: Vec<(usize, usize)>) -> PlannedAttack {
    let entries = if arcs.is_empty() {
        Vec::new()
    } else {
        vec![PlanEntry { first: 1, last: usize::MAX, arcs, action: Action::Zero }]
    };
    PlannedAttack::new(AttackPlan { entries })
}

/// Splits `rounds` into `q` near-equal segments and zeroes leaf arc `i → 0`
/// during segment `i` (leaves are `1..=q`).
pub fn star_sequential(g: &Digraph, q: usize, rounds: usize) -> Result<PlannedAttack, AttackError> {
    for i in 1..=q {
        if !g.has_arc(i, 0) {
            return Err(AttackError::NotAStar { q, u: i, v: 0 });
        }
    }
    let entries = (1..=q)
        .map(|i| PlanEntry {
            first: (i - 1) * rounds / q + 1,
            last: i * rounds / q,
            arcs: vec![(i, 0)],
            action: Action::Zero,
        })
        .filter(|e| e.first <= e.last)
        .collect();
    Ok(PlannedAttack::new(AttackPlan { entries }))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkSegments {
    pub chain_length: usize,
    pub walk: Vec<usize>,
    /// Inclusive round range for each walk position (empty when the run is
    /// too short to attack).
    pub segments: Vec<(usize, usize)>,
}

/// Segment sizes `⌈T̃ / (R·f)⌉` along a maximum-distinct-vertex walk, cut
/// off once the horizon is covered; nothing at all when `T̃ < R²`.
pub fn walk_segments(g: &Digraph, rounds: usize) -> Result<WalkSegments, AttackError> {
    let w = graph::chain_length_walk(g)?;
    let r = w.chain_length;
    let mut segments = Vec::new();
    if rounds >= r * r {
        let mut start = 1;
        for &v in &w.walk {
            if start > rounds {
                break;
            }
            let len = rounds.div_ceil(r * w.visits[v]);
            let end = (start + len - 1).min(rounds);
            segments.push((start, end));
            start = end + 1;
        }
        assert!(start > rounds, "segment sizes always cover the horizon");
    }
    Ok(WalkSegments { chain_length: r, walk: w.walk, segments })
}

/// Zeroes every arc into or out of the `i`th walk vertex during segment `i`.
pub fn walk_segment_attack(g: &Digraph, rounds: usize) -> Result<(PlannedAttack, WalkSegments), AttackError> {
    let ws = walk_segments(g, rounds)?;
    let entries = ws
        .segments
        .iter()
        .zip(&ws.walk)
        .map(|(&(first, last), &v)| PlanEntry {
            first,
            last,
            arcs: g.arcs().iter().copied().filter(|&(a, b)| a == v || b == v).collect(),
            action: Action::Zero,
        })
        .collect();
    Ok((PlannedAttack::new(AttackPlan { entries }), ws))
}

/// Drops any flip that would push the ledger past `budget`.
#[derive(Debug)]
pub struct BudgetCapped<A> {
    inner: A,
    budget: Budget,
    used: Vec<usize>,
    total: usize,
}

impl<A> BudgetCapped<A> {
    pub fn new(inner: A, budget: Budget) -> Self {
        BudgetCapped { inner, budget, used: Vec::new(), total: 0 }
    }

    pub fn inner(&self) -> &A {
        &self.inner
    }
}

impl<A: Adversary> Adversary for BudgetCapped<A> {
    fn act(&mut self, view: &AdversaryView<'_>) -> Vec<usize> {
        if self.used.is_empty() {
            self.used = vec![0; view.graph.m()];
        }
        let allowance = self.budget.allowance(view.active.len(), view.rounds);
        let mut out = self.inner.act(view);
        out.sort_unstable();
        out.dedup();
        out.retain(|&a| {
            let ok = match self.budget.model {
                BudgetModel::Global => self.total < allowance,
                BudgetModel::PerEdge => self.used[a] < allowance,
            };
            if ok {
                self.used[a] += 1;
                self.total += 1;
            }
            ok
        });
        out
    }
}

/// A deterministic compiled protocol whose behaviour depends on one party's
/// `bits`-bit input; other parties' behaviour is input-independent.
pub trait EnumerableTarget: Send + Sync {
    fn input_bits(&self) -> usize;
    fn graph(&self) -> &Digraph;
    fn rounds(&self) -> usize;
    fn input_party(&self) -> usize;
    fn machines(&self, x: u64) -> Vec<Box<dyn PartyMachine + Send>>;
}

/// Largest input width the posterior enumeration accepts.
pub const MAX_INPUT_BITS: usize = 16;

/// Transcripts of the first `prefix` rounds of every input, grouped by transcript.
#[derive(Debug, Clone)]
pub struct PosteriorTable {
    prefix: usize,
    by_transcript: HashMap<Vec<bool>, Vec<u64>>,
}

impl PosteriorTable {
    pub fn build(target: &dyn EnumerableTarget, prefix: usize) -> Result<Self, AttackError> {
        let bits = target.input_bits();
        if bits > MAX_INPUT_BITS {
            return Err(AttackError::InputsTooLarge { bits, limit: MAX_INPUT_BITS });
        }
        let mut by_transcript: HashMap<Vec<bool>, Vec<u64>> = HashMap::new();
        for x in 0..1u64 << bits {
            let key = Self::transcript(target, x, prefix, 0)?;
            if key != Self::transcript(target, x, prefix, 1)? {
                return Err(AttackError::Randomized("transcript depends on the execution seed".into()));
            }
            by_transcript.entry(key).or_default().push(x);
        }
        Ok(PosteriorTable { prefix, by_transcript })
    }

    fn transcript(target: &dyn EnumerableTarget, x: u64, prefix: usize, seed: u64) -> Result<Vec<bool>, AttackError> {
        let mut parties = target.machines(x);
        let opts = ExecOptions { rounds: prefix, seed, record_trace: true };
        let ex = netsim::execute(target.graph(), &mut parties, &mut NullAdversary, opts)
            .map_err(|e| AttackError::Randomized(e.to_string()))?;
        Ok(ex.trace.unwrap().rounds.into_iter().flat_map(|r| r.sent).collect())
    }

    /// Inputs consistent with an observed prefix transcript.
    pub fn consistent(&self, transcript: &[bool]) -> &[u64] {
        self.by_transcript.get(transcript).map_or(&[], Vec::as_slice)
    }

    /// Distinct prefix transcripts over all inputs.
    pub fn classes(&self) -> usize {
        self.by_transcript.len()
    }

    pub fn prefix(&self) -> usize {
        self.prefix
    }
}

/// The relay protocol run uncoded: the source's input crosses a shortest
/// path with no protection at all.
#[derive(Clone, Debug)]
pub struct UncodedRelay {
    graph: Digraph,
    path: Vec<usize>,
    bits: usize,
}

impl UncodedRelay {
    pub fn new(graph: Digraph, path: Vec<usize>, bits: usize) -> Result<Self, AttackError> {
        if bits > MAX_INPUT_BITS {
            return Err(AttackError::InputsTooLarge { bits, limit: MAX_INPUT_BITS });
        }
        RelayProtocol::with_input_word(graph.clone(), path.clone(), bits, 0)
            .map_err(|e| AttackError::Randomized(e.to_string()))?;
        Ok(UncodedRelay { graph, path, bits })
    }

    pub fn protocol(&self, x: u64) -> RelayProtocol {
        RelayProtocol::with_input_word(self.graph.clone(), self.path.clone(), self.bits, x).expect("validated")
    }

    pub fn sink(&self) -> usize {
        *self.path.last().unwrap()
    }
}

impl EnumerableTarget for UncodedRelay {
    fn input_bits(&self) -> usize {
        self.bits
    }
    fn graph(&self) -> &Digraph {
        &self.graph
    }
    fn rounds(&self) -> usize {
        self.bits + self.path.len() - 2
    }
    fn input_party(&self) -> usize {
        self.path[0]
    }
    fn machines(&self, x: u64) -> Vec<Box<dyn PartyMachine + Send>> {
        let p: Arc<dyn Protocol> = Arc::new(self.protocol(x));
        DirectParty::all(&p).into_iter().map(|d| Box::new(d) as Box<dyn PartyMachine + Send>).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub round: usize,
    pub arc: usize,
    pub bit: bool,
}

/// Shape of the alternative-reality schedule for a horizon and signal diameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RealityLayout {
    pub passive: usize,
    pub segment: usize,
    pub diameter: usize,
}

impl RealityLayout {
    /// Segment length: the largest even number at most `rounds / D`.
    pub fn new(rounds: usize, diameter: usize) -> Self {
        let segment = (rounds / diameter) & !1;
        RealityLayout { passive: rounds - diameter * segment, segment, diameter }
    }

    /// First round of segment `k` (1-based).
    pub fn segment_start(&self, k: usize) -> usize {
        self.passive + (k - 1) * self.segment + 1
    }
}

struct Mirror {
    vertex: usize,
    machine: Box<dyn PartyMachine + Send>,
    /// Bits this copy received after initialization.
    received: Vec<Vec<bool>>,
}

/// Runs a growing imaginary copy of the network fed with an alternative
/// input drawn from the posterior, and during one coin-chosen half of each
/// segment substitutes the copy's messages for the real ones crossing from
/// distance `k − 1` to distance `k` of the source.
pub struct AlternativeReality {
    target: Arc<dyn EnumerableTarget>,
    table: Arc<PosteriorTable>,
    layout: RealityLayout,
    level: Vec<Option<usize>>,
    rng: ChaCha8Rng,
    /// Per exec arc id, delivered bits so far.
    delivered: Vec<Vec<bool>>,
    chi: Vec<bool>,
    alternative: Option<u64>,
    mirrors: Vec<Mirror>,
    attack_first_half: Vec<bool>,
    substitutions: Vec<Substitution>,
    scratch_rng: ChaCha8Rng,
}

impl AlternativeReality {
    /// `table` may be shared across trials; build it with
    /// [`AlternativeReality::table_for`].
    pub fn new(target: Arc<dyn EnumerableTarget>, table: Arc<PosteriorTable>, seed: u64) -> Result<Self, AttackError> {
        let g = target.graph();
        let dist = g.distances_from(target.input_party());
        let diameter = dist.iter().flatten().copied().max().unwrap_or(0);
        if diameter == 0 {
            return Err(AttackError::Unreachable(target.input_party()));
        }
        let layout = RealityLayout::new(target.rounds(), diameter);
        if table.prefix() != layout.passive {
            return Err(AttackError::Randomized("posterior table built for a different prefix".into()));
        }
        Ok(AlternativeReality {
            delivered: vec![Vec::new(); g.m()],
            level: dist,
            layout,
            table,
            target,
            rng: derived_rng(seed, &[stream::ADVERSARY, 2]),
            chi: Vec::new(),
            alternative: None,
            mirrors: Vec::new(),
            attack_first_half: Vec::new(),
            substitutions: Vec::new(),
            scratch_rng: derived_rng(seed, &[stream::ADVERSARY, 3]),
        })
    }

    pub fn table_for(target: &dyn EnumerableTarget) -> Result<PosteriorTable, AttackError> {
        let dist = target.graph().distances_from(target.input_party());
        let diameter = dist.iter().flatten().copied().max().unwrap_or(0).max(1);
        PosteriorTable::build(target, RealityLayout::new(target.rounds(), diameter).passive)
    }

    pub fn layout(&self) -> RealityLayout {
        self.layout
    }

    pub fn alternative_input(&self) -> Option<u64> {
        self.alternative
    }

    pub fn substitutions(&self) -> &[Substitution] {
        &self.substitutions
    }

    /// Rebuilds every imaginary party from scratch, feeds it the real prefix
    /// and then the inputs it saw, and checks it emits exactly the
    /// substituted bits.
    pub fn replay_check(&self) -> bool {
        let Some(alt) = self.alternative else { return self.substitutions.is_empty() };
        let mut emitted: HashMap<(usize, usize), bool> = HashMap::new();
        let mut rng = derived_rng(0, &[stream::ADVERSARY, 4]);
        for m in &self.mirrors {
            let k = self.level[m.vertex].unwrap();
            let init = if k == 0 { self.layout.passive } else { self.layout.segment_start(k + 1) - 1 };
            let mut machine = self.target.machines(alt).swap_remove(m.vertex);
            let mut buf = Vec::new();
            for round in 1..=init {
                let mut ctx = PartyContext { party: m.vertex, rng: &mut rng };
                buf.clear();
                machine.send(round, &mut ctx, &mut buf);
                let bits: Vec<bool> = machine.in_arcs().iter().map(|&a| self.delivered[a][round - 1]).collect();
                machine.receive(round, &bits);
            }
            for (t, bits) in m.received.iter().enumerate() {
                let round = init + 1 + t;
                let mut ctx = PartyContext { party: m.vertex, rng: &mut rng };
                buf.clear();
                machine.send(round, &mut ctx, &mut buf);
                for (i, &a) in machine.out_arcs().iter().enumerate() {
                    emitted.insert((round, a), buf[i]);
                }
                machine.receive(round, bits);
            }
        }
        self.substitutions.iter().all(|s| emitted.get(&(s.round, s.arc)) == Some(&s.bit))
    }

    fn spawn(&mut self, vertex: usize, through: usize) {
        let alt = self.alternative.expect("posterior drawn before spawning");
        let mut machine = self.target.machines(alt).swap_remove(vertex);
        let mut buf = Vec::new();
        for round in 1..=through {
            let mut ctx = PartyContext { party: vertex, rng: &mut self.scratch_rng };
            buf.clear();
            machine.send(round, &mut ctx, &mut buf);
            let bits: Vec<bool> = machine.in_arcs().iter().map(|&a| self.delivered[a][round - 1]).collect();
            machine.receive(round, &bits);
        }
        self.mirrors.push(Mirror { vertex, machine, received: Vec::new() });
    }
}

impl Adversary for AlternativeReality {
    fn act(&mut self, view: &AdversaryView<'_>) -> Vec<usize> {
        let r = view.round;
        let lay = self.layout;
        if r <= lay.passive {
            self.chi.extend(view.active.iter().map(|&a| view.sent[a]));
            for &a in view.active {
                self.delivered[a].push(view.sent[a]);
            }
            return Vec::new();
        }
        if lay.segment == 0 {
            for &a in view.active {
                self.delivered[a].push(view.sent[a]);
            }
            return Vec::new();
        }
        let k = (r - lay.passive - 1) / lay.segment + 1;
        if r == lay.segment_start(k) {
            if k == 1 {
                let pool = self.table.consistent(&self.chi);
                let alt = pool[self.rng.gen_range(0..pool.len())];
                self.alternative = Some(alt);
                self.spawn(self.target.input_party(), r - 1);
            } else {
                let newly: Vec<usize> = (0..view.graph.n()).filter(|&v| self.level[v] == Some(k - 1)).collect();
                for v in newly {
                    self.spawn(v, r - 1);
                }
            }
            self.attack_first_half.push(self.rng.gen_bool(0.5));
        }

        // the imaginary region transmits
        let mut mirror_bits: HashMap<usize, bool> = HashMap::new();
        let mut buf = Vec::new();
        for m in &mut self.mirrors {
            let mut ctx = PartyContext { party: m.vertex, rng: &mut self.scratch_rng };
            buf.clear();
            m.machine.send(r, &mut ctx, &mut buf);
            for (i, &a) in m.machine.out_arcs().iter().enumerate() {
                mirror_bits.insert(a, buf[i]);
            }
        }

        let offset = r - lay.segment_start(k);
        let attacking = (offset < lay.segment / 2) == self.attack_first_half[k - 1];
        let mut flips = Vec::new();
        if attacking {
            for &a in view.active {
                let (u, v) = view.graph.arc(a);
                if self.level[u] == Some(k - 1) && self.level[v] == Some(k) {
                    let bit = *mirror_bits.get(&a).expect("imaginary copy carries every arc of the induced region");
                    self.substitutions.push(Substitution { round: r, arc: a, bit });
                    if bit != view.sent[a] {
                        flips.push(a);
                    }
                }
            }
        }
        for &a in view.active {
            self.delivered[a].push(view.sent[a] ^ flips.contains(&a));
        }
        // the imaginary region hears itself and the real vertices outside it
        let inside: Vec<usize> = self.mirrors.iter().map(|m| m.vertex).collect();
        for m in &mut self.mirrors {
            let bits: Vec<bool> = m
                .machine
                .in_arcs()
                .iter()
                .map(|&a| {
                    let src = view.graph.arc(a).0;
                    if inside.contains(&src) {
                        mirror_bits[&a]
                    } else {
                        *self.delivered[a].last().unwrap()
                    }
                })
                .collect();
            m.machine.receive(r, &bits);
            m.received.push(bits);
        }
        flips
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::generators;

    #[test]
    fn star_segments_are_equal() {
        let g = generators::inward_star(4);
        let a = star_sequential(&g, 4, 40).unwrap();
        for (i, e) in a.plan().entries.iter().enumerate() {
            assert_eq!((e.first, e.last), (10 * i + 1, 10 * i + 10));
        }
        assert!(star_sequential(&generators::directed_path(3), 2, 10).is_err());
    }

    #[test]
    fn short_runs_are_not_attacked() {
        let ws = walk_segments(&generators::directed_cycle(4), 15).unwrap();
        assert!(ws.segments.is_empty());
    }

    #[test]
    fn layout_matches_definition() {
        let l = RealityLayout::new(9, 2);
        assert_eq!((l.passive, l.segment), (1, 4));
        assert_eq!(l.segment_start(2), 6);
        let l = RealityLayout::new(40, 3);
        assert_eq!((l.passive, l.segment), (4, 12));
    }
}
