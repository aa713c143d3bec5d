use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_vertices, map_arcs, CompileError};
use crate::adversaries::EnumerableTarget;
use crate::graph::{self, Digraph};
use crate::netsim::{PartyContext, PartyMachine};
use crate::protocol::{pack_block, Protocol, TransmissionFunction, UniversalProtocol};
use crate::util::{derived_rng, stream};

/// Most message bits a decoder may have to guess in one segment.
pub const GV_MAX_FREE_BITS: usize = 20;
/// Distance is enumerated exactly up to this dimension.
const EXHAUSTIVE_DIMENSION: usize = 20;
/// Largest `n·T` accepted.
const MAX_NT: usize = 12;
const MAX_TABLE_BITS: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GvConfig {
    /// Defaults to `1/(8D)`.
    pub epsilon: Option<f64>,
    pub min_length: usize,
    pub max_length: usize,
    /// Random generator matrices tried per length.
    pub attempts: usize,
    /// Random messages checked when the dimension is too large to enumerate.
    pub audit_samples: usize,
    pub seed: u64,
}

impl Default for GvConfig {
    fn default() -> Self {
        GvConfig { epsilon: None, min_length: 32, max_length: 1 << 14, attempts: 16, audit_samples: 20_000, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceAudit {
    Exhaustive,
    /// All weight-1 and weight-2 messages plus `samples` random ones.
    Sampled { samples: usize },
}

/// A binary linear code given by its generator rows, packed 64 bits per word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearCode {
    pub dimension: usize,
    pub length: usize,
    pub min_distance: usize,
    pub audit: DistanceAudit,
    rows: Vec<Vec<u64>>,
}

fn words(len: usize) -> usize {
    len.div_ceil(64)
}

fn weight(w: &[u64]) -> usize {
    w.iter().map(|x| x.count_ones() as usize).sum()
}

fn xor_into(acc: &mut [u64], row: &[u64]) {
    for (a, r) in acc.iter_mut().zip(row) {
        *a ^= r;
    }
}

fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
    }
}

impl LinearCode {
    pub fn random<R: Rng>(dimension: usize, length: usize, audit_samples: usize, rng: &mut R) -> Self {
        let w = words(length);
        let tail = length % 64;
        let rows = (0..dimension)
            .map(|_| {
                let mut row: Vec<u64> = (0..w).map(|_| rng.gen()).collect();
                if tail != 0 {
                    row[w - 1] &= (1u64 << tail) - 1;
                }
                row
            })
            .collect();
        let mut code = LinearCode { dimension, length, min_distance: length, audit: DistanceAudit::Exhaustive, rows };
        code.measure_distance(audit_samples, rng);
        code
    }

    fn measure_distance<R: Rng>(&mut self, samples: usize, rng: &mut R) {
        let k = self.dimension;
        let mut best = self.length;
        let mut acc = vec![0u64; words(self.length)];
        if k <= EXHAUSTIVE_DIMENSION {
            for i in 1u64..1 << k {
                xor_into(&mut acc, &self.rows[i.trailing_zeros() as usize]);
                best = best.min(weight(&acc));
            }
            self.audit = DistanceAudit::Exhaustive;
        } else {
            for a in 0..k {
                best = best.min(weight(&self.rows[a]));
                for b in a + 1..k {
                    acc.copy_from_slice(&self.rows[a]);
                    xor_into(&mut acc, &self.rows[b]);
                    best = best.min(weight(&acc));
                }
            }
            for _ in 0..samples {
                acc.iter_mut().for_each(|x| *x = 0);
                let mut any = false;
                for row in &self.rows {
                    if rng.gen() {
                        xor_into(&mut acc, row);
                        any = true;
                    }
                }
                if any {
                    best = best.min(weight(&acc));
                }
            }
            self.audit = DistanceAudit::Sampled { samples };
        }
        self.min_distance = best;
    }

    /// Shortest random code (from `min_length` upward) whose measured
    /// distance is at least `⌈target·length⌉`.
    pub fn search(dimension: usize, target: f64, cfg: &GvConfig) -> Result<Self, CompileError> {
        let mut rng = derived_rng(cfg.seed, &[stream::SHARED, 0x6776, dimension as u64]);
        let rate = 1.0 - binary_entropy(target.min(0.5));
        let guess = if rate > 0.0 { (dimension as f64 / rate * 0.8) as usize } else { cfg.max_length };
        let mut length = cfg.min_length.max(guess).max(1);
        while length <= cfg.max_length {
            let need = (target * length as f64).ceil() as usize;
            for _ in 0..cfg.attempts {
                let code = Self::random(dimension, length, cfg.audit_samples, &mut rng);
                if code.min_distance >= need {
                    return Ok(code);
                }
            }
            length += length.div_ceil(16);
        }
        Err(CompileError::NoCode { target, max_length: cfg.max_length })
    }

    pub fn encode(&self, msg: &[bool]) -> Vec<u64> {
        let mut acc = vec![0u64; words(self.length)];
        for (row, _) in self.rows.iter().zip(msg).filter(|(_, &b)| b) {
            xor_into(&mut acc, row);
        }
        acc
    }

    pub fn bit(word: &[u64], i: usize) -> bool {
        word[i / 64] >> (i % 64) & 1 == 1
    }

    /// Nearest codeword among messages that agree with `fixed` outside the
    /// `free` positions; ties go to the lexicographically first free pattern.
    pub fn decode_restricted(&self, received: &[u64], fixed: &[bool], free: &[usize]) -> Vec<bool> {
        let mut base_msg = fixed.to_vec();
        for &p in free {
            base_msg[p] = false;
        }
        let mut acc = self.encode(&base_msg);
        xor_into(&mut acc, received);
        let mut best = (weight(&acc), 0u64);
        let mut gray = 0u64;
        for i in 1u64..1 << free.len() {
            let flip = i.trailing_zeros() as usize;
            gray ^= 1 << flip;
            xor_into(&mut acc, &self.rows[free[flip]]);
            let cand = (weight(&acc), gray.reverse_bits());
            if cand < best {
                best = cand;
            }
        }
        let pattern = best.1.reverse_bits();
        for (b, &p) in free.iter().enumerate() {
            base_msg[p] = pattern >> b & 1 == 1;
        }
        base_msg
    }
}

/// Labels of a transmission function listed node by node: depth by depth, and
/// within a depth by the received history read as a number whose first block
/// is most significant. Each label contributes `d⁺` bits, out-arc 0 first.
pub fn function_table(f: &TransmissionFunction) -> Result<Vec<bool>, CompileError> {
    let d_in = f.in_degree;
    let nodes: usize = (0..f.depth).map(|t| 1usize.checked_shl((d_in * t) as u32).unwrap_or(usize::MAX)).sum();
    let bits = nodes.saturating_mul(f.out_degree);
    if d_in * f.depth.saturating_sub(1) >= 32 || bits > MAX_TABLE_BITS {
        return Err(CompileError::SizeLimit { what: "transmission-function table bits", found: bits, limit: MAX_TABLE_BITS });
    }
    let mut table = Vec::with_capacity(bits);
    let mut level = vec![f.root_state()];
    for t in 0..f.depth {
        for &s in &level {
            let label = f.label_at_state(s);
            table.extend((0..f.out_degree).map(|k| label >> k & 1 == 1));
        }
        if t + 1 < f.depth {
            level = level.iter().flat_map(|&s| (0..1u64 << d_in).map(move |b| f.child_state(s, b))).collect();
        }
    }
    Ok(table)
}

/// Runs the universal protocol from explicit tables (`None` acts as all-zero)
/// and returns the transcript of every arc.
pub fn simulate_tables(g: &Digraph, rounds: usize, tables: &[Option<&[bool]>]) -> Vec<Vec<bool>> {
    let mut transcripts = vec![Vec::with_capacity(rounds); g.m()];
    let mut index = vec![0usize; g.n()];
    let mut offsets = vec![0usize; g.n()];
    for t in 0..rounds {
        let row: Vec<(usize, bool)> = (0..g.n())
            .flat_map(|p| {
                let d_out = g.out_degree(p);
                let base = (offsets[p] + index[p]) * d_out;
                let table = tables[p];
                g.out_arc_ids(p)
                    .iter()
                    .enumerate()
                    .map(move |(k, &a)| (a, table.is_some_and(|tb| tb[base + k])))
                    .collect::<Vec<_>>()
            })
            .collect();
        for (a, b) in row {
            transcripts[a].push(b);
        }
        for p in 0..g.n() {
            let d_in = g.in_degree(p);
            offsets[p] += 1 << (d_in * t);
            let block = pack_block(g.in_arc_ids(p).iter().map(|&a| transcripts[a][t]));
            index[p] = (index[p] << d_in) | block as usize;
        }
    }
    transcripts
}

fn outputs_from(g: &Digraph, transcripts: &[Vec<bool>], party: usize) -> Vec<bool> {
    g.in_arc_ids(party).iter().flat_map(|&a| transcripts[a].iter().copied()).collect()
}

#[derive(Debug, Clone)]
pub struct GvCompiled {
    graph: Digraph,
    inner_rounds: usize,
    diameter: usize,
    epsilon: f64,
    code: Arc<LinearCode>,
    tables: Vec<Vec<bool>>,
    /// `dist[s][t]`: hop distance from `s` to `t`.
    dist: Vec<Vec<Option<usize>>>,
    /// `members[i][j − 1]`: parties at distance below `j` from which `i` is
    /// reachable, ascending.
    members: Vec<Vec<Vec<usize>>>,
    max_free: usize,
}

impl GvCompiled {
    pub fn new(protocol: &UniversalProtocol, cfg: &GvConfig) -> Result<Self, CompileError> {
        let tables = protocol.functions().iter().map(function_table).collect::<Result<Vec<_>, _>>()?;
        Self::from_tables(protocol.graph().clone(), protocol.rounds(), tables, cfg)
    }

    pub fn from_tables(graph: Digraph, rounds: usize, tables: Vec<Vec<bool>>, cfg: &GvConfig) -> Result<Self, CompileError> {
        let n = graph.n();
        if n * rounds > MAX_NT {
            return Err(CompileError::SizeLimit { what: "n·T", found: n * rounds, limit: MAX_NT });
        }
        let diameter = graph::signal_diameter(&graph)?;
        let max_eps = 1.0 / (4.0 * diameter as f64);
        let epsilon = cfg.epsilon.unwrap_or(max_eps / 2.0);
        if !(epsilon > 0.0 && epsilon < max_eps) {
            return Err(CompileError::Epsilon { eps: epsilon, max: max_eps });
        }
        let dist: Vec<Vec<Option<usize>>> = (0..n).map(|s| graph.distances_from(s)).collect();
        let members: Vec<Vec<Vec<usize>>> = (0..n)
            .map(|i| (1..=diameter).map(|j| (0..n).filter(|&w| dist[w][i].is_some_and(|d| d < j)).collect()).collect())
            .collect();
        let bits = |set: &[usize]| set.iter().map(|&w| tables[w].len()).sum::<usize>();
        let dimension = members.iter().flat_map(|per| per.iter().map(|s| bits(s))).max().unwrap_or(0);
        let mut max_free = 0;
        for v in 0..n {
            for j in 1..=diameter {
                let fresh: Vec<usize> = (0..n).filter(|&w| dist[w][v] == Some(j - 1)).collect();
                max_free = max_free.max(bits(&fresh));
            }
        }
        if max_free > GV_MAX_FREE_BITS {
            return Err(CompileError::SizeLimit { what: "bits decoded per segment", found: max_free, limit: GV_MAX_FREE_BITS });
        }
        let target = 0.5 - diameter as f64 * epsilon;
        let code = Arc::new(LinearCode::search(dimension, target, cfg)?);
        Ok(GvCompiled { graph, inner_rounds: rounds, diameter, epsilon, code, tables, dist, members, max_free })
    }

    /// The same compiled protocol with one party's table replaced.
    pub fn with_table(&self, party: usize, table: Vec<bool>) -> Self {
        assert_eq!(table.len(), self.tables[party].len(), "table size is fixed by the degrees");
        let mut out = self.clone();
        out.tables[party] = table;
        out
    }

    pub fn graph(&self) -> &Digraph {
        &self.graph
    }

    pub fn diameter(&self) -> usize {
        self.diameter
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn code(&self) -> &LinearCode {
        &self.code
    }

    pub fn tables(&self) -> &[Vec<bool>] {
        &self.tables
    }

    pub fn max_free_bits(&self) -> usize {
        self.max_free
    }

    pub fn segment_length(&self) -> usize {
        self.code.length
    }

    pub fn rounds(&self) -> usize {
        self.diameter * self.code.length
    }

    /// Parties whose tables travel in `party`'s segment-`j` message.
    pub fn segment_members(&self, party: usize, j: usize) -> &[usize] {
        &self.members[party][j - 1]
    }

    /// Noiseless outputs computed from the tables.
    pub fn expected_outputs(&self) -> Vec<Vec<bool>> {
        let refs: Vec<Option<&[bool]>> = self.tables.iter().map(|t| Some(t.as_slice())).collect();
        let tr = simulate_tables(&self.graph, self.inner_rounds, &refs);
        (0..self.graph.n()).map(|p| outputs_from(&self.graph, &tr, p)).collect()
    }

    pub fn parties_on(this: &Arc<Self>, exec: &Digraph) -> Result<Vec<GvParty>, CompileError> {
        check_vertices(&this.graph, exec)?;
        (0..this.graph.n())
            .map(|p| {
                let (out_arcs, in_arcs) = map_arcs(&this.graph, exec, p)?;
                Ok(GvParty::new(this.clone(), p, out_arcs, in_arcs))
            })
            .collect()
    }

    fn layout(&self, party: usize, j: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut at = 0;
        self.members[party][j - 1].iter().map(move |&w| {
            let start = at;
            at += self.tables[w].len();
            (w, start)
        })
    }
}

#[derive(Debug, Clone)]
pub struct GvParty {
    shared: Arc<GvCompiled>,
    party: usize,
    out_arcs: Vec<usize>,
    in_arcs: Vec<usize>,
    in_from: Vec<usize>,
    codeword: Vec<u64>,
    received: Vec<Vec<u64>>,
    /// Per in-arc, tables decoded from the latest segment, by party.
    decoded: Vec<Vec<Option<Vec<bool>>>>,
}

impl GvParty {
    fn new(shared: Arc<GvCompiled>, party: usize, out_arcs: Vec<usize>, in_arcs: Vec<usize>) -> Self {
        let in_from: Vec<usize> = shared.graph.in_neighbors(party).collect();
        let w = words(shared.code.length);
        let n = shared.graph.n();
        GvParty {
            received: vec![vec![0; w]; in_from.len()],
            decoded: vec![vec![None; n]; in_from.len()],
            codeword: vec![0; w],
            in_from,
            shared,
            party,
            out_arcs,
            in_arcs,
        }
    }

    /// Own table, or the one decoded on the first in-arc that carried it.
    fn known(&self, w: usize) -> Option<&[bool]> {
        if w == self.party {
            return Some(&self.shared.tables[w]);
        }
        self.decoded.iter().find_map(|d| d[w].as_deref())
    }

    fn message(&self, j: usize) -> Vec<bool> {
        let s = &self.shared;
        let mut msg = vec![false; s.code.dimension];
        for (w, start) in s.layout(self.party, j) {
            let table = self.known(w).expect("segment members are known after the previous segment");
            msg[start..start + table.len()].copy_from_slice(table);
        }
        msg
    }

    fn decode_segment(&mut self, j: usize) {
        let s = self.shared.clone();
        for q in 0..self.in_from.len() {
            let v = self.in_from[q];
            let mut fixed = vec![false; s.code.dimension];
            let mut free = Vec::new();
            let layout: Vec<(usize, usize)> = s.layout(v, j).collect();
            for &(w, start) in &layout {
                let len = s.tables[w].len();
                if s.dist[w][v] == Some(j - 1) {
                    free.extend(start..start + len);
                } else {
                    let prev = self.decoded[q][w].as_ref().expect("decoded in an earlier segment");
                    fixed[start..start + len].copy_from_slice(prev);
                }
            }
            let msg = s.code.decode_restricted(&self.received[q], &fixed, &free);
            for (w, start) in layout {
                self.decoded[q][w] = Some(msg[start..start + s.tables[w].len()].to_vec());
            }
            self.received[q].iter_mut().for_each(|x| *x = 0);
        }
    }
}

impl PartyMachine for GvParty {
    fn out_arcs(&self) -> &[usize] {
        &self.out_arcs
    }

    fn in_arcs(&self) -> &[usize] {
        &self.in_arcs
    }

    fn send(&mut self, round: usize, _ctx: &mut PartyContext<'_>, out: &mut Vec<bool>) {
        let len = self.shared.code.length;
        let (j, pos) = ((round - 1) / len + 1, (round - 1) % len);
        if pos == 0 && !self.out_arcs.is_empty() {
            self.codeword = self.shared.code.encode(&self.message(j));
        }
        let bit = LinearCode::bit(&self.codeword, pos);
        out.extend(std::iter::repeat_n(bit, self.out_arcs.len()));
    }

    fn receive(&mut self, round: usize, bits: &[bool]) {
        let len = self.shared.code.length;
        let (j, pos) = ((round - 1) / len + 1, (round - 1) % len);
        for (q, &b) in bits.iter().enumerate() {
            self.received[q][pos / 64] |= u64::from(b) << (pos % 64);
        }
        if pos == len - 1 {
            self.decode_segment(j);
        }
    }

    fn output(&self) -> Vec<bool> {
        let s = &self.shared;
        let tables: Vec<Option<&[bool]>> = (0..s.graph.n()).map(|w| self.known(w)).collect();
        let tr = simulate_tables(&s.graph, s.inner_rounds, &tables);
        outputs_from(&s.graph, &tr, self.party)
    }
}

/// The GV-compiled protocol seen as a function of one party's table, for
/// attacks that enumerate inputs.
#[derive(Debug, Clone)]
pub struct GvTarget {
    base: Arc<GvCompiled>,
    party: usize,
}

impl GvTarget {
    pub fn new(base: Arc<GvCompiled>, party: usize) -> Self {
        GvTarget { base, party }
    }

    pub fn table_of(&self, x: u64) -> Vec<bool> {
        (0..self.base.tables[self.party].len()).map(|b| x >> b & 1 == 1).collect()
    }

    pub fn compiled(&self, x: u64) -> Arc<GvCompiled> {
        Arc::new(self.base.with_table(self.party, self.table_of(x)))
    }
}

impl EnumerableTarget for GvTarget {
    fn input_bits(&self) -> usize {
        self.base.tables[self.party].len()
    }
    fn graph(&self) -> &Digraph {
        &self.base.graph
    }
    fn rounds(&self) -> usize {
        self.base.rounds()
    }
    fn input_party(&self) -> usize {
        self.party
    }
    fn machines(&self, x: u64) -> Vec<Box<dyn PartyMachine + Send>> {
        let c = self.compiled(x);
        GvCompiled::parties_on(&c, &self.base.graph)
            .expect("own graph carries every arc")
            .into_iter()
            .map(|p| Box::new(p) as Box<dyn PartyMachine + Send>)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::generators;
    use crate::protocol::run_noiseless;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tables_reproduce_the_universal_protocol() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..20 {
            let g = generators::random_weakly_connected(3, 0.5, &mut rng);
            let p = UniversalProtocol::random(g.clone(), 1 + seed as usize % 3, seed).unwrap();
            let tables: Vec<Vec<bool>> = p.functions().iter().map(|f| function_table(f).unwrap()).collect();
            let refs: Vec<Option<&[bool]>> = tables.iter().map(|t| Some(t.as_slice())).collect();
            assert_eq!(simulate_tables(&g, p.rounds(), &refs), run_noiseless(&p).transcripts);
        }
    }

    #[test]
    fn restricted_decoding_corrects_below_half_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let code = LinearCode::random(6, 64, 0, &mut rng);
        let msg = vec![true, false, true, true, false, true];
        let mut word = code.encode(&msg);
        for i in 0..(code.min_distance - 1) / 2 {
            word[0] ^= 1 << (3 * i);
        }
        let free: Vec<usize> = (0..6).collect();
        assert_eq!(code.decode_restricted(&word, &[false; 6], &free), msg);
        // fixing some positions leaves the rest to decode
        assert_eq!(code.decode_restricted(&word, &msg, &[1, 4]), msg);
    }

    #[test]
    fn empty_code_has_full_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let code = LinearCode::random(0, 40, 0, &mut rng);
        assert_eq!(code.min_distance, 40);
        assert_eq!(code.decode_restricted(&[0], &[], &[]), Vec::<bool>::new());
    }
}
