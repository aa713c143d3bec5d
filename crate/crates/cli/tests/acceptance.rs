//! Acceptance suite. Each test prints one `PASS`/`FAIL` line; run with
//! `cargo test -p multicoding-cli --test acceptance -- --nocapture`.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use multicoding::adversaries::{
    cut_blocker, random_noise, star_sequential, walk_segment_attack, walk_segments, AlternativeReality, BudgetCapped,
    EnumerableTarget, UncodedRelay,
};
use multicoding::compilers::{
    self, magi_segment, CompileConfig, CompileError, CompilerKind, GvTarget, MagiLayer, MagiParams,
};
use multicoding::graph::{self, generators, Digraph};
use multicoding::netsim::{execute, Adversary, AdversaryView, Budget, BudgetModel, ExecOptions, NullAdversary};
use multicoding::protocol::{run_noiseless, Protocol, RelayProtocol, UniversalProtocol};
use multicoding::routing::{
    cut_sparsify, flow_to_paths, max_concurrent_flow, schedule, FlowNetwork, PathSet, SparsifyConfig,
};
use multicoding::rs::{self, RsCompiled, STEP_ROUNDS};
use multicoding::treecode::TreeCodeConfig;

fn verdict(id: usize, name: &str, pass: bool, detail: String) {
    println!("{} criterion {id:>2} ({name}): {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn universal(g: Digraph, t: usize, seed: u64) -> Arc<UniversalProtocol> {
    Arc::new(UniversalProtocol::random(g, t, seed).unwrap())
}

fn rs_compile(g: Digraph, t: usize, seed: u64) -> RsCompiled {
    let tree = TreeCodeConfig { max_depth: 1024, ..Default::default() };
    RsCompiled::new(universal(g, t, seed), seed, &tree).unwrap()
}

/// BFS distances, independent of the library's.
fn bfs(g: &Digraph, s: usize) -> Vec<Option<usize>> {
    let mut d = vec![None; g.n()];
    d[s] = Some(0);
    let mut q = VecDeque::from([s]);
    while let Some(u) = q.pop_front() {
        for &(a, b) in g.arcs() {
            if a == u && d[b].is_none() {
                d[b] = Some(d[u].unwrap() + 1);
                q.push_back(b);
            }
        }
    }
    d
}

/// Reflexive-transitive closure by Floyd–Warshall.
fn closure(n: usize, arcs: &[(usize, usize)]) -> Vec<Vec<bool>> {
    let mut r = vec![vec![false; n]; n];
    for (v, row) in r.iter_mut().enumerate() {
        row[v] = true;
    }
    for &(u, v) in arcs {
        r[u][v] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if r[i][k] {
                for j in 0..n {
                    r[i][j] |= r[k][j];
                }
            }
        }
    }
    r
}

fn per_arc_rates(flips: &[usize], rounds: usize) -> impl Iterator<Item = f64> + '_ {
    flips.iter().map(move |&f| f as f64 / rounds as f64)
}

// ---------------------------------------------------------------------------

#[test]
fn c01_noiseless_fidelity() {
    let cfg = CompileConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let mut summary = BTreeMap::new();
    let mut mismatches = Vec::new();
    for kind in CompilerKind::ALL {
        // draw until 100 instances meet the compiler's preconditions
        let mut accepted = Vec::new();
        let mut rejected = 0;
        while accepted.len() < 100 {
            let n = rng.gen_range(2..=5);
            let t = rng.gen_range(1..=6);
            let seed: u64 = rng.gen();
            let g = match kind {
                CompilerKind::Undirected | CompilerKind::Magi => {
                    generators::random_connected_undirected(n, rng.gen_range(0.3..1.0), &mut rng)
                }
                _ => generators::random_weakly_connected(n, rng.gen_range(0.2..0.8), &mut rng),
            };
            let p = universal(g, t, seed);
            match compilers::compile(kind, p.clone(), seed, &cfg) {
                Ok(c) => accepted.push((p, c, seed)),
                Err(CompileError::SizeLimit { .. } | CompileError::CommonNeighbors { .. }) => rejected += 1,
                Err(e) => mismatches.push(format!("{kind}: compile error {e}")),
            }
            assert!(rejected < 20_000, "{kind}: preconditions almost never met");
        }
        let bad: Vec<String> = accepted
            .par_iter()
            .filter_map(|(p, c, seed)| {
                let run = c.run(p.graph(), &mut NullAdversary, *seed, false).unwrap();
                (run.execution.outputs != run_noiseless(p.as_ref()).outputs).then(|| format!("{kind} seed {seed}"))
            })
            .collect();
        mismatches.extend(bad);
        summary.insert(kind.name(), (accepted.len(), rejected));
    }
    let detail = format!(
        "{} mismatches; instances (accepted, rejected) per compiler: {:?}",
        mismatches.len(),
        summary
    );
    verdict(1, "noiseless fidelity", mismatches.is_empty(), detail);
}

#[test]
fn c02_progress_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut jobs: Vec<(String, Digraph, usize, u64, f64)> = Vec::new();
    for i in 0..20 {
        let n = rng.gen_range(2..=4);
        let g = generators::random_weakly_connected(n, 0.4, &mut rng);
        jobs.push(("random".into(), g, rng.gen_range(24..=72), i, rng.gen()));
    }
    for i in 0..10 {
        let n = rng.gen_range(2..=4);
        jobs.push(("cut-blocker".into(), generators::random_weakly_connected(n, 0.4, &mut rng), rng.gen_range(2..=8), i, 0.0));
    }
    for i in 0..10 {
        jobs.push(("star".into(), generators::inward_star(2 + i as usize % 3), rng.gen_range(2..=8), i, 0.0));
    }
    for i in 0..10 {
        let n = rng.gen_range(2..=5);
        jobs.push(("walk".into(), generators::random_weakly_connected(n, 0.35, &mut rng), rng.gen_range(2..=8), i, 0.0));
    }
    let results: Vec<(usize, usize, bool)> = jobs
        .par_iter()
        .map(|(kind, g, t, seed, u)| {
            let c = rs_compile(g.clone(), *t, *seed);
            let mut adv: Box<dyn Adversary + Send> = match kind.as_str() {
                "random" => {
                    let m_wrapped = c.wrapped().graph().m() as f64;
                    Box::new(random_noise(Budget::global(u * 2.0 / (1296.0 * m_wrapped)), *seed))
                }
                "cut-blocker" => Box::new(cut_blocker(g).unwrap().0),
                "star" => Box::new(star_sequential(g, g.n() - 2, c.rounds()).unwrap()),
                _ => Box::new(walk_segment_attack(g, c.rounds()).unwrap().0),
            };
            let run = rs::run(&c, g, &mut adv, *seed).unwrap();
            // the inequality, evaluated here rather than by the library
            let bad = run.instrumentation.records.iter().filter(|r| r.step > r.rp + 24 * r.y + r.b).count();
            (run.instrumentation.records.len(), bad, run.success)
        })
        .collect();
    let checked: usize = results.iter().map(|r| r.0).sum();
    let violations: usize = results.iter().map(|r| r.1).sum();
    let failures = results.iter().filter(|r| !r.2).count();
    let detail = format!("{} runs, {checked} (party, step) records, {violations} violations, {failures} failed runs", results.len());
    verdict(2, "progress invariant", violations == 0 && results.len() == 50, detail);
}

/// Flips `count` consecutive rounds of one arc starting at `start`.
struct Burst {
    arc: usize,
    start: usize,
    count: usize,
}

impl Adversary for Burst {
    fn act(&mut self, view: &AdversaryView<'_>) -> Vec<usize> {
        if view.round >= self.start && view.round < self.start + self.count {
            vec![view.active[self.arc % view.active.len()]]
        } else {
            Vec::new()
        }
    }
}

/// Independent validation of a failure certificate against the trace.
fn certificate_problems(g: &Digraph, run: &rs::RsRun, t: usize) -> Vec<String> {
    let mut problems = Vec::new();
    let w = match run.instrumentation.extract_failure_walk() {
        Ok(w) => w,
        Err(e) => return vec![format!("no certificate: {e}")],
    };
    if !w.walk.windows(2).all(|p| g.has_arc(p[0], p[1])) {
        problems.push("walk uses a missing arc".into());
    }
    // chain arcs appear along the walk in order
    let walk_arcs: Vec<(usize, usize)> = w.walk.windows(2).map(|p| (p[0], p[1])).collect();
    let mut pos = 0;
    for e in &w.chain {
        let arc = g.arc(e.arc);
        match walk_arcs[pos..].iter().position(|&a| a == arc) {
            Some(k) => pos += k,
            None => problems.push(format!("chain arc {arc:?} not on the walk in order")),
        }
    }
    // each chain element is a real corruption in the trace
    let trace = run.execution.trace.as_ref().unwrap();
    let mut bits = 0;
    for e in &w.chain {
        let p = trace.position(e.arc).unwrap();
        let window = &trace.rounds[(e.step - 2) * STEP_ROUNDS..(e.step - 1) * STEP_ROUNDS];
        let flipped = window.iter().filter(|r| r.sent[p] != r.delivered[p]).count();
        if flipped == 0 {
            problems.push(format!("no flip behind {e:?}"));
        }
        bits += flipped;
    }
    // consecutive errors are time-like
    for pair in w.chain.windows(2) {
        let (x, y) = (pair[0], pair[1]);
        let ok = y.step > x.step
            && (x.arc == y.arc
                || bfs(g, g.arc(x.arc).1)[g.arc(y.arc).0].is_some_and(|d| d + 1 <= y.step - x.step));
        if !ok {
            problems.push(format!("{x:?} -> {y:?} is not time-like"));
        }
    }
    let need = t.div_ceil(48);
    if w.chain.len() < need || bits < need || w.bit_errors != bits {
        problems.push(format!("chain {} / bits {bits} (reported {}) below {need}", w.chain.len(), w.bit_errors));
    }
    problems
}

const HIGH_RUNS: u64 = 60;

#[test]
fn c03_rs_tolerance_constant() {
    // part 1: budgets of floor(T̃/1296) flips
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let jobs: Vec<(Digraph, usize, u64, usize)> = (0..100u64)
        .map(|i| {
            let n = rng.gen_range(2..=4);
            (generators::random_weakly_connected(n, 0.4, &mut rng), rng.gen_range(72..=150), i, i as usize % 4)
        })
        .collect();
    let low: Vec<(bool, usize, usize)> = jobs
        .par_iter()
        .map(|(g, t, seed, which)| {
            let c = rs_compile(g.clone(), *t, *seed);
            let allowance = c.rounds() / 1296;
            let rate = (allowance as f64 + 0.5) / (g.m() * c.rounds()) as f64;
            let budget = Budget::global(rate);
            let inner: Box<dyn Adversary + Send> = match which {
                0 => Box::new(random_noise(budget, *seed)),
                1 => Box::new(cut_blocker(g).unwrap().0),
                2 => Box::new(walk_segment_attack(g, c.rounds()).unwrap().0),
                _ => Box::new(Burst { arc: *seed as usize, start: 1 + (*seed as usize * 37) % c.rounds(), count: allowance }),
            };
            let mut adv = BudgetCapped::new(inner, budget);
            let run = rs::run(&c, g, &mut adv, *seed).unwrap();
            (run.success, run.execution.ledger.total, allowance)
        })
        .collect();
    let low_fail = low.iter().filter(|r| !r.0).count();
    let over = low.iter().filter(|r| r.1 > r.2).count();
    let spent: usize = low.iter().map(|r| r.1).sum();

    // part 2: higher budgets; every failure must carry a valid certificate
    // a bounded decoder keeps heavy-noise runs affordable; certificates are
    // checked against the trace, not the decoder
    let tree = TreeCodeConfig { max_depth: 1024, decode_node_budget: 200_000, ..Default::default() };
    let jobs: Vec<(Digraph, usize, u64, f64)> = (0..HIGH_RUNS)
        .map(|i| {
            let n = rng.gen_range(2..=4);
            let rate = [0.01, 0.02, 0.03][i as usize % 3];
            (generators::random_weakly_connected(n, 0.4, &mut rng), rng.gen_range(48..=72), 1000 + i, rate)
        })
        .collect();
    let high: Vec<(bool, Vec<String>)> = jobs
        .par_iter()
        .map(|(g, t, seed, rate)| {
            let c = RsCompiled::new(universal(g.clone(), *t, *seed), *seed, &tree).unwrap();
            let run = rs::run(&c, g, &mut random_noise(Budget::global(*rate), *seed), *seed).unwrap();
            if run.success {
                (true, Vec::new())
            } else {
                (false, certificate_problems(g, &run, *t))
            }
        })
        .collect();
    let high_fail = high.iter().filter(|r| !r.0).count();
    let bad: Vec<&String> = high.iter().flat_map(|r| &r.1).collect();
    let pass = low_fail == 0 && over == 0 && high_fail > 0 && bad.is_empty();
    let detail = format!(
        "{low_fail}/100 failures within floor(T̃/1296) ({spent} flips spent, {over} over budget); \
         {high_fail}/{HIGH_RUNS} failures at higher rates, {} certificate problems{}",
        bad.len(),
        bad.first().map(|s| format!(" (first: {s})")).unwrap_or_default()
    );
    verdict(3, "RS tolerance constant", pass, detail);
}

#[test]
fn c04_cut_sparsifier() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);
    // a small edge target forces sampling even at n ≤ 12
    let forced = SparsifyConfig { c1: 2.0, ..Default::default() };
    let mut violations = Vec::new();
    let mut sampled = 0;
    for i in 0..50u64 {
        let n = rng.gen_range(4..=12);
        let g = generators::random_connected_undirected(n, rng.gen_range(0.3..1.0), &mut rng);
        for cfg in [&forced, &SparsifyConfig::default()] {
            let s = match cut_sparsify(&g, i, cfg) {
                Ok(s) => s,
                Err(e) => {
                    violations.push(format!("graph {i}: {e}"));
                    continue;
                }
            };
            let ge = g.undirected_edges();
            let he = s.graph.undirected_edges();
            sampled += usize::from(he.len() < ge.len());
            let factor = 5.0 * ge.len() as f64 / n as f64;
            if he.len() > 8 * n || !s.graph.is_subgraph_of(&g) {
                violations.push(format!("graph {i}: {} edges", he.len()));
            }
            for mask in 1u32..(1 << n) - 1 {
                let cross = |es: &[(usize, usize)]| es.iter().filter(|&&(u, v)| (mask >> u & 1) != (mask >> v & 1)).count();
                if cross(&ge) as f64 > factor * cross(&he) as f64 {
                    violations.push(format!("graph {i}: cut {mask:b}"));
                    break;
                }
            }
        }
    }
    let detail = format!("50 graphs × 2 configs, {sampled} actually sparsified, {} violations", violations.len());
    verdict(4, "cut sparsifier", violations.is_empty() && sampled > 0, detail);
}

#[test]
fn c05_flow_to_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC5);
    let mut violations = Vec::new();
    let mut attempts = 0;
    for i in 0..50u64 {
        let n = rng.gen_range(3..=10);
        let g = generators::random_connected_undirected(n, rng.gen_range(0.2..1.0), &mut rng);
        let h = cut_sparsify(&g, i, &SparsifyConfig::default()).unwrap().graph;
        let net = FlowNetwork::new(h.clone(), &g);
        let f = max_concurrent_flow(&net, 0.1).unwrap();
        let sp = flow_to_paths(&net, &f, i, 100).unwrap();
        attempts += sp.attempts;
        let mut load = vec![0usize; h.m()];
        for (p, &(s, t)) in sp.paths.paths.iter().zip(&net.commodities) {
            if p.first() != Some(&s) || p.last() != Some(&t) {
                violations.push(format!("instance {i}: path does not join its pair"));
            }
            for w in p.windows(2) {
                match h.arcs().iter().position(|&a| a == (w[0], w[1])) {
                    Some(a) => load[a] += 1,
                    None => violations.push(format!("instance {i}: path leaves the graph")),
                }
            }
        }
        let congestion = load.into_iter().max().unwrap_or(0);
        let bound = 9.0 * (1.0 / f.lambda + (g.m() as f64).ln());
        if congestion as f64 > bound {
            violations.push(format!("instance {i}: congestion {congestion} > {bound:.2}"));
        }
    }
    let mean = attempts as f64 / 50.0;
    let detail = format!("{} violations, mean resample count {mean:.2}", violations.len());
    verdict(5, "flow to paths", violations.is_empty() && mean <= 5.0, detail);
}

#[test]
fn c06_scheduler() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC6);
    let mut violations = 0;
    let mut ratios = Vec::new();
    for i in 0..50u64 {
        let n = rng.gen_range(4..=9);
        let g = generators::complete(n);
        let k = rng.gen_range(5..=40);
        let mut commodities = Vec::new();
        let mut paths = Vec::new();
        for _ in 0..k {
            let len = rng.gen_range(2..=n);
            let mut vs: Vec<usize> = (0..n).collect();
            vs.shuffle(&mut rng);
            vs.truncate(len);
            commodities.push((vs[0], vs[len - 1]));
            paths.push(vs);
        }
        let ps = PathSet { commodities, paths };
        let r = schedule(&ps, &g, i, 16);
        // one packet per arc per step, hops taken in order, everything delivered
        let mut at = vec![0usize; ps.paths.len()];
        let mut valid = true;
        for moves in &r.schedule.steps {
            let mut used = std::collections::HashSet::new();
            for m in moves {
                let p = &ps.paths[m.packet];
                valid &= used.insert(m.arc) && at[m.packet] == m.hop && (p[m.hop], p[m.hop + 1]) == m.arc;
                at[m.packet] += 1;
            }
        }
        valid &= at.iter().zip(&ps.paths).all(|(&h, p)| h + 1 == p.len());
        valid &= r.makespan == r.schedule.steps.len();
        let mut load: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for p in &ps.paths {
            for w in p.windows(2) {
                *load.entry((w[0], w[1])).or_default() += 1;
            }
        }
        let c = load.values().copied().max().unwrap_or(0);
        let l = ps.paths.iter().map(|p| p.len() - 1).max().unwrap_or(0);
        if !valid || r.makespan > c * l {
            violations += 1;
        }
        ratios.push(r.makespan as f64 / (c + l) as f64);
    }
    ratios.sort_by(f64::total_cmp);
    let median = (ratios[24] + ratios[25]) / 2.0;
    let detail = format!("{violations} invalid or over c·ℓ; median makespan/(c+ℓ) = {median:.3}, max {:.3}", ratios[49]);
    verdict(6, "scheduler", violations == 0 && median <= 4.0, detail);
}

fn subsets_of_size(m: usize, k: usize, f: &mut dyn FnMut(&[usize]) -> bool) -> bool {
    fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize]) -> bool) -> bool {
        if cur.len() == k {
            return f(cur);
        }
        for i in start..m {
            cur.push(i);
            if rec(i + 1, m, k, cur, f) {
                return true;
            }
            cur.pop();
        }
        false
    }
    rec(0, m, k, &mut Vec::new(), f)
}

fn brute_rec(g: &Digraph) -> usize {
    let target = closure(g.n(), g.arcs());
    (1..=g.m())
        .find(|&k| {
            subsets_of_size(g.m(), k, &mut |s| {
                let arcs: Vec<_> = (0..g.m()).filter(|i| !s.contains(i)).map(|i| g.arc(i)).collect();
                closure(g.n(), &arcs) != target
            })
        })
        .unwrap()
}

#[test]
fn c07_med_rec_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC7);
    let mut violations = Vec::new();
    let (mut small, mut rec_checked) = (0, 0);
    for i in 0..200 {
        let n = rng.gen_range(2..=10);
        let g = generators::random_digraph(n, rng.gen_range(0.05..0.6), &mut rng);
        let h = graph::med_heuristic(&g);
        if closure(n, h.arcs()) != closure(n, g.arcs()) || !h.is_subgraph_of(&g) {
            violations.push(format!("graph {i}: heuristic changes reachability"));
        }
        if n <= 7 {
            small += 1;
            let e = graph::med_exact(&g).unwrap();
            if closure(n, e.arcs()) != closure(n, g.arcs()) || h.m() > 2 * e.m() {
                violations.push(format!("graph {i}: heuristic {} vs exact {}", h.m(), e.m()));
            }
        }
        if n <= 6 && g.m() > 0 {
            rec_checked += 1;
            let k = graph::relative_edge_connectivity(&g).unwrap();
            if k != brute_rec(&g) {
                violations.push(format!("graph {i}: REC {k}"));
            }
        }
    }
    let detail = format!("200 graphs ({small} with exact MED, {rec_checked} with brute-force REC), {} violations", violations.len());
    verdict(7, "MED/REC oracles", violations.is_empty(), detail);
}

/// Flips exactly `count` transmitted bits per segment.
struct ExactFlips {
    chosen: Vec<Vec<usize>>,
}

impl ExactFlips {
    /// Uniform positions, or (when `one_arc`) positions on a single arc.
    fn new(rounds: usize, arcs: usize, count: usize, one_arc: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut chosen = vec![Vec::new(); rounds];
        if one_arc {
            let arc = rng.gen_range(0..arcs);
            for r in rand::seq::index::sample(rng, rounds, count) {
                chosen[r].push(arc);
            }
        } else {
            for x in rand::seq::index::sample(rng, rounds * arcs, count) {
                chosen[x / arcs].push(x % arcs);
            }
        }
        ExactFlips { chosen }
    }
}

impl Adversary for ExactFlips {
    fn act(&mut self, view: &AdversaryView<'_>) -> Vec<usize> {
        self.chosen[view.round - 1].iter().map(|&k| view.active[k]).collect()
    }
}

#[test]
fn c08_magi_segment() {
    let g = generators::complete(4);
    let n = g.n();
    let eps = compilers::min_common_fraction(&g);
    let params = MagiParams::new(g.m(), eps, compilers::DEFAULT_ETA);
    let flips = params.segment_flips(n);
    let base = Arc::new(MagiLayer::new(g.clone(), params, 0xC8).unwrap());
    let segments = 10_000u64;
    let outcomes: Vec<(usize, usize, usize)> = (0..segments)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let layer = Arc::new(base.with_seed(s));
            let bits: Vec<Vec<bool>> = (0..n).map(|v| (0..g.out_degree(v)).map(|_| rng.gen()).collect()).collect();
            let mut adv = ExactFlips::new(params.segment_rounds(), g.m(), flips, s % 2 == 1, &mut rng);
            let out = magi_segment(&layer, &bits, &mut adv, s).unwrap();
            (out.bit_errors, out.arcs, out.flips)
        })
        .collect();
    let errors: usize = outcomes.iter().map(|o| o.0).sum();
    let bits: usize = outcomes.iter().map(|o| o.1).sum();
    let exact = outcomes.iter().all(|o| o.2 == flips);
    let freq = errors as f64 / bits as f64;
    let bound = params.alpha + 3.0 * (params.alpha / segments as f64).sqrt();
    let detail = format!(
        "{segments} segments of {} rounds with {flips} flips each; error frequency {freq:.5} ≤ {bound:.5} (α = {:.5})",
        params.segment_rounds(),
        params.alpha
    );
    verdict(8, "magi segment", exact && freq <= bound, detail);
}

#[test]
fn c09_gv_tiny_scale() {
    let g = generators::directed_path(3);
    let star = Digraph::new(3, [(1, 0), (0, 2)]).unwrap();
    let trials = 200u64;
    let names = ["random", "cut-blocker", "walk", "star", "burst", "alt-reality-0", "alt-reality-1"];
    // a fresh protocol per trial, so zeroing attacks meet nonzero codewords
    let res: Vec<Vec<(bool, usize, f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|s| {
            let c = compilers::compile_gv(universal(g.clone(), 1, s), &CompileConfig::default()).unwrap();
            let gv = c.gv().unwrap().clone();
            let cap = 1.0 / (4.0 * gv.diameter() as f64) - gv.epsilon();
            let budget = Budget::per_edge(cap);
            let rounds = c.rounds();
            (0..names.len())
                .map(|k| {
                    let inner: Box<dyn Adversary + Send> = match k {
                        0 => Box::new(random_noise(budget, s)),
                        1 => Box::new(cut_blocker(&g).unwrap().0),
                        2 => Box::new(walk_segment_attack(&g, rounds).unwrap().0),
                        // the directed 3-path is the inward star with one leaf
                        3 => Box::new(Relabel { inner: star_sequential(&star, 1, rounds).unwrap() }),
                        4 => Box::new(Burst { arc: s as usize, start: 1 + (s as usize * 7) % rounds, count: rounds }),
                        _ => {
                            let t = Arc::new(GvTarget::new(gv.clone(), k - 5));
                            let table = Arc::new(AlternativeReality::table_for(t.as_ref()).unwrap());
                            Box::new(AlternativeReality::new(t, table, s).unwrap())
                        }
                    };
                    let mut adv = BudgetCapped::new(inner, budget);
                    let (ok, ledger) = if k >= 5 {
                        let t = GvTarget::new(gv.clone(), k - 5);
                        let x = ChaCha8Rng::seed_from_u64(s).gen_range(0..1u64 << t.input_bits());
                        let mut parties = t.machines(x);
                        let ex = execute(&g, &mut parties, &mut adv, ExecOptions { rounds, seed: s, record_trace: false }).unwrap();
                        (ex.outputs == t.compiled(x).expected_outputs(), ex.ledger)
                    } else {
                        let run = c.run(&g, &mut adv, s, false).unwrap();
                        (run.success, run.execution.ledger)
                    };
                    (ok, ledger.total, ledger.max_per_edge_rate(), cap)
                })
                .collect()
        })
        .collect();
    let cap = res[0][0].3;
    let mut report = Vec::new();
    let mut total_failures = 0;
    let mut over = 0;
    for (k, name) in names.iter().enumerate() {
        let failures = res.iter().filter(|r| !r[k].0).count();
        let flips: usize = res.iter().map(|r| r[k].1).sum();
        let max_rate = res.iter().map(|r| r[k].2).fold(0.0, f64::max);
        over += res.iter().filter(|r| r[k].2 > r[k].3 + 1e-12).count();
        total_failures += failures;
        report.push(format!("{name} {failures}/{trials} ({flips} flips, max rate {max_rate:.4})"));
    }
    let detail = format!("cap {cap:.4} per edge; {}", report.join(", "));
    verdict(9, "GV tiny scale", total_failures == 0 && over == 0, detail);
}

/// Presents the directed 3-path 0→1→2 to an adversary as the inward star
/// 1→0→2, i.e. swaps vertex labels 0 and 1.
struct Relabel<A> {
    inner: A,
}

impl<A: Adversary> Adversary for Relabel<A> {
    fn act(&mut self, view: &AdversaryView<'_>) -> Vec<usize> {
        let swap = |v: usize| match v {
            0 => 1,
            1 => 0,
            v => v,
        };
        let arcs: Vec<(usize, usize)> = view.graph.arcs().iter().map(|&(u, v)| (swap(u), swap(v))).collect();
        let star = Digraph::new(view.graph.n(), arcs.iter().copied()).unwrap();
        // map ids through the relabelled arcs
        let to_star: Vec<usize> = arcs.iter().map(|&(u, v)| star.arc_id(u, v).unwrap()).collect();
        let mut from_star = vec![0; to_star.len()];
        for (a, &b) in to_star.iter().enumerate() {
            from_star[b] = a;
        }
        let active: Vec<usize> = view.active.iter().map(|&a| to_star[a]).collect();
        let mut sent = vec![false; view.sent.len()];
        for &a in view.active {
            sent[to_star[a]] = view.sent[a];
        }
        let mut active_sorted = active.clone();
        active_sorted.sort_unstable();
        let v = AdversaryView { round: view.round, rounds: view.rounds, graph: &star, active: &active_sorted, sent: &sent };
        self.inner.act(&v).into_iter().map(|b| from_star[b]).collect()
    }
}

#[test]
fn c10_walk_attack_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xCA);
    let mut violations = Vec::new();
    let mut runs = 0;
    for i in 0..40u64 {
        let n = rng.gen_range(2..=5);
        let g = generators::random_weakly_connected(n, 0.35, &mut rng);
        let t = rng.gen_range(2..=5);
        let c = rs_compile(g.clone(), t, i);
        let rounds = c.rounds();
        let ws = walk_segments(&g, rounds).unwrap();
        let r = ws.chain_length;
        let covered = ws.segments.first().map(|s| s.0) == Some(1)
            && ws.segments.last().map(|s| s.1) == Some(rounds)
            && ws.segments.windows(2).all(|w| w[1].0 == w[0].1 + 1 && w[0].0 <= w[0].1);
        if !covered {
            violations.push(format!("run {i}: segments do not partition 1..={rounds}"));
        }
        let (mut adv, _) = walk_segment_attack(&g, rounds).unwrap();
        let run = rs::run(&c, &g, &mut adv, i).unwrap();
        runs += 1;
        for (a, rate) in per_arc_rates(&run.execution.ledger.flips, rounds).enumerate() {
            if rate > 4.0 / r as f64 {
                violations.push(format!("run {i}: arc {:?} rate {rate:.4} > 4/{r}", g.arc(a)));
            }
        }
    }
    // uncoded protocols over a spread of horizons
    for i in 0..40u64 {
        let n = rng.gen_range(2..=6);
        let g = generators::random_weakly_connected(n, 0.35, &mut rng);
        let r = graph::chain_length_walk(&g).unwrap().chain_length;
        let rounds = rng.gen_range(r * r..=400.max(r * r));
        let p: Arc<dyn Protocol> = universal(g.clone(), rounds, i);
        let mut parties = multicoding::netsim::DirectParty::all(&p);
        let (mut adv, ws) = walk_segment_attack(&g, rounds).unwrap();
        if ws.segments.iter().map(|s| s.1 + 1 - s.0).sum::<usize>() != rounds {
            violations.push(format!("uncoded {i}: segments do not cover {rounds}"));
        }
        let ex = execute(&g, &mut parties, &mut adv, ExecOptions { rounds, seed: i, record_trace: false }).unwrap();
        runs += 1;
        if per_arc_rates(&ex.ledger.flips, rounds).any(|x| x > 4.0 / r as f64) {
            violations.push(format!("uncoded {i}: rate above 4/{r}"));
        }
    }
    let detail = format!("{runs} runs, {} violations", violations.len());
    verdict(10, "walk attack budget", violations.is_empty(), detail);
}

#[test]
fn c11_alternative_reality() {
    let g = generators::directed_path(3);
    let path = vec![0, 1, 2];
    let target = Arc::new(UncodedRelay::new(g.clone(), path.clone(), 8).unwrap());
    let table = Arc::new(AlternativeReality::table_for(target.as_ref()).unwrap());
    let d = 2.0;
    let trials = 1000u64;
    let res: Vec<(bool, f64, bool)> = (0..trials)
        .into_par_iter()
        .map(|s| {
            let x = ChaCha8Rng::seed_from_u64(s).gen_range(0..256u64);
            let mut adv = AlternativeReality::new(target.clone(), table.clone(), s).unwrap();
            let mut parties = target.machines(x);
            let opts = ExecOptions { rounds: target.rounds(), seed: s, record_trace: false };
            let ex = execute(target.graph(), &mut parties, &mut adv, opts).unwrap();
            let truth = RelayProtocol::with_input_word(g.clone(), path.clone(), 8, x).unwrap();
            (ex.outputs[target.sink()] != truth.input(), ex.ledger.max_per_edge_rate(), adv.replay_check())
        })
        .collect();
    let failures = res.iter().filter(|r| r.0).count();
    let max_rate = res.iter().map(|r| r.1).fold(0.0, f64::max);
    let replay_ok = res.iter().all(|r| r.2);
    let f = failures as f64 / trials as f64;
    let floor = 0.25 - 3.0 * (0.25f64 * 0.75 / trials as f64).sqrt();
    let detail = format!("failure frequency {f:.3} ≥ {floor:.3}; max per-edge rate {max_rate:.4} ≤ {}", 1.0 / (2.0 * d));
    verdict(11, "alternative reality", f >= floor && max_rate <= 1.0 / (2.0 * d) && replay_ok, detail);
}

fn cli(args: &[&str], threads: &str) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_multicoding"))
        .args(args)
        .env("RAYON_NUM_THREADS", threads)
        .env_remove(multicoding_cli::RETRY_ENV)
        .output()
        .unwrap()
}

#[test]
fn c12_replay_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let suites: Vec<Vec<&str>> = vec![
        vec!["run", "--graph", "random-digraph:4:0.4", "--compiler", "rs", "--adversary", "random", "--rate", "0.01", "--T", "3", "--trials", "12"],
        vec!["run", "--graph", "complete:5", "--compiler", "undirected", "--adversary", "cut-blocker", "--rate", "0.002", "--T", "2", "--trials", "6"],
        vec!["run", "--graph", "tournament:4", "--compiler", "med", "--adversary", "walk", "--T", "2", "--trials", "6"],
        vec!["run", "--graph", "directed-path:3", "--compiler", "gv", "--adversary", "alt-reality", "--budget", "per-edge", "--T", "1", "--trials", "8"],
        vec!["run", "--graph", "star:3", "--compiler", "none", "--adversary", "star", "--T", "12", "--trials", "4"],
        vec!["sweep", "--graph", "bidirected-cycle:4", "--compiler", "rs", "--adversary", "random", "--T", "2", "--trials", "6", "--rates", "0,0.01,0.05"],
    ];
    let mut mismatched = Vec::new();
    for (i, args) in suites.iter().enumerate() {
        let mut outputs = Vec::new();
        for (rep, threads) in ["1", "4"].iter().enumerate() {
            let path = dir.path().join(format!("suite{i}-{rep}.out"));
            let path_s = path.to_str().unwrap();
            let mut full = args.clone();
            full.extend(["--seed", "12", "--out", path_s]);
            let out = cli(&full, threads);
            assert!(out.status.success(), "suite {i}: {}", String::from_utf8_lossy(&out.stderr));
            // the output path is part of the embedded config; normalise it
            let text = std::fs::read_to_string(Path::new(&path)).unwrap().replace(path_s, "OUT");
            outputs.push(text);
        }
        if outputs[0] != outputs[1] || outputs[0].is_empty() {
            mismatched.push(i);
        }
    }
    let detail = format!("{} suite configs re-run at 1 and 4 threads, {} differ {:?}", suites.len(), mismatched.len(), mismatched);
    verdict(12, "replay determinism", mismatched.is_empty(), detail);
}

#[test]
fn budget_model_names_match_cli() {
    // the CLI spells budget models the same way the library serialises them
    assert_eq!(serde_json::to_string(&BudgetModel::PerEdge).unwrap(), "\"per-edge\"");
}
