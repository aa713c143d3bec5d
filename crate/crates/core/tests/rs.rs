use std::sync::Arc;

use multicoding::adversaries::{self, cut_blocker_on, random_noise, star_sequential, walk_segment_attack, Action, AttackPlan, PlanEntry, PlannedAttack};
use multicoding::graph::{generators, Digraph};
use multicoding::netsim::{Adversary, AdversaryView, Budget, NullAdversary};
use multicoding::protocol::{run_noiseless, Protocol, UniversalProtocol};
use multicoding::rs::{self, RsCompiled, StepRecord};
use multicoding::treecode::TreeCodeConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn deep() -> TreeCodeConfig {
    TreeCodeConfig { max_depth: 512, ..Default::default() }
}

fn compile(g: Digraph, t: usize, seed: u64) -> RsCompiled {
    let p = UniversalProtocol::random(g, t, seed).unwrap();
    RsCompiled::new(Arc::new(p), 7, &deep()).unwrap()
}

fn assert_progress_bound(run: &rs::RsRun) {
    let v: Vec<StepRecord> = run.instrumentation.violations();
    assert!(v.is_empty(), "progress inequality violated: {:?}", &v[..v.len().min(5)]);
    for r in &run.instrumentation.records {
        assert_eq!(r.at, r.step - 2 * r.b);
        assert!(r.rp <= r.at);
    }
    for p in 0..run.instrumentation.parties {
        let ys: Vec<usize> = (1..=run.instrumentation.steps).map(|s| run.instrumentation.record(p, s).y).collect();
        assert!(ys.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn wrapper_shape_and_horizon() {
    let c = compile(Digraph::new(2, [(0, 1)]).unwrap(), 4, 1);
    assert_eq!(c.wrapped().graph().arcs(), &[(0, 1), (1, 2)]);
    assert_eq!(c.steps(), 9);
    assert!(c.rounds() <= 27 * 4);
    let c = compile(generators::directed_cycle(2), 3, 1);
    assert_eq!(c.wrapped().graph().m(), 4);
}

#[test]
fn wrapped_protocol_replays_original_on_ordinary_arcs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let g = generators::random_weakly_connected(4, 0.3, &mut rng);
        let c = compile(g.clone(), 1 + trial % 5, trial as u64);
        let orig = run_noiseless(c.inner().as_ref());
        let wrapped = run_noiseless(c.wrapped().as_ref());
        for a in 0..g.m() {
            let wa = c.wrapped().graph().arc_id(g.arc(a).0, g.arc(a).1).unwrap();
            assert_eq!(&wrapped.transcripts[wa][..orig.transcripts[a].len()], &orig.transcripts[a][..]);
            assert!(!wrapped.transcripts[wa].last().unwrap());
        }
        assert_eq!(&wrapped.outputs[..g.n()], &orig.outputs[..]);
    }
}

#[test]
fn noiseless_fidelity_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100u64 {
        let n = rng.gen_range(2..=5);
        let t = rng.gen_range(1..=6);
        let g = generators::random_weakly_connected(n, 0.3, &mut rng);
        let c = compile(g.clone(), t, trial);
        let run = rs::run(&c, &g, &mut NullAdversary, trial).unwrap();
        assert!(run.success, "trial {trial}");
        assert_eq!(run.execution.ledger.total, 0);
        assert!(run.instrumentation.records.iter().all(|r| r.rp == r.step && r.y == 0 && r.b == 0));
    }
}

#[test]
fn runs_on_a_supergraph_leave_extra_arcs_silent() {
    let g = Digraph::new(3, [(0, 1), (1, 2)]).unwrap();
    let exec = generators::complete(3);
    let c = compile(g, 3, 2);
    let run = rs::run(&c, &exec, &mut NullAdversary, 0).unwrap();
    assert!(run.success);
    assert_eq!(run.execution.ledger.active_arcs, 2);
}

struct FlipOnce {
    arc: usize,
    round: usize,
}

impl Adversary for FlipOnce {
    fn act(&mut self, view: &AdversaryView<'_>) -> Vec<usize> {
        if view.round == self.round {
            vec![self.arc]
        } else {
            Vec::new()
        }
    }
}

#[test]
fn one_flipped_bit_is_one_character_error() {
    let g = generators::directed_cycle(3);
    let c = compile(g.clone(), 4, 3);
    let run = rs::run(&c, &g, &mut FlipOnce { arc: 1, round: 13 }, 0).unwrap();
    assert_eq!(run.instrumentation.errors.len(), 1);
    let e = run.instrumentation.errors[0];
    assert_eq!((e.arc, e.step), (1, 3));
    assert_progress_bound(&run);
}

#[test]
fn saturated_arc_yields_single_arc_failure_walk() {
    let g = generators::directed_path(3);
    let c = compile(g.clone(), 4, 4);
    let plan = AttackPlan { entries: vec![PlanEntry { first: 1, last: c.rounds(), arcs: vec![(0, 1)], action: Action::Flip }] };
    let run = rs::run(&c, &g, &mut PlannedAttack::new(plan), 0).unwrap();
    assert!(!run.success);
    assert_progress_bound(&run);
    let w = run.instrumentation.extract_failure_walk().unwrap();
    assert_eq!(w.walk, vec![0, 1]);
    assert!(w.chain.iter().all(|e| e.arc == 0));
    assert!(w.chain.len() >= 1);
    assert!(w.bit_errors >= w.chain.len());
}

#[test]
fn instrumentation_csv_has_expected_columns() {
    let g = generators::directed_cycle(2);
    let c = compile(g.clone(), 2, 1);
    let run = rs::run(&c, &g, &mut NullAdversary, 0).unwrap();
    let mut buf = Vec::new();
    run.instrumentation.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("party,step,RP,B,AT,Y"));
    assert_eq!(lines.count(), 2 * c.steps());
}

#[test]
fn progress_bound_under_attacks() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // random noise
    for trial in 0..12u64 {
        let n = rng.gen_range(2..=4);
        let g = generators::random_weakly_connected(n, 0.4, &mut rng);
        let c = compile(g.clone(), 3, trial);
        let rate = [0.002, 0.01, 0.03][trial as usize % 3];
        let run = rs::run(&c, &g, &mut random_noise(Budget::global(rate), trial), trial).unwrap();
        assert_progress_bound(&run);
        if !run.success {
            let w = run.instrumentation.extract_failure_walk().unwrap();
            assert!(!w.chain.is_empty());
        }
    }
    // cut blocker on a path
    let g = generators::directed_path(3);
    let c = compile(g.clone(), 4, 1);
    let run = rs::run(&c, &g, &mut cut_blocker_on(vec![(1, 2)]), 0).unwrap();
    assert!(!run.success);
    assert_progress_bound(&run);
    // star
    let g = generators::inward_star(3);
    let c = compile(g.clone(), 4, 2);
    let run = rs::run(&c, &g, &mut star_sequential(&g, 3, c.rounds()).unwrap(), 0).unwrap();
    assert_progress_bound(&run);
    // walk segments
    let g = generators::directed_cycle(3);
    let c = compile(g.clone(), 4, 3);
    let (mut a, _) = walk_segment_attack(&g, c.rounds()).unwrap();
    let run = rs::run(&c, &g, &mut a, 0).unwrap();
    assert_progress_bound(&run);
}

#[test]
fn tiny_global_budget_never_breaks_the_simulation() {
    let g = generators::directed_cycle(3);
    let c = compile(g.clone(), 72, 9);
    let allowance = c.rounds() / 1296;
    assert!(allowance >= 1);
    for trial in 0..10u64 {
        let budget = Budget::global(1.0 / (1296.0 * g.m() as f64));
        let run = rs::run(&c, &g, &mut random_noise(budget, trial), trial).unwrap();
        assert!(run.execution.ledger.total <= allowance);
        assert!(run.success, "trial {trial}");
        assert_progress_bound(&run);
    }
}

#[test]
fn certificate_absent_on_success() {
    let g = generators::complete(3);
    let c = compile(g.clone(), 2, 0);
    let run = rs::run(&c, &g, &mut adversaries::cut_blocker_on(Vec::new()), 0).unwrap();
    assert!(run.success);
    assert!(run.instrumentation.extract_failure_walk().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn progress_bound_under_random_noise(seed in any::<u64>(), n in 2usize..=4, t in 1usize..=4, rate in 0.0f64..0.05) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = generators::random_weakly_connected(n, 0.4, &mut rng);
        let c = compile(g.clone(), t, seed);
        let run = rs::run(&c, &g, &mut random_noise(Budget::global(rate), seed), seed).unwrap();
        prop_assert!(run.instrumentation.violations().is_empty());
        if !run.success {
            let w = run.instrumentation.extract_failure_walk().unwrap();
            prop_assert!(w.walk.windows(2).all(|p| g.has_arc(p[0], p[1])));
            prop_assert!(w.chain.len() as f64 >= (t as f64 / 48.0).ceil());
        }
        prop_assert_eq!(run.execution.outputs.len(), c.inner().graph().n());
    }
}
