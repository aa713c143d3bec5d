//! Named graph families and seeded random graphs.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::Digraph;

fn build(n: usize, arcs: impl IntoIterator<Item = (usize, usize)>) -> Digraph {
    Digraph::new(n, arcs).expect("generator produces a simple digraph")
}

fn bidirect(arcs: impl IntoIterator<Item = (usize, usize)>) -> BTreeSet<(usize, usize)> {
    arcs.into_iter().flat_map(|(u, v)| [(u, v), (v, u)]).collect()
}

/// Bidirected complete graph.
pub fn complete(n: usize) -> Digraph {
    build(n, (0..n).flat_map(|u| (0..n).filter(move |&v| v != u).map(move |v| (u, v))))
}

pub fn directed_cycle(n: usize) -> Digraph {
    assert!(n >= 2);
    if n == 2 {
        return build(2, [(0, 1), (1, 0)]);
    }
    build(n, (0..n).map(|i| (i, (i + 1) % n)))
}

pub fn bidirected_cycle(n: usize) -> Digraph {
    assert!(n >= 2);
    build(n, bidirect((0..n).map(|i| (i, (i + 1) % n)).filter(|&(u, v)| u != v)))
}

/// `0 → 1 → … → n−1`.
pub fn directed_path(n: usize) -> Digraph {
    build(n, (1..n).map(|i| (i - 1, i)))
}

pub fn bidirected_path(n: usize) -> Digraph {
    build(n, bidirect((1..n).map(|i| (i - 1, i))))
}

/// Centre 0 with `q` leaves `1..=q` pointing inward and one outward arc to `q+1`.
pub fn inward_star(q: usize) -> Digraph {
    build(q + 2, (1..=q).map(|i| (i, 0)).chain([(0, q + 1)]))
}

/// `i → j` for every `i < j`.
pub fn transitive_tournament(n: usize) -> Digraph {
    build(n, (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))))
}

/// Each ordered pair independently with probability `p`.
pub fn random_digraph<R: Rng>(n: usize, p: f64, rng: &mut R) -> Digraph {
    let mut arcs = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u != v && rng.gen_bool(p) {
                arcs.push((u, v));
            }
        }
    }
    build(n, arcs)
}

fn random_tree<R: Rng>(n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    (1..n).map(|i| (order[rng.gen_range(0..i)], order[i])).collect()
}

/// Connected symmetric graph: a random spanning tree plus each further
/// unordered pair with probability `p`.
pub fn random_connected_undirected<R: Rng>(n: usize, p: f64, rng: &mut R) -> Digraph {
    let mut edges: BTreeSet<(usize, usize)> =
        random_tree(n, rng).into_iter().map(|(u, v)| (u.min(v), u.max(v))).collect();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(p) {
                edges.insert((u, v));
            }
        }
    }
    build(n, bidirect(edges))
}

/// Weakly connected digraph: a randomly oriented spanning tree plus each
/// further ordered pair with probability `p`.
pub fn random_weakly_connected<R: Rng>(n: usize, p: f64, rng: &mut R) -> Digraph {
    let mut arcs: BTreeSet<(usize, usize)> = random_tree(n, rng)
        .into_iter()
        .map(|(u, v)| if rng.gen_bool(0.5) { (u, v) } else { (v, u) })
        .collect();
    for u in 0..n {
        for v in 0..n {
            if u != v && rng.gen_bool(p) {
                arcs.insert((u, v));
            }
        }
    }
    build(n, arcs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn family_sizes() {
        assert_eq!(complete(5).m(), 20);
        assert_eq!(directed_cycle(6).m(), 6);
        assert_eq!(bidirected_cycle(6).m(), 12);
        assert_eq!(directed_path(4).m(), 3);
        assert_eq!(inward_star(3).m(), 4);
        assert_eq!(transitive_tournament(4).m(), 6);
    }

    #[test]
    fn random_families_are_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..10 {
            let g = random_connected_undirected(n, 0.2, &mut rng);
            assert!(g.require_undirected_connected().is_ok());
            assert!(random_weakly_connected(n, 0.1, &mut rng).is_weakly_connected());
        }
    }
}
