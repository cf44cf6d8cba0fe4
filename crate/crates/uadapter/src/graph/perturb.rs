//! Structural noise for robustness evaluation: delete or add an exact
//! fraction of edges, uniformly at random, deterministically per seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::graph::Graph;

/// First k entries of a seeded partial Fisher-Yates pass over 0..count:
/// a uniform k-subset in uniform order.
pub(crate) fn sample_distinct(count: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(k <= count);
    let mut idx: Vec<usize> = (0..count).collect();
    for i in 0..k {
        let j = rng.gen_range(i..count);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Remove exactly floor(p * |E|) edges chosen uniformly at random. Node
/// features and labels are untouched; surviving edges keep their order and
/// features.
pub fn perturb_edges_delete(g: &Graph, p: f64, seed: u64) -> Result<Graph> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(
            "perturb_edges_delete",
            format!("fraction {p} outside [0,1]"),
        ));
    }
    let k = (p * g.num_edges() as f64).floor() as usize;
    if k == 0 {
        return Ok(g.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let doomed: HashSet<usize> = sample_distinct(g.num_edges(), k, &mut rng).into_iter().collect();
    let mut out = g.clone();
    out.edges.clear();
    out.edge_features.clear();
    for (ei, &edge) in g.edges.iter().enumerate() {
        if !doomed.contains(&ei) {
            out.edges.push(edge);
            if g.d_edge > 0 {
                out.edge_features
                    .extend_from_slice(&g.edge_features[ei * g.d_edge..(ei + 1) * g.d_edge]);
            }
        }
    }
    Ok(out)
}

/// Add exactly floor(p * |E|) new undirected edges sampled uniformly from the
/// absent non-self-loop pairs. Added edges get zero-vector features when edge
/// features exist. Errors when fewer absent pairs exist than needed.
pub fn perturb_edges_add(g: &Graph, p: f64, seed: u64) -> Result<Graph> {
    if p < 0.0 {
        return Err(Error::invalid(
            "perturb_edges_add",
            format!("fraction {p} must be nonnegative"),
        ));
    }
    let k = (p * g.num_edges() as f64).floor() as usize;
    if k == 0 {
        return Ok(g.clone());
    }
    let existing: HashSet<(usize, usize)> = g
        .edges
        .iter()
        .map(|&(i, j)| Graph::edge_key(i, j))
        .collect();
    let mut absent = Vec::new();
    for i in 0..g.num_nodes {
        for j in (i + 1)..g.num_nodes {
            if !existing.contains(&(i, j)) {
                absent.push((i, j));
            }
        }
    }
    if k > absent.len() {
        return Err(Error::EdgeCapacity {
            needed: k,
            available: absent.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = sample_distinct(absent.len(), k, &mut rng);
    let mut out = g.clone();
    for ci in chosen {
        out.edges.push(absent[ci]);
        if g.d_edge > 0 {
            out.edge_features.extend(std::iter::repeat(0.0).take(g.d_edge));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn graph_with_edges(n: usize, edges: Vec<(usize, usize)>, d_edge: usize) -> Graph {
        let edge_features = (0..edges.len() * d_edge).map(|i| i as f64).collect();
        Graph {
            node_features: vec![0.5; n],
            num_nodes: n,
            d_in: 1,
            edges,
            edge_features,
            d_edge,
            labels: vec![1.0],
            label_mask: vec![1.0],
        }
    }

    fn ten_edge_graph() -> Graph {
        // 5-node complete graph: C(5,2) = 10 edges.
        let mut edges = Vec::new();
        for i in 0..5 {
            for j in (i + 1)..5 {
                edges.push((i, j));
            }
        }
        graph_with_edges(5, edges, 2)
    }

    #[test]
    fn delete_zero_fraction_is_identity() {
        let g = ten_edge_graph();
        assert_eq!(perturb_edges_delete(&g, 0.0, 99).unwrap(), g);
    }

    #[test]
    fn delete_everything_leaves_no_edges() {
        let g = ten_edge_graph();
        let out = perturb_edges_delete(&g, 1.0, 0).unwrap();
        assert!(out.edges.is_empty());
        assert!(out.edge_features.is_empty());
        assert_eq!(out.node_features, g.node_features);
        assert_eq!(out.labels, g.labels);
    }

    #[test]
    fn delete_grid_counts_are_exact() {
        let g = ten_edge_graph();
        for (p, expect) in [(0.0, 10), (0.2, 8), (0.4, 6), (0.6, 4), (0.8, 2)] {
            let out = perturb_edges_delete(&g, p, 7).unwrap();
            assert_eq!(out.num_edges(), expect, "p={p}");
            out.validate("perturbed").unwrap();
            // Features stay aligned with surviving edges.
            assert_eq!(out.edge_features.len(), out.num_edges() * 2);
        }
    }

    #[test]
    fn delete_fraction_out_of_range_is_error() {
        let g = ten_edge_graph();
        assert!(perturb_edges_delete(&g, -0.1, 0).is_err());
        assert!(perturb_edges_delete(&g, 1.1, 0).is_err());
    }

    #[test]
    fn surviving_sets_are_equiprobable() {
        // 4 edges, p=0.5: 2 deleted, C(4,2)=6 possible surviving sets.
        // Chi-square over 10^4 fixed seeds against the uniform expectation;
        // df=5, so anything near 5 is healthy and 20.5 is the 0.999 quantile.
        let g = graph_with_edges(4, vec![(0, 1), (1, 2), (2, 3), (0, 3)], 0);
        let mut counts: HashMap<Vec<(usize, usize)>, usize> = HashMap::new();
        for seed in 0..10_000u64 {
            let mut survivors = perturb_edges_delete(&g, 0.5, seed).unwrap().edges;
            survivors.sort_unstable();
            *counts.entry(survivors).or_default() += 1;
        }
        assert_eq!(counts.len(), 6, "all 6 surviving sets must occur");
        let expected = 10_000.0 / 6.0;
        let chi2: f64 = counts
            .values()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 20.5, "chi-square {chi2} too large for uniformity");
    }

    #[test]
    fn add_zero_fraction_is_identity() {
        let g = graph_with_edges(4, vec![(0, 1), (2, 3)], 1);
        assert_eq!(perturb_edges_add(&g, 0.0, 5).unwrap(), g);
    }

    #[test]
    fn add_on_complete_graph_is_capacity_error() {
        let g = ten_edge_graph();
        let err = perturb_edges_add(&g, 0.2, 0).unwrap_err();
        assert!(matches!(err, Error::EdgeCapacity { needed: 2, available: 0 }), "{err}");
    }

    #[test]
    fn path_gains_exactly_one_edge_at_half() {
        // floor(0.5 * 2) = 1 and only {0,2} is absent.
        let g = graph_with_edges(3, vec![(0, 1), (1, 2)], 0);
        let out = perturb_edges_add(&g, 0.5, 123).unwrap();
        assert_eq!(out.num_edges(), 3);
        assert_eq!(*out.edges.last().unwrap(), (0, 2));
        out.validate("perturbed").unwrap();
    }

    #[test]
    fn added_edges_get_zero_features() {
        let g = graph_with_edges(4, vec![(0, 1), (1, 2)], 2);
        let out = perturb_edges_add(&g, 0.5, 11).unwrap();
        assert_eq!(out.num_edges(), 3);
        let last = &out.edge_features[2 * 2..];
        assert_eq!(last, &[0.0, 0.0]);
        // Original features untouched.
        assert_eq!(&out.edge_features[..4], &g.edge_features[..]);
    }

    #[test]
    fn negative_add_fraction_is_error() {
        let g = graph_with_edges(3, vec![(0, 1)], 0);
        assert!(perturb_edges_add(&g, -0.5, 0).is_err());
    }

    #[test]
    fn perturbation_is_deterministic_per_seed() {
        let g = ten_edge_graph();
        for seed in [0u64, 1, 99] {
            assert_eq!(
                perturb_edges_delete(&g, 0.4, seed).unwrap(),
                perturb_edges_delete(&g, 0.4, seed).unwrap()
            );
        }
        let g2 = graph_with_edges(8, vec![(0, 1), (2, 3), (4, 5)], 0);
        for seed in [0u64, 1, 99] {
            assert_eq!(
                perturb_edges_add(&g2, 1.0, seed).unwrap(),
                perturb_edges_add(&g2, 1.0, seed).unwrap()
            );
        }
        assert_ne!(
            perturb_edges_delete(&g, 0.4, 0).unwrap(),
            perturb_edges_delete(&g, 0.4, 1).unwrap()
        );
    }

    prop_compose! {
        fn arb_graph()(n in 2usize..12)(
            n in Just(n),
            edge_flags in proptest::collection::vec(any::<bool>(), n * (n - 1) / 2),
        ) -> Graph {
            let mut edges = Vec::new();
            let mut flag = edge_flags.into_iter();
            for i in 0..n {
                for j in (i + 1)..n {
                    if flag.next().unwrap() {
                        edges.push((i, j));
                    }
                }
            }
            graph_with_edges(n, edges, 0)
        }
    }

    proptest! {
        #[test]
        fn delete_count_matches_floor_for_grid(g in arb_graph(), seed in any::<u64>()) {
            for p in [0.0, 0.2, 0.4, 0.6, 0.8] {
                let out = perturb_edges_delete(&g, p, seed).unwrap();
                let expect = g.num_edges() - (p * g.num_edges() as f64).floor() as usize;
                prop_assert_eq!(out.num_edges(), expect);
                prop_assert!(out.validate("prop").is_ok());
            }
        }

        #[test]
        fn add_keeps_graphs_valid_or_reports_capacity(g in arb_graph(), seed in any::<u64>()) {
            for p in [0.2, 0.5, 1.0] {
                let k = (p * g.num_edges() as f64).floor() as usize;
                let capacity = g.num_nodes * (g.num_nodes - 1) / 2 - g.num_edges();
                match perturb_edges_add(&g, p, seed) {
                    Ok(out) => {
                        prop_assert!(k <= capacity);
                        prop_assert_eq!(out.num_edges(), g.num_edges() + k);
                        prop_assert!(out.validate("prop").is_ok());
                        // Original edges survive as a prefix.
                        prop_assert_eq!(&out.edges[..g.num_edges()], &g.edges[..]);
                    }
                    Err(Error::EdgeCapacity { needed, available }) => {
                        prop_assert_eq!(needed, k);
                        prop_assert_eq!(available, capacity);
                        prop_assert!(k > capacity);
                    }
                    Err(e) => return Err(TestCaseError::fail(format!("unexpected error {e}"))),
                }
            }
        }
    }
}
