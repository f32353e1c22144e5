//! Structural properties of encoded query graphs and of message passing
//! over them, checked on generated plans.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zscost::featurize::{self, FeatureNormalizer, FeatureSpec, GraphNode, NodeType, QueryGraph};
use zscost::model::{ModelConfig, ZeroShotModel};
use zscost::synth::{self, OracleParams, SynthParams, WorkloadMode};
use zscost::trace::{CardSource, DatabaseCatalog, PlanSample};

struct Fixture {
    catalog: DatabaseCatalog,
    samples: Vec<PlanSample>,
    spec: FeatureSpec,
    norm: FeatureNormalizer,
}

fn fixture(seed: u64) -> Fixture {
    let params = SynthParams::default();
    let catalog = synth::gen_catalog("prop", seed, &params).unwrap();
    let samples = synth::gen_database_samples(
        &catalog,
        &params,
        &OracleParams::default(),
        &WorkloadMode::ALL,
        12,
        seed,
    )
    .unwrap();
    let spec = FeatureSpec::standard();
    let norm = featurize::fit_normalizer(
        samples.iter().map(|s| (s, &catalog, CardSource::Actual)),
        &spec,
    )
    .unwrap();
    Fixture {
        catalog,
        samples,
        spec,
        norm,
    }
}

fn graphs(f: &Fixture, source: CardSource) -> Vec<QueryGraph> {
    f.samples
        .iter()
        .map(|s| featurize::build_query_graph(s, &f.catalog, source, &f.spec, &f.norm).unwrap())
        .collect()
}

fn model(f: &Fixture, seed: u64) -> ZeroShotModel {
    let cfg = ModelConfig {
        hidden_dim: 16,
        seed,
        ..ModelConfig::default()
    };
    ZeroShotModel::new(cfg, CardSource::Actual, f.spec.clone(), f.norm.clone()).unwrap()
}

/// A random renumbering that keeps the relative order of every node's
/// children: a random linear extension of "sibling i before sibling i+1".
fn order_preserving_permutation(g: &QueryGraph, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = g.len();
    let mut after: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut indegree = vec![0usize; n];
    for v in 0..n {
        for w in g.children(v).windows(2) {
            after[w[0]].push(w[1]);
            indegree[w[1]] += 1;
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
    let mut perm = vec![0; n];
    let mut next = 0;
    while !ready.is_empty() {
        let &v = ready.choose(rng).unwrap();
        ready.retain(|&u| u != v);
        perm[v] = next;
        next += 1;
        for &u in &after[v] {
            indegree[u] -= 1;
            if indegree[u] == 0 {
                ready.push(u);
            }
        }
    }
    assert_eq!(next, n);
    perm
}

#[test]
fn every_graph_satisfies_the_structural_invariants() {
    for seed in 0..4 {
        let f = fixture(seed);
        for g in graphs(&f, CardSource::Estimated) {
            assert_eq!(g.nodes()[g.root()].node_type, NodeType::PlanOp);
            assert_eq!(*g.topological_order().last().unwrap(), g.root());
            assert_eq!(g.subtree(g.root()).len(), g.len());
            // nothing auxiliary sits above a plan operator
            for &(c, p) in g.edges() {
                if g.nodes()[c].node_type == NodeType::PlanOp {
                    assert_eq!(g.nodes()[p].node_type, NodeType::PlanOp);
                }
            }
            let mut pos = vec![0; g.len()];
            for (i, &v) in g.topological_order().iter().enumerate() {
                pos[v] = i;
            }
            for &(c, p) in g.edges() {
                assert!(pos[c] < pos[p]);
            }
            for n in g.nodes() {
                assert_eq!(n.features.len(), f.spec.dim(n.node_type));
                assert!(n.features.iter().all(|x| x.is_finite()));
            }
        }
    }
}

#[test]
fn card_source_changes_only_cardinality_slots() {
    let f = fixture(1);
    let actual = graphs(&f, CardSource::Actual);
    let estimated = graphs(&f, CardSource::Estimated);
    for (a, e) in actual.iter().zip(&estimated) {
        assert_eq!(a.edges(), e.edges());
        for (na, ne) in a.nodes().iter().zip(e.nodes()) {
            assert_eq!(na.node_type, ne.node_type);
            let differing: Vec<usize> = (0..na.features.len())
                .filter(|&i| na.features[i] != ne.features[i])
                .collect();
            if na.node_type == NodeType::PlanOp {
                // card_out is slot 0, card_prod slot 3
                assert!(
                    differing.iter().all(|i| *i == 0 || *i == 3),
                    "{differing:?}"
                );
            } else {
                assert!(differing.is_empty());
            }
        }
    }
}

#[test]
fn building_is_pure() {
    let f = fixture(2);
    assert_eq!(
        graphs(&f, CardSource::Actual),
        graphs(&f, CardSource::Actual)
    );
}

#[test]
fn renumbering_keeps_predictions_bit_identical() {
    let f = fixture(3);
    let m = model(&f, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for g in graphs(&f, CardSource::Actual) {
        let before = m.predict(&g).unwrap();
        for _ in 0..3 {
            let perm = order_preserving_permutation(&g, &mut rng);
            let h = g.renumbered(&perm).unwrap();
            assert_eq!(h.root(), perm[g.root()]);
            assert_eq!(m.predict(&h).unwrap().to_bits(), before.to_bits());
        }
    }
}

#[test]
fn hidden_state_depends_only_on_its_subtree() {
    let f = fixture(5);
    let m = model(&f, 6);
    for g in graphs(&f, CardSource::Actual).into_iter().take(20) {
        let states = m.hidden_states(&g).unwrap();
        for v in 0..g.len() {
            let inside = g.subtree(v);
            let Some(outside) = (0..g.len()).find(|u| !inside.contains(u)) else {
                continue;
            };
            let mut nodes: Vec<GraphNode> = g.nodes().to_vec();
            for x in &mut nodes[outside].features {
                *x += 3.0;
            }
            let changed = QueryGraph::new(nodes, g.edges().to_vec(), g.root()).unwrap();
            let after = m.hidden_states(&changed).unwrap();
            assert_eq!(after[v], states[v], "node {v} changed by node {outside}");
            assert_ne!(after[outside], states[outside]);
        }
    }
}

#[test]
fn tables_are_shared_within_a_query() {
    let f = fixture(7);
    for (s, g) in f.samples.iter().zip(graphs(&f, CardSource::Actual)) {
        let scans: BTreeMap<&str, usize> =
            s.root
                .iter()
                .filter_map(|o| o.table.as_deref())
                .fold(BTreeMap::new(), |mut m, t| {
                    *m.entry(t).or_default() += 1;
                    m
                });
        assert_eq!(g.count(NodeType::Table), scans.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predictions_are_positive_and_finite(seed in 0u64..1000, model_seed in 0u64..1000) {
        let f = fixture(seed);
        let m = model(&f, model_seed);
        for g in graphs(&f, CardSource::Estimated) {
            let c = m.predict(&g).unwrap();
            prop_assert!(c > 0.0 && c.is_finite());
        }
    }

    #[test]
    fn renumbering_never_breaks_validation(seed in 0u64..1000, perm_seed in 0u64..1000) {
        let f = fixture(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        for g in graphs(&f, CardSource::Actual) {
            let perm = order_preserving_permutation(&g, &mut rng);
            let h = g.renumbered(&perm).unwrap();
            prop_assert_eq!(h.len(), g.len());
            prop_assert_eq!(h.edges().len(), g.edges().len());
            let mut inverse = vec![0; perm.len()];
            for (old, &new) in perm.iter().enumerate() {
                inverse[new] = old;
            }
            prop_assert_eq!(h.renumbered(&inverse).unwrap().dump(), g.dump());
        }
    }
}
