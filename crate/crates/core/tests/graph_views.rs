mod common;

use common::*;
use mvg_core::graph::{
    build_numerical_view, build_relation_view, build_tabular_view, enumerate_nodes, normalize_adjacency, Locator,
    Node,
};
use mvg_core::testing::{random_document, random_numbers};
use mvg_core::{build_multi_view_graph, GraphConfig, NodeKind, ViewKind};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check_against_oracle(seed: u64, row_col_nodes: bool, question_bridging: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let doc = random_document(&mut rng, "doc");
    let q = &doc.questions[0];
    let config = GraphConfig {
        row_col_nodes,
        question_bridging,
        ..GraphConfig::default()
    };
    let g = build_multi_view_graph(&doc, q, &config).unwrap();
    let view = |k| edge_set(&g.view(k).unwrap().adjacency);
    assert_eq!(view(ViewKind::Tabular), oracle_tabular(&g.nodes), "tabular, seed {seed}");
    assert_eq!(
        view(ViewKind::Relation),
        oracle_relation(&g.nodes, question_bridging),
        "relation, seed {seed}"
    );
    assert_eq!(view(ViewKind::Numerical), oracle_numerical(&g.nodes), "numerical, seed {seed}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn views_match_pairwise_oracle(seed in any::<u64>(), row_col in any::<bool>(), bridging in any::<bool>()) {
        check_against_oracle(seed, row_col, bridging);
    }

    #[test]
    fn views_are_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doc = random_document(&mut rng, "doc");
        let nodes = enumerate_nodes(&doc, &doc.questions[0], true);
        let mut perm: Vec<usize> = (0..nodes.len()).collect();
        perm.shuffle(&mut rng);
        let mut shuffled: Vec<Option<Node>> = vec![None; nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            let mut m = n.clone();
            m.index = perm[i];
            shuffled[perm[i]] = Some(m);
        }
        let shuffled: Vec<Node> = shuffled.into_iter().map(Option::unwrap).collect();

        let t0 = build_tabular_view(&nodes, &doc.table).unwrap().adjacency;
        let t1 = build_tabular_view(&shuffled, &doc.table).unwrap().adjacency;
        prop_assert_eq!(t0.permuted(&perm), t1);
        let r0 = build_relation_view(&nodes, &doc, true).unwrap().adjacency;
        let r1 = build_relation_view(&shuffled, &doc, true).unwrap().adjacency;
        prop_assert_eq!(r0.permuted(&perm), r1);
        let n0 = build_numerical_view(&nodes).unwrap().adjacency;
        let n1 = build_numerical_view(&shuffled).unwrap().adjacency;
        prop_assert_eq!(n0.permuted(&perm), n1);
    }

    #[test]
    fn undirected_views_are_symmetric_without_self_loops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doc = random_document(&mut rng, "doc");
        let g = build_multi_view_graph(&doc, &doc.questions[0], &GraphConfig::default()).unwrap();
        for v in &g.views {
            prop_assert!(v.adjacency.has_zero_diagonal());
            if !v.view.is_directed() {
                prop_assert!(v.adjacency.is_symmetric());
            }
        }
    }

    #[test]
    fn numerical_view_is_a_strict_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = random_numbers(&mut rng);
        let nodes = number_nodes(&values);
        let edges = edge_set(&build_numerical_view(&nodes).unwrap().adjacency);
        prop_assert!(is_dag(values.len(), &edges));
        for i in 0..values.len() {
            for j in 0..values.len() {
                prop_assert_eq!(edges.contains(&(i, j)), values[i] > values[j]);
            }
        }
        for &(i, j) in &edges {
            for &(a, k) in edges.range((j, 0)..(j + 1, 0)) {
                prop_assert_eq!(a, j);
                prop_assert!(edges.contains(&(i, k)), "transitivity {} {} {}", i, j, k);
            }
        }
    }

    #[test]
    fn normalised_adjacency_shapes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doc = random_document(&mut rng, "doc");
        let g = build_multi_view_graph(&doc, &doc.questions[0], &GraphConfig::default()).unwrap();
        for v in &g.views {
            let a = normalize_adjacency(&v.adjacency, v.view.is_directed());
            let n = g.node_count();
            for i in 0..n {
                prop_assert!(a.get(i, i) > 0.0);
                if v.view.is_directed() {
                    let row: f64 = (0..n).map(|j| a.get(i, j)).sum();
                    prop_assert!((row - 1.0).abs() < 1e-12);
                } else {
                    for j in 0..n {
                        prop_assert_eq!(a.get(i, j), a.get(j, i));
                    }
                }
            }
        }
    }
}

#[test]
fn equal_numbers_produce_no_edges() {
    let nodes = number_nodes(&[3.0, 3.0, 3.0, 3.0]);
    assert_eq!(build_numerical_view(&nodes).unwrap().adjacency.edge_count(), 0);
}

#[test]
fn revenue_document_bridges_words_to_cells() {
    let docs = fixture("revenue.json");
    let doc = &docs[0];
    let g = build_multi_view_graph(doc, &doc.questions[0], &GraphConfig::default()).unwrap();
    let rel = &g.view(ViewKind::Relation).unwrap().adjacency;
    let cell = g.find(&Locator::Cell { row: 1, col: 0 }).unwrap();
    let word = g
        .nodes
        .iter()
        .find(|n| matches!(n.locator, Locator::ParagraphToken { .. }) && n.text == "linkedin")
        .unwrap();
    assert!(rel.get(word.index, cell));
    let numbers: Vec<f64> = g.nodes.iter().filter(|n| n.kind == NodeKind::Number).filter_map(|n| n.numeric_value).collect();
    assert!(numbers.contains(&2271.0) && numbers.contains(&2611.0));
    let num = &g.view(ViewKind::Numerical).unwrap().adjacency;
    let a = g.nodes.iter().find(|n| n.locator == Locator::CellToken { row: 2, col: 1, position: 0, start: 0, end: 5 }).unwrap();
    let b = g.nodes.iter().find(|n| n.locator == Locator::CellToken { row: 1, col: 1, position: 0, start: 0, end: 5 }).unwrap();
    assert!(num.get(a.index, b.index) && !num.get(b.index, a.index));
}

#[test]
fn fifty_documents_in_all_configurations() {
    for seed in 0..50 {
        for (rc, qb) in [(true, true), (false, true), (true, false)] {
            check_against_oracle(seed, rc, qb);
        }
    }
}

#[test]
fn random_corpus_exercises_bridging() {
    let (mut word_cell, mut sentence_line, mut question_line) = (0, 0, 0);
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doc = random_document(&mut rng, "doc");
        let g = build_multi_view_graph(&doc, &doc.questions[0], &GraphConfig::default()).unwrap();
        let rel = &g.view(ViewKind::Relation).unwrap().adjacency;
        for [i, j] in rel.edges(false) {
            match (g.nodes[i].locator, g.nodes[j].locator) {
                (Locator::ParagraphToken { .. }, Locator::Cell { .. }) => word_cell += 1,
                (Locator::Sentence { .. }, Locator::Row { .. } | Locator::Column { .. }) => sentence_line += 1,
                (Locator::Question, Locator::Row { .. } | Locator::Column { .. }) => question_line += 1,
                _ => {}
            }
        }
    }
    assert!(word_cell > 50 && sentence_line > 50 && question_line > 20, "{word_cell} {sentence_line} {question_line}");
}
