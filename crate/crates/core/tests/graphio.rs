use std::collections::BTreeMap;
use std::io::Write;

use kgtok::graphio::embed::hash_embed;
use kgtok::graphio::pagerank::pagerank_with_nodes;
use kgtok::graphio::{
    build_star_graph, featurize, load_triples_jsonl, pagerank, EmbeddingProvider, EntityId, Relation, Triple,
};
use kgtok::Error;
use proptest::prelude::*;

/// Dense power iteration written against the textbook definition, kept
/// separate from the library's sparse loop.
fn dense_pagerank(n: usize, edges: &[(usize, usize)], d: f64, iters: usize) -> Vec<f64> {
    let mut m = vec![vec![0.0; n]; n];
    let mut outdeg = vec![0usize; n];
    for &(a, _) in edges {
        outdeg[a] += 1;
    }
    for &(a, b) in edges {
        m[b][a] += 1.0 / outdeg[a] as f64;
    }
    for (j, &deg) in outdeg.iter().enumerate() {
        if deg == 0 {
            for row in m.iter_mut() {
                row[j] = 1.0 / n as f64;
            }
        }
    }
    let mut p = vec![1.0 / n as f64; n];
    for _ in 0..iters {
        p = (0..n)
            .map(|i| (1.0 - d) / n as f64 + d * (0..n).map(|j| m[i][j] * p[j]).sum::<f64>())
            .collect();
    }
    p
}

#[test]
fn pagerank_two_cycle_is_uniform() {
    let pr = pagerank(&[("a", "b"), ("b", "a")], 0.85, 100);
    assert!((pr["a"] - 0.5).abs() < 1e-12 && (pr["b"] - 0.5).abs() < 1e-12);
}

#[test]
fn pagerank_chain_matches_dense_oracle() {
    let pr = pagerank(&[(0usize, 1usize), (1, 2)], 0.85, 100);
    let oracle = dense_pagerank(3, &[(0, 1), (1, 2)], 0.85, 100);
    for (i, want) in oracle.iter().enumerate() {
        assert!((pr[&i] - want).abs() < 1e-8, "node {i}: {} vs {want}", pr[&i]);
    }
}

#[test]
fn pagerank_single_node_and_empty() {
    let pr = pagerank_with_nodes(&["x"], &[], 0.85, 100);
    assert!((pr["x"] - 1.0).abs() < 1e-12);
    assert!(pagerank::<u32>(&[], 0.85, 100).is_empty());
}

#[test]
fn triples_file_with_one_bad_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(
        f,
        r#"{{"subject_id":"Q1","subject_label":"a","relation_id":"P1","relation_label":"r","object_id":"Q2","object_label":"b"}}"#
    )
    .unwrap();
    writeln!(f, "not json").unwrap();
    drop(f);
    // 1 of 2 malformed is over the 10% limit
    assert!(matches!(load_triples_jsonl(&path), Err(Error::CorpusCorrupt { .. })));

    let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    for i in 0..9 {
        writeln!(f, r#"{{"subject_id":"Q{i}","relation_id":"P1","object_id":"Q9"}}"#).unwrap();
    }
    drop(f);
    let (ts, report) = load_triples_jsonl(&path).unwrap();
    assert_eq!(ts.len(), 10);
    assert_eq!(report.malformed.len(), 1);
    assert_eq!(report.malformed[0].0, 2);
}

fn ent(i: usize) -> EntityId {
    EntityId::new(format!("E{i}"), format!("entity {}", i % 7))
}

fn triple(s: usize, r: usize, o: usize) -> Triple {
    Triple {
        subject: ent(s),
        relation: Relation::new(format!("P{r}"), format!("rel {r}")),
        object: ent(o),
    }
}

#[test]
fn featurize_rows_follow_labels() {
    let ts = vec![triple(0, 1, 7), triple(0, 2, 3), triple(14, 1, 0)];
    let g = build_star_graph(&ent(0), &ts, &BTreeMap::new(), 100);
    let f = featurize(&g, &EmbeddingProvider::hash(16));
    assert_eq!(f.num_nodes(), 4);
    assert_eq!(f.num_edges(), 3);
    // neighbors sort by id: E14, E3, E7; E0, E7 and E14 share label "entity 0"
    assert_eq!(f.node_features.row(0), f.node_features.row(1));
    assert_eq!(f.node_features.row(0), f.node_features.row(3));
    for i in 0..f.num_nodes() {
        let n: f64 = f.node_features.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
    assert!(f.edge_index.iter().all(|&(s, d)| d == 0 && s > 0));
}

#[test]
fn table_miss_is_reported() {
    let mut t = BTreeMap::new();
    t.insert("entity 0".to_string(), vec![1.0; 4]);
    let prov = EmbeddingProvider::from_table(4, t).unwrap();
    let g = build_star_graph(&ent(0), &[triple(0, 1, 1)], &BTreeMap::new(), 10);
    let f = featurize(&g, &prov);
    assert_eq!(f.node_features.row(0), &[1.0; 4]);
    assert_eq!(f.node_features.row(1), hash_embed("entity 1", 4, 8).as_slice());
    assert_eq!(f.coverage.misses, vec!["entity 1".to_string(), "rel 1".to_string()]);
}

fn arb_triples() -> impl Strategy<Value = Vec<(usize, usize, usize)>> {
    prop::collection::vec((0usize..8, 0usize..3, 0usize..8), 0..40)
}

proptest! {
    #[test]
    fn pagerank_is_a_distribution(edges in prop::collection::vec((0usize..10, 0usize..10), 0..50)) {
        let pr = pagerank(&edges, 0.85, 100);
        if !edges.is_empty() {
            let total: f64 = pr.values().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(pr.values().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn star_graphs_are_valid_and_order_free(raw in arb_triples(), budget in 1usize..10, seed in any::<u64>()) {
        let ts: Vec<Triple> = raw.iter().map(|&(s, r, o)| triple(s, r, o)).collect();
        let edges: Vec<(String, String)> = ts.iter().map(|t| (t.subject.id.clone(), t.object.id.clone())).collect();
        let scores = pagerank(&edges, 0.85, 100);
        let g = build_star_graph(&ent(0), &ts, &scores, budget);
        g.validate().unwrap();

        let mut shuffled = ts.clone();
        let n = shuffled.len();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(build_star_graph(&ent(0), &shuffled, &scores, budget), g.clone());

        let prov = EmbeddingProvider::hash(8);
        prop_assert_eq!(featurize(&g, &prov), featurize(&g, &prov));
    }
}
