use std::collections::BTreeMap;

use kgtok::gnn::{transformer_conv, GnnConfig, GnnEncoder, GRAPH_NORM_EPS};
use kgtok::graphio::{build_star_graph, featurize, EmbeddingProvider, EntityId, FeaturizedGraph, Relation, Triple};
use kgtok::numerics::{grad_check, grad_check_params, seeded_rng, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn small_config() -> GnnConfig {
    GnnConfig {
        d_in: 6,
        d_gnn: 6,
        heads: 2,
        d_head: 3,
        layers: 1,
    }
}

/// Encoder with every parameter (biases, gains, alphas too) randomized.
fn random_encoder(cfg: GnnConfig, seed: u64) -> (GnnEncoder, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    let enc = GnnEncoder::init(cfg, &mut store, &mut rng).unwrap();
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x = rng.random_range(-0.8..0.8);
        }
    }
    (enc, store)
}

fn star(n_neighbors: usize, d: usize, seed: u64) -> FeaturizedGraph {
    let mut rng = seeded_rng(seed);
    let n = n_neighbors + 1;
    FeaturizedGraph {
        node_features: Tensor::uniform(&[n, d], 1.0, &mut rng),
        edge_features: Tensor::uniform(&[n_neighbors, d], 1.0, &mut rng),
        edge_index: (1..n).map(|i| (i, 0)).collect(),
        center_index: 0,
        coverage: Default::default(),
        empty: n_neighbors == 0,
    }
}

type M = Vec<Vec<f64>>;

fn param(store: &ParamStore, name: &str) -> M {
    let t = store.by_name(name).unwrap();
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mm(a: &M, b: &M) -> M {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn add_bias(a: &M, b: &M) -> M {
    a.iter().map(|r| r.iter().zip(&b[0]).map(|(x, y)| x + y).collect()).collect()
}

/// Straight from the equations, with explicit loops over destinations,
/// heads and in-edges (self-loop included).
fn dense_encode(store: &ParamStore, cfg: &GnnConfig, g: &FeaturizedGraph) -> Vec<f64> {
    let t2m = |t: &Tensor| -> M { (0..t.rows()).map(|i| t.row(i).to_vec()).collect() };
    let mut h = t2m(&g.node_features);
    let e = t2m(&g.edge_features);
    let n = h.len();
    for l in 0..cfg.layers {
        let p = |s: &str| param(store, &format!("gnn.l{l}.{s}"));
        let q = add_bias(&mm(&h, &p("w_q")), &p("b_q"));
        let k = add_bias(&mm(&h, &p("w_k")), &p("b_k"));
        let v = add_bias(&mm(&h, &p("w_v")), &p("b_v"));
        let ep = if e.is_empty() { vec![] } else { mm(&e, &p("w_e")) };
        let w = cfg.heads * cfg.d_head;
        let mut agg = vec![vec![0.0; w]; n];
        for i in 0..n {
            // (source, projected edge feature)
            let mut inc: Vec<(usize, Vec<f64>)> = g
                .edge_index
                .iter()
                .enumerate()
                .filter(|(_, &(_, d))| d == i)
                .map(|(k, &(s, _))| (s, ep[k].clone()))
                .collect();
            inc.push((i, vec![0.0; w]));
            for hd in 0..cfg.heads {
                let cols = hd * cfg.d_head..(hd + 1) * cfg.d_head;
                let scores: Vec<f64> = inc
                    .iter()
                    .map(|(s, ef)| {
                        cols.clone().map(|c| q[i][c] * (k[*s][c] + ef[c])).sum::<f64>() / (cfg.d_head as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for ((s, ef), sc) in inc.iter().zip(&scores) {
                    let a = (sc - mx).exp() / z;
                    for c in cols.clone() {
                        agg[i][c] += a * (v[*s][c] + ef[c]);
                    }
                }
            }
        }
        let conv = add_bias(&mm(&agg, &p("w_o")), &p("b_o"));
        let (gain, bias, alpha) = (p("norm_gain"), p("norm_bias"), p("norm_alpha"));
        let d = conv[0].len();
        for j in 0..d {
            let mean = conv.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let shifted: Vec<f64> = conv.iter().map(|r| r[j] - alpha[0][j] * mean).collect();
            let std = (shifted.iter().map(|x| x * x).sum::<f64>() / n as f64 + GRAPH_NORM_EPS).sqrt();
            for i in 0..n {
                h[i][j] += gain[0][j] * shifted[i] / std + bias[0][j];
            }
        }
    }
    let c = h[g.center_index].clone();
    match store.by_name("gnn.projection") {
        Some(_) => mm(&vec![c], &param(store, "gnn.projection")).remove(0),
        None => c,
    }
}

#[test]
fn matches_dense_oracle() {
    for (cfg, seed) in [
        (small_config(), 1),
        (
            GnnConfig {
                d_in: 6,
                d_gnn: 4,
                heads: 3,
                d_head: 2,
                layers: 2,
            },
            2,
        ),
    ] {
        let (enc, store) = random_encoder(cfg.clone(), seed);
        let g = star(3, 6, seed + 10);
        let ours = enc.summarize(&store, &g).unwrap().g;
        let oracle = dense_encode(&store, &cfg, &g);
        let diff = ours.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "max abs diff {diff}");
    }
}

#[test]
fn single_node_is_self_loop_value() {
    let cfg = GnnConfig {
        d_in: 4,
        d_gnn: 4,
        heads: 1,
        d_head: 4,
        layers: 1,
    };
    let mut store = ParamStore::new();
    let enc = GnnEncoder::init(cfg, &mut store, &mut seeded_rng(0)).unwrap();
    let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
    for name in ["w_q", "w_k", "w_v", "w_e", "w_o"] {
        let id = store.id(&format!("gnn.l0.{name}")).unwrap();
        store.get_mut(id).data_mut().copy_from_slice(&eye);
    }
    let g = star(0, 4, 3);
    let mut tape = Tape::new();
    let x = tape.leaf(&g.node_features);
    let e = tape.leaf(&g.edge_features);
    let conv = transformer_conv(&mut tape, &store, x, e, &[], &enc.layers[0], 1).unwrap();
    assert_eq!(tape.value(conv.out), g.node_features.data());
    assert_eq!(tape.value(conv.attention), &[1.0]);
    // GraphNorm of one node is zero before the affine part, so the residual returns the input
    let s = enc.summarize(&store, &g).unwrap();
    assert!(s.empty);
    assert_eq!(s.g, g.node_features.data());
}

#[test]
fn identical_neighbors_split_attention() {
    let (enc, store) = random_encoder(small_config(), 4);
    let mut g = star(2, 6, 5);
    let row1 = g.node_features.row(1).to_vec();
    g.node_features.data_mut()[12..18].copy_from_slice(&row1);
    let e0 = g.edge_features.row(0).to_vec();
    g.edge_features.data_mut()[6..12].copy_from_slice(&e0);
    // drop the center self-loop from the comparison: look at the two real edges
    let mut tape = Tape::new();
    let x = tape.leaf(&g.node_features);
    let e = tape.leaf(&g.edge_features);
    let conv = transformer_conv(&mut tape, &store, x, e, &g.edge_index, &enc.layers[0], 2).unwrap();
    let att = tape.value(conv.attention);
    for h in 0..2 {
        assert_eq!(att[h], att[2 + h]);
    }
}

#[test]
fn attention_sums_to_one_per_destination() {
    let (enc, store) = random_encoder(small_config(), 6);
    let g = star(5, 6, 7);
    let mut tape = Tape::new();
    let x = tape.leaf(&g.node_features);
    let e = tape.leaf(&g.edge_features);
    let conv = transformer_conv(&mut tape, &store, x, e, &g.edge_index, &enc.layers[0], 2).unwrap();
    let att = tape.value(conv.attention);
    for node in 0..g.num_nodes() {
        for h in 0..2 {
            let s: f64 = conv
                .destinations
                .iter()
                .enumerate()
                .filter(|(_, &d)| d == node)
                .map(|(r, _)| att[r * 2 + h])
                .sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_gain_returns_input_center() {
    let (enc, mut store) = random_encoder(small_config(), 8);
    for name in ["gnn.l0.norm_gain", "gnn.l0.norm_bias"] {
        let id = store.id(name).unwrap();
        store.get_mut(id).data_mut().fill(0.0);
    }
    let g = star(4, 6, 9);
    assert_eq!(enc.summarize(&store, &g).unwrap().g, g.node_features.row(0));
}

#[test]
fn conv_and_norm_gradients() {
    let (enc, store) = random_encoder(small_config(), 11);
    let g = star(3, 6, 12);
    let weights: Vec<f64> = (0..4 * 6).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.4).collect();
    let report = grad_check_params(
        |tape, s| {
            let x = tape.leaf(&g.node_features);
            let e = tape.leaf(&g.edge_features);
            let conv = transformer_conv(tape, s, x, e, &g.edge_index, &enc.layers[0], 2).unwrap();
            let w = tape.constant(4, 6, weights.clone());
            let p = tape.mul(conv.out, w).unwrap();
            tape.sum(p)
        },
        &store,
        1e-5,
    );
    assert!(report.max_rel_error < 1e-4, "{report:?}");

    let report = grad_check(
        |tape, v| {
            let (gain, bias, alpha) = (v[1], v[2], v[3]);
            let y = tape.graph_norm(v[0], gain, bias, alpha, GRAPH_NORM_EPS).unwrap();
            let w = tape.constant(5, 8, (0..40).map(|i| (i as f64 * 0.37).sin()).collect());
            let p = tape.mul(y, w).unwrap();
            tape.sum(p)
        },
        &[
            Tensor::uniform(&[5, 8], 1.0, &mut seeded_rng(13)),
            Tensor::uniform(&[1, 8], 1.0, &mut seeded_rng(14)),
            Tensor::uniform(&[1, 8], 1.0, &mut seeded_rng(15)),
            Tensor::uniform(&[1, 8], 1.0, &mut seeded_rng(16)),
        ],
        1e-5,
    );
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn graph_norm_boundaries() {
    let mut tape = Tape::new();
    let x = tape.constant(1, 3, vec![1.0, -2.0, 5.0]);
    let ones = tape.constant(1, 3, vec![1.0; 3]);
    let zeros = tape.constant(1, 3, vec![0.0; 3]);
    let y = tape.graph_norm(x, ones, zeros, ones, GRAPH_NORM_EPS).unwrap();
    assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);

    let x = tape.constant(2, 1, vec![3.0, 1.0]);
    let (one, zero) = (tape.constant(1, 1, vec![1.0]), tape.constant(1, 1, vec![0.0]));
    let y = tape.graph_norm(x, one, zero, zero, GRAPH_NORM_EPS).unwrap();
    let std = (5.0f64 + GRAPH_NORM_EPS).sqrt();
    assert!((tape.value(y)[0] - 3.0 / std).abs() < 1e-15);
}

#[test]
fn end_to_end_gradients_on_five_node_star() {
    let cfg = GnnConfig {
        d_in: 5,
        d_gnn: 3,
        heads: 1,
        d_head: 4,
        layers: 1,
    };
    let (enc, store) = random_encoder(cfg, 17);
    let g = star(4, 5, 18);
    let report = grad_check_params(
        |tape, s| {
            let out = enc.encode(tape, s, &g).unwrap();
            let w = tape.constant(1, 3, vec![0.7, -1.1, 0.4]);
            let p = tape.mul(out, w).unwrap();
            tape.sum(p)
        },
        &store,
        1e-5,
    );
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    let report = grad_check(
        |tape, v| {
            let out = enc.encode_vars(tape, &store, v[0], v[1], &g.edge_index, 0).unwrap();
            tape.sum(out)
        },
        &[g.node_features.clone(), g.edge_features.clone()],
        1e-5,
    );
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

fn triple(s: &str, r: usize, o: &str) -> Triple {
    Triple {
        subject: EntityId::new(s, s),
        relation: Relation::new(format!("P{r}"), format!("relation {r}")),
        object: EntityId::new(o, format!("{o} label")),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn neighbor_order_does_not_matter(perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle()) {
        let (enc, store) = random_encoder(GnnConfig { d_in: 8, d_gnn: 8, heads: 2, d_head: 4, layers: 1 }, 21);
        let prov = EmbeddingProvider::hash(8);
        let base: Vec<Triple> = (0..6).map(|i| triple("c", i % 3, &format!("n{i}"))).collect();
        let shuffled: Vec<Triple> = perm.iter().map(|&i| base[i].clone()).collect();
        let center = EntityId::new("c", "c");
        let g1 = build_star_graph(&center, &base, &BTreeMap::new(), 10);
        let mut g2 = build_star_graph(&center, &shuffled, &BTreeMap::new(), 10);
        g2.neighbors = perm.iter().map(|&i| g1.neighbors[i].clone()).collect();
        let a = enc.summarize(&store, &featurize(&g1, &prov)).unwrap();
        let b = enc.summarize(&store, &featurize(&g2, &prov)).unwrap();
        prop_assert_eq!(a, b);
    }
}
