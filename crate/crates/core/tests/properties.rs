//! Property tests spanning several modules.

use gclview::generator::{apply_augmentation, gumbel_softmax, AugChoice};
use gclview::gin::{Encoder, EncoderConfig, Readout};
use gclview::losses::{nt_xent, pair_rows};
use gclview::params::ParamStore;
use gclview::rng::stream;
use gclview::{Graph, GraphBatch, Tensor};
use proptest::prelude::*;

fn graph_strategy(features: usize) -> impl Strategy<Value = Graph> {
    (1usize..10).prop_flat_map(move |n| {
        let pairs = proptest::collection::vec((0..n, 0..n), 0..2 * n);
        let x = proptest::collection::vec(-2.0f64..2.0, n * features);
        (Just(n), pairs, x).prop_map(move |(n, pairs, x)| {
            let pairs: Vec<_> = pairs.into_iter().filter(|(a, b)| a != b).collect();
            Graph::undirected(n, features, x, &pairs, Some(0)).unwrap()
        })
    })
}

fn encoder(features: usize, readout: Readout) -> Encoder {
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        in_dim: features,
        hidden: 8,
        layers: 2,
        num_classes: 2,
        readout,
    };
    Encoder::new(&mut store, "encoder", cfg, &mut stream(11, &["props"])).unwrap()
}

fn embed(enc: &Encoder, graphs: &[&Graph]) -> Vec<f64> {
    let b = GraphBatch::from_graphs(graphs.iter().copied()).unwrap();
    enc.encode(&b.feature_tensor().unwrap(), &b.topology())
        .unwrap()
        .1
        .to_vec()
}

fn disjoint_union(a: &Graph, b: &Graph) -> Graph {
    let mut x = a.features.clone();
    x.extend_from_slice(&b.features);
    let mut edges = a.edges.clone();
    edges.extend(
        b.edges
            .iter()
            .map(|&(s, d)| (s + a.num_nodes, d + a.num_nodes)),
    );
    Graph::new(a.num_nodes + b.num_nodes, a.num_features, x, edges, None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embeddings_are_permutation_invariant(g in graph_strategy(3), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let enc = encoder(3, Readout::Sum);
        let mut perm: Vec<usize> = (0..g.num_nodes).collect();
        perm.shuffle(&mut stream(seed, &["perm"]));
        let mut x = vec![0.0; g.features.len()];
        for (old, &new) in perm.iter().enumerate() {
            x[new * 3..new * 3 + 3].copy_from_slice(g.feature_row(old));
        }
        let edges = g.edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
        let h = Graph::new(g.num_nodes, 3, x, edges, None).unwrap();
        for (a, b) in embed(&enc, &[&g]).iter().zip(embed(&enc, &[&h])) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn sum_readout_is_additive_over_components(a in graph_strategy(2), b in graph_strategy(2)) {
        let enc = encoder(2, Readout::Sum);
        let whole = embed(&enc, &[&disjoint_union(&a, &b)]);
        let parts: Vec<f64> = embed(&enc, &[&a]).iter().zip(embed(&enc, &[&b])).map(|(x, y)| x + y).collect();
        for (w, p) in whole.iter().zip(&parts) {
            prop_assert!((w - p).abs() <= 1e-9 * w.abs().max(1.0));
        }
    }

    #[test]
    fn batching_matches_single_graph_encoding(gs in proptest::collection::vec(graph_strategy(2), 1..5)) {
        let enc = encoder(2, Readout::Mean);
        let refs: Vec<&Graph> = gs.iter().collect();
        let batched = embed(&enc, &refs);
        for (i, g) in gs.iter().enumerate() {
            let single = embed(&enc, &[g]);
            for (a, b) in single.iter().zip(&batched[i * 8..(i + 1) * 8]) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn views_never_keep_arcs_of_dropped_nodes(gs in proptest::collection::vec(graph_strategy(2), 1..4), seed in any::<u64>()) {
        let batch = GraphBatch::from_graphs(&gs).unwrap();
        let n = batch.num_nodes();
        let mut rng = stream(seed, &["views"]);
        let logits = Tensor::new((0..3 * n).map(|i| ((i * 7919) % 13) as f64 / 4.0 - 1.5).collect(), &[n, 3]).unwrap();
        let choices = gumbel_softmax(&logits, 0.7, &mut rng).unwrap();
        let view = apply_augmentation(&batch, &choices).unwrap();
        let t = &view.topology;
        prop_assert!(t.src.iter().zip(&t.dst).all(|(&s, &d)| choices.hard[s] != AugChoice::Drop && choices.hard[d] != AugChoice::Drop));
        let kept = batch.edges.iter().filter(|&&(s, d)| choices.hard[s] != AugChoice::Drop && choices.hard[d] != AugChoice::Drop).count();
        prop_assert_eq!(t.src.len(), kept);
    }

    #[test]
    fn nt_xent_is_symmetric_in_pair_blocks(
        rows in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 4), 2..12),
        tau in 0.1f64..2.0,
    ) {
        let n = rows.len() / 2;
        let a = Tensor::from_rows(&rows[..n]).unwrap();
        let b = Tensor::from_rows(&rows[n..2 * n]).unwrap();
        let ab = nt_xent(&pair_rows(&a, &b).unwrap(), tau).unwrap().item();
        let ba = nt_xent(&pair_rows(&b, &a).unwrap(), tau).unwrap().item();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(ab >= -1e-12);
    }
}
