//! Graph data model and mini-batching.

use serde::{Deserialize, Serialize};

use crate::error::{DataError, TensorError};
use crate::tensor::Tensor;

/// One graph: dense node features, directed arcs, optional class label.
///
/// Undirected data is stored with both arc directions. Arcs are kept sorted
/// and free of duplicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub num_nodes: usize,
    pub num_features: usize,
    /// Row-major `num_nodes × num_features`.
    pub features: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
    pub label: Option<usize>,
}

impl Graph {
    /// Validates and canonicalizes (sorts, de-duplicates) the arc list.
    pub fn new(
        num_nodes: usize,
        num_features: usize,
        features: Vec<f64>,
        mut edges: Vec<(usize, usize)>,
        label: Option<usize>,
    ) -> Result<Graph, DataError> {
        if features.len() != num_nodes * num_features {
            return Err(DataError::InvalidGraph(format!(
                "{} feature values for {num_nodes}×{num_features}",
                features.len()
            )));
        }
        if let Some(&(s, d)) = edges
            .iter()
            .find(|&&(s, d)| s >= num_nodes || d >= num_nodes)
        {
            return Err(DataError::InvalidGraph(format!(
                "arc ({s}, {d}) out of range for {num_nodes} nodes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::InvalidGraph("non-finite node feature".into()));
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(Graph {
            num_nodes,
            num_features,
            features,
            edges,
            label,
        })
    }

    /// Builds a graph from undirected pairs, storing both directions.
    pub fn undirected(
        num_nodes: usize,
        num_features: usize,
        features: Vec<f64>,
        pairs: &[(usize, usize)],
        label: Option<usize>,
    ) -> Result<Graph, DataError> {
        let edges = pairs.iter().flat_map(|&(s, d)| [(s, d), (d, s)]).collect();
        Graph::new(num_nodes, num_features, features, edges, label)
    }

    pub fn feature_row(&self, v: usize) -> &[f64] {
        &self.features[v * self.num_features..(v + 1) * self.num_features]
    }

    /// Out-degree per node (the undirected degree for symmetric data).
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(s, _) in &self.edges {
            deg[s] += 1;
        }
        deg
    }

    /// Undirected edge set as `(min, max)` pairs, sorted.
    pub fn undirected_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<_> = self
            .edges
            .iter()
            .map(|&(s, d)| (s.min(d), s.max(d)))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }

    /// Adjacency lists over out-arcs.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(s, d) in &self.edges {
            adj[s].push(d);
        }
        adj
    }
}

/// Replaces node features with a one-hot encoding of `min(degree, max_degree)`.
pub fn degree_onehot_features(g: &Graph, max_degree: usize) -> Graph {
    let width = max_degree + 1;
    let mut features = vec![0.0; g.num_nodes * width];
    for (v, d) in g.degrees().into_iter().enumerate() {
        features[v * width + d.min(max_degree)] = 1.0;
    }
    Graph {
        num_nodes: g.num_nodes,
        num_features: width,
        features,
        edges: g.edges.clone(),
        label: g.label,
    }
}

/// Largest node degree across a collection.
pub fn max_degree(graphs: &[Graph]) -> usize {
    graphs.iter().flat_map(|g| g.degrees()).max().unwrap_or(0)
}

/// Arc lists and segment assignment needed for message passing.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub num_nodes: usize,
    pub num_graphs: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub batch_vector: Vec<usize>,
}

/// Disjoint union of graphs with a node-to-graph assignment vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    pub num_features: usize,
    /// Row-major `Σ Nᵢ × num_features`.
    pub features: Vec<f64>,
    /// Arcs shifted by cumulative node offsets.
    pub edges: Vec<(usize, usize)>,
    pub batch_vector: Vec<usize>,
    pub labels: Vec<Option<usize>>,
    pub graph_sizes: Vec<usize>,
}

impl GraphBatch {
    pub fn from_graphs<'a>(
        graphs: impl IntoIterator<Item = &'a Graph>,
    ) -> Result<GraphBatch, DataError> {
        let mut batch = GraphBatch {
            num_features: 0,
            features: Vec::new(),
            edges: Vec::new(),
            batch_vector: Vec::new(),
            labels: Vec::new(),
            graph_sizes: Vec::new(),
        };
        let mut offset = 0;
        for (gi, g) in graphs.into_iter().enumerate() {
            if gi == 0 {
                batch.num_features = g.num_features;
            } else if g.num_features != batch.num_features {
                return Err(DataError::InvalidGraph(format!(
                    "feature width {} differs from batch width {}",
                    g.num_features, batch.num_features
                )));
            }
            batch.features.extend_from_slice(&g.features);
            batch
                .edges
                .extend(g.edges.iter().map(|&(s, d)| (s + offset, d + offset)));
            batch
                .batch_vector
                .extend(std::iter::repeat_n(gi, g.num_nodes));
            batch.labels.push(g.label);
            batch.graph_sizes.push(g.num_nodes);
            offset += g.num_nodes;
        }
        if batch.graph_sizes.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(batch)
    }

    pub fn num_nodes(&self) -> usize {
        self.batch_vector.len()
    }

    pub fn num_graphs(&self) -> usize {
        self.graph_sizes.len()
    }

    pub fn topology(&self) -> Topology {
        Topology {
            num_nodes: self.num_nodes(),
            num_graphs: self.num_graphs(),
            src: self.edges.iter().map(|e| e.0).collect(),
            dst: self.edges.iter().map(|e| e.1).collect(),
            batch_vector: self.batch_vector.clone(),
        }
    }

    pub fn feature_tensor(&self) -> Result<Tensor, TensorError> {
        Tensor::new(
            self.features.clone(),
            &[self.num_nodes(), self.num_features],
        )
    }

    /// Labels of every graph; errors if any graph is unlabeled.
    pub fn required_labels(&self) -> Result<Vec<usize>, DataError> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.ok_or_else(|| DataError::InvalidGraph(format!("graph {i} in batch has no label")))
            })
            .collect()
    }

    /// Splits the batch back into its member graphs.
    pub fn unbatch(&self) -> Vec<Graph> {
        let f = self.num_features;
        let mut offsets = Vec::with_capacity(self.num_graphs());
        let mut acc = 0;
        for &n in &self.graph_sizes {
            offsets.push(acc);
            acc += n;
        }
        let mut edges = vec![Vec::new(); self.num_graphs()];
        for &(s, d) in &self.edges {
            let g = self.batch_vector[s];
            edges[g].push((s - offsets[g], d - offsets[g]));
        }
        self.graph_sizes
            .iter()
            .zip(offsets)
            .zip(edges)
            .zip(&self.labels)
            .map(|(((&n, off), edges), &label)| Graph {
                num_nodes: n,
                num_features: f,
                features: self.features[off * f..(off + n) * f].to_vec(),
                edges,
                label,
            })
            .collect()
    }
}

pub fn batch_graphs(graphs: &[Graph]) -> Result<GraphBatch, DataError> {
    GraphBatch::from_graphs(graphs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path3() -> Graph {
        Graph::undirected(3, 1, vec![1.0, 2.0, 3.0], &[(0, 1), (1, 2)], Some(0)).unwrap()
    }

    #[test]
    fn invalid_arcs_rejected() {
        assert!(Graph::new(2, 0, vec![], vec![(0, 2)], None).is_err());
        assert!(Graph::new(2, 1, vec![1.0], vec![], None).is_err());
        assert!(Graph::new(1, 1, vec![f64::NAN], vec![], None).is_err());
    }

    #[test]
    fn canonicalization_dedups() {
        let g = Graph::new(2, 0, vec![], vec![(1, 0), (0, 1), (1, 0)], None).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn degree_features_examples() {
        let g = degree_onehot_features(&path3(), 2);
        assert_eq!(g.num_features, 3);
        assert_eq!(g.features, vec![0., 1., 0., 0., 0., 1., 0., 1., 0.]);

        let iso = Graph::new(1, 0, vec![], vec![], None).unwrap();
        assert_eq!(degree_onehot_features(&iso, 2).features, vec![1., 0., 0.]);

        let star: Vec<_> = (1..=5).map(|i| (0, i)).collect();
        let star = Graph::undirected(6, 0, vec![], &star, None).unwrap();
        let s = degree_onehot_features(&star, 3);
        assert_eq!(s.feature_row(0), &[0., 0., 0., 1.]);
        assert_eq!(s.feature_row(1), &[0., 1., 0., 0.]);
    }

    #[test]
    fn batch_vector_and_offsets() {
        let a = Graph::undirected(2, 1, vec![1.0, 2.0], &[(0, 1)], Some(1)).unwrap();
        let b = path3();
        let batch = batch_graphs(&[a, b]).unwrap();
        assert_eq!(batch.batch_vector, vec![0, 0, 1, 1, 1]);
        assert!(batch.edges.contains(&(2, 3)) && batch.edges.contains(&(4, 3)));
        assert_eq!(batch.graph_sizes, vec![2, 3]);
        assert!(matches!(batch_graphs(&[]), Err(DataError::Empty)));
    }

    #[test]
    fn mixed_feature_widths_rejected() {
        let a = Graph::new(1, 1, vec![1.0], vec![], None).unwrap();
        let b = Graph::new(1, 2, vec![1.0, 0.0], vec![], None).unwrap();
        assert!(batch_graphs(&[a, b]).is_err());
    }

    fn arb_graph() -> impl Strategy<Value = Graph> {
        (1usize..8, 0usize..3).prop_flat_map(|(n, f)| {
            (
                proptest::collection::vec(-5.0f64..5.0, n * f),
                proptest::collection::vec((0..n, 0..n), 0..12),
                proptest::option::of(0usize..3),
            )
                .prop_map(move |(feat, pairs, label)| {
                    Graph::undirected(n, f, feat, &pairs, label).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn unbatch_inverts_batch(width in 0usize..3, graphs in proptest::collection::vec(arb_graph(), 1..6)) {
            let graphs: Vec<Graph> = graphs
                .into_iter()
                .map(|g| {
                    let feats = (0..g.num_nodes * width).map(|i| i as f64).collect();
                    Graph::new(g.num_nodes, width, feats, g.edges, g.label).unwrap()
                })
                .collect();
            let batch = batch_graphs(&graphs).unwrap();
            prop_assert!(batch.batch_vector.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(batch.unbatch(), graphs);
        }
    }
}
