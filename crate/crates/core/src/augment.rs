//! Fixed, ratio-controlled graph augmentations used as baselines.
//!
//! All four perturb a `ratio` share of the graph: node dropping removes
//! `⌊ratio·N⌋` nodes, edge perturbation swaps `⌊ratio·E⌋` undirected edges
//! for random new ones, attribute masking zeroes `⌊ratio·N⌋` feature rows,
//! and subgraph keeps a connected region of `⌈(1 − ratio)·N⌉` nodes grown
//! from a random center. A ratio of zero is always the identity.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::Rng;

pub const DEFAULT_AUG_RATIO: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    /// No fixed augmentation; `aug_only` then draws views from the frozen
    /// learnable generators.
    None,
    /// Views are unchanged copies of the original graph.
    Identity,
    NodeDrop,
    EdgePerturb,
    Subgraph,
    AttrMask,
    Random4,
}

impl AugKind {
    /// The four primitive augmentations, in table column order.
    pub const PRIMITIVES: [AugKind; 4] = [
        AugKind::NodeDrop,
        AugKind::EdgePerturb,
        AugKind::Subgraph,
        AugKind::AttrMask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugKind::None => "none",
            AugKind::Identity => "identity",
            AugKind::NodeDrop => "node_drop",
            AugKind::EdgePerturb => "edge_perturb",
            AugKind::Subgraph => "subgraph",
            AugKind::AttrMask => "attr_mask",
            AugKind::Random4 => "random4",
        }
    }
}

impl std::str::FromStr for AugKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        [
            AugKind::None,
            AugKind::Identity,
            AugKind::NodeDrop,
            AugKind::EdgePerturb,
            AugKind::Subgraph,
            AugKind::AttrMask,
            AugKind::Random4,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| format!("unknown augmentation '{s}'"))
    }
}

impl std::fmt::Display for AugKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "augmentation ratio {ratio} outside [0, 1)"
        )))
    }
}

/// Induced subgraph on `keep` (must be sorted ascending), re-indexed in order.
fn induced(g: &Graph, keep: &[usize]) -> Graph {
    let mut new_id = vec![usize::MAX; g.num_nodes];
    for (i, &v) in keep.iter().enumerate() {
        new_id[v] = i;
    }
    let f = g.num_features;
    let features = keep
        .iter()
        .flat_map(|&v| g.feature_row(v).iter().copied())
        .collect();
    let edges = g
        .edges
        .iter()
        .filter(|&&(s, d)| new_id[s] != usize::MAX && new_id[d] != usize::MAX)
        .map(|&(s, d)| (new_id[s], new_id[d]))
        .collect();
    Graph::new(keep.len(), f, features, edges, g.label).expect("induced subgraph is valid")
}

pub fn node_drop(g: &Graph, ratio: f64, rng: &mut Rng) -> Result<Graph> {
    check_ratio(ratio)?;
    let k = (ratio * g.num_nodes as f64).floor() as usize;
    if k == 0 {
        return Ok(g.clone());
    }
    let dropped: HashSet<usize> = sample(rng, g.num_nodes, k).into_iter().collect();
    let keep: Vec<usize> = (0..g.num_nodes).filter(|v| !dropped.contains(v)).collect();
    Ok(induced(g, &keep))
}

pub fn edge_perturb(g: &Graph, ratio: f64, rng: &mut Rng) -> Result<Graph> {
    check_ratio(ratio)?;
    let pairs = g.undirected_pairs();
    let m = (ratio * pairs.len() as f64).floor() as usize;
    if m == 0 {
        return Ok(g.clone());
    }
    let removed: HashSet<usize> = sample(rng, pairs.len(), m).into_iter().collect();
    let mut kept: Vec<(usize, usize)> = pairs
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed.contains(i))
        .map(|(_, &p)| p)
        .collect();
    let mut present: HashSet<(usize, usize)> = kept.iter().copied().collect();
    let n = g.num_nodes;
    let mut added = 0;
    let mut attempts = 0;
    while added < m && attempts < 64 * m {
        attempts += 1;
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let p = (a.min(b), a.max(b));
        if a != b && present.insert(p) {
            kept.push(p);
            added += 1;
        }
    }
    if added < m {
        // dense graph: enumerate the remaining free slots
        let mut free: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|p| !present.contains(p))
            .collect();
        free.shuffle(rng);
        kept.extend(free.into_iter().take(m - added));
    }
    Ok(Graph::undirected(
        n,
        g.num_features,
        g.features.clone(),
        &kept,
        g.label,
    )?)
}

pub fn subgraph(g: &Graph, ratio: f64, rng: &mut Rng) -> Result<Graph> {
    check_ratio(ratio)?;
    let target = ((1.0 - ratio) * g.num_nodes as f64).ceil() as usize;
    if target >= g.num_nodes {
        return Ok(g.clone());
    }
    let adj = g.neighbors();
    let center = rng.gen_range(0..g.num_nodes);
    let mut selected = vec![false; g.num_nodes];
    selected[center] = true;
    let mut count = 1;
    let mut frontier: Vec<usize> = Vec::new();
    let mut in_frontier = vec![false; g.num_nodes];
    let push_neighbors =
        |v: usize, frontier: &mut Vec<usize>, in_frontier: &mut Vec<bool>, selected: &Vec<bool>| {
            for &u in &adj[v] {
                if !selected[u] && !in_frontier[u] {
                    in_frontier[u] = true;
                    frontier.push(u);
                }
            }
        };
    push_neighbors(center, &mut frontier, &mut in_frontier, &selected);
    while count < target && !frontier.is_empty() {
        let v = frontier.swap_remove(rng.gen_range(0..frontier.len()));
        selected[v] = true;
        count += 1;
        push_neighbors(v, &mut frontier, &mut in_frontier, &selected);
    }
    let keep: Vec<usize> = (0..g.num_nodes).filter(|&v| selected[v]).collect();
    Ok(induced(g, &keep))
}

pub fn attr_mask(g: &Graph, ratio: f64, rng: &mut Rng) -> Result<Graph> {
    check_ratio(ratio)?;
    let k = (ratio * g.num_nodes as f64).floor() as usize;
    if k == 0 {
        return Ok(g.clone());
    }
    let mut out = g.clone();
    let f = g.num_features;
    for v in sample(rng, g.num_nodes, k) {
        out.features[v * f..(v + 1) * f].fill(0.0);
    }
    Ok(out)
}

/// Two distinct primitive augmentations at the default ratio, applied in
/// the order sampled.
pub fn random4(g: &Graph, rng: &mut Rng) -> Result<Graph> {
    let picks = sample(rng, AugKind::PRIMITIVES.len(), 2);
    let mut out = g.clone();
    for i in picks {
        out = augment(&out, AugKind::PRIMITIVES[i], DEFAULT_AUG_RATIO, rng)?;
    }
    Ok(out)
}

/// Dispatches on `kind`. `ratio` is ignored by `None` and `Random4`.
pub fn augment(g: &Graph, kind: AugKind, ratio: f64, rng: &mut Rng) -> Result<Graph> {
    match kind {
        AugKind::None | AugKind::Identity => Ok(g.clone()),
        AugKind::NodeDrop => node_drop(g, ratio, rng),
        AugKind::EdgePerturb => edge_perturb(g, ratio, rng),
        AugKind::Subgraph => subgraph(g, ratio, rng),
        AugKind::AttrMask => attr_mask(g, ratio, rng),
        AugKind::Random4 => random4(g, rng),
    }
}
