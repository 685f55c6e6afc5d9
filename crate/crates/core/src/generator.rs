//! Learnable node-wise view generator.
//!
//! A GIN stack emits three logits per node, one per augmentation choice in
//! the fixed column order (DROP, KEEP, MASK). A straight-through
//! gumbel-softmax sample picks one choice per node: the forward pass sees the
//! exact one-hot sample, the backward pass follows the relaxed softmax.
//!
//! Applying the choices multiplies every feature row by its KEEP indicator,
//! so MASK and DROP both zero the row. DROP also removes every arc touching
//! the node. Dropped nodes stay in the batch as isolated zero rows, keeping
//! shapes and the batch vector aligned with the input.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::gin::GinStack;
use crate::graph::{GraphBatch, Topology};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{softmax_buf, TResult, Tensor};

pub const NUM_CHOICES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugChoice {
    Drop = 0,
    Keep = 1,
    Mask = 2,
}

impl AugChoice {
    pub const ALL: [AugChoice; NUM_CHOICES] = [AugChoice::Drop, AugChoice::Keep, AugChoice::Mask];

    pub fn column(self) -> usize {
        self as usize
    }

    pub fn from_column(c: usize) -> AugChoice {
        Self::ALL[c]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AugChoice::Drop => "drop",
            AugChoice::Keep => "keep",
            AugChoice::Mask => "mask",
        }
    }
}

/// Per-node augmentation choices of one generator pass.
#[derive(Clone, Debug)]
pub struct AugChoiceMatrix {
    /// `softmax(logits)`, `[N × 3]`, differentiable.
    pub probs: Tensor,
    /// `softmax((logits + G) / τ_g)`, `[N × 3]`, differentiable.
    pub relaxed: Tensor,
    /// Sampled choice per node.
    pub hard: Vec<AugChoice>,
    /// Exact one-hot rows forward, `relaxed` gradient backward.
    pub straight_through: Tensor,
}

impl AugChoiceMatrix {
    pub fn len(&self) -> usize {
        self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty()
    }

    pub fn one_hot(&self) -> Vec<f64> {
        one_hot(&self.hard)
    }

    pub fn counts(&self) -> [usize; NUM_CHOICES] {
        let mut c = [0; NUM_CHOICES];
        self.hard.iter().for_each(|h| c[h.column()] += 1);
        c
    }
}

fn one_hot(hard: &[AugChoice]) -> Vec<f64> {
    let mut out = vec![0.0; hard.len() * NUM_CHOICES];
    for (i, h) in hard.iter().enumerate() {
        out[i * NUM_CHOICES + h.column()] = 1.0;
    }
    out
}

/// Standard Gumbel noise `−ln(−ln u)`, `u` uniform on the open interval (0, 1).
pub fn sample_gumbel(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.sample(rand::distributions::Open01);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Straight-through gumbel-softmax with caller-supplied noise.
pub fn gumbel_softmax_with_noise(
    logits: &Tensor,
    tau_g: f64,
    noise: &[f64],
) -> TResult<AugChoiceMatrix> {
    if !(tau_g > 0.0) {
        return Err(TensorError::Invalid(format!(
            "gumbel temperature must be positive, got {tau_g}"
        )));
    }
    let [n, c] = logits.shape() else {
        return Err(TensorError::Rank {
            op: "gumbel_softmax",
            expected: "[N, 3] logits",
            got: logits.shape().to_vec(),
        });
    };
    let (n, c) = (*n, *c);
    if c != NUM_CHOICES || noise.len() != n * c {
        return Err(TensorError::Length {
            op: "gumbel_softmax",
            len: noise.len(),
            shape: logits.shape().to_vec(),
        });
    }
    let probs = logits.softmax_rows()?;
    let noise = Tensor::new(noise.to_vec(), &[n, c])?;
    let relaxed = logits.add(&noise)?.scale(1.0 / tau_g).softmax_rows()?;
    // argmax of the relaxed sample equals argmax of logits + noise; use the
    // perturbed logits directly so ties in the softmax cannot flip it
    let hard: Vec<AugChoice> = {
        let l = logits.value();
        let g = noise.value();
        (0..n)
            .map(|i| {
                let mut best = 0;
                for j in 1..c {
                    if l[i * c + j] + g[i * c + j] > l[i * c + best] + g[i * c + best] {
                        best = j;
                    }
                }
                AugChoice::from_column(best)
            })
            .collect()
    };
    let straight_through = relaxed.straight_through(one_hot(&hard))?;
    Ok(AugChoiceMatrix {
        probs,
        relaxed,
        hard,
        straight_through,
    })
}

pub fn gumbel_softmax(logits: &Tensor, tau_g: f64, rng: &mut Rng) -> TResult<AugChoiceMatrix> {
    let noise = sample_gumbel(logits.numel(), rng);
    gumbel_softmax_with_noise(logits, tau_g, &noise)
}

/// Softmax of raw logits as plain values (no graph).
pub fn choice_probabilities(logits: &[f64]) -> Vec<f64> {
    softmax_buf(logits, logits.len() / NUM_CHOICES, NUM_CHOICES)
}

/// An augmented batch: differentiable features plus pruned topology.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    pub features: Tensor,
    pub topology: Topology,
    pub graph_sizes: Vec<usize>,
    pub labels: Vec<Option<usize>>,
}

impl ViewBatch {
    /// The unaugmented batch as a view with constant features.
    pub fn original(batch: &GraphBatch) -> TResult<ViewBatch> {
        Ok(ViewBatch {
            features: batch.feature_tensor()?,
            topology: batch.topology(),
            graph_sizes: batch.graph_sizes.clone(),
            labels: batch.labels.clone(),
        })
    }

    /// Materializes current feature values into a plain batch.
    pub fn to_graph_batch(&self) -> GraphBatch {
        GraphBatch {
            num_features: self.features.shape()[1],
            features: self.features.to_vec(),
            edges: self
                .topology
                .src
                .iter()
                .copied()
                .zip(self.topology.dst.iter().copied())
                .collect(),
            batch_vector: self.topology.batch_vector.clone(),
            labels: self.labels.clone(),
            graph_sizes: self.graph_sizes.clone(),
        }
    }
}

/// Multiplies features by the KEEP column of the choices and removes arcs
/// incident to DROP nodes.
pub fn apply_augmentation(batch: &GraphBatch, choices: &AugChoiceMatrix) -> TResult<ViewBatch> {
    if choices.len() != batch.num_nodes() {
        return Err(TensorError::ShapeMismatch {
            op: "apply_augmentation",
            lhs: vec![batch.num_nodes(), batch.num_features],
            rhs: choices.straight_through.shape().to_vec(),
        });
    }
    let keep = choices
        .straight_through
        .select_cols(&[AugChoice::Keep.column()])?;
    let features = batch.feature_tensor()?.mul(&keep)?;
    let dropped = |v: usize| choices.hard[v] == AugChoice::Drop;
    let (src, dst) = batch
        .edges
        .iter()
        .filter(|&&(s, d)| !dropped(s) && !dropped(d))
        .copied()
        .unzip();
    Ok(ViewBatch {
        features,
        topology: Topology {
            num_nodes: batch.num_nodes(),
            num_graphs: batch.num_graphs(),
            src,
            dst,
            batch_vector: batch.batch_vector.clone(),
        },
        graph_sizes: batch.graph_sizes.clone(),
        labels: batch.labels.clone(),
    })
}

/// GIN stack whose last layer emits one logit per augmentation choice.
#[derive(Clone, Debug)]
pub struct ViewGenerator {
    pub stack: GinStack,
}

impl ViewGenerator {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut Rng,
    ) -> Result<ViewGenerator> {
        Ok(ViewGenerator {
            stack: GinStack::new(store, prefix, in_dim, hidden, NUM_CHOICES, layers, rng)?,
        })
    }

    /// Raw logits `[ΣN × 3]`.
    pub fn node_aug_logits(&self, batch: &GraphBatch) -> TResult<Tensor> {
        if batch.num_graphs() == 0 {
            return Err(TensorError::Invalid("empty batch".into()));
        }
        self.stack
            .forward(&batch.feature_tensor()?, &batch.topology(), false)
    }

    /// Logits → straight-through sample → augmented view.
    pub fn generate_view(
        &self,
        batch: &GraphBatch,
        tau_g: f64,
        rng: &mut Rng,
    ) -> TResult<(ViewBatch, AugChoiceMatrix)> {
        let logits = self.node_aug_logits(batch)?;
        let choices = gumbel_softmax(&logits, tau_g, rng)?;
        let view = apply_augmentation(batch, &choices)?;
        Ok((view, choices))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::rng::stream;

    fn batch() -> GraphBatch {
        let g = Graph::undirected(
            4,
            2,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            &[(0, 1), (1, 2), (2, 3)],
            Some(0),
        )
        .unwrap();
        GraphBatch::from_graphs([&g]).unwrap()
    }

    fn choices(hard: &[AugChoice]) -> AugChoiceMatrix {
        // logits strongly favouring the requested column with zero noise
        let mut l = vec![-30.0; hard.len() * 3];
        hard.iter()
            .enumerate()
            .for_each(|(i, h)| l[i * 3 + h.column()] = 30.0);
        let logits = Tensor::param(l, &[hard.len(), 3]).unwrap();
        let m = gumbel_softmax_with_noise(&logits, 1.0, &vec![0.0; hard.len() * 3]).unwrap();
        assert_eq!(m.hard, hard);
        m
    }

    #[test]
    fn all_keep_is_identity() {
        let b = batch();
        let view = apply_augmentation(&b, &choices(&[AugChoice::Keep; 4])).unwrap();
        assert_eq!(view.features.to_vec(), b.features);
        assert_eq!(view.to_graph_batch().edges, b.edges);
    }

    #[test]
    fn drop_isolates_and_zeroes() {
        use AugChoice::*;
        let b = batch();
        let view = apply_augmentation(&b, &choices(&[Keep, Drop, Mask, Keep])).unwrap();
        let f = view.features.to_vec();
        assert_eq!(&f[2..4], &[0.0, 0.0]);
        assert_eq!(&f[4..6], &[0.0, 0.0]);
        assert_eq!(&f[0..2], &[1.0, 2.0]);
        let t = &view.topology;
        assert!(t.src.iter().chain(&t.dst).all(|&v| v != 1));
        // arc 2–3 survives, masked nodes keep their arcs
        assert_eq!(t.src.len(), 2);
        assert_eq!(t.num_nodes, 4);
    }

    #[test]
    fn row_count_mismatch() {
        assert!(apply_augmentation(&batch(), &choices(&[AugChoice::Keep; 3])).is_err());
    }

    #[test]
    fn temperature_must_be_positive() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(gumbel_softmax(&logits, 0.0, &mut stream(0, &[])).is_err());
        assert!(gumbel_softmax(&logits, -1.0, &mut stream(0, &[])).is_err());
    }

    #[test]
    fn zero_weight_generator_gives_uniform_logits() {
        let mut store = ParamStore::new();
        let gen = ViewGenerator::new(&mut store, "gen1", 2, 4, 2, &mut stream(1, &[])).unwrap();
        store
            .iter()
            .for_each(|p| p.tensor.update_value(|v| v.fill(0.0)));
        let logits = gen.node_aug_logits(&batch()).unwrap();
        assert_eq!(logits.shape(), &[4, 3]);
        assert!(logits.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generate_view_is_seed_deterministic() {
        let mut store = ParamStore::new();
        let gen = ViewGenerator::new(&mut store, "gen1", 2, 4, 2, &mut stream(1, &[])).unwrap();
        let b = batch();
        let (v1, c1) = gen.generate_view(&b, 1.0, &mut stream(9, &["g"])).unwrap();
        let (v2, c2) = gen.generate_view(&b, 1.0, &mut stream(9, &["g"])).unwrap();
        assert_eq!(c1.hard, c2.hard);
        assert_eq!(v1.features.to_vec(), v2.features.to_vec());
        assert_eq!(v1.topology.num_nodes, b.num_nodes());
    }

    fn frequencies(logits: [f64; 3], tau_g: f64, draws: usize, seed: u64) -> [f64; 3] {
        let rows: Vec<f64> = (0..draws).flat_map(|_| logits).collect();
        let t = Tensor::new(rows, &[draws, 3]).unwrap();
        let m = gumbel_softmax(&t, tau_g, &mut stream(seed, &["freq"])).unwrap();
        m.counts().map(|c| c as f64 / draws as f64)
    }

    #[test]
    fn dominant_logit_is_almost_always_sampled() {
        // The column order is (DROP, KEEP, MASK), so a dominant first logit selects DROP.
        let f = frequencies([10.0, -10.0, -10.0], 0.1, 10_000, 1);
        assert!(f[AugChoice::Drop.column()] > 0.999, "{f:?}");
        let f = frequencies([-10.0, 10.0, -10.0], 0.1, 10_000, 2);
        assert!(f[AugChoice::Keep.column()] > 0.999, "{f:?}");
    }

    #[test]
    fn uniform_logits_give_thirds() {
        let f = frequencies([0.4, 0.4, 0.4], 1.0, 10_000, 3);
        assert!(f.iter().all(|p| (p - 1.0 / 3.0).abs() < 0.02), "{f:?}");
    }

    #[test]
    fn independent_streams_disagree_on_uniform_logits() {
        let n = 16;
        let t = Tensor::new(vec![0.0; 3 * n], &[n, 3]).unwrap();
        let differing = (0..200)
            .filter(|&trial| {
                let a = gumbel_softmax(&t, 1.0, &mut stream(trial, &["gen1"])).unwrap();
                let b = gumbel_softmax(&t, 1.0, &mut stream(trial, &["gen2"])).unwrap();
                a.hard != b.hard
            })
            .count();
        // P(identical) = 3^-16 per trial
        assert_eq!(differing, 200);
    }

    #[test]
    fn gumbel_noise_is_finite() {
        let g = sample_gumbel(100_000, &mut stream(3, &[]));
        assert!(g.iter().all(|v| v.is_finite()));
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        // Euler–Mascheroni constant
        assert!((mean - 0.5772).abs() < 0.02, "{mean}");
    }
}
