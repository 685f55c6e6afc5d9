//! GIN message passing, readout, and the projection / classification heads.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::Topology;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{TResult, Tensor};

/// Dense layer `x·W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights; biases uniform in ±1/√fan_in.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Result<Linear> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        let b_limit = 1.0 / (fan_in.max(1) as f64).sqrt();
        let b = (0..fan_out)
            .map(|_| rng.gen_range(-b_limit..b_limit))
            .collect();
        Ok(Linear {
            weight: store.register(format!("{name}.w"), w, &[fan_in, fan_out])?,
            bias: store.register(format!("{name}.b"), b, &[fan_out])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> TResult<Tensor> {
        x.matmul(&self.weight)?.add(&self.bias)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Two-layer perceptron: Linear → ReLU → Linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut Rng) -> Result<Mlp> {
        Ok(Mlp {
            first: Linear::new(store, &format!("{name}.l1"), dims[0], dims[1], rng)?,
            second: Linear::new(store, &format!("{name}.l2"), dims[1], dims[2], rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> TResult<Tensor> {
        self.second.forward(&self.first.forward(x)?.relu())
    }
}

/// `MLP((1 + ε)·h_v + Σ_{u→v} h_u)` over the arcs in `topo`.
pub fn gin_layer(h: &Tensor, topo: &Topology, eps: &Tensor, mlp: &Mlp) -> TResult<Tensor> {
    let messages = h.gather_rows(&topo.src)?;
    let aggregated = messages.scatter_sum(&topo.dst, topo.num_nodes)?;
    let combined = h.mul(&eps.add_scalar(1.0))?.add(&aggregated)?;
    mlp.forward(&combined)
}

#[derive(Clone, Debug)]
pub struct GinLayer {
    /// Learnable, shape `[1]`, initialized to 0.
    pub eps: Tensor,
    pub mlp: Mlp,
}

impl GinLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        rng: &mut Rng,
    ) -> Result<GinLayer> {
        Ok(GinLayer {
            eps: store.register(format!("{name}.eps"), vec![0.0], &[1])?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dims, rng)?,
        })
    }

    pub fn forward(&self, h: &Tensor, topo: &Topology) -> TResult<Tensor> {
        gin_layer(h, topo, &self.eps, &self.mlp)
    }
}

/// Stack of GIN layers with ReLU between layers.
#[derive(Clone, Debug)]
pub struct GinStack {
    pub layers: Vec<GinLayer>,
}

impl GinStack {
    /// `layers ≥ 1` layers mapping `in_dim → hidden → … → out_dim`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        layers: usize,
        rng: &mut Rng,
    ) -> Result<GinStack> {
        if layers == 0 {
            return Err(crate::Error::Invalid(
                "GIN stack needs at least one layer".into(),
            ));
        }
        let layers = (0..layers)
            .map(|i| {
                let input = if i == 0 { in_dim } else { hidden };
                let output = if i + 1 == layers { out_dim } else { hidden };
                GinLayer::new(
                    store,
                    &format!("{name}.layer{i}"),
                    [input, hidden, output],
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(GinStack { layers })
    }

    /// Runs every layer; `relu_last` also rectifies the final output.
    pub fn forward(&self, x: &Tensor, topo: &Topology, relu_last: bool) -> TResult<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h, topo)?;
            if i < last || relu_last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].mlp.first.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].mlp.second.out_dim()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    Sum,
    Mean,
}

impl std::str::FromStr for Readout {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Readout::Sum),
            "mean" => Ok(Readout::Mean),
            other => Err(format!("unknown readout '{other}' (expected sum|mean)")),
        }
    }
}

impl std::fmt::Display for Readout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Readout::Sum => "sum",
            Readout::Mean => "mean",
        })
    }
}

pub fn readout(node_embs: &Tensor, topo: &Topology, kind: Readout) -> TResult<Tensor> {
    match kind {
        Readout::Sum => node_embs.scatter_sum(&topo.batch_vector, topo.num_graphs),
        Readout::Mean => node_embs.segment_mean(&topo.batch_vector, topo.num_graphs),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub readout: Readout,
}

/// Graph encoder with projection head (contrastive) and classifier head.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stack: GinStack,
    pub projection: Mlp,
    pub classifier: Linear,
    pub readout: Readout,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: EncoderConfig,
        rng: &mut Rng,
    ) -> Result<Encoder> {
        let h = cfg.hidden;
        Ok(Encoder {
            stack: GinStack::new(store, prefix, cfg.in_dim, h, h, cfg.layers, rng)?,
            projection: Mlp::new(store, &format!("{prefix}.proj"), [h, h, h], rng)?,
            classifier: Linear::new(
                store,
                &format!("{prefix}.classifier"),
                h,
                cfg.num_classes,
                rng,
            )?,
            readout: cfg.readout,
        })
    }

    /// Node embeddings `[ΣN × H]` and graph embeddings `[B × H]` (pre-head).
    pub fn encode(&self, features: &Tensor, topo: &Topology) -> TResult<(Tensor, Tensor)> {
        if topo.num_graphs == 0 {
            return Err(crate::error::TensorError::Invalid("empty batch".into()));
        }
        let nodes = self.stack.forward(features, topo, true)?;
        let graphs = readout(&nodes, topo, self.readout)?;
        Ok((nodes, graphs))
    }

    pub fn project(&self, graph_embs: &Tensor) -> TResult<Tensor> {
        self.projection.forward(graph_embs)
    }

    pub fn classify(&self, graph_embs: &Tensor) -> TResult<Tensor> {
        self.classifier.forward(graph_embs)
    }

    pub fn hidden(&self) -> usize {
        self.stack.out_dim()
    }
}
