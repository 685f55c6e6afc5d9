//! Training strategies and evaluation protocols.
//!
//! A [`Model`] owns one parameter store with three disjoint name spaces:
//! `encoder.*` (GIN encoder, projection head and classifier), `gen1.*` and
//! `gen2.*` (the two view generators). A [`Trainer`] drives it with one
//! Adam optimizer and independent random streams for batching, Gumbel
//! noise, view-pair choice, fixed augmentations and evaluation, so that
//! adding an evaluation never shifts the training trajectory.
//!
//! Strategies:
//! - `supervised`: cross-entropy on labeled originals.
//! - `aug_only`: classification loss on the original and two views from
//!   frozen generators (or a fixed augmentation).
//! - `naive`: contrastive pre-training of generators and encoder on the
//!   unlabeled pool, then supervised fine-tuning of the encoder.
//! - `joint*`: per epoch, a contrastive pass over the unlabeled pool with
//!   frozen generators, then a labeled pass that updates generators and
//!   encoder with the classification loss on `(x, x₁, x₂)` plus `λ·L_sim`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugKind};
use crate::config::{ExperimentConfig, Strategy};
use crate::dataset::Dataset;
use crate::error::{DataError, Error, Result};
use crate::generator::{
    apply_augmentation, gumbel_softmax, AugChoiceMatrix, ViewBatch, ViewGenerator,
};
use crate::gin::{Encoder, EncoderConfig};
use crate::graph::{Graph, GraphBatch};
use crate::losses::{classification_loss, nt_xent, pair_rows, similarity_loss};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamSnapshot, ParamStore};
use crate::rng::{stream, Rng};
use crate::split::{make_split, Fold, Protocol};
use crate::tensor::Tensor;

pub const ENCODER: &str = "encoder";
pub const GEN1: &str = "gen1";
pub const GEN2: &str = "gen2";

/// Encoder, classifier and the two view generators.
pub struct Model {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub gen1: ViewGenerator,
    pub gen2: ViewGenerator,
}

impl Model {
    pub fn new(
        in_dim: usize,
        num_classes: usize,
        cfg: &ExperimentConfig,
        rng: &mut Rng,
    ) -> Result<Model> {
        if in_dim == 0 {
            return Err(Error::Invalid("graphs have no node features".into()));
        }
        if num_classes < 2 {
            return Err(Error::Invalid(format!(
                "need at least 2 classes, found {num_classes}"
            )));
        }
        let mut store = ParamStore::new();
        let encoder = Encoder::new(
            &mut store,
            ENCODER,
            EncoderConfig {
                in_dim,
                hidden: cfg.hidden,
                layers: cfg.layers,
                num_classes,
                readout: cfg.readout,
            },
            rng,
        )?;
        let gen1 = ViewGenerator::new(&mut store, GEN1, in_dim, cfg.hidden, cfg.layers, rng)?;
        let gen2 = ViewGenerator::new(&mut store, GEN2, in_dim, cfg.hidden, cfg.layers, rng)?;
        Ok(Model {
            store,
            encoder,
            gen1,
            gen2,
        })
    }

    /// Graph embeddings (pre-head) for every graph, in order.
    pub fn embed(&self, graphs: &[Graph], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(graphs.len());
        for chunk in graphs.chunks(batch_size.max(1)) {
            let batch = GraphBatch::from_graphs(chunk)?;
            let (_, g) = self
                .encoder
                .encode(&batch.feature_tensor()?, &batch.topology())?;
            let h = g.shape()[1];
            out.extend(g.value().chunks(h).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Embeddings fed to NT-Xent: projection-head outputs, or raw readouts
    /// when `use_projection` is off.
    pub fn contrastive_embedding(&self, view: &ViewBatch, use_projection: bool) -> Result<Tensor> {
        let (_, g) = self.encoder.encode(&view.features, &view.topology)?;
        Ok(if use_projection {
            self.encoder.project(&g)?
        } else {
            g
        })
    }

    /// Class logits for a view.
    pub fn logits(&self, view: &ViewBatch) -> Result<Tensor> {
        let (_, g) = self.encoder.encode(&view.features, &view.topology)?;
        Ok(self.encoder.classify(&g)?)
    }

    pub fn predict(&self, view: &ViewBatch) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(view)?))
    }

    pub fn generator(&self, second: bool) -> &ViewGenerator {
        if second {
            &self.gen2
        } else {
            &self.gen1
        }
    }
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = t.shape()[1];
    t.value()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

fn labels_of(graphs: &[Graph]) -> Result<Vec<usize>> {
    graphs
        .iter()
        .enumerate()
        .map(|(i, g)| {
            g.label
                .ok_or_else(|| DataError::InvalidGraph(format!("graph {i} has no label")).into())
        })
        .collect()
}

fn fraction_correct(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
}

/// One record per (fold, seed, epoch, phase).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub fold: usize,
    pub seed: u64,
    pub epoch: usize,
    pub phase: String,
    pub l_cl: Option<f64>,
    pub l_cls: Option<f64>,
    pub l_sim: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub view_acc: Option<f64>,
}

impl EpochRecord {
    fn new(fold: usize, seed: u64, epoch: usize, phase: &str) -> Self {
        Self {
            fold,
            seed,
            epoch,
            phase: phase.to_string(),
            l_cl: None,
            l_cls: None,
            l_sim: None,
            train_acc: None,
            test_acc: None,
            view_acc: None,
        }
    }
}

/// Which parameter groups a step updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Update {
    EncoderOnly,
    All,
}

impl Update {
    fn prefixes(self) -> &'static [&'static str] {
        match self {
            Update::EncoderOnly => &[ENCODER],
            Update::All => &[ENCODER, GEN1, GEN2],
        }
    }

    fn generators_trainable(self) -> bool {
        self == Update::All
    }
}

/// Labeled-step objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabeledObjective {
    /// Cross-entropy on originals only.
    Plain,
    /// Classification loss on `(x, x₁, x₂)`, views from frozen generators.
    FrozenViews,
    /// Classification loss on `(x, x₁, x₂)` with fixed augmentations.
    FixedViews(AugKind, f64),
    /// Classification loss on `(x, x₁, x₂)` plus `λ·L_sim`, generators trained.
    Joint { sim: bool },
}

/// Training state for one (fold, seed).
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub cfg: ExperimentConfig,
    batch_rng: Rng,
    gumbel_rngs: [Rng; 2],
    pair_rng: Rng,
    aug_rng: Rng,
    eval_rng: Rng,
}

impl Trainer {
    pub fn new(
        in_dim: usize,
        num_classes: usize,
        cfg: &ExperimentConfig,
        seed: u64,
        tag: &str,
    ) -> Result<Trainer> {
        let model = Model::new(in_dim, num_classes, cfg, &mut stream(seed, &[tag, "init"]))?;
        Ok(Self::with_model(model, cfg, seed, tag))
    }

    /// Wraps an existing model with fresh optimizer state and streams.
    pub fn with_model(model: Model, cfg: &ExperimentConfig, seed: u64, tag: &str) -> Trainer {
        Trainer {
            model,
            adam: Adam::new(AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            }),
            cfg: cfg.clone(),
            batch_rng: stream(seed, &[tag, "batch"]),
            gumbel_rngs: [
                stream(seed, &[tag, "gumbel", GEN1]),
                stream(seed, &[tag, "gumbel", GEN2]),
            ],
            pair_rng: stream(seed, &[tag, "pair"]),
            aug_rng: stream(seed, &[tag, "aug"]),
            eval_rng: stream(seed, &[tag, "eval"]),
        }
    }

    /// Shuffled mini-batches of `graphs`.
    pub fn batches(&mut self, graphs: &[Graph]) -> Result<Vec<GraphBatch>> {
        let mut order: Vec<usize> = (0..graphs.len()).collect();
        order.shuffle(&mut self.batch_rng);
        order
            .chunks(self.cfg.batch_size)
            .map(|idx| Ok(GraphBatch::from_graphs(idx.iter().map(|&i| &graphs[i]))?))
            .collect()
    }

    fn learned_view(
        &mut self,
        batch: &GraphBatch,
        second: bool,
        trainable: bool,
    ) -> Result<(ViewBatch, AugChoiceMatrix)> {
        let mut logits = self.model.generator(second).node_aug_logits(batch)?;
        if !trainable {
            logits = logits.detach();
        }
        let choices = gumbel_softmax(
            &logits,
            self.cfg.tau_g,
            &mut self.gumbel_rngs[usize::from(second)],
        )?;
        Ok((apply_augmentation(batch, &choices)?, choices))
    }

    fn fixed_view(&mut self, batch: &GraphBatch, kind: AugKind, ratio: f64) -> Result<ViewBatch> {
        let graphs = batch
            .unbatch()
            .iter()
            .map(|g| augment(g, kind, ratio, &mut self.aug_rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(ViewBatch::original(&GraphBatch::from_graphs(&graphs)?)?)
    }

    fn apply_update(&mut self, update: Update) {
        let prefixes = update.prefixes();
        self.adam.step(self.model.store.iter().filter(|p| {
            prefixes
                .iter()
                .any(|q| p.name.starts_with(&format!("{q}.")))
        }));
    }

    /// One contrastive step on a pair sampled uniformly from the three
    /// distinct pairs of `{x, x₁, x₂}`.
    pub fn contrastive_step(&mut self, batch: &GraphBatch, update: Update) -> Result<f64> {
        self.model.store.zero_grad();
        let trainable = update.generators_trainable();
        let pair = self.pair_rng.gen_range(0..3);
        let (a, b) = match pair {
            0 => (
                ViewBatch::original(batch)?,
                self.learned_view(batch, false, trainable)?.0,
            ),
            1 => (
                ViewBatch::original(batch)?,
                self.learned_view(batch, true, trainable)?.0,
            ),
            _ => {
                let v1 = self.learned_view(batch, false, trainable)?.0;
                (v1, self.learned_view(batch, true, trainable)?.0)
            }
        };
        let za = self
            .model
            .contrastive_embedding(&a, self.cfg.use_projection)?;
        let zb = self
            .model
            .contrastive_embedding(&b, self.cfg.use_projection)?;
        let loss = nt_xent(&pair_rows(&za, &zb)?, self.cfg.tau)?;
        loss.backward()?;
        self.apply_update(update);
        Ok(loss.item())
    }

    /// One supervised step; returns `(l_cls, l_sim)`.
    pub fn labeled_step(
        &mut self,
        batch: &GraphBatch,
        objective: LabeledObjective,
    ) -> Result<(f64, f64)> {
        self.model.store.zero_grad();
        let labels = batch.required_labels()?;
        let x = ViewBatch::original(batch)?;
        let lx = self.model.logits(&x)?;
        let (loss, l_cls, l_sim, update) = match objective {
            LabeledObjective::Plain => {
                let l = lx.cross_entropy(&labels)?;
                let v = l.item();
                (l, v, 0.0, Update::EncoderOnly)
            }
            LabeledObjective::FrozenViews | LabeledObjective::FixedViews(..) => {
                let (v1, v2) = match objective {
                    LabeledObjective::FixedViews(kind, ratio) => (
                        self.fixed_view(batch, kind, ratio)?,
                        self.fixed_view(batch, kind, ratio)?,
                    ),
                    _ => (
                        self.learned_view(batch, false, false)?.0,
                        self.learned_view(batch, true, false)?.0,
                    ),
                };
                let l = classification_loss(
                    &lx,
                    &self.model.logits(&v1)?,
                    &self.model.logits(&v2)?,
                    &labels,
                )?;
                let v = l.item();
                (l, v, 0.0, Update::EncoderOnly)
            }
            LabeledObjective::Joint { sim } => {
                let (v1, a1) = self.learned_view(batch, false, true)?;
                let (v2, a2) = self.learned_view(batch, true, true)?;
                let cls = classification_loss(
                    &lx,
                    &self.model.logits(&v1)?,
                    &self.model.logits(&v2)?,
                    &labels,
                )?;
                let s = similarity_loss(&a1, &a2)?;
                let s_val = s.item();
                let cls_val = cls.item();
                let total = if sim {
                    cls.add(&s.scale(self.cfg.lambda))?
                } else {
                    cls
                };
                (total, cls_val, s_val, Update::All)
            }
        };
        loss.backward()?;
        self.apply_update(update);
        Ok((l_cls, l_sim))
    }

    /// Mean contrastive loss over one epoch of `graphs`.
    pub fn contrastive_epoch(&mut self, graphs: &[Graph], update: Update) -> Result<f64> {
        if graphs.is_empty() {
            return Err(Error::Invalid("empty unlabeled stream".into()));
        }
        let batches = self.batches(graphs)?;
        let mut total = 0.0;
        for b in &batches {
            total += self.contrastive_step(b, update)?;
        }
        Ok(total / batches.len() as f64)
    }

    /// Mean `(l_cls, l_sim)` over one epoch of `graphs`.
    pub fn labeled_epoch(
        &mut self,
        graphs: &[Graph],
        objective: LabeledObjective,
    ) -> Result<(f64, f64)> {
        if graphs.is_empty() {
            return Err(Error::Invalid("empty labeled stream".into()));
        }
        let batches = self.batches(graphs)?;
        let (mut c, mut s) = (0.0, 0.0);
        for b in &batches {
            let (lc, ls) = self.labeled_step(b, objective)?;
            c += lc;
            s += ls;
        }
        let n = batches.len() as f64;
        Ok((c / n, s / n))
    }

    /// Classification accuracy on original graphs.
    pub fn accuracy(&self, graphs: &[Graph]) -> Result<f64> {
        let labels = labels_of(graphs)?;
        let mut pred = Vec::with_capacity(graphs.len());
        for chunk in graphs.chunks(self.cfg.batch_size) {
            let batch = GraphBatch::from_graphs(chunk)?;
            pred.extend(self.model.predict(&ViewBatch::original(&batch)?)?);
        }
        Ok(fraction_correct(&pred, &labels))
    }

    /// Classification accuracy on hard-sampled views, averaged over both
    /// generators.
    pub fn view_accuracy(&mut self, graphs: &[Graph]) -> Result<f64> {
        let labels = labels_of(graphs)?;
        let mut correct = 0.0;
        for second in [false, true] {
            let mut pred = Vec::with_capacity(graphs.len());
            for chunk in graphs.chunks(self.cfg.batch_size) {
                let batch = GraphBatch::from_graphs(chunk)?;
                let logits = self
                    .model
                    .generator(second)
                    .node_aug_logits(&batch)?
                    .detach();
                let choices = gumbel_softmax(&logits, self.cfg.tau_g, &mut self.eval_rng)?;
                pred.extend(self.model.predict(&apply_augmentation(&batch, &choices)?)?);
            }
            correct += fraction_correct(&pred, &labels);
        }
        Ok(correct / 2.0)
    }
}

/// L2-regularized softmax regression on standardized frozen embeddings.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub dim: usize,
    pub num_classes: usize,
}

impl LinearProbe {
    pub fn fit(
        x: &[Vec<f64>],
        labels: &[usize],
        num_classes: usize,
        epochs: usize,
        lr: f64,
        l2: f64,
    ) -> Result<LinearProbe> {
        if x.is_empty() || x.len() != labels.len() {
            return Err(Error::Invalid("probe needs one label per embedding".into()));
        }
        let dim = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..dim)
            .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let scale: Vec<f64> = (0..dim)
            .map(|j| {
                let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-12 {
                    1.0 / var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut probe = LinearProbe {
            weight: vec![0.0; dim * num_classes],
            bias: vec![0.0; num_classes],
            mean,
            scale,
            dim,
            num_classes,
        };
        let xs = Tensor::new(
            x.iter().flat_map(|r| probe.standardize(r)).collect(),
            &[x.len(), dim],
        )?;
        let mut store = ParamStore::new();
        let w = store.register("probe.w", probe.weight.clone(), &[dim, num_classes])?;
        let b = store.register("probe.b", probe.bias.clone(), &[num_classes])?;
        let mut adam = Adam::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        });
        for _ in 0..epochs {
            store.zero_grad();
            let loss = xs
                .matmul(&w)?
                .add(&b)?
                .cross_entropy(labels)?
                .add(&w.mul(&w)?.sum().scale(l2))?;
            loss.backward()?;
            adam.step(store.iter());
        }
        probe.weight = w.to_vec();
        probe.bias = b.to_vec();
        Ok(probe)
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let z = self.standardize(row);
        (0..self.num_classes)
            .map(|c| {
                self.bias[c]
                    + (0..self.dim)
                        .map(|j| z[j] * self.weight[j * self.num_classes + c])
                        .sum::<f64>()
            })
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0
    }

    pub fn accuracy(&self, x: &[Vec<f64>], labels: &[usize]) -> f64 {
        let pred: Vec<usize> = x.iter().map(|r| self.predict(r)).collect();
        fraction_correct(&pred, labels)
    }
}

/// Result of training and evaluating one (fold, seed).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub protocol: Protocol,
    pub train_acc: f64,
    pub test_acc: f64,
    pub view_acc: Option<f64>,
    pub records: Vec<EpochRecord>,
    #[serde(skip)]
    pub snapshot: Option<ParamSnapshot>,
}

fn require_labels(graphs: &[Graph], what: &str) -> Result<()> {
    if graphs.is_empty() {
        return Err(Error::Invalid(format!("{what} split is empty")));
    }
    labels_of(graphs).map(|_| ())
}

/// Trains and evaluates one fold under `cfg.protocol` and `cfg.strategy`.
pub fn run_fold(
    dataset: &Dataset,
    fold: &Fold,
    fold_idx: usize,
    seed: u64,
    cfg: &ExperimentConfig,
    keep_snapshot: bool,
) -> Result<FoldOutcome> {
    let tag = format!("fold{fold_idx}");
    let mut tr = Trainer::new(dataset.num_features, dataset.num_classes, cfg, seed, &tag)?;
    let unlabeled = dataset.subset(&fold.unlabeled);
    let labeled = dataset.subset(&fold.labeled_train);
    let test = dataset.subset(&fold.test);
    require_labels(&test, "test")?;
    let mut records = Vec::new();
    let rec = |epoch: usize, phase: &str| EpochRecord::new(fold_idx, seed, epoch, phase);

    let (train_acc, test_acc, view_acc) = match cfg.protocol {
        Protocol::Unsupervised => {
            for e in 1..=cfg.epochs {
                let mut r = rec(e, "pretrain");
                r.l_cl = Some(tr.contrastive_epoch(&unlabeled, Update::All)?);
                records.push(r);
            }
            let before = tr.model.store.checksum(ENCODER);
            let train_x = tr.model.embed(&unlabeled, cfg.batch_size)?;
            let train_y = labels_of(&unlabeled)?;
            let probe = LinearProbe::fit(
                &train_x,
                &train_y,
                dataset.num_classes,
                cfg.probe_epochs,
                cfg.probe_lr,
                cfg.probe_l2,
            )?;
            debug_assert_eq!(before, tr.model.store.checksum(ENCODER));
            let test_x = tr.model.embed(&test, cfg.batch_size)?;
            let train_acc = probe.accuracy(&train_x, &train_y);
            let test_acc = probe.accuracy(&test_x, &labels_of(&test)?);
            let mut r = rec(cfg.epochs, "probe");
            r.train_acc = Some(train_acc);
            r.test_acc = Some(test_acc);
            records.push(r);
            (train_acc, test_acc, None)
        }
        Protocol::SemiSupervised => {
            require_labels(&labeled, "labeled training")?;
            let mut last = (0.0, 0.0);
            let mut eval = |tr: &mut Trainer, r: &mut EpochRecord| -> Result<()> {
                let a = (tr.accuracy(&labeled)?, tr.accuracy(&test)?);
                r.train_acc = Some(a.0);
                r.test_acc = Some(a.1);
                last = a;
                Ok(())
            };
            match cfg.strategy {
                Strategy::Supervised | Strategy::AugOnly => {
                    let objective = match (cfg.strategy, cfg.aug) {
                        (Strategy::Supervised, _) => LabeledObjective::Plain,
                        (_, AugKind::None) => LabeledObjective::FrozenViews,
                        (_, kind) => LabeledObjective::FixedViews(kind, cfg.aug_ratio),
                    };
                    let phase = cfg.strategy.name();
                    for e in 1..=cfg.epochs {
                        let mut r = rec(e, phase);
                        r.l_cls = Some(tr.labeled_epoch(&labeled, objective)?.0);
                        eval(&mut tr, &mut r)?;
                        records.push(r);
                    }
                }
                Strategy::Naive => {
                    for e in 1..=cfg.epochs {
                        let mut r = rec(e, "pretrain");
                        r.l_cl = Some(tr.contrastive_epoch(&unlabeled, Update::All)?);
                        records.push(r);
                    }
                    for e in 1..=cfg.finetune_epochs {
                        let mut r = rec(e, "finetune");
                        r.l_cls = Some(tr.labeled_epoch(&labeled, LabeledObjective::Plain)?.0);
                        eval(&mut tr, &mut r)?;
                        records.push(r);
                    }
                }
                Strategy::Joint { cl, sim } => {
                    for e in 1..=cfg.epochs {
                        let mut r = rec(e, "joint");
                        if cl {
                            r.l_cl = Some(tr.contrastive_epoch(&unlabeled, Update::EncoderOnly)?);
                        }
                        let (l_cls, l_sim) =
                            tr.labeled_epoch(&labeled, LabeledObjective::Joint { sim })?;
                        r.l_cls = Some(l_cls);
                        r.l_sim = Some(l_sim);
                        eval(&mut tr, &mut r)?;
                        records.push(r);
                    }
                }
            }
            let view_acc = tr.view_accuracy(&test)?;
            if let Some(r) = records.last_mut() {
                r.view_acc = Some(view_acc);
            }
            (last.0, last.1, Some(view_acc))
        }
    };
    Ok(FoldOutcome {
        fold: fold_idx,
        seed,
        strategy: cfg.strategy,
        protocol: cfg.protocol,
        train_acc,
        test_acc,
        view_acc,
        records,
        snapshot: keep_snapshot.then(|| tr.model.store.snapshot()),
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs every (seed, fold) of `cfg`, fanning out over `cfg.jobs` worker
/// threads. `on_outcome` sees results on the calling thread as they finish;
/// the returned list is ordered by (seed, fold). Snapshots are kept for
/// fold 0 of each seed.
pub fn run_experiment(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    mut on_outcome: impl FnMut(&FoldOutcome) -> Result<()>,
) -> Result<Vec<FoldOutcome>> {
    cfg.validate()?;
    let mut tasks = Vec::new();
    for &seed in &cfg.seeds {
        let plan = make_split(dataset.len(), cfg.protocol, cfg.folds, seed)?;
        for (k, fold) in plan.folds.into_iter().enumerate() {
            tasks.push((seed, k, fold));
        }
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<FoldOutcome>)>();
    let workers = cfg.jobs.min(tasks.len()).max(1);
    let mut slots: Vec<Option<FoldOutcome>> = (0..tasks.len()).map(|_| None).collect();
    let mut first_error = None;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, tasks) = (&next, &tasks);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((seed, k, fold)) = tasks.get(i) else {
                    break;
                };
                let out = run_fold(dataset, fold, *k, *seed, cfg, *k == 0);
                let failed = out.is_err();
                if tx.send((i, out)).is_err() || failed {
                    next.store(usize::MAX / 2, Ordering::SeqCst);
                    break;
                }
            });
        }
        drop(tx);
        for (i, out) in rx {
            match out.and_then(|o| on_outcome(&o).map(|_| o)) {
                Ok(o) => slots[i] = Some(o),
                Err(e) => {
                    next.store(usize::MAX / 2, Ordering::SeqCst);
                    first_error.get_or_insert(e);
                }
            }
        }
    });
    if let Some(e) = first_error {
        return Err(e);
    }
    Ok(slots
        .into_iter()
        .map(|s| s.expect("every task reported"))
        .collect())
}

/// Aggregate accuracies over all (fold, seed) outcomes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub test_mean: f64,
    pub test_std: f64,
    pub train_mean: f64,
    pub view_mean: Option<f64>,
}

pub fn summarize(outcomes: &[FoldOutcome]) -> Summary {
    let test: Vec<f64> = outcomes.iter().map(|o| o.test_acc).collect();
    let train: Vec<f64> = outcomes.iter().map(|o| o.train_acc).collect();
    let views: Vec<f64> = outcomes.iter().filter_map(|o| o.view_acc).collect();
    let (test_mean, test_std) = mean_std(&test);
    Summary {
        runs: outcomes.len(),
        test_mean,
        test_std,
        train_mean: mean_std(&train).0,
        view_mean: (!views.is_empty()).then(|| mean_std(&views).0),
    }
}

/// Accuracy grid of fixed augmentations × ratios, semi-supervised `aug_only`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub dataset: String,
    pub kinds: Vec<AugKind>,
    pub ratios: Vec<f64>,
    /// `cells[r][k]` is (mean, std) test accuracy for ratio `r`, kind `k`.
    pub cells: Vec<Vec<(f64, f64)>>,
    /// The same pipeline with no augmentation.
    pub baseline: (f64, f64),
}

pub fn run_ablation(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<AblationTable> {
    let mut base = cfg.clone();
    base.protocol = Protocol::SemiSupervised;
    base.strategy = Strategy::AugOnly;
    let accuracy = |kind: AugKind, ratio: f64| -> Result<(f64, f64)> {
        let mut c = base.clone();
        c.aug = kind;
        c.aug_ratio = ratio;
        let s = summarize(&run_experiment(dataset, &c, |_| Ok(()))?);
        Ok((s.test_mean, s.test_std))
    };
    let baseline = accuracy(AugKind::Identity, 0.0)?;
    let cells = cfg
        .ablation_ratios
        .iter()
        .map(|&r| {
            cfg.ablation_kinds
                .iter()
                .map(|&k| accuracy(k, r))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        dataset: dataset.name.clone(),
        kinds: cfg.ablation_kinds.clone(),
        ratios: cfg.ablation_ratios.clone(),
        cells,
        baseline,
    })
}

fn column_title(kind: AugKind) -> &'static str {
    match kind {
        AugKind::NodeDrop => "NodeDrop",
        AugKind::EdgePerturb => "EdgePerturb",
        AugKind::Subgraph => "Subgraph",
        AugKind::AttrMask => "AttrMask",
        AugKind::Random4 => "Random4",
        AugKind::None => "None",
        AugKind::Identity => "Identity",
    }
}

impl AblationTable {
    /// CSV with `#` comment lines carrying `header` (one line each) and the
    /// baseline, then `Dataset,Aug Ratio,<kinds…>` rows of `mean ± std`
    /// percentages.
    pub fn to_csv(&self, header: &[String]) -> String {
        let pct = |(m, s): (f64, f64)| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s);
        let mut out = String::new();
        for h in header {
            out.push_str(&format!("# {h}\n"));
        }
        out.push_str(&format!(
            "# baseline (no augmentation): {}\n",
            pct(self.baseline)
        ));
        out.push_str("Dataset,Aug Ratio");
        for k in &self.kinds {
            out.push(',');
            out.push_str(column_title(*k));
        }
        out.push('\n');
        for (r, row) in self.ratios.iter().zip(&self.cells) {
            out.push_str(&format!("{},{r:.1}", self.dataset));
            for &cell in row {
                out.push(',');
                out.push_str(&pct(cell));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two classes: triangles with feature 1 vs paths with feature 0.
    fn toy(n: usize) -> Dataset {
        let graphs = (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    Graph::undirected(3, 1, vec![1.0; 3], &[(0, 1), (1, 2), (2, 0)], Some(0))
                        .unwrap()
                } else {
                    Graph::undirected(4, 1, vec![0.5; 4], &[(0, 1), (1, 2), (2, 3)], Some(1))
                        .unwrap()
                }
            })
            .collect();
        Dataset::from_graphs("toy", graphs, None).unwrap()
    }

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            hidden: 8,
            layers: 2,
            epochs: 3,
            finetune_epochs: 3,
            batch_size: 8,
            folds: 4,
            seeds: vec![0],
            lr: 0.01,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn name_spaces_are_disjoint() {
        let cfg = small_cfg();
        let m = Model::new(1, 2, &cfg, &mut stream(0, &[])).unwrap();
        let count = |p: &str| m.store.with_prefix(p).count();
        assert!(count("encoder.") > 0 && count("gen1.") > 0 && count("gen2.") > 0);
        assert_eq!(
            count("encoder.") + count("gen1.") + count("gen2."),
            m.store.len()
        );
    }

    #[test]
    fn unlabeled_phase_freezes_generators() {
        let d = toy(16);
        let mut tr = Trainer::new(1, 2, &small_cfg(), 0, "t").unwrap();
        let (g1, g2, e) = (
            tr.model.store.checksum("gen1."),
            tr.model.store.checksum("gen2."),
            tr.model.store.checksum("encoder."),
        );
        tr.contrastive_epoch(&d.graphs, Update::EncoderOnly)
            .unwrap();
        assert_eq!(tr.model.store.checksum("gen1."), g1);
        assert_eq!(tr.model.store.checksum("gen2."), g2);
        assert_ne!(tr.model.store.checksum("encoder."), e);
        tr.labeled_epoch(&d.graphs, LabeledObjective::Joint { sim: true })
            .unwrap();
        assert_ne!(tr.model.store.checksum("gen1."), g1);
        assert_ne!(tr.model.store.checksum("gen2."), g2);
    }

    #[test]
    fn finetune_leaves_generators_untouched() {
        let d = toy(16);
        let mut tr = Trainer::new(1, 2, &small_cfg(), 1, "t").unwrap();
        let g = (
            tr.model.store.checksum("gen1."),
            tr.model.store.checksum("gen2."),
        );
        for _ in 0..3 {
            tr.labeled_epoch(&d.graphs, LabeledObjective::Plain)
                .unwrap();
            tr.labeled_epoch(&d.graphs, LabeledObjective::FrozenViews)
                .unwrap();
        }
        assert_eq!(
            g,
            (
                tr.model.store.checksum("gen1."),
                tr.model.store.checksum("gen2.")
            )
        );
    }

    #[test]
    fn supervised_fits_separable_toy() {
        let d = toy(16);
        let mut cfg = small_cfg();
        cfg.lr = 0.01;
        let mut tr = Trainer::new(1, 2, &cfg, 2, "t").unwrap();
        let start = tr.accuracy(&d.graphs).unwrap();
        for _ in 0..60 {
            tr.labeled_epoch(&d.graphs, LabeledObjective::Plain)
                .unwrap();
        }
        let end = tr.accuracy(&d.graphs).unwrap();
        assert_eq!(end, 1.0, "start {start}");
    }

    #[test]
    fn lambda_zero_matches_pure_classification() {
        let d = toy(8);
        let batch = GraphBatch::from_graphs(&d.graphs).unwrap();
        let mut cfg = small_cfg();
        cfg.lambda = 0.0;
        let mut a = Trainer::new(1, 2, &cfg, 3, "t").unwrap();
        let mut b = Trainer::new(1, 2, &cfg, 3, "t").unwrap();
        let la = a
            .labeled_step(&batch, LabeledObjective::Joint { sim: true })
            .unwrap();
        let lb = b
            .labeled_step(&batch, LabeledObjective::Joint { sim: false })
            .unwrap();
        assert_eq!(la.0, lb.0);
        assert_eq!(a.model.store.checksum(""), b.model.store.checksum(""));
    }

    #[test]
    fn probe_separates_linear_data() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let y: Vec<usize> = (0..40).map(|i| usize::from(i >= 20)).collect();
        let p = LinearProbe::fit(&x, &y, 2, 300, 0.05, 0.0).unwrap();
        assert!(p.accuracy(&x, &y) >= 0.95);
    }

    #[test]
    fn every_strategy_runs_and_is_reproducible() {
        let d = toy(16);
        for strategy in [Strategy::Supervised, Strategy::AugOnly, Strategy::Naive]
            .into_iter()
            .chain(Strategy::JOINT_VARIANTS)
        {
            let mut cfg = small_cfg();
            cfg.strategy = strategy;
            let a = run_experiment(&d, &cfg, |_| Ok(())).unwrap();
            let b = run_experiment(&d, &cfg, |_| Ok(())).unwrap();
            assert_eq!(a.len(), 4);
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.records, y.records, "{strategy}");
            }
            let last = a[0].records.last().unwrap();
            assert!(last.test_acc.is_some() && last.view_acc.is_some());
        }
    }

    #[test]
    fn parallel_matches_serial() {
        let d = toy(16);
        let mut cfg = small_cfg();
        cfg.seeds = vec![0, 1];
        let serial = run_experiment(&d, &cfg, |_| Ok(())).unwrap();
        cfg.jobs = 3;
        let parallel = run_experiment(&d, &cfg, |_| Ok(())).unwrap();
        for (x, y) in serial.iter().zip(&parallel) {
            assert_eq!((x.seed, x.fold, &x.records), (y.seed, y.fold, &y.records));
        }
    }

    #[test]
    fn unsupervised_protocol_probes() {
        let d = toy(16);
        let mut cfg = small_cfg();
        cfg.protocol = Protocol::Unsupervised;
        cfg.strategy = Strategy::Naive;
        let out = run_experiment(&d, &cfg, |_| Ok(())).unwrap();
        assert!(out
            .iter()
            .all(|o| o.records.last().unwrap().phase == "probe"));
        assert!(summarize(&out).test_mean > 0.9);
    }

    #[test]
    fn ablation_zero_ratio_equals_baseline() {
        let d = toy(16);
        let mut cfg = small_cfg();
        cfg.ablation_ratios = vec![0.0, 0.2];
        let t = run_ablation(&d, &cfg).unwrap();
        for cell in &t.cells[0] {
            assert_eq!(*cell, t.baseline);
        }
        let csv = t.to_csv(&["seed 0".into()]);
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 3);
        assert!(csv.contains("Dataset,Aug Ratio,NodeDrop,EdgePerturb,Subgraph,AttrMask"));
    }

    #[test]
    fn zero_ratio_training_matches_identity_views_exactly() {
        let d = toy(16);
        let mut cfg = small_cfg();
        cfg.strategy = Strategy::AugOnly;
        let losses = |kind: AugKind, ratio: f64| {
            let mut c = cfg.clone();
            c.aug = kind;
            c.aug_ratio = ratio;
            run_experiment(&d, &c, |_| Ok(()))
                .unwrap()
                .iter()
                .flat_map(|o| o.records.iter().map(|r| r.l_cls.unwrap()))
                .collect::<Vec<f64>>()
        };
        let identity = losses(AugKind::Identity, 0.2);
        for kind in AugKind::PRIMITIVES {
            assert_eq!(losses(kind, 0.0), identity, "{kind}");
        }
        assert_ne!(losses(AugKind::None, 0.0), identity);
    }
}
