//! Command implementations behind the `gclview` binary.
//!
//! Every command writes only below its output directory, and every file it
//! writes carries the resolved configuration and seed.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::dataset::{load_dataset, DataFormat, Dataset};
use crate::error::{Error, Result};
use crate::generator::{apply_augmentation, gumbel_softmax, AugChoice, AugChoiceMatrix, ViewBatch};
use crate::graph::{Graph, GraphBatch};
use crate::params::ParamSnapshot;
use crate::rng::stream;
use crate::selftest::{run_selftest, CheckOutcome};
use crate::training::{
    run_ablation, run_experiment, summarize, FoldOutcome, Model, Summary, Trainer,
};

/// Conventions recorded alongside every result.
pub fn method_notes() -> Value {
    json!({
        "subgraph_ratio": "kept node fraction = ceil((1 - ratio) * N)",
        "probe": "L2-regularized linear softmax probe on standardized frozen embeddings (in place of an SVM)",
        "splits": "seeded, non-stratified k-fold",
        "view_pair": "uniform over the 3 distinct pairs of {x, x1, x2}",
        "selection": "final epoch, no early stopping",
    })
}

fn dataset_info(d: &Dataset) -> Value {
    json!({
        "name": d.name,
        "graphs": d.len(),
        "classes": d.num_classes,
        "features": d.num_features,
        "degree_features": d.degree_features,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(load_dataset(&cfg.dataset, cfg.format, cfg.max_degree)?)
}

#[derive(Debug)]
pub struct TrainReport {
    pub summary: Summary,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub outcomes: Vec<FoldOutcome>,
}

fn checkpoint_metadata(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64, fold: usize) -> Value {
    json!({
        "config": cfg.to_json(),
        "seed": seed,
        "fold": fold,
        "in_dim": dataset.num_features,
        "num_classes": dataset.num_classes,
        "dataset": dataset_info(dataset),
        "notes": method_notes(),
    })
}

/// Runs the configured protocol and writes `config.txt`, `metrics.jsonl`,
/// `summary.json` and one checkpoint per seed (fold 0).
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let dataset = prepare_dataset(cfg)?;
    let out = &cfg.output_dir;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    write_file(&out.join("config.txt"), &cfg.to_text())?;
    let metrics_path = out.join("metrics.jsonl");
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let io = |e| Error::io(&metrics_path, e);
    let header = json!({
        "type": "header",
        "config": cfg.to_json(),
        "seeds": cfg.seeds,
        "dataset": dataset_info(&dataset),
        "notes": method_notes(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    writeln!(metrics, "{header}").map_err(io)?;
    let mut checkpoints = Vec::new();
    let outcomes = run_experiment(&dataset, cfg, |o| {
        for r in &o.records {
            let mut v = serde_json::to_value(r)?;
            v["type"] = json!("epoch");
            v["strategy"] = json!(o.strategy);
            writeln!(metrics, "{v}").map_err(io)?;
        }
        let fold = json!({
            "type": "fold", "fold": o.fold, "seed": o.seed, "strategy": o.strategy,
            "train_acc": o.train_acc, "test_acc": o.test_acc, "view_acc": o.view_acc,
        });
        writeln!(metrics, "{fold}").map_err(io)?;
        metrics.flush().map_err(io)?;
        if let Some(snap) = &o.snapshot {
            let path = ckpt_dir.join(format!("seed{}_fold{}.ckpt", o.seed, o.fold));
            snap.save(&path, &checkpoint_metadata(cfg, &dataset, o.seed, o.fold))?;
            checkpoints.push(path);
        }
        Ok(())
    })?;
    let summary = summarize(&outcomes);
    let summary_json = json!({
        "type": "summary",
        "config": cfg.to_json(),
        "seeds": cfg.seeds,
        "summary": summary,
    });
    writeln!(metrics, "{summary_json}").map_err(io)?;
    metrics.flush().map_err(io)?;
    write_file(
        &out.join("summary.json"),
        &serde_json::to_string_pretty(&summary_json)?,
    )?;
    Ok(TrainReport {
        summary,
        metrics: metrics_path,
        checkpoints,
        outcomes,
    })
}

/// A model restored from a checkpoint plus its recorded provenance.
pub struct LoadedCheckpoint {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub fold: usize,
    pub in_dim: usize,
    pub num_classes: usize,
    pub degree_features: Option<usize>,
    pub metadata: Value,
    pub model: Model,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let (snapshot, metadata) = ParamSnapshot::load_file(path)?;
    let bad = |what: &str| {
        Error::Checkpoint(format!(
            "{}: missing or invalid '{what}' in metadata",
            path.display()
        ))
    };
    let config: ExperimentConfig = serde_json::from_value(
        metadata
            .get("config")
            .cloned()
            .ok_or_else(|| bad("config"))?,
    )
    .map_err(|_| bad("config"))?;
    let num = |k: &str| {
        metadata
            .get(k)
            .and_then(Value::as_u64)
            .ok_or_else(|| bad(k))
    };
    let seed = num("seed")?;
    let fold = num("fold")? as usize;
    let in_dim = num("in_dim")? as usize;
    let num_classes = num("num_classes")? as usize;
    let degree_features = metadata
        .pointer("/dataset/degree_features")
        .and_then(Value::as_u64)
        .map(|d| d as usize);
    let model = Model::new(
        in_dim,
        num_classes,
        &config,
        &mut stream(seed, &["restore"]),
    )?;
    model.store.load(&snapshot)?;
    Ok(LoadedCheckpoint {
        config,
        seed,
        fold,
        in_dim,
        num_classes,
        degree_features,
        metadata,
        model,
    })
}

/// Loads `dataset` (or the checkpoint's own dataset) with the checkpoint's
/// feature encoding and checks it matches the model input width.
pub fn dataset_for_checkpoint(
    ck: &LoadedCheckpoint,
    dataset: Option<&Path>,
    format: Option<DataFormat>,
) -> Result<Dataset> {
    let path = dataset.unwrap_or(&ck.config.dataset);
    let format = format.unwrap_or(ck.config.format);
    let d = load_dataset(path, format, ck.degree_features)?;
    if d.num_features != ck.in_dim {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint expects {} input features, dataset {} has {}",
            ck.in_dim,
            path.display(),
            d.num_features
        )));
    }
    Ok(d)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub dataset: String,
    pub graphs: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub view_accuracy: f64,
    pub config: Value,
}

/// Accuracy of a checkpoint on every graph of a dataset, on originals and
/// on views from both generators.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: Option<&Path>,
    format: Option<DataFormat>,
) -> Result<EvalReport> {
    let ck = load_checkpoint(checkpoint)?;
    let d = dataset_for_checkpoint(&ck, dataset, format)?;
    let (seed, config) = (ck.seed, ck.config.clone());
    let mut tr = Trainer::with_model(ck.model, &config, seed, "eval");
    Ok(EvalReport {
        checkpoint: checkpoint.to_path_buf(),
        dataset: d.name.clone(),
        graphs: d.len(),
        seed,
        accuracy: tr.accuracy(&d.graphs)?,
        view_accuracy: tr.view_accuracy(&d.graphs)?,
        config: config.to_json(),
    })
}

/// Runs the augmentation × ratio sweep and writes `ablation.csv`.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dataset = prepare_dataset(cfg)?;
    create_dir(&cfg.output_dir)?;
    let table = run_ablation(&dataset, cfg)?;
    let header = vec![
        format!("config: {}", cfg.to_json()),
        format!("seeds: {:?}", cfg.seeds),
        format!("notes: {}", method_notes()),
        "cells: test accuracy (%) mean ± std over folds × seeds, semi-supervised aug_only"
            .to_string(),
    ];
    let path = cfg.output_dir.join("ablation.csv");
    write_file(&path, &table.to_csv(&header))?;
    write_file(
        &cfg.output_dir.join("ablation.json"),
        &serde_json::to_string_pretty(&json!({
            "config": cfg.to_json(),
            "seeds": cfg.seeds,
            "table": table,
        }))?,
    )?;
    Ok(path)
}

const KEEP_COLOR: &str = "#d62728";
const MASK_COLOR: &str = "#f4b6b6";
const DROP_COLOR: &str = "#ffffff";

/// Colors used by the DOT export: kept nodes red, masked nodes pale red,
/// dropped nodes white with a dashed outline.
pub fn choice_style(choice: AugChoice) -> &'static str {
    match choice {
        AugChoice::Keep => "fillcolor=\"#d62728\", style=filled",
        AugChoice::Mask => "fillcolor=\"#f4b6b6\", style=filled",
        AugChoice::Drop => "fillcolor=\"#ffffff\", style=\"filled,dashed\"",
    }
}

fn to_dot(name: &str, g: &Graph, choices: Option<&[AugChoice]>, provenance: &[String]) -> String {
    let mut s = String::new();
    for p in provenance {
        writeln!(s, "// {p}").unwrap();
    }
    writeln!(
        s,
        "// colors: keep {KEEP_COLOR}, mask {MASK_COLOR}, drop {DROP_COLOR} (dashed)"
    )
    .unwrap();
    writeln!(s, "graph {name} {{").unwrap();
    writeln!(s, "  node [shape=circle, fontsize=10];").unwrap();
    for v in 0..g.num_nodes {
        let choice = choices.map_or(AugChoice::Keep, |c| c[v]);
        writeln!(s, "  {v} [label=\"{v}\", {}];", choice_style(choice)).unwrap();
    }
    for (a, b) in g.undirected_pairs() {
        writeln!(s, "  {a} -- {b};").unwrap();
    }
    s.push_str("}\n");
    s
}

fn view_graph(view: &ViewBatch) -> Result<Graph> {
    let b = view.to_graph_batch();
    Ok(Graph::new(
        b.num_nodes(),
        b.num_features,
        b.features,
        b.edges,
        b.labels[0],
    )?)
}

/// Writes `n_samples` triplets (original, view₁, view₂) as JSON and DOT.
pub fn cmd_export_views(
    checkpoint: &Path,
    dataset: Option<&Path>,
    format: Option<DataFormat>,
    n_samples: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let ck = load_checkpoint(checkpoint)?;
    let d = dataset_for_checkpoint(&ck, dataset, format)?;
    if n_samples == 0 || n_samples > d.len() {
        return Err(Error::Invalid(format!(
            "n_samples must be in 1..={}, got {n_samples}",
            d.len()
        )));
    }
    create_dir(out_dir)?;
    let mut rng = stream(seed, &["export-views"]);
    let provenance = vec![
        format!("checkpoint: {}", checkpoint.display()),
        format!("config: {}", ck.config.to_json()),
        format!("seed: {seed} (checkpoint seed {})", ck.seed),
    ];
    let mut written = Vec::new();
    for (i, g) in d.graphs.iter().take(n_samples).enumerate() {
        let batch = GraphBatch::from_graphs([g])?;
        let mut items: Vec<(String, Graph, Option<AugChoiceMatrix>)> =
            vec![("original".into(), g.clone(), None)];
        for (k, second) in [(1, false), (2, true)] {
            let logits = ck.model.generator(second).node_aug_logits(&batch)?.detach();
            let choices = gumbel_softmax(&logits, ck.config.tau_g, &mut rng)?;
            let view = apply_augmentation(&batch, &choices)?;
            items.push((format!("view{k}"), view_graph(&view)?, Some(choices)));
        }
        for (kind, graph, choices) in items {
            let stem = format!("sample{i}_{kind}");
            let hard = choices.as_ref().map(|c| c.hard.clone());
            let doc = json!({
                "config": ck.config.to_json(),
                "seed": seed,
                "checkpoint_seed": ck.seed,
                "graph_id": i,
                "kind": kind,
                "label": graph.label,
                "num_nodes": graph.num_nodes,
                "edges": graph.undirected_pairs(),
                "node_features": graph.features.chunks(graph.num_features.max(1)).collect::<Vec<_>>(),
                "choices": hard.as_ref().map(|h| h.iter().map(|c| c.as_str()).collect::<Vec<_>>()),
                "choice_probs": choices.as_ref().map(|c| c.probs.value().chunks(3).map(<[f64]>::to_vec).collect::<Vec<_>>()),
            });
            let json_path = out_dir.join(format!("{stem}.json"));
            write_file(&json_path, &serde_json::to_string_pretty(&doc)?)?;
            let dot_path = out_dir.join(format!("{stem}.dot"));
            write_file(
                &dot_path,
                &to_dot(&stem, &graph, hard.as_deref(), &provenance),
            )?;
            written.extend([json_path, dot_path]);
        }
    }
    Ok(written)
}

/// Writes `graph_id,label,e0..e{H-1}` rows of frozen graph embeddings.
pub fn cmd_export_embeddings(
    checkpoint: &Path,
    dataset: Option<&Path>,
    format: Option<DataFormat>,
    out: &Path,
) -> Result<PathBuf> {
    let ck = load_checkpoint(checkpoint)?;
    let d = dataset_for_checkpoint(&ck, dataset, format)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let emb = ck.model.embed(&d.graphs, ck.config.batch_size)?;
    let h = emb.first().map_or(0, Vec::len);
    let mut s = String::new();
    writeln!(s, "# checkpoint: {}", checkpoint.display()).unwrap();
    writeln!(s, "# config: {}", ck.config.to_json()).unwrap();
    writeln!(s, "# seed: {}", ck.seed).unwrap();
    s.push_str("graph_id,label");
    for j in 0..h {
        write!(s, ",e{j}").unwrap();
    }
    s.push('\n');
    for (i, (g, row)) in d.graphs.iter().zip(&emb).enumerate() {
        write!(
            s,
            "{i},{}",
            g.label.map_or(String::new(), |l| l.to_string())
        )
        .unwrap();
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    write_file(out, &s)?;
    Ok(out.to_path_buf())
}

/// Runs the gradient and sampler suites; `true` when everything passed.
pub fn cmd_selftest(seed: u64) -> (bool, Vec<CheckOutcome>) {
    let checks = run_selftest(seed);
    (checks.iter().all(|c| c.passed), checks)
}
