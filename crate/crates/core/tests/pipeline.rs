//! End-to-end checks of the library pipeline on the bundled toy dataset.

use std::path::{Path, PathBuf};

use gclview::config::ExperimentConfig;
use gclview::dataset::{load_dataset, DataFormat};
use gclview::harness::{
    cmd_ablate, cmd_eval, cmd_export_embeddings, cmd_export_views, cmd_train, load_checkpoint,
};
use gclview::split::Protocol;

fn toy_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy.json")
}

fn toy_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset = toy_path();
    cfg.format = DataFormat::Json;
    cfg.epochs = 4;
    cfg.finetune_epochs = 4;
    cfg.folds = 4;
    cfg.seeds = vec![0, 1];
    cfg.hidden = 16;
    cfg.layers = 2;
    cfg.batch_size = 8;
    cfg.output_dir = out.to_path_buf();
    cfg
}

#[test]
fn toy_dataset_loads() {
    let data = load_dataset(&toy_path(), DataFormat::Json, None).unwrap();
    assert_eq!(data.len(), 16);
    assert_eq!(data.num_classes, 2);
    assert!(data.degree_features.is_some());
    assert_eq!(data.majority_fraction(), 0.5);
}

#[test]
fn train_writes_artifacts_and_checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let report = cmd_train(&cfg).unwrap();
    assert_eq!(report.summary.runs, 8);
    assert_eq!(report.checkpoints.len(), 2);
    for f in ["config.txt", "metrics.jsonl", "summary.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let written = ExperimentConfig::load(&dir.path().join("config.txt")).unwrap();
    assert_eq!(written, cfg);

    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&report.metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines[0]["type"], "header");
    assert_eq!(lines.last().unwrap()["type"], "summary");
    let epochs = lines.iter().filter(|l| l["type"] == "epoch").count();
    assert_eq!(epochs, 8 * cfg.epochs);
    assert!(lines
        .iter()
        .filter(|l| l["type"] == "epoch")
        .all(|l| l["l_cl"].is_f64()
            && l["l_cls"].is_f64()
            && l["l_sim"].is_f64()
            && l["test_acc"].is_f64()));

    for (seed, path) in [0u64, 1].iter().zip(&report.checkpoints) {
        let loaded = load_checkpoint(path).unwrap();
        assert_eq!(loaded.seed, *seed);
        assert_eq!(loaded.fold, 0);
        assert_eq!(loaded.config, cfg);
        let original = report
            .outcomes
            .iter()
            .find(|o| o.seed == *seed && o.fold == 0)
            .and_then(|o| o.snapshot.clone())
            .unwrap();
        assert_eq!(loaded.model.store.snapshot(), original);
    }
}

#[test]
fn training_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = cmd_train(&toy_config(a.path())).unwrap();
    let rb = cmd_train(&toy_config(b.path())).unwrap();
    let accs = |r: &gclview::harness::TrainReport| {
        r.outcomes
            .iter()
            .map(|o| (o.seed, o.fold, o.test_acc))
            .collect::<Vec<_>>()
    };
    assert_eq!(accs(&ra), accs(&rb));
    let params = |r: &gclview::harness::TrainReport| {
        load_checkpoint(&r.checkpoints[0])
            .unwrap()
            .model
            .store
            .snapshot()
    };
    assert_eq!(params(&ra), params(&rb));
}

#[test]
fn eval_and_exports_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_train(&toy_config(dir.path())).unwrap();
    let ckpt = &report.checkpoints[0];

    let eval = cmd_eval(ckpt, None, None).unwrap();
    assert_eq!(eval.graphs, 16);
    assert!((0.0..=1.0).contains(&eval.accuracy));
    assert!((0.0..=1.0).contains(&eval.view_accuracy));

    let views = dir.path().join("views");
    let files = cmd_export_views(ckpt, None, None, 3, &views, 7).unwrap();
    assert_eq!(files.len(), 3 * 3 * 2);
    for i in 0..3 {
        for part in ["original", "view1", "view2"] {
            let json = views.join(format!("sample{i}_{part}.json"));
            let doc: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
            assert!(doc["graphs"].is_array() || doc.is_object());
            let dot = std::fs::read_to_string(views.join(format!("sample{i}_{part}.dot"))).unwrap();
            assert!(dot.contains("graph"));
        }
    }

    let csv_path = dir.path().join("emb.csv");
    cmd_export_embeddings(ckpt, None, None, &csv_path).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(rows[0].starts_with("graph_id,label,e0"));
    assert_eq!(rows.len(), 17);
    assert!(rows[1..].iter().all(|r| r.split(',').count() == 2 + 16));
}

#[test]
fn eval_rejects_mismatched_feature_width() {
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_train(&toy_config(dir.path())).unwrap();
    let mutag = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/MUTAG");
    let err = cmd_eval(&report.checkpoints[0], Some(&mutag), Some(DataFormat::Tu)).unwrap_err();
    assert!(matches!(err, gclview::Error::Checkpoint(_)), "{err}");
}

#[test]
fn unsupervised_protocol_runs_on_toy() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path());
    cfg.protocol = Protocol::Unsupervised;
    cfg.strategy = "naive".parse().unwrap();
    cfg.probe_epochs = 50;
    let report = cmd_train(&cfg).unwrap();
    assert_eq!(report.summary.runs, 8);
    assert!(report.outcomes.iter().all(|o| o.view_acc.is_none()));
}

#[test]
fn ablation_csv_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path());
    cfg.seeds = vec![0];
    let path = cmd_ablate(&cfg).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(
        rows[0],
        "Dataset,Aug Ratio,NodeDrop,EdgePerturb,Subgraph,AttrMask"
    );
    assert_eq!(rows.len(), 1 + cfg.ablation_ratios.len());
    assert!(rows[1..]
        .iter()
        .all(|r| r.split(',').count() == 6 && r.contains('±')));
    assert!(dir.path().join("ablation.json").is_file());
}
