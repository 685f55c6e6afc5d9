//! Experiment configuration: a flat `key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys,
//! repeated keys and out-of-range values are rejected with the offending
//! line number. Overrides given as `key=value` strings are applied after
//! the file and win over it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::AugKind;
use crate::dataset::DataFormat;
use crate::error::{Error, Result};
use crate::gin::Readout;
use crate::split::Protocol;

/// Training strategy for the semi-supervised protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Strategy {
    /// Labels only, no views and no contrastive phase.
    Supervised,
    /// Supervised on the original graph plus two views from frozen
    /// generators (or a fixed augmentation when one is configured).
    AugOnly,
    /// Contrastive pre-training of generators and encoder, then fine-tuning.
    Naive,
    /// Alternating contrastive and labeled phases. `cl` enables the
    /// contrastive phase, `sim` the view-similarity term.
    Joint { cl: bool, sim: bool },
}

impl Strategy {
    pub const JOINT_VARIANTS: [Strategy; 4] = [
        Strategy::Joint {
            cl: false,
            sim: false,
        },
        Strategy::Joint {
            cl: false,
            sim: true,
        },
        Strategy::Joint {
            cl: true,
            sim: false,
        },
        Strategy::Joint {
            cl: true,
            sim: true,
        },
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Supervised => "supervised",
            Strategy::AugOnly => "aug_only",
            Strategy::Naive => "naive",
            Strategy::Joint {
                cl: false,
                sim: false,
            } => "joint_cls",
            Strategy::Joint {
                cl: false,
                sim: true,
            } => "joint_cls_sim",
            Strategy::Joint {
                cl: true,
                sim: false,
            } => "joint_cl_cls",
            Strategy::Joint {
                cl: true,
                sim: true,
            } => "joint",
        }
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "supervised" => Ok(Strategy::Supervised),
            "aug_only" => Ok(Strategy::AugOnly),
            "naive" => Ok(Strategy::Naive),
            "joint" | "joint_cl_cls_sim" => Ok(Strategy::Joint {
                cl: true,
                sim: true,
            }),
            "joint_cls" => Ok(Strategy::Joint {
                cl: false,
                sim: false,
            }),
            "joint_cls_sim" => Ok(Strategy::Joint {
                cl: false,
                sim: true,
            }),
            "joint_cl_cls" => Ok(Strategy::Joint {
                cl: true,
                sim: false,
            }),
            _ => Err(format!("unknown strategy '{s}'")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.name().to_string()
    }
}

impl TryFrom<String> for Strategy {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub format: DataFormat,
    pub protocol: Protocol,
    pub strategy: Strategy,
    /// Contrastive, joint or supervised epochs depending on the strategy.
    pub epochs: usize,
    /// Supervised epochs after naive pre-training.
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub readout: Readout,
    /// Contrast projection-head outputs (true) or raw graph readouts.
    pub use_projection: bool,
    pub tau: f64,
    pub tau_g: f64,
    pub lambda: f64,
    pub lr: f64,
    pub folds: usize,
    pub seeds: Vec<u64>,
    /// Degree cap for one-hot degree features; `None` uses the dataset maximum.
    pub max_degree: Option<usize>,
    pub output_dir: PathBuf,
    /// Fixed augmentation replacing the learnable generators in `aug_only`.
    pub aug: AugKind,
    pub aug_ratio: f64,
    pub ablation_kinds: Vec<AugKind>,
    pub ablation_ratios: Vec<f64>,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_l2: f64,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/MUTAG"),
            format: DataFormat::Tu,
            protocol: Protocol::SemiSupervised,
            strategy: Strategy::Joint {
                cl: true,
                sim: true,
            },
            epochs: 30,
            finetune_epochs: 30,
            batch_size: 128,
            hidden: 128,
            layers: 5,
            readout: Readout::Sum,
            use_projection: true,
            tau: 0.5,
            tau_g: 1.0,
            lambda: 1.0,
            lr: 1e-3,
            folds: 10,
            seeds: vec![0, 1, 2, 3, 4],
            max_degree: None,
            output_dir: PathBuf::from("runs"),
            aug: AugKind::None,
            aug_ratio: 0.2,
            ablation_kinds: AugKind::PRIMITIVES.to_vec(),
            ablation_ratios: vec![0.0, 0.1, 0.2],
            probe_epochs: 200,
            probe_lr: 0.01,
            probe_l2: 1e-3,
            jobs: 1,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("invalid value '{value}' for '{key}': {e}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Sets one key. `seed` is shorthand for a single-element `seeds`.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = PathBuf::from(v),
            "format" => self.format = parse_value(key, v)?,
            "protocol" => self.protocol = parse_value(key, v)?,
            "strategy" => self.strategy = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "finetune_epochs" => self.finetune_epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "hidden" => self.hidden = parse_value(key, v)?,
            "layers" => self.layers = parse_value(key, v)?,
            "readout" => self.readout = parse_value(key, v)?,
            "use_projection" => self.use_projection = parse_value(key, v)?,
            "tau" => self.tau = parse_value(key, v)?,
            "tau_g" => self.tau_g = parse_value(key, v)?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "folds" => self.folds = parse_value(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "seed" => self.seeds = vec![parse_value(key, v)?],
            "max_degree" => {
                self.max_degree = match v {
                    "auto" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }
            "output_dir" => self.output_dir = PathBuf::from(v),
            "aug" => self.aug = parse_value(key, v)?,
            "aug_ratio" => self.aug_ratio = parse_value(key, v)?,
            "ablation_kinds" => self.ablation_kinds = parse_list(key, v)?,
            "ablation_ratios" => self.ablation_ratios = parse_list(key, v)?,
            "probe_epochs" => self.probe_epochs = parse_value(key, v)?,
            "probe_lr" => self.probe_lr = parse_value(key, v)?,
            "probe_l2" => self.probe_l2 = parse_value(key, v)?,
            "jobs" => self.jobs = parse_value(key, v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {lineno}: expected 'key = value', got '{line}'"
                ))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {lineno}: duplicate key '{key}'"
                )));
            }
            cfg.set(key, value)
                .map_err(|m| Error::Config(format!("line {lineno}: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `key=value` overrides, then re-validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}': expected key=value")))?;
            self.set(k.trim(), v)
                .map_err(|m| Error::Config(format!("override '{o}': {m}")))?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("field '{field}': {why}")));
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("probe_epochs", self.probe_epochs),
            ("jobs", self.jobs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(name, "must be at least 1");
            }
        }
        if self.strategy == Strategy::Naive && self.finetune_epochs == 0 {
            return bad(
                "finetune_epochs",
                "must be at least 1 for the naive strategy",
            );
        }
        for (name, v) in [
            ("tau", self.tau),
            ("tau_g", self.tau_g),
            ("lr", self.lr),
            ("probe_lr", self.probe_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, "must be a positive finite number");
            }
        }
        for (name, v) in [("lambda", self.lambda), ("probe_l2", self.probe_l2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, "must be a non-negative finite number");
            }
        }
        if self.folds < 2 {
            return bad("folds", "must be at least 2");
        }
        if self.protocol == Protocol::SemiSupervised && self.folds < 3 {
            return bad("folds", "the semi-supervised protocol needs at least 3");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "must list at least one seed");
        }
        let ratio_ok = |r: f64| (0.0..1.0).contains(&r);
        if !ratio_ok(self.aug_ratio) {
            return bad("aug_ratio", "must lie in [0, 1)");
        }
        if self.ablation_ratios.is_empty() || !self.ablation_ratios.iter().all(|&r| ratio_ok(r)) {
            return bad(
                "ablation_ratios",
                "must be a non-empty list of values in [0, 1)",
            );
        }
        if self.ablation_kinds.is_empty() {
            return bad("ablation_kinds", "must list at least one augmentation");
        }
        Ok(())
    }

    /// Serializes every key; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("dataset", self.dataset.display().to_string());
        put("format", self.format.to_string());
        put("protocol", self.protocol.to_string());
        put("strategy", self.strategy.to_string());
        put("epochs", self.epochs.to_string());
        put("finetune_epochs", self.finetune_epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("hidden", self.hidden.to_string());
        put("layers", self.layers.to_string());
        put("readout", self.readout.to_string());
        put("use_projection", self.use_projection.to_string());
        put("tau", self.tau.to_string());
        put("tau_g", self.tau_g.to_string());
        put("lambda", self.lambda.to_string());
        put("lr", self.lr.to_string());
        put("folds", self.folds.to_string());
        put("seeds", join(&self.seeds));
        put(
            "max_degree",
            self.max_degree.map_or("auto".into(), |d| d.to_string()),
        );
        put("output_dir", self.output_dir.display().to_string());
        put("aug", self.aug.to_string());
        put("aug_ratio", self.aug_ratio.to_string());
        put("ablation_kinds", join(&self.ablation_kinds));
        put("ablation_ratios", join(&self.ablation_ratios));
        put("probe_epochs", self.probe_epochs.to_string());
        put("probe_lr", self.probe_lr.to_string());
        put("probe_l2", self.probe_l2.to_string());
        put("jobs", self.jobs.to_string());
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_whitespace() {
        let cfg =
            ExperimentConfig::parse("# run\n\n  epochs =  7 \nseeds = 1, 2,3\nstrategy=naive\n")
                .unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.strategy, Strategy::Naive);
    }

    #[test]
    fn errors_name_the_line() {
        let e = ExperimentConfig::parse("epochs = 3\nbogus = 1\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        let e = ExperimentConfig::parse("epochs = three\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 1") && e.contains("epochs"), "{e}");
        let e = ExperimentConfig::parse("tau = 1\ntau = 2\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("duplicate"), "{e}");
        assert!(ExperimentConfig::parse("no equals sign\n").is_err());
    }

    #[test]
    fn ranges_enforced() {
        for text in [
            "tau = 0",
            "lr = -1",
            "folds = 1",
            "aug_ratio = 1.0",
            "epochs = 0",
            "lambda = -0.5",
            "seeds = ",
        ] {
            assert!(ExperimentConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn overrides_win() {
        let mut cfg = ExperimentConfig::parse("epochs = 3\n").unwrap();
        cfg.apply_overrides(&["epochs=9", "strategy = joint_cls"])
            .unwrap();
        assert_eq!(cfg.epochs, 9);
        assert_eq!(
            cfg.strategy,
            Strategy::Joint {
                cl: false,
                sim: false
            }
        );
        assert!(cfg.apply_overrides(&["nope=1"]).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [Strategy::Supervised, Strategy::AugOnly, Strategy::Naive]
            .into_iter()
            .chain(Strategy::JOINT_VARIANTS)
        {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("bogus".parse::<Strategy>().is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_idempotent(
            epochs in 1usize..100,
            hidden in 1usize..300,
            tau in 0.01f64..5.0,
            lambda in 0.0f64..3.0,
            seeds in proptest::collection::vec(0u64..1000, 1..6),
            ratio in 0.0f64..0.99,
            strategy in 0usize..7,
        ) {
            let mut cfg = ExperimentConfig::default();
            cfg.epochs = epochs;
            cfg.hidden = hidden;
            cfg.tau = tau;
            cfg.lambda = lambda;
            cfg.seeds = seeds;
            cfg.aug_ratio = ratio;
            cfg.strategy = [Strategy::Supervised, Strategy::AugOnly, Strategy::Naive]
                .into_iter()
                .chain(Strategy::JOINT_VARIANTS)
                .nth(strategy)
                .unwrap();
            let text = cfg.to_text();
            let parsed = ExperimentConfig::parse(&text).unwrap();
            prop_assert_eq!(&parsed, &cfg);
            prop_assert_eq!(parsed.to_text(), text);
        }
    }
}
