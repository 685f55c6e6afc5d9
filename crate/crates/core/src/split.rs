//! Seeded k-fold split plans for the evaluation protocols.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// 90% unlabeled (probe training), 10% test.
    Unsupervised,
    /// 80% unlabeled, 10% labeled training, 10% test.
    SemiSupervised,
}

impl std::str::FromStr for Protocol {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unsupervised" | "unsup" => Ok(Protocol::Unsupervised),
            "semi_supervised" | "semi" => Ok(Protocol::SemiSupervised),
            other => Err(DataError::UnknownProtocol(other.to_string())),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Unsupervised => "unsupervised",
            Protocol::SemiSupervised => "semi_supervised",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub unlabeled: Vec<usize>,
    pub labeled_train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub protocol: Protocol,
    pub fold_count: usize,
    pub seed: u64,
    /// Splits are uniform over graphs, not stratified by class.
    pub stratified: bool,
    pub folds: Vec<Fold>,
}

/// Shuffles `0..n_graphs` with a seeded stream and slices it into
/// `fold_count` near-equal chunks. Fold `k` tests on chunk `k`; the
/// semi-supervised protocol trains labeled on chunk `k + 1`.
pub fn make_split(
    n_graphs: usize,
    protocol: Protocol,
    fold_count: usize,
    seed: u64,
) -> Result<SplitPlan, DataError> {
    if n_graphs == 0 {
        return Err(DataError::Empty);
    }
    let min_folds = match protocol {
        Protocol::Unsupervised => 2,
        Protocol::SemiSupervised => 3,
    };
    if fold_count < min_folds || fold_count > n_graphs {
        return Err(DataError::InvalidGraph(format!(
            "{fold_count} folds is invalid for {n_graphs} graphs under the {protocol} protocol"
        )));
    }
    let mut order: Vec<usize> = (0..n_graphs).collect();
    order.shuffle(&mut stream(seed, &["split"]));
    let chunks: Vec<Vec<usize>> = (0..fold_count)
        .map(|k| order[k * n_graphs / fold_count..(k + 1) * n_graphs / fold_count].to_vec())
        .collect();
    let folds = (0..fold_count)
        .map(|k| {
            let test = chunks[k].clone();
            let (labeled_train, skip) = match protocol {
                Protocol::Unsupervised => (Vec::new(), None),
                Protocol::SemiSupervised => {
                    let next = (k + 1) % fold_count;
                    (chunks[next].clone(), Some(next))
                }
            };
            let unlabeled = (0..fold_count)
                .filter(|&j| j != k && Some(j) != skip)
                .flat_map(|j| chunks[j].iter().copied())
                .collect();
            Fold {
                unlabeled,
                labeled_train,
                test,
            }
        })
        .collect();
    Ok(SplitPlan {
        protocol,
        fold_count,
        seed,
        stratified: false,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn semi_supervised_proportions() {
        let plan = make_split(100, Protocol::SemiSupervised, 10, 3).unwrap();
        let f = &plan.folds[0];
        assert_eq!(
            (f.unlabeled.len(), f.labeled_train.len(), f.test.len()),
            (80, 10, 10)
        );
        let plan = make_split(100, Protocol::Unsupervised, 10, 3).unwrap();
        let f = &plan.folds[0];
        assert_eq!(
            (f.unlabeled.len(), f.labeled_train.len(), f.test.len()),
            (90, 0, 10)
        );
    }

    #[test]
    fn same_seed_same_plan() {
        let a = make_split(57, Protocol::SemiSupervised, 10, 11).unwrap();
        assert_eq!(a, make_split(57, Protocol::SemiSupervised, 10, 11).unwrap());
        assert_ne!(a, make_split(57, Protocol::SemiSupervised, 10, 12).unwrap());
    }

    #[test]
    fn unknown_protocol_and_empty() {
        assert!(matches!(
            "transfer".parse::<Protocol>(),
            Err(DataError::UnknownProtocol(_))
        ));
        assert!(matches!(
            make_split(0, Protocol::SemiSupervised, 10, 0),
            Err(DataError::Empty)
        ));
    }

    proptest! {
        #[test]
        fn folds_partition_the_dataset(n in 10usize..300, k in 3usize..11, seed in any::<u64>(), semi in any::<bool>()) {
            let protocol = if semi { Protocol::SemiSupervised } else { Protocol::Unsupervised };
            let plan = make_split(n, protocol, k, seed).unwrap();
            let mut tests = Vec::new();
            for f in &plan.folds {
                let mut all: Vec<usize> = f.unlabeled.iter().chain(&f.labeled_train).chain(&f.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                tests.extend(f.test.iter().copied());
            }
            tests.sort_unstable();
            prop_assert_eq!(tests, (0..n).collect::<Vec<_>>());
        }
    }
}
