//! Train/validation/test partitions keyed by scene index, so that every
//! example of a scene lands in the same split.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    /// Validation and test sizes are rounded; train takes the remainder.
    Fractions { train: f64, val: f64, test: f64, seed: u64 },
    Explicit {
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn parts(&self) -> [(&'static str, &[usize]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Partitions `ids`; each output list is sorted.
pub fn split_ids(ids: &[usize], spec: &SplitSpec) -> Result<Split> {
    let all: BTreeSet<usize> = ids.iter().copied().collect();
    if all.len() != ids.len() {
        return Err(Error::contract("split input contains duplicate ids"));
    }
    let mut out = match spec {
        SplitSpec::Fractions { train, val, test, seed } => {
            let fr = [*train, *val, *test];
            if fr.iter().any(|f| !(*f >= 0.0)) || ((train + val + test) - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!(
                    "split fractions {fr:?} must be nonnegative and sum to 1"
                )));
            }
            let n = ids.len();
            let n_val = (val * n as f64).round() as usize;
            let n_test = ((test * n as f64).round() as usize).min(n - n_val.min(n));
            let mut order: Vec<usize> = all.iter().copied().collect();
            order.shuffle(&mut rng::stream(*seed, rng::streams::SPLIT));
            let (v, rest) = order.split_at(n_val.min(n));
            let (te, tr) = rest.split_at(n_test);
            Split {
                train: tr.to_vec(),
                val: v.to_vec(),
                test: te.to_vec(),
            }
        }
        SplitSpec::Explicit { train, val, test } => {
            let mut seen = BTreeSet::new();
            for (name, list) in [("train", train), ("val", val), ("test", test)] {
                for id in list {
                    if !seen.insert(*id) {
                        return Err(Error::contract(format!("id {id} appears twice (again in {name})")));
                    }
                    if !all.contains(id) {
                        return Err(Error::contract(format!("{name} lists unknown id {id}")));
                    }
                }
            }
            if seen.len() != all.len() {
                return Err(Error::contract(format!(
                    "explicit split covers {} of {} ids",
                    seen.len(),
                    all.len()
                )));
            }
            Split {
                train: train.clone(),
                val: val.clone(),
                test: test.clone(),
            }
        }
    };
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fractions(seed: u64) -> SplitSpec {
        SplitSpec::Fractions {
            train: 0.7,
            val: 0.15,
            test: 0.15,
            seed,
        }
    }

    #[test]
    fn sizes() {
        let ids: Vec<usize> = (0..100).collect();
        let s = split_ids(&ids, &fractions(1)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
        assert_eq!(s, split_ids(&ids, &fractions(1)).unwrap());
        assert_ne!(s, split_ids(&ids, &fractions(2)).unwrap());
    }

    #[test]
    fn explicit_overlap_rejected() {
        let spec = SplitSpec::Explicit {
            train: vec![0, 1],
            val: vec![1],
            test: vec![2],
        };
        assert!(matches!(split_ids(&[0, 1, 2], &spec), Err(Error::Contract(_))));
        let spec = SplitSpec::Explicit {
            train: vec![2, 0],
            val: vec![1],
            test: vec![],
        };
        assert_eq!(split_ids(&[0, 1, 2], &spec).unwrap().train, vec![0, 2]);
    }

    proptest! {
        #[test]
        fn partition(n in 0usize..300, seed in any::<u64>()) {
            let ids: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
            let s = split_ids(&ids, &fractions(seed)).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, ids);
        }
    }
}
