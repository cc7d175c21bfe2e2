use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seeding::rng_for;

/// One cross-validation permutation: a shared subject partition plus the
/// role of each fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSpec {
    pub permutation: usize,
    pub folds: Vec<Vec<u32>>,
    pub test: usize,
    pub selection: usize,
    pub train: Vec<usize>,
}

impl FoldSpec {
    pub fn test_subjects(&self) -> &[u32] {
        &self.folds[self.test]
    }

    pub fn selection_subjects(&self) -> &[u32] {
        &self.folds[self.selection]
    }

    pub fn train_subjects(&self) -> Vec<u32> {
        self.train.iter().flat_map(|&f| self.folds[f].iter().copied()).collect()
    }
}

/// Shuffle the positive subjects with `seed`, deal them into `n_folds`
/// near-equal folds, and rotate roles: permutation `i` tests on fold `i`,
/// selects on fold `i + 1`, and trains on the rest.
pub fn make_folds(subjects: &[u32], n_folds: usize, seed: u64) -> Result<Vec<FoldSpec>> {
    if n_folds < 3 {
        return Err(Error::Config(format!(
            "n_folds {n_folds}: need at least 3 folds for train, selection and test"
        )));
    }
    if subjects.len() < n_folds {
        return Err(Error::InsufficientData(format!(
            "{} positive subjects cannot fill {n_folds} folds",
            subjects.len()
        )));
    }
    let mut order = subjects.to_vec();
    order.sort_unstable();
    order.dedup();
    if order.len() != subjects.len() {
        return Err(Error::Contract("subject ids must be unique".into()));
    }
    order.shuffle(&mut rng_for(seed, &[0xF01D]));
    let base = order.len() / n_folds;
    let extra = order.len() % n_folds;
    let mut folds = Vec::with_capacity(n_folds);
    let mut rest = order.as_slice();
    for i in 0..n_folds {
        let (head, tail) = rest.split_at(base + usize::from(i < extra));
        folds.push(head.to_vec());
        rest = tail;
    }
    Ok((0..n_folds)
        .map(|i| {
            let selection = (i + 1) % n_folds;
            FoldSpec {
                permutation: i,
                folds: folds.clone(),
                test: i,
                selection,
                train: (0..n_folds).filter(|&f| f != i && f != selection).collect(),
            }
        })
        .collect())
}
