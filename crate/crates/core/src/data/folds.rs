use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
    pub folds: Vec<Fold>,
}

/// Partitions `0..n` into `k` test folds.
///
/// Indices are shuffled with `seed` and dealt round-robin. When stratified,
/// each class is shuffled and dealt separately, continuing the deal where the
/// previous class stopped, so every fold's class counts differ by at most one
/// from any other fold's.
pub fn make_folds(n: usize, labels: &[usize], k: usize, seed: u64, stratified: bool) -> Result<FoldPlan, DataError> {
    if k < 2 {
        return Err(DataError::InvalidFolds(format!("k must be at least 2, got {k}")));
    }
    if k > n {
        return Err(DataError::InvalidFolds(format!("k = {k} exceeds sample count {n}")));
    }
    if labels.len() != n {
        return Err(DataError::InvalidFolds(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = if stratified {
        let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        (0..classes)
            .map(|c| (0..n).filter(|&i| labels[i] == c).collect())
            .collect()
    } else {
        vec![(0..n).collect()]
    };

    let mut tests = vec![Vec::new(); k];
    let mut slot = 0;
    for mut group in groups {
        group.shuffle(&mut rng);
        for i in group {
            tests[slot].push(i);
            slot = (slot + 1) % k;
        }
    }
    let folds = tests
        .into_iter()
        .enumerate()
        .map(|(index, mut test)| {
            test.sort_unstable();
            let train = (0..n).filter(|i| test.binary_search(i).is_err()).collect();
            Fold { index, train, test }
        })
        .collect();
    Ok(FoldPlan {
        k,
        seed,
        stratified,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_by_five() {
        let labels = vec![0; 10];
        let plan = make_folds(10, &labels, 5, 1, false).unwrap();
        let mut all: Vec<usize> = plan.folds.iter().flat_map(|f| f.test.clone()).collect();
        assert!(plan.folds.iter().all(|f| f.test.len() == 2 && f.train.len() == 8));
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_keeps_a_positive_everywhere() {
        // Enumerate every fold of several plans and count positives.
        let labels: Vec<usize> = [1; 6].into_iter().chain([0; 4]).collect();
        for seed in 0..20 {
            let plan = make_folds(10, &labels, 5, seed, true).unwrap();
            for f in &plan.folds {
                let pos = f.test.iter().filter(|&&i| labels[i] == 1).count();
                assert!(pos >= 1, "seed {seed} fold {}", f.index);
            }
        }
    }

    #[test]
    fn errors() {
        assert!(make_folds(3, &[0, 1, 0], 4, 0, true).is_err());
        assert!(make_folds(3, &[0, 1, 0], 1, 0, true).is_err());
        assert!(make_folds(3, &[0, 1], 2, 0, true).is_err());
    }

    #[test]
    fn reproducible() {
        let labels: Vec<usize> = (0..50).map(|i| i % 3 % 2).collect();
        assert_eq!(
            make_folds(50, &labels, 5, 8, true).unwrap(),
            make_folds(50, &labels, 5, 8, true).unwrap()
        );
    }
}
