//! Seeded k-fold partitioning of patients.

use alloc::{string::String, vec::Vec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub folds: Vec<Vec<String>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn fold_of(&self, patient: &str) -> Option<usize> {
        self.folds
            .iter()
            .position(|f| f.iter().any(|p| p == patient))
    }
}

/// Shuffles with a seeded generator, then deals patients round-robin, so
/// fold sizes differ by at most one.
pub fn kfold_split(patient_ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k == 0 || patient_ids.len() < k {
        return Err(Error::TooFewPatients {
            k,
            n: patient_ids.len(),
        });
    }
    let mut order: Vec<&String> = patient_ids.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = alloc::vec![Vec::new(); k];
    for (i, id) in order.into_iter().enumerate() {
        folds[i % k].push(id.clone());
    }
    Ok(FoldSplit { folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:03}")).collect()
    }

    #[test]
    fn eighty_one_patients() {
        let s = kfold_split(&ids(81), 5, 7).unwrap();
        let sizes: Vec<usize> = s.folds.iter().map(|f| f.len()).collect();
        assert_eq!(sizes, [17, 16, 16, 16, 16]);
    }

    #[test]
    fn five_patients_one_each() {
        let s = kfold_split(&ids(5), 5, 1).unwrap();
        assert!(s.folds.iter().all(|f| f.len() == 1));
    }

    #[test]
    fn seeded_and_partitioning() {
        let a = kfold_split(&ids(23), 5, 3).unwrap();
        assert_eq!(a, kfold_split(&ids(23), 5, 3).unwrap());
        let mut all: Vec<String> = a.folds.concat();
        all.sort();
        assert_eq!(all, ids(23));
    }

    #[test]
    fn too_few_patients() {
        assert_eq!(
            kfold_split(&ids(4), 5, 0),
            Err(Error::TooFewPatients { k: 5, n: 4 })
        );
    }
}
