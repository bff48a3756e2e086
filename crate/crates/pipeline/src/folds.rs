//! Stratified fold assignment, keyed by sorted record ids and a seeded
//! shuffle so the assignment is independent of input order.

use ecgc_core::record::RecordClass;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Assigns each record a fold in 0..k. Within each class, records are taken
/// in sorted-id order, shuffled with the seed, and dealt round-robin.
pub fn stratified_folds(ids: &[String], labels: &[RecordClass], k: usize, seed: u64) -> Vec<usize> {
    assert_eq!(ids.len(), labels.len());
    let mut fold = vec![0usize; ids.len()];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for class in RecordClass::ALL {
        let mut idxs: Vec<usize> = (0..ids.len()).filter(|&i| labels[i] == class).collect();
        idxs.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        for i in (1..idxs.len()).rev() {
            let j = rng.gen_range(0..=i);
            idxs.swap(i, j);
        }
        for (pos, &i) in idxs.iter().enumerate() {
            fold[i] = pos % k;
        }
    }
    fold
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_are_stratified_and_order_independent() {
        let n = 40;
        let ids: Vec<String> = (0..n).map(|i| format!("S{i:03}")).collect();
        let labels: Vec<RecordClass> = (0..n).map(|i| RecordClass::ALL[i % 4]).collect();
        let f1 = stratified_folds(&ids, &labels, 5, 9);

        // Shuffle the presentation order; assignment keyed by id must agree.
        let perm: Vec<usize> = (0..n).rev().collect();
        let ids2: Vec<String> = perm.iter().map(|&i| ids[i].clone()).collect();
        let labels2: Vec<RecordClass> = perm.iter().map(|&i| labels[i]).collect();
        let f2 = stratified_folds(&ids2, &labels2, 5, 9);
        for (pos, &orig) in perm.iter().enumerate() {
            assert_eq!(f1[orig], f2[pos], "fold of {}", ids[orig]);
        }

        // Each fold holds the same per-class count +- 1.
        for class in RecordClass::ALL {
            let mut counts = vec![0usize; 5];
            for i in 0..n {
                if labels[i] == class {
                    counts[f1[i]] += 1;
                }
            }
            let max = counts.iter().max().unwrap();
            let min = counts.iter().min().unwrap();
            assert!(max - min <= 1);
        }
    }
}
