//! Training-pair sampling and train/test splitting.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::schema::{Dataset, ImageRecord, Splits, NO_RELATIONSHIP};
use crate::error::DatasetError;

pub const SAMPLES_PER_IMAGE: usize = 32;
pub const POSITIVES_PER_IMAGE: usize = 8;

/// One doublet training example: an ordered object pair and its target
/// predicate index (0 = no relationship).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TrainingPair {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
}

/// Up to 32 examples at a 1:3 positive:negative ratio. Negatives are
/// ordered pairs with no annotation in either direction. When one pool runs
/// short the other fills the remaining slots; if fewer than 32 candidates
/// exist, all are returned.
pub fn sample_training_pairs(
    record: &ImageRecord,
    predicates: &[String],
    seed: u64,
) -> Result<Vec<TrainingPair>, DatasetError> {
    let mut positives = Vec::with_capacity(record.relations.len());
    for r in &record.relations {
        let predicate = predicates
            .iter()
            .position(|p| *p == r.p)
            .filter(|&i| predicates[i] != NO_RELATIONSHIP)
            .ok_or_else(|| DatasetError::UnknownPredicate {
                record: record.image_id.to_string(),
                predicate: r.p.clone(),
            })?;
        positives.push(TrainingPair {
            subject: r.s,
            object: r.o,
            predicate,
        });
    }
    let annotated: HashSet<(usize, usize)> = record.relations.iter().map(|r| (r.s, r.o)).collect();
    let k = record.objects.len();
    let mut negatives = Vec::new();
    for s in 0..k {
        for o in 0..k {
            if s != o && !annotated.contains(&(s, o)) && !annotated.contains(&(o, s)) {
                negatives.push(TrainingPair {
                    subject: s,
                    object: o,
                    predicate: 0,
                });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);
    let n_pos = positives
        .len()
        .min(POSITIVES_PER_IMAGE.max(SAMPLES_PER_IMAGE.saturating_sub(negatives.len())));
    let n_neg = negatives.len().min(SAMPLES_PER_IMAGE - n_pos.min(SAMPLES_PER_IMAGE));
    let mut out: Vec<TrainingPair> = positives.into_iter().take(n_pos).collect();
    out.extend(negatives.into_iter().take(n_neg));
    out.shuffle(&mut rng);
    Ok(out)
}

/// Seeded image-level split; each side is returned in ascending id order.
pub fn split_ids(ids: &[u64], fractions: (f64, f64), seed: u64) -> Result<(Vec<u64>, Vec<u64>), DatasetError> {
    let (a, b) = fractions;
    let in_range = |f: f64| (0.0..=1.0).contains(&f);
    if !in_range(a) || !in_range(b) || ((a + b) - 1.0).abs() > 1e-9 {
        return Err(DatasetError::Manifest(format!(
            "split fractions ({a}, {b}) must lie in [0, 1] and sum to 1"
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.sort_unstable();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (a * ids.len() as f64).round() as usize;
    let mut train = shuffled[..n_train].to_vec();
    let mut test = shuffled[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Re-splits a dataset's images.
pub fn split_dataset(dataset: &Dataset, fractions: (f64, f64), seed: u64) -> Result<Splits, DatasetError> {
    let ids: Vec<u64> = dataset.records.iter().map(|r| r.image_id).collect();
    let (train, test) = split_ids(&ids, fractions, seed)?;
    Ok(Splits { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_exact_counts() {
        let ids: Vec<u64> = (0..1000).collect();
        let (tr, te) = split_ids(&ids, (0.8, 0.2), 1).unwrap();
        assert_eq!((tr.len(), te.len()), (800, 200));
        let (tr, te) = split_ids(&ids, (1.0, 0.0), 1).unwrap();
        assert_eq!((tr.len(), te.len()), (1000, 0));
        assert!(split_ids(&ids, (0.7, 0.2), 1).is_err());
        assert!(split_ids(&ids, (1.5, -0.5), 1).is_err());
    }
}
