mod common;

use std::collections::HashSet;

use common::{ample_record, rng, sampling_predicates as predicates, sampling_record as record};
use vrel_core::data::sample_training_pairs;

#[test]
fn ample_pools_give_exactly_8_and_24() {
    let mut r = rng(11);
    let preds = predicates();
    for id in 0..100u64 {
        let (rec, pairs) = ample_record(&mut r, id);
        let batch = sample_training_pairs(&rec, &preds, id).unwrap();
        let pos = batch.iter().filter(|p| p.predicate != 0).count();
        let neg = batch.iter().filter(|p| p.predicate == 0).count();
        assert_eq!((pos, neg), (8, 24), "image {id}");
        let distinct: HashSet<_> = batch.iter().map(|p| (p.subject, p.object, p.predicate)).collect();
        assert_eq!(distinct.len(), 32);
        for p in &batch {
            assert_ne!(p.subject, p.object);
            if p.predicate == 0 {
                assert!(!pairs.contains(&(p.subject, p.object)) && !pairs.contains(&(p.object, p.subject)));
            } else {
                assert!(pairs.contains(&(p.subject, p.object)));
            }
        }
    }
}

#[test]
fn short_pools_fill_from_the_other_side() {
    let preds = predicates();
    // Three objects, one annotated pair: 1 positive and 4 negatives in total.
    let b = sample_training_pairs(&record(0, 3, &[(0, 1)]), &preds, 0).unwrap();
    assert_eq!(b.iter().filter(|p| p.predicate != 0).count(), 1);
    assert_eq!(b.iter().filter(|p| p.predicate == 0).count(), 4);
    // Six objects with 12 positives leave 6 negative ordered pairs; all
    // negatives are taken and positives fill up to what exists.
    let mut rels = Vec::new();
    for s in 0..6 {
        for o in s + 1..6 {
            rels.push((s, o));
        }
    }
    rels.truncate(12);
    let b = sample_training_pairs(&record(1, 6, &rels), &preds, 0).unwrap();
    assert_eq!(b.iter().filter(|p| p.predicate == 0).count(), 6);
    assert_eq!(b.iter().filter(|p| p.predicate != 0).count(), 12);
}

#[test]
fn sampling_is_seeded() {
    let preds = predicates();
    let rels: Vec<(usize, usize)> = (0..9).map(|i| (i, i + 1)).collect();
    let rec = record(5, 12, &rels);
    let a = sample_training_pairs(&rec, &preds, 3).unwrap();
    assert_eq!(a, sample_training_pairs(&rec, &preds, 3).unwrap());
    assert_ne!(a, sample_training_pairs(&rec, &preds, 4).unwrap());
}

#[test]
fn unknown_predicate_is_rejected() {
    let mut rec = record(0, 3, &[(0, 1)]);
    rec.relations[0].p = "beside".into();
    assert!(sample_training_pairs(&rec, &predicates(), 0).is_err());
}
