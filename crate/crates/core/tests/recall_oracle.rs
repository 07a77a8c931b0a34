mod common;

use common::{recall_instance as instance, rng, sort_oracle};
use vrel_core::eval::{oracle_recall, rank_from_probs, recall_at_k, PredictionRecord};

#[test]
fn recall_matches_oracles_on_1000_instances() {
    let mut r = rng(2024);
    for case in 0..1000 {
        let inst = instance(&mut r);
        for k in [1, 3, 10, 50, 100] {
            let fast = recall_at_k(&inst.preds, &inst.gt, k).unwrap();
            let scan = oracle_recall(&inst.preds, &inst.gt, k).unwrap();
            let sorted = sort_oracle(&inst.preds, &inst.gt, k);
            assert_eq!(fast, scan, "case {case}, k {k}");
            assert_eq!(fast.recalled, sorted, "case {case}, k {k}");
            assert_eq!(fast.total, inst.gt.len());
        }
    }
}

#[test]
fn recall_at_50_equals_100_below_50_pairs() {
    let mut r = rng(7);
    let mut checked = 0;
    for _ in 0..1000 {
        let inst = instance(&mut r);
        let per_image_max = (0..5u64)
            .map(|i| inst.preds.iter().filter(|p| p.image_id == i).count())
            .max()
            .unwrap();
        if per_image_max < 50 {
            checked += 1;
            let a = recall_at_k(&inst.preds, &inst.gt, 50).unwrap();
            let b = recall_at_k(&inst.preds, &inst.gt, 100).unwrap();
            assert_eq!(a.recalled, b.recalled);
        }
    }
    assert!(checked > 100);
}

#[test]
fn doublet_ranking_keeps_one_predicate_per_pair() {
    let pairs = [(0usize, 1usize), (1, 0), (0, 2)];
    let probs = vec![vec![0.9, 0.05, 0.05], vec![0.1, 0.45, 0.45], vec![0.2, 0.7, 0.1]];
    let ranked = rank_from_probs(3, &pairs, &probs).unwrap();
    assert_eq!(ranked.len(), 3);
    assert!(ranked.iter().all(|p| p.predicate != 0));
    // The tie between classes 1 and 2 resolves to the lower index.
    let tied = ranked.iter().find(|p| (p.subject, p.object) == (1, 0)).unwrap();
    assert_eq!(tied.predicate, 1);
    assert!(ranked.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn recall_rejects_bad_input() {
    let p = PredictionRecord {
        image_id: 0,
        subject: 0,
        predicate: 1,
        object: 1,
        score: 0.5,
    };
    assert!(recall_at_k(&[p], &[], 0).is_err());
    assert!(recall_at_k(&[p, p], &[], 5).is_err());
    assert!(recall_at_k(&[PredictionRecord { score: f64::NAN, ..p }], &[], 5).is_err());
    assert_eq!(recall_at_k(&[], &[], 5).unwrap().recall, 0.0);
}
