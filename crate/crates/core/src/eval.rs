//! Recall@K for predicate detection, binary triplet accuracy, and an
//! independent brute-force recall oracle.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::backbone::ImageCanvas;
use crate::data::{Dataset, ImageRecord, Mode, Split, NO_RELATIONSHIP};
use crate::error::{Error, Result};
use crate::mask_attention::ground_truth_mask;
use crate::model::{Model, Query, Scene};
use crate::sequence::Role;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
    pub score: f64,
}

/// An annotated `(subject, predicate, object)` fact of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub image_id: u64,
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallResult {
    pub k: usize,
    pub recalled: usize,
    pub total: usize,
    pub recall: f64,
}

impl RecallResult {
    fn new(k: usize, recalled: usize, total: usize) -> Self {
        let recall = if total == 0 {
            0.0
        } else {
            recalled as f64 / total as f64
        };
        Self {
            k,
            recalled,
            total,
            recall,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBreakdown {
    pub overall: f64,
    pub correct: usize,
    pub total: usize,
    /// Predicate label → (accuracy, count); predicates without instances
    /// are absent.
    pub per_predicate: BTreeMap<String, (f64, usize)>,
}

/// Rank order: score descending, then subject, object, predicate ascending.
pub fn rank_order(a: &PredictionRecord, b: &PredictionRecord) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.subject.cmp(&b.subject))
        .then(a.object.cmp(&b.object))
        .then(a.predicate.cmp(&b.predicate))
}

/// One prediction per ordered pair from per-pair class probabilities.
/// Class 0 is "no relationship" and never predicted; among equal
/// probabilities the lowest predicate index wins.
pub fn rank_from_probs(image_id: u64, pairs: &[(usize, usize)], probs: &[Vec<f64>]) -> Result<Vec<PredictionRecord>> {
    if pairs.len() != probs.len() {
        return Err(Error::invalid("rank", "one probability row per pair is required"));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (&(subject, object), row) in pairs.iter().zip(probs) {
        if row.len() < 2 {
            return Err(Error::invalid(
                "rank",
                "at least one predicate besides 'no relationship' is required",
            ));
        }
        let mut best = 1;
        for p in 2..row.len() {
            if row[p] > row[best] {
                best = p;
            }
        }
        if !row[best].is_finite() {
            return Err(Error::NonFinite("prediction score".into()));
        }
        out.push(PredictionRecord {
            image_id,
            subject,
            predicate: best,
            object,
            score: row[best],
        });
    }
    out.sort_by(rank_order);
    Ok(out)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Scores every ordered object pair of an image with a doublet model.
pub fn rank_image(model: &Model<f32>, record: &ImageRecord, canvas: &ImageCanvas) -> Result<Vec<PredictionRecord>> {
    if model.mode() != Mode::DoubletVrd {
        return Err(Error::Config("ranking needs a doublet-mode model".into()));
    }
    let k = record.objects.len();
    if k < 2 {
        return Ok(Vec::new());
    }
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|s| (0..k).filter(move |&o| o != s).map(move |o| (s, o)))
        .collect();
    let scenes = [Scene { record, canvas }];
    let queries: Vec<Query> = pairs
        .iter()
        .map(|&(subject, object)| Query {
            scene: 0,
            subject,
            object,
            predicate: None,
        })
        .collect();
    let probs: Vec<Vec<f64>> = model.predict(&scenes, &queries)?.iter().map(|l| softmax(l)).collect();
    rank_from_probs(record.image_id, &pairs, &probs)
}

fn check_predictions(preds: &[PredictionRecord]) -> Result<()> {
    let mut seen = HashSet::with_capacity(preds.len());
    for p in preds {
        if !p.score.is_finite() {
            return Err(Error::NonFinite(format!("score of prediction {p:?}")));
        }
        if !seen.insert((p.image_id, p.subject, p.predicate, p.object)) {
            return Err(Error::invalid(
                "recall",
                format!(
                    "duplicate prediction ({}, {}, {}, {}) for image {}",
                    p.image_id, p.subject, p.predicate, p.object, p.image_id
                ),
            ));
        }
    }
    Ok(())
}

/// Fraction of ground-truth triplets whose exact `(s, p, o)` appears in
/// the top `k` predictions of its image. Images with fewer than `k`
/// predictions contribute all of them.
pub fn recall_at_k(preds: &[PredictionRecord], gt: &[Triplet], k: usize) -> Result<RecallResult> {
    if k == 0 {
        return Err(Error::invalid("recall_at_k", "K must be positive"));
    }
    check_predictions(preds)?;
    let mut by_image: HashMap<u64, Vec<&PredictionRecord>> = HashMap::new();
    for p in preds {
        by_image.entry(p.image_id).or_default().push(p);
    }
    let mut top: HashSet<Triplet> = HashSet::new();
    for list in by_image.values_mut() {
        list.sort_by(|a, b| rank_order(a, b));
        top.extend(list.iter().take(k).map(|p| Triplet {
            image_id: p.image_id,
            subject: p.subject,
            predicate: p.predicate,
            object: p.object,
        }));
    }
    let recalled = gt.iter().filter(|t| top.contains(t)).count();
    Ok(RecallResult::new(k, recalled, gt.len()))
}

/// Reference recall: for each ground-truth triplet, scans every
/// prediction and counts those of the same image ranked ahead of the
/// matching one.
pub fn oracle_recall(preds: &[PredictionRecord], gt: &[Triplet], k: usize) -> Result<RecallResult> {
    if k == 0 {
        return Err(Error::invalid("oracle_recall", "K must be positive"));
    }
    for (i, a) in preds.iter().enumerate() {
        if !a.score.is_finite() {
            return Err(Error::NonFinite("prediction score".into()));
        }
        for b in &preds[i + 1..] {
            if (a.image_id, a.subject, a.predicate, a.object) == (b.image_id, b.subject, b.predicate, b.object) {
                return Err(Error::invalid("oracle_recall", "duplicate prediction"));
            }
        }
    }
    let mut recalled = 0;
    for t in gt {
        let hit = preds.iter().find(|p| {
            p.image_id == t.image_id && p.subject == t.subject && p.predicate == t.predicate && p.object == t.object
        });
        if let Some(hit) = hit {
            let ahead = preds
                .iter()
                .filter(|p| p.image_id == t.image_id && rank_order(p, hit) == Ordering::Less)
                .count();
            if ahead < k {
                recalled += 1;
            }
        }
    }
    Ok(RecallResult::new(k, recalled, gt.len()))
}

/// A scored binary decision: `logits = [false, true]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryOutcome {
    pub predicate: String,
    pub truth: bool,
    pub logits: [f64; 2],
}

/// Predicted true iff the true logit is strictly larger.
pub fn binary_accuracy(outcomes: &[BinaryOutcome]) -> AccuracyBreakdown {
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for o in outcomes {
        let predicted = o.logits[1] > o.logits[0];
        let ok = predicted == o.truth;
        correct += usize::from(ok);
        let e = per.entry(o.predicate.clone()).or_default();
        e.0 += usize::from(ok);
        e.1 += 1;
    }
    let total = outcomes.len();
    AccuracyBreakdown {
        overall: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        per_predicate: per
            .into_iter()
            .map(|(k, (c, n))| (k, (c as f64 / n as f64, n)))
            .collect(),
    }
}

/// Ground-truth triplets of the given records, skipping "no relationship".
pub fn ground_truth(dataset: &Dataset, records: &[&ImageRecord]) -> Vec<Triplet> {
    let mut out = Vec::new();
    for r in records {
        for rel in &r.relations {
            if rel.p == NO_RELATIONSHIP {
                continue;
            }
            if let Some(p) = dataset.predicate_index(&rel.p) {
                out.push(Triplet {
                    image_id: r.image_id,
                    subject: rel.s,
                    predicate: p,
                    object: rel.o,
                });
            }
        }
    }
    out
}

/// Aggregate metrics of one evaluation run (one JSON line).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Mode,
    #[serde(flatten)]
    pub recall: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overall_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_predicate: Option<BTreeMap<String, f64>>,
    pub n_images: usize,
    pub n_gt: usize,
}

/// Recall@K for each `k` over a split of a doublet dataset.
pub fn evaluate_vrd(
    model: &Model<f32>,
    dataset: &Dataset,
    canvases: &HashMap<u64, ImageCanvas>,
    split: Split,
    ks: &[usize],
) -> Result<(Vec<RecallResult>, MetricsReport)> {
    let records = dataset.split(split);
    let mut preds = Vec::new();
    for r in &records {
        let canvas = canvases
            .get(&r.image_id)
            .ok_or_else(|| Error::invalid("evaluate", format!("image {} was not rendered", r.image_id)))?;
        preds.extend(rank_image(model, r, canvas)?);
    }
    let gt = ground_truth(dataset, &records);
    let results = ks
        .iter()
        .map(|&k| recall_at_k(&preds, &gt, k))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport {
        mode: Mode::DoubletVrd,
        recall: results.iter().map(|r| (format!("recall@{}", r.k), r.recall)).collect(),
        overall_acc: None,
        per_predicate: None,
        n_images: records.len(),
        n_gt: gt.len(),
    };
    Ok((results, report))
}

/// Binary accuracy over a split of a triplet dataset.
pub fn evaluate_binary(
    model: &Model<f32>,
    dataset: &Dataset,
    canvases: &HashMap<u64, ImageCanvas>,
    split: Split,
) -> Result<(AccuracyBreakdown, MetricsReport)> {
    if model.mode() != Mode::TripletBinary {
        return Err(Error::Config("binary accuracy needs a triplet-mode model".into()));
    }
    let records = dataset.split(split);
    let mut outcomes = Vec::new();
    for r in &records {
        if r.relations.is_empty() {
            continue;
        }
        let canvas = canvases
            .get(&r.image_id)
            .ok_or_else(|| Error::invalid("evaluate", format!("image {} was not rendered", r.image_id)))?;
        let scenes = [Scene { record: r, canvas }];
        let mut queries = Vec::with_capacity(r.relations.len());
        for rel in &r.relations {
            if rel.truth.is_none() {
                return Err(crate::error::DatasetError::MissingTruth {
                    record: r.image_id.to_string(),
                }
                .into());
            }
            queries.push(Query {
                scene: 0,
                subject: rel.s,
                object: rel.o,
                predicate: Some(rel.p.as_str()),
            });
        }
        let logits = model.predict(&scenes, &queries)?;
        for (rel, l) in r.relations.iter().zip(logits) {
            outcomes.push(BinaryOutcome {
                predicate: rel.p.clone(),
                truth: rel.truth.unwrap_or(false),
                logits: [l[0], l[1]],
            });
        }
    }
    let acc = binary_accuracy(&outcomes);
    let report = MetricsReport {
        mode: Mode::TripletBinary,
        recall: BTreeMap::new(),
        overall_acc: Some(acc.overall),
        per_predicate: Some(acc.per_predicate.iter().map(|(k, v)| (k.clone(), v.0)).collect()),
        n_images: records.len(),
        n_gt: acc.total,
    };
    Ok((acc, report))
}

/// IoU between `pred >= threshold` and `gt >= 0.5`. Two empty masks
/// count as a perfect match.
pub fn thresholded_iou(pred: &[f64], gt: &[f64], threshold: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("mask_iou", &[gt.len()], &[pred.len()], None));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (a, b) = (p >= threshold, g >= 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskIouReport {
    pub mean_iou: f64,
    /// Distinct (image, term) masks measured.
    pub masks: usize,
}

/// Mean IoU of subject and object masks (thresholded at 0.5) against their
/// box masks, over every annotated pair of a split.
pub fn evaluate_masks(
    model: &Model<f32>,
    dataset: &Dataset,
    canvases: &HashMap<u64, ImageCanvas>,
    split: Split,
) -> Result<MaskIouReport> {
    if !model.arch.variant.mask_attention {
        return Err(Error::Config("mask IoU needs a model with mask attention".into()));
    }
    let dims = model.arch.dims;
    let (mut total, mut masks) = (0.0, 0usize);
    for r in dataset.split(split) {
        if r.relations.is_empty() {
            continue;
        }
        let canvas = canvases
            .get(&r.image_id)
            .ok_or_else(|| Error::invalid("evaluate", format!("image {} was not rendered", r.image_id)))?;
        let scenes = [Scene { record: r, canvas }];
        let queries: Vec<Query<'_>> = r
            .relations
            .iter()
            .map(|rel| Query {
                scene: 0,
                subject: rel.s,
                object: rel.o,
                predicate: (model.mode() == Mode::TripletBinary).then_some(rel.p.as_str()),
            })
            .collect();
        let mut tape = crate::autodiff::Tape::inference();
        let fwd = model.forward(&mut tape, &scenes, &queries)?;
        let bank = fwd
            .masks
            .ok_or_else(|| Error::invalid("evaluate_masks", "model produced no masks"))?;
        let values = tape.value(bank).to_f64_vec();
        let cells = dims.d_h * dims.d_w;
        let mut seen = HashSet::new();
        for (seq, rows) in fwd.sequences.iter().zip(&fwd.term_rows) {
            for (term, &row) in seq.terms.iter().zip(rows) {
                if term.role == Role::Predicate || !seen.insert(row) {
                    continue;
                }
                let gt = ground_truth_mask(&term.bbox, r.width as f64, r.height as f64, dims.d_w, dims.d_h)?;
                total += thresholded_iou(&values[row * cells..(row + 1) * cells], &gt, 0.5)?;
                masks += 1;
            }
        }
    }
    Ok(MaskIouReport {
        mean_iou: if masks == 0 { 0.0 } else { total / masks as f64 },
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(image_id: u64, subject: usize, predicate: usize, object: usize, score: f64) -> PredictionRecord {
        PredictionRecord {
            image_id,
            subject,
            predicate,
            object,
            score,
        }
    }

    fn gt(image_id: u64, subject: usize, predicate: usize, object: usize) -> Triplet {
        Triplet {
            image_id,
            subject,
            predicate,
            object,
        }
    }

    #[test]
    fn two_of_three() {
        let p = vec![pred(0, 0, 1, 1, 0.9), pred(0, 1, 2, 0, 0.8), pred(0, 0, 1, 2, 0.1)];
        let g = vec![gt(0, 0, 1, 1), gt(0, 1, 2, 0), gt(0, 2, 1, 0)];
        let r = recall_at_k(&p, &g, 50).unwrap();
        assert_eq!((r.recalled, r.total), (2, 3));
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!(recall_at_k(&p, &g, 0).is_err());
    }

    #[test]
    fn duplicates_rejected_by_both() {
        let p = vec![pred(0, 0, 1, 1, 0.9), pred(0, 0, 1, 1, 0.5)];
        let g = vec![gt(0, 0, 1, 1)];
        assert!(recall_at_k(&p, &g, 5).is_err());
        assert!(oracle_recall(&p, &g, 5).is_err());
    }

    #[test]
    fn empty_predictions_recall_zero() {
        let g = vec![gt(0, 0, 1, 1)];
        assert_eq!(recall_at_k(&[], &g, 5).unwrap().recall, 0.0);
        assert_eq!(oracle_recall(&[], &g, 5).unwrap().recall, 0.0);
    }

    #[test]
    fn ties_break_by_indices() {
        let probs = vec![vec![0.2, 0.4, 0.4], vec![0.1, 0.3, 0.6], vec![0.0, 0.5, 0.5]];
        let ranked = rank_from_probs(3, &[(1, 0), (0, 1), (0, 2)], &probs).unwrap();
        let order: Vec<(usize, usize, usize)> = ranked.iter().map(|p| (p.subject, p.object, p.predicate)).collect();
        assert_eq!(order, vec![(0, 1, 2), (0, 2, 1), (1, 0, 1)]);
    }

    #[test]
    fn iou_counts_cells() {
        let gt = [1.0, 1.0, 0.0, 0.0];
        assert_eq!(thresholded_iou(&[0.9, 0.4, 0.6, 0.0], &gt, 0.5).unwrap(), 1.0 / 3.0);
        assert_eq!(thresholded_iou(&[0.0; 4], &[0.0; 4], 0.5).unwrap(), 1.0);
        assert!(thresholded_iou(&[0.0; 3], &gt, 0.5).is_err());
    }

    #[test]
    fn tie_resolves_false() {
        let out = binary_accuracy(&[BinaryOutcome {
            predicate: "on".into(),
            truth: false,
            logits: [0.5, 0.5],
        }]);
        assert_eq!(out.overall, 1.0);
    }
}
