#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vrel_core::backbone::{BoundingBox, ImageCanvas};
use vrel_core::data::{
    generate_synthetic, render_dataset, Dataset, ImageRecord, Mode, ObjectInstance, Relation, SynthConfig,
    NO_RELATIONSHIP,
};
use vrel_core::eval::{PredictionRecord, Triplet};
use vrel_core::model::{Architecture, Model, ModelDims, Variant};
use vrel_core::sequence::Vocabulary;
use vrel_core::tensor::Tensor;
use vrel_core::train::TrainConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Row-major `(m, k) · (k, n)`.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    c
}

pub fn tiny_dims() -> ModelDims {
    ModelDims {
        d: 16,
        layers: 1,
        heads: 2,
        d_ff: 32,
        d_s: 8,
        d_c: 8,
        d_w: 5,
        d_h: 5,
        backbone_hidden: 4,
        p_max: 32,
        cls_hidden: 16,
    }
}

/// A handful of 64px synthetic images.
pub fn tiny_dataset(mode: Mode, images: usize, seed: u64) -> (Dataset, HashMap<u64, ImageCanvas>) {
    let mut cfg = SynthConfig::new(mode, images, seed);
    cfg.canvas = 64;
    cfg.min_side = 8;
    cfg.max_side = 24;
    cfg.max_objects = 4;
    let ds = generate_synthetic(&cfg).unwrap();
    let canvases = render_dataset(&ds).unwrap();
    (ds, canvases)
}

pub fn tiny_model(ds: &Dataset, variant: Variant, seed: u64) -> Model<f32> {
    let vocab = Vocabulary::from_labels(ds.labels()).unwrap();
    let arch = Architecture::for_dataset(tiny_dims(), variant, ds, vocab.len());
    Model::new(arch, vocab, seed).unwrap()
}

pub fn quick_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        seed,
        warmup: 2,
        ..TrainConfig::default()
    }
}

pub fn params_bits(m: &Model<f32>) -> Vec<(String, Vec<u32>)> {
    m.store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.tensor.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

pub struct RecallInstance {
    pub preds: Vec<PredictionRecord>,
    pub gt: Vec<Triplet>,
}

/// Random scored predictions and facts over a few images.
pub fn recall_instance(r: &mut ChaCha8Rng) -> RecallInstance {
    let images = r.random_range(1..5u64);
    let mut preds = Vec::new();
    let mut gt = Vec::new();
    for image_id in 0..images {
        let objects = r.random_range(2..7usize);
        let predicates = r.random_range(1..8usize);
        let mut seen = BTreeSet::new();
        for _ in 0..r.random_range(0..80) {
            let s = r.random_range(0..objects);
            let o = r.random_range(0..objects);
            let p = r.random_range(1..=predicates);
            if s == o || !seen.insert((s, p, o)) {
                continue;
            }
            // Coarse scores so ties are common.
            let score = r.random_range(0..6) as f64 / 5.0;
            preds.push(PredictionRecord {
                image_id,
                subject: s,
                predicate: p,
                object: o,
                score,
            });
        }
        for _ in 0..r.random_range(0..6) {
            let s = r.random_range(0..objects);
            let o = (s + r.random_range(1..objects)) % objects;
            let t = Triplet {
                image_id,
                subject: s,
                predicate: r.random_range(1..=predicates),
                object: o,
            };
            if !gt.contains(&t) {
                gt.push(t);
            }
        }
    }
    RecallInstance { preds, gt }
}

/// Sorts each image's predictions by score (desc), then subject, object,
/// predicate (asc), and checks membership of each fact in the first `k`.
pub fn sort_oracle(preds: &[PredictionRecord], gt: &[Triplet], k: usize) -> usize {
    gt.iter()
        .filter(|t| {
            let mut img: Vec<&PredictionRecord> = preds.iter().filter(|p| p.image_id == t.image_id).collect();
            img.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap()
                    .then(a.subject.cmp(&b.subject))
                    .then(a.object.cmp(&b.object))
                    .then(a.predicate.cmp(&b.predicate))
            });
            img.iter()
                .take(k)
                .any(|p| (p.subject, p.predicate, p.object) == (t.subject, t.predicate, t.object))
        })
        .count()
}

pub fn sampling_predicates() -> Vec<String> {
    [NO_RELATIONSHIP, "above", "under", "on"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

pub fn sampling_record(id: u64, objects: usize, relations: &[(usize, usize)]) -> ImageRecord {
    let preds = sampling_predicates();
    ImageRecord {
        image_id: id,
        width: 128,
        height: 128,
        objects: (0..objects)
            .map(|i| ObjectInstance {
                cls: format!("c{i}"),
                bbox: BoundingBox::new(i as f64, i as f64, i as f64 + 10.0, i as f64 + 10.0),
                depth: 0.5,
            })
            .collect(),
        relations: relations
            .iter()
            .enumerate()
            .map(|(i, &(s, o))| Relation {
                s,
                p: preds[1 + i % 3].clone(),
                o,
                truth: None,
            })
            .collect(),
    }
}

/// 9 to 13 objects with 8 to 15 annotated pairs: both sampling pools are
/// deep enough for a full 8/24 batch.
pub fn ample_record(r: &mut ChaCha8Rng, id: u64) -> (ImageRecord, HashSet<(usize, usize)>) {
    let k = r.random_range(9..14usize);
    let mut pairs = HashSet::new();
    let want = r.random_range(8..16usize);
    while pairs.len() < want {
        let s = r.random_range(0..k);
        let o = r.random_range(0..k);
        if s != o && !pairs.contains(&(o, s)) {
            pairs.insert((s, o));
        }
    }
    let rels: Vec<(usize, usize)> = pairs.iter().copied().collect();
    (sampling_record(id, k, &rels), pairs)
}
