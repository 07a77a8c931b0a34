//! Seeded synthetic scenes: coloured rectangles with planted predicates.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::rules::{relation, Placed, RuleSet, RULE_VERSION};
use super::sampling::split_ids;
use super::schema::{Dataset, DatasetManifest, ImageRecord, Mode, ObjectInstance, Relation, Splits, NO_RELATIONSHIP};
use crate::backbone::{BoundingBox, ImageCanvas};
use crate::error::{DatasetError, Result};
use crate::seeding::rng_for;

pub const CLASSES: [&str; 8] = [
    "person",
    "dog",
    "car",
    "traffic light",
    "street sign",
    "potted plant",
    "kite",
    "table",
];

/// (red, green) fill per built-in class; blue encodes nearness.
const PALETTE: [(f32, f32); 8] = [
    (0.9, 0.1),
    (0.1, 0.9),
    (0.9, 0.9),
    (0.55, 0.1),
    (0.1, 0.55),
    (0.55, 0.9),
    (0.9, 0.55),
    (0.4, 0.4),
];

pub const NOISE_STD: f64 = 0.05;
const PLACEMENT_ATTEMPTS: usize = 500;
const MAX_IOU: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub canvas: u32,
    pub min_side: u32,
    pub max_side: u32,
    pub seed: u64,
    pub mode: Mode,
    pub rules: RuleSet,
    pub test_fraction: f64,
    /// Binary mode: true/false fact pairs kept per image (`None` keeps all).
    pub binary_pairs_per_image: Option<usize>,
    /// Chance that a new object is placed inside an existing one.
    pub nest_probability: f64,
}

impl SynthConfig {
    pub fn new(mode: Mode, images: usize, seed: u64) -> Self {
        Self {
            images,
            min_objects: 2,
            max_objects: 5,
            canvas: 128,
            min_side: 12,
            max_side: 48,
            seed,
            mode,
            rules: match mode {
                Mode::DoubletVrd => RuleSet::Geometric6,
                Mode::TripletBinary => RuleSet::Spatial9,
            },
            test_fraction: 0.2,
            binary_pairs_per_image: Some(6),
            nest_probability: 0.15,
        }
    }

    fn check(&self) -> std::result::Result<(), DatasetError> {
        let fail = |m: String| Err(DatasetError::Unsatisfiable(m));
        if self.images == 0 {
            return fail("at least one image is required".into());
        }
        if self.min_objects < 2 || self.min_objects > self.max_objects {
            return fail(format!(
                "object range {}..={} is invalid",
                self.min_objects, self.max_objects
            ));
        }
        if self.max_objects > CLASSES.len() {
            return fail(format!(
                "{} objects need distinct classes but only {} exist",
                self.max_objects,
                CLASSES.len()
            ));
        }
        if self.canvas < 32 || self.min_side == 0 || self.min_side > self.max_side || self.max_side > self.canvas {
            return fail(format!(
                "sides {}..={} do not fit a {}px canvas",
                self.min_side, self.max_side, self.canvas
            ));
        }
        let need = self.max_objects as u64 * (self.min_side as u64).pow(2);
        if need > (self.canvas as u64).pow(2) {
            return fail(format!(
                "{} objects of side {} cannot fit a {}px canvas",
                self.max_objects, self.min_side, self.canvas
            ));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return fail(format!("test fraction {} outside [0, 1]", self.test_fraction));
        }
        Ok(())
    }
}

fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

fn place<R: Rng>(rng: &mut R, cfg: &SynthConfig, placed: &[Placed]) -> Option<Placed> {
    let c = cfg.canvas as i64;
    let span = |rng: &mut R| rng.random_range(cfg.min_side as i64..=cfg.max_side as i64);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let nest_in = placed
            .iter()
            .filter(|p| p.bbox.width() >= 30.0 && p.bbox.height() >= 30.0)
            .collect::<Vec<_>>();
        let cand = if !nest_in.is_empty() && rng.random_bool(cfg.nest_probability) {
            let outer = nest_in[rng.random_range(0..nest_in.len())];
            let ob = outer.bbox;
            let w = rng.random_range(cfg.min_side as i64..=(ob.width() as i64 - 8).max(cfg.min_side as i64));
            let h = rng.random_range(cfg.min_side as i64..=(ob.height() as i64 - 8).max(cfg.min_side as i64));
            let x0 = rng.random_range(ob.x0 as i64 + 2..=(ob.x1 as i64 - 2 - w).max(ob.x0 as i64 + 2));
            let y0 = rng.random_range(ob.y0 as i64 + 2..=(ob.y1 as i64 - 2 - h).max(ob.y0 as i64 + 2));
            let depth = (outer.depth - rng.random_range(0.2..0.3)).max(0.0);
            Placed {
                bbox: BoundingBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64),
                depth,
            }
        } else {
            let (w, h) = (span(rng), span(rng));
            let x0 = rng.random_range(0..=c - w);
            let y0 = rng.random_range(0..=c - h);
            Placed {
                bbox: BoundingBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64),
                depth: rng.random_range(0.3..1.0),
            }
        };
        let ok = placed.iter().all(|p| {
            let nested = p.bbox.contains(&cand.bbox) || cand.bbox.contains(&p.bbox);
            if nested {
                // the inner object must stay visible on top of the outer one
                let inner_depth = if p.bbox.contains(&cand.bbox) {
                    cand.depth
                } else {
                    p.depth
                };
                let outer_depth = if p.bbox.contains(&cand.bbox) {
                    p.depth
                } else {
                    cand.depth
                };
                inner_depth + 0.1 < outer_depth && p.bbox != cand.bbox
            } else {
                iou(&p.bbox, &cand.bbox) <= MAX_IOU
            }
        });
        if ok && cand.bbox.is_valid_in(c as f64, c as f64) {
            return Some(cand);
        }
    }
    None
}

fn generate_record(cfg: &SynthConfig, id: u64, predicates: &[&str]) -> std::result::Result<ImageRecord, DatasetError> {
    let mut rng = rng_for(cfg.seed, "scene", id);
    let k = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut classes: Vec<usize> = (0..CLASSES.len()).collect();
    classes.shuffle(&mut rng);
    let mut placed: Vec<Placed> = Vec::with_capacity(k);
    for _ in 0..k {
        let p = place(&mut rng, cfg, &placed)
            .ok_or_else(|| DatasetError::Unsatisfiable(format!("could not place {k} objects on image {id}")))?;
        placed.push(p);
    }
    let objects: Vec<ObjectInstance> = placed
        .iter()
        .zip(&classes)
        .map(|(p, &c)| ObjectInstance {
            cls: CLASSES[c].to_string(),
            bbox: p.bbox,
            depth: (p.depth * 1000.0).round() / 1000.0,
        })
        .collect();
    let rounded: Vec<Placed> = objects
        .iter()
        .map(|o| Placed {
            bbox: o.bbox,
            depth: o.depth,
        })
        .collect();
    let mut facts = Vec::new();
    for s in 0..k {
        for o in 0..k {
            if s == o {
                continue;
            }
            if let Some(p) = relation(cfg.rules, &rounded[s], &rounded[o]) {
                facts.push((s, p, o));
            }
        }
    }
    let relations = match cfg.mode {
        Mode::DoubletVrd => facts
            .into_iter()
            .map(|(s, p, o)| Relation {
                s,
                p: p.to_string(),
                o,
                truth: None,
            })
            .collect(),
        Mode::TripletBinary => {
            if let Some(limit) = cfg.binary_pairs_per_image {
                facts.shuffle(&mut rng);
                facts.truncate(limit);
                facts.sort_unstable_by_key(|&(s, _, o)| (s, o));
            }
            let mut rels = Vec::with_capacity(2 * facts.len());
            for (s, p, o) in facts {
                let others: Vec<&&str> = predicates.iter().filter(|&&q| q != p).collect();
                let wrong = others[rng.random_range(0..others.len())];
                rels.push(Relation {
                    s,
                    p: p.to_string(),
                    o,
                    truth: Some(true),
                });
                rels.push(Relation {
                    s,
                    p: wrong.to_string(),
                    o,
                    truth: Some(false),
                });
            }
            rels
        }
    };
    Ok(ImageRecord {
        image_id: id,
        width: cfg.canvas,
        height: cfg.canvas,
        objects,
        relations,
    })
}

/// Deterministic dataset for `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.check()?;
    let rule_preds = cfg.rules.predicates();
    let records = (0..cfg.images as u64)
        .map(|id| generate_record(cfg, id, rule_preds))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut predicates: Vec<String> = rule_preds.iter().map(|s| s.to_string()).collect();
    if cfg.mode == Mode::DoubletVrd {
        predicates.insert(0, NO_RELATIONSHIP.to_string());
    }
    let ids: Vec<u64> = records.iter().map(|r| r.image_id).collect();
    let (train, test) = split_ids(
        &ids,
        (1.0 - cfg.test_fraction, cfg.test_fraction),
        crate::seeding::derive_seed(cfg.seed, "split", 0),
    )?;
    let manifest = DatasetManifest {
        mode: cfg.mode,
        predicates,
        classes: CLASSES.iter().map(|s| s.to_string()).collect(),
        seed: Some(cfg.seed),
        rule_version: Some(RULE_VERSION.to_string()),
        splits: Splits { train, test },
    };
    Ok(Dataset::new(manifest, records)?)
}

/// Fill colour of class `index`.
pub fn class_color(index: usize) -> (f32, f32) {
    match PALETTE.get(index) {
        Some(&c) => c,
        None => {
            let t = (index as f32 * 0.618_034).fract();
            (0.2 + 0.7 * t, 0.9 - 0.7 * t)
        }
    }
}

/// Draws a record: objects painted far to near, then per-pixel Gaussian
/// noise seeded by `(seed, image_id)`.
pub fn rasterize(record: &ImageRecord, classes: &[String], seed: u64) -> Result<ImageCanvas> {
    let (w, h) = (record.width as usize, record.height as usize);
    let mut canvas = ImageCanvas::blank(w, h)?;
    let mut order: Vec<usize> = (0..record.objects.len()).collect();
    order.sort_by(|&a, &b| {
        record.objects[b]
            .depth
            .total_cmp(&record.objects[a].depth)
            .then(a.cmp(&b))
    });
    let px = canvas.pixels_mut();
    for i in order {
        let o = &record.objects[i];
        let ci = classes.iter().position(|c| *c == o.cls).unwrap_or(classes.len());
        let (r, g) = class_color(ci);
        let b = (1.0 - o.depth).clamp(0.0, 1.0) as f32;
        let x0 = o.bbox.x0.floor().max(0.0) as usize;
        let y0 = o.bbox.y0.floor().max(0.0) as usize;
        let x1 = (o.bbox.x1.ceil() as usize).min(w);
        let y1 = (o.bbox.y1.ceil() as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                px[y * w + x] = r;
                px[w * h + y * w + x] = g;
                px[2 * w * h + y * w + x] = b;
            }
        }
    }
    let mut rng = rng_for(seed, "pixels", record.image_id);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    for v in px.iter_mut() {
        *v = (*v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
    }
    Ok(canvas)
}

/// Renders every record of `dataset` with the manifest seed (0 if absent).
pub fn render_dataset(dataset: &Dataset) -> Result<std::collections::HashMap<u64, ImageCanvas>> {
    let seed = dataset.manifest.seed.unwrap_or(0);
    dataset
        .records
        .iter()
        .map(|r| Ok((r.image_id, rasterize(r, &dataset.manifest.classes, seed)?)))
        .collect()
}
