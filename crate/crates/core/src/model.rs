//! Full relationship model: backbone, sequence assembly, mask attention,
//! encoder, spatial module and classifier, batched over many queries.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::bilinear_plan;
use crate::autodiff::{Tape, Var};
use crate::backbone::{normalize_box, union_box, Backbone, BackboneConfig, BoundingBox, ImageCanvas};
use crate::data::{Dataset, ImageRecord, Mode};
use crate::encoder::{Encoder, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::mask_attention::{
    ground_truth_mask, mask_loss, masked_mean, term_word_embedding, MaskAttention, MaskLossKind,
};
use crate::params::ParamStore;
use crate::seeding::rng_for;
use crate::sequence::{
    assign_visual_features, build_sequence, EmbeddingTables, InputSequence, Role, TermInput, VisualRows, Vocabulary,
};
use crate::spatial::{fuse, zero_spatial, Classifier, Fusion, SpatialModule};
use crate::tensor::{Real, Tensor};

/// Layer widths and counts (`[model]` section of the config file).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub d: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "M")]
    pub heads: usize,
    pub d_ff: usize,
    pub d_s: usize,
    pub d_c: usize,
    pub d_w: usize,
    pub d_h: usize,
    pub backbone_hidden: usize,
    pub p_max: usize,
    /// Classifier hidden width; 0 means `2·(d + d_s)`.
    pub cls_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 2,
            heads: 4,
            d_ff: 256,
            d_s: 64,
            d_c: 64,
            d_w: 14,
            d_h: 14,
            backbone_hidden: 16,
            p_max: crate::sequence::DEFAULT_P_MAX,
            cls_hidden: 0,
        }
    }
}

impl ModelDims {
    /// Widths of the full-size reference architecture.
    pub fn reference() -> Self {
        Self {
            d: 768,
            layers: 12,
            heads: 12,
            d_ff: 3072,
            d_c: 2048,
            ..Self::default()
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            d: self.d,
            d_ff: self.d_ff,
        }
    }

    pub fn classifier_hidden(&self) -> usize {
        if self.cls_hidden == 0 {
            2 * (self.d + self.d_s)
        } else {
            self.cls_hidden
        }
    }
}

/// Ablation switches and loss/fusion variants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub spatial: bool,
    pub mask_attention: bool,
    pub fusion: Fusion,
    pub mask_loss: MaskLossKind,
}

impl Default for Variant {
    fn default() -> Self {
        Self {
            spatial: true,
            mask_attention: true,
            fusion: Fusion::Concat,
            mask_loss: MaskLossKind::Mse,
        }
    }
}

/// Everything needed to rebuild the parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub dims: ModelDims,
    pub variant: Variant,
    pub mode: Mode,
    pub vocab_size: usize,
    pub num_classes: usize,
}

impl Architecture {
    /// Architecture matching a dataset's mode and predicate set.
    pub fn for_dataset(dims: ModelDims, variant: Variant, dataset: &Dataset, vocab_size: usize) -> Self {
        let mode = dataset.mode();
        Self {
            dims,
            variant,
            mode,
            vocab_size,
            num_classes: match mode {
                Mode::DoubletVrd => dataset.manifest.predicates.len(),
                Mode::TripletBinary => 2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.encoder().validate()?;
        let d = &self.dims;
        if [d.d, d.d_s, d.d_c, d.d_w, d.d_h, d.backbone_hidden, d.p_max].contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if let Fusion::Alpha(_) = self.variant.fusion {
            if d.d_s != d.d {
                return Err(Error::Config(format!(
                    "alpha fusion needs d_s = d (got d_s={}, d={})",
                    d.d_s, d.d
                )));
            }
        }
        let expected = match self.mode {
            Mode::TripletBinary => 2,
            Mode::DoubletVrd => self.num_classes.max(2),
        };
        if self.num_classes != expected {
            return Err(Error::Config(format!(
                "{} mode needs {expected} classes, got {}",
                self.mode, self.num_classes
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes in registration order, without
    /// allocating the tensors.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = &self.dims;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |n: String, s: Vec<usize>| out.push((n, s));
        push("backbone.conv1.weight".into(), vec![d.backbone_hidden, 3, 3, 3]);
        push("backbone.conv1.bias".into(), vec![d.backbone_hidden]);
        push("backbone.conv2.weight".into(), vec![d.d_c, d.backbone_hidden, 3, 3]);
        push("backbone.conv2.bias".into(), vec![d.d_c]);
        push("backbone.proj.weight".into(), vec![d.d_c, d.d]);
        push("backbone.proj.bias".into(), vec![d.d]);
        push("embeddings.token".into(), vec![self.vocab_size, d.d]);
        push("embeddings.segment".into(), vec![3, d.d]);
        push("embeddings.position".into(), vec![d.p_max, d.d]);
        for l in 0..d.layers {
            let p = |n: &str| format!("encoder.layer{l}.{n}");
            for n in ["heads.query", "heads.key", "heads.value", "heads.output"] {
                push(p(n), vec![d.d, d.d]);
            }
            push(p("ffn.w1"), vec![d.d, d.d_ff]);
            push(p("ffn.w2"), vec![d.d_ff, d.d]);
            push(p("attn_norm.gamma"), vec![d.d]);
            push(p("attn_norm.beta"), vec![d.d]);
            push(p("ffn.b1"), vec![d.d_ff]);
            push(p("ffn.b2"), vec![d.d]);
            push(p("ffn_norm.gamma"), vec![d.d]);
            push(p("ffn_norm.beta"), vec![d.d]);
        }
        push("mask_att.proj.weight".into(), vec![d.d, d.d_c, 1, 1]);
        push("mask_att.proj.bias".into(), vec![d.d]);
        push("mask_att.conv1.weight".into(), vec![d.d, d.d, 3, 3]);
        push("mask_att.conv1.bias".into(), vec![d.d]);
        push("mask_att.conv2.weight".into(), vec![1, d.d, 3, 3]);
        for n in ["subject", "object"] {
            push(format!("spatial.{n}.weight"), vec![4, d.d_s]);
            push(format!("spatial.{n}.bias"), vec![d.d_s]);
        }
        for n in ["hidden", "out"] {
            push(format!("spatial.{n}.weight"), vec![d.d_s, d.d_s]);
            push(format!("spatial.{n}.bias"), vec![d.d_s]);
        }
        let input = self.variant.fusion.output_dim(d.d, d.d_s);
        let hidden = d.classifier_hidden();
        push("classifier.hidden.weight".into(), vec![input, hidden]);
        push("classifier.hidden.bias".into(), vec![hidden]);
        push("classifier.out.weight".into(), vec![hidden, self.num_classes]);
        push("classifier.out.bias".into(), vec![self.num_classes]);
        out
    }
}

/// Name prefixes of the parameters frozen by the backbone-freezing policy.
pub const BACKBONE_PREFIXES: [&str; 3] = ["backbone.", "embeddings.", "encoder."];

/// `(trainable, total)` parameter counts of a layout with the backbone
/// frozen.
pub fn frozen_backbone_counts(layout: &[(String, Vec<usize>)]) -> (usize, usize) {
    let mut trainable = 0;
    let mut total = 0;
    for (name, shape) in layout {
        let n: usize = shape.iter().product();
        total += n;
        if !BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p)) {
            trainable += n;
        }
    }
    (trainable, total)
}

/// An image and its annotations as seen by the model.
#[derive(Clone, Copy, Debug)]
pub struct Scene<'a> {
    pub record: &'a ImageRecord,
    pub canvas: &'a ImageCanvas,
}

/// One relationship instance to score.
#[derive(Clone, Debug)]
pub struct Query<'a> {
    pub scene: usize,
    pub subject: usize,
    pub object: usize,
    /// Required in triplet mode.
    pub predicate: Option<&'a str>,
}

/// Handles produced by [`Model::forward`].
pub struct Forward {
    /// `(queries, classes)`.
    pub logits: Var,
    /// `(distinct terms, d_h·d_w)` predicted masks, when mask attention is on.
    pub masks: Option<Var>,
    /// Mask row of each term of each query's sequence.
    pub term_rows: Vec<Vec<usize>>,
    pub sequences: Vec<InputSequence>,
    pub encoder: EncoderOutput,
    /// First stacked row of each sequence.
    pub offsets: Vec<usize>,
}

pub struct Losses {
    pub total: Var,
    pub classification: Var,
    pub mask: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub arch: Architecture,
    pub vocab: Vocabulary,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub tables: EmbeddingTables,
    pub encoder: Encoder,
    pub mask_attention: MaskAttention,
    pub spatial: SpatialModule,
    pub classifier: Classifier,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum RegionKey {
    Full,
    Object(usize),
    Union(usize, usize),
}

impl<T: Real> Model<T> {
    pub fn new(arch: Architecture, vocab: Vocabulary, seed: u64) -> Result<Self> {
        arch.validate()?;
        if vocab.len() != arch.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but the architecture expects {}",
                vocab.len(),
                arch.vocab_size
            )));
        }
        let d = arch.dims;
        let mut rng = rng_for(seed, "init", 0);
        let mut store = ParamStore::new();
        let backbone = Backbone::register(
            &mut store,
            &mut rng,
            BackboneConfig {
                hidden: d.backbone_hidden,
                d_c: d.d_c,
                d: d.d,
                d_w: d.d_w,
                d_h: d.d_h,
            },
        )?;
        let tables = EmbeddingTables::register(&mut store, &mut rng, arch.vocab_size, d.d, d.p_max)?;
        let encoder = Encoder::register(&mut store, &mut rng, d.encoder())?;
        let mask_attention = MaskAttention::register(&mut store, &mut rng, d.d_c, d.d)?;
        let spatial = SpatialModule::register(&mut store, &mut rng, d.d_s)?;
        let classifier = Classifier::register(
            &mut store,
            &mut rng,
            arch.variant.fusion.output_dim(d.d, d.d_s),
            d.classifier_hidden(),
            arch.num_classes,
        )?;
        Ok(Self {
            arch,
            vocab,
            store,
            backbone,
            tables,
            encoder,
            mask_attention,
            spatial,
            classifier,
        })
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch,
            vocab: self.vocab.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            tables: self.tables,
            encoder: self.encoder.clone(),
            mask_attention: self.mask_attention.clone(),
            spatial: self.spatial.clone(),
            classifier: self.classifier.clone(),
        }
    }

    /// Freezes the visual backbone, embeddings and encoder.
    pub fn freeze_backbone(&mut self) {
        self.store.set_trainable_by_prefix(&BACKBONE_PREFIXES, false);
    }

    pub fn mode(&self) -> Mode {
        self.arch.mode
    }

    pub fn forward(&self, tape: &mut Tape<T>, scenes: &[Scene<'_>], queries: &[Query<'_>]) -> Result<Forward> {
        self.forward_with(&self.store, tape, scenes, queries)
    }

    /// [`Model::forward`] with parameter values taken from `store`, which
    /// must share this model's layout.
    pub fn forward_with(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        scenes: &[Scene<'_>],
        queries: &[Query<'_>],
    ) -> Result<Forward> {
        if queries.is_empty() {
            return Err(Error::invalid("forward", "empty batch"));
        }
        let mode = self.arch.mode;
        let dims = self.arch.dims;
        let mam_on = self.arch.variant.mask_attention;

        let mut sequences = Vec::with_capacity(queries.len());
        for q in queries {
            let scene = scenes
                .get(q.scene)
                .ok_or_else(|| Error::invalid("forward", format!("scene {} out of range", q.scene)))?;
            let objs = &scene.record.objects;
            let (s, o) = match (objs.get(q.subject), objs.get(q.object)) {
                (Some(s), Some(o)) if q.subject != q.object => (s, o),
                _ => {
                    return Err(Error::invalid(
                        "forward",
                        format!(
                            "invalid object pair ({}, {}) for image {}",
                            q.subject, q.object, scene.record.image_id
                        ),
                    ))
                }
            };
            sequences.push(build_sequence(
                &self.vocab,
                &TermInput {
                    label: &s.cls,
                    bbox: s.bbox,
                },
                q.predicate,
                &TermInput {
                    label: &o.cls,
                    bbox: o.bbox,
                },
                mode,
            )?);
        }

        // Regions and terms needed per scene, in first-use order.
        let mut used: Vec<usize> = Vec::new();
        let mut regions: HashMap<usize, Vec<RegionKey>> = HashMap::new();
        let mut terms: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut term_index: HashMap<(usize, Vec<usize>), usize> = HashMap::new();
        for (q, seq) in queries.iter().zip(&sequences) {
            if let std::collections::hash_map::Entry::Vacant(e) = regions.entry(q.scene) {
                used.push(q.scene);
                e.insert(vec![RegionKey::Full]);
            }
            let keys = regions.get_mut(&q.scene).expect("inserted above");
            let mut want = vec![RegionKey::Object(q.subject), RegionKey::Object(q.object)];
            if mode == Mode::TripletBinary {
                want.push(RegionKey::Union(q.subject, q.object));
            }
            for k in want {
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
            if mam_on {
                for t in &seq.terms {
                    let key = (q.scene, t.word_ids.clone());
                    if !term_index.contains_key(&key) {
                        term_index.insert(key.clone(), terms.len());
                        terms.push(key);
                    }
                }
            }
        }

        let token_table = tape.param(store, self.tables.token);
        let mut bank_parts = Vec::with_capacity(used.len() + 1);
        let mut region_rows: HashMap<(usize, RegionKey), usize> = HashMap::new();
        let mut next_row = 0;
        let mut term_means: Vec<Option<Var>> = vec![None; terms.len()];
        let mut term_masks: Vec<Option<Var>> = vec![None; terms.len()];
        for &si in &used {
            let scene = &scenes[si];
            let (w, h) = (scene.record.width as f64, scene.record.height as f64);
            let image = tape.constant(scene.canvas.to_tensor());
            let fmap = self.backbone.extract_feature_map(tape, store, image)?;
            let keys = &regions[&si];
            let objs = &scene.record.objects;
            let boxes: Vec<BoundingBox> = keys
                .iter()
                .map(|k| match *k {
                    RegionKey::Full => BoundingBox::full(w, h),
                    RegionKey::Object(i) => objs[i].bbox,
                    RegionKey::Union(a, b) => union_box(&objs[a].bbox, &objs[b].bbox),
                })
                .collect();
            let pooled = self.backbone.pooled_regions(tape, store, fmap, &boxes, w, h)?;
            for (i, k) in keys.iter().enumerate() {
                region_rows.insert((si, *k), next_row + i);
            }
            next_row += keys.len();
            bank_parts.push(pooled);

            if mam_on {
                let (mh, mw) = (tape.shape(fmap)[1], tape.shape(fmap)[2]);
                let plan = bilinear_plan(mh, mw, [0.0, 0.0, mw as f64, mh as f64], dims.d_h, dims.d_w);
                let patch = tape.bilinear(fmap, std::sync::Arc::new(plan), dims.d_h, dims.d_w)?;
                let projected = self.mask_attention.project_patch(tape, store, patch)?;
                for (ti, (tsi, words)) in terms.iter().enumerate() {
                    if *tsi != si {
                        continue;
                    }
                    let word = term_word_embedding(tape, token_table, words)?;
                    let mask = self.mask_attention.mask_from_projected(tape, store, projected, word)?;
                    term_means[ti] = Some(masked_mean(tape, patch, mask)?);
                    term_masks[ti] = Some(tape.reshape(mask, &[1, dims.d_h * dims.d_w])?);
                }
            }
        }
        let mut term_base = None;
        let mut masks = None;
        if mam_on && !terms.is_empty() {
            let means: Vec<Var> = term_means
                .into_iter()
                .map(|v| v.expect("every term computed"))
                .collect();
            let means = tape.concat(&means, 0)?;
            let feats = self.backbone.project(tape, store, means)?;
            bank_parts.push(feats);
            term_base = Some(next_row);
            let m: Vec<Var> = term_masks
                .into_iter()
                .map(|v| v.expect("every term computed"))
                .collect();
            masks = Some(tape.concat(&m, 0)?);
        }
        let bank = if bank_parts.len() == 1 {
            bank_parts[0]
        } else {
            tape.concat(&bank_parts, 0)?
        };

        let mut slots = Vec::new();
        let mut term_rows = Vec::with_capacity(queries.len());
        for (q, seq) in queries.iter().zip(&sequences) {
            let row = |k: RegionKey| region_rows[&(q.scene, k)];
            let tr: Vec<usize> = if mam_on {
                seq.terms
                    .iter()
                    .map(|t| term_index[&(q.scene, t.word_ids.clone())])
                    .collect()
            } else {
                Vec::new()
            };
            let rows = VisualRows {
                whole: row(RegionKey::Full),
                subject: row(RegionKey::Object(q.subject)),
                object: row(RegionKey::Object(q.object)),
                union: (mode == Mode::TripletBinary).then(|| row(RegionKey::Union(q.subject, q.object))),
                terms: term_base.map(|base| tr.iter().map(|t| base + t).collect()),
            };
            slots.extend(assign_visual_features(seq, &rows)?);
            term_rows.push(tr);
        }
        let visuals = tape.gather_rows(bank, &slots)?;
        let seq_refs: Vec<&InputSequence> = sequences.iter().collect();
        let x = self.tables.embed_sequences(tape, store, &seq_refs, visuals)?;

        let mut offsets = Vec::with_capacity(sequences.len());
        let mut spans = Vec::with_capacity(sequences.len());
        let mut mask_rows = Vec::with_capacity(sequences.len());
        let mut start = 0;
        for seq in &sequences {
            offsets.push(start);
            spans.push((start, seq.len()));
            mask_rows.push(start + seq.mask_index);
            start += seq.len();
        }
        let encoded = self.encoder.encode(tape, store, x, Some(&spans))?;
        let h_so = tape.gather_rows(encoded.output, &mask_rows)?;

        let b = queries.len();
        let c_so = if self.arch.variant.spatial {
            let mut cs = Vec::with_capacity(4 * b);
            let mut co = Vec::with_capacity(4 * b);
            for q in queries {
                let r = scenes[q.scene].record;
                let (w, h) = (r.width as f64, r.height as f64);
                cs.extend(normalize_box(&r.objects[q.subject].bbox, w, h)?);
                co.extend(normalize_box(&r.objects[q.object].bbox, w, h)?);
            }
            let cs = tape.constant(Tensor::from_f64(&[b, 4], &cs)?);
            let co = tape.constant(Tensor::from_f64(&[b, 4], &co)?);
            self.spatial.spatial_encode(tape, store, cs, co)?
        } else {
            zero_spatial(tape, b, dims.d_s)
        };
        let f = fuse(tape, c_so, h_so, self.arch.variant.fusion)?;
        let logits = self.classifier.classify(tape, store, f)?;
        Ok(Forward {
            logits,
            masks,
            term_rows,
            sequences,
            encoder: encoded,
            offsets,
        })
    }

    /// Supervised `(mask row, target cells)` per term occurrence: subject and
    /// object terms always, the predicate term (union box) in triplet mode.
    pub fn mask_targets(
        &self,
        scenes: &[Scene<'_>],
        queries: &[Query<'_>],
        fwd: &Forward,
    ) -> Result<(Vec<usize>, Vec<T>)> {
        let dims = self.arch.dims;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for ((q, seq), tr) in queries.iter().zip(&fwd.sequences).zip(&fwd.term_rows) {
            let r = scenes[q.scene].record;
            for (term, &row) in seq.terms.iter().zip(tr) {
                if self.arch.mode == Mode::DoubletVrd && term.role == Role::Predicate {
                    continue;
                }
                let gt = ground_truth_mask(&term.bbox, r.width as f64, r.height as f64, dims.d_w, dims.d_h)?;
                rows.push(row);
                targets.extend(gt.into_iter().map(T::lit));
            }
        }
        Ok((rows, targets))
    }

    /// Mean cross-entropy over queries plus mean mask loss over supervised
    /// term occurrences (1:1).
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        scenes: &[Scene<'_>],
        queries: &[Query<'_>],
        fwd: &Forward,
        targets: &[usize],
    ) -> Result<Losses> {
        let classification = tape.cross_entropy(fwd.logits, targets)?;
        let mask = match fwd.masks {
            Some(bank) => {
                let (rows, target) = self.mask_targets(scenes, queries, fwd)?;
                if rows.is_empty() {
                    None
                } else {
                    let picked = tape.gather_rows(bank, &rows)?;
                    Some(mask_loss(tape, picked, &target, self.arch.variant.mask_loss)?)
                }
            }
            None => None,
        };
        let total = match mask {
            Some(m) => tape.add(classification, m)?,
            None => classification,
        };
        Ok(Losses {
            total,
            classification,
            mask,
        })
    }

    /// Logits per query without recording adjoints.
    pub fn predict(&self, scenes: &[Scene<'_>], queries: &[Query<'_>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::inference();
        let fwd = self.forward(&mut tape, scenes, queries)?;
        let c = self.arch.num_classes;
        Ok(tape
            .value(fwd.logits)
            .to_f64_vec()
            .chunks(c)
            .map(<[f64]>::to_vec)
            .collect())
    }
}
