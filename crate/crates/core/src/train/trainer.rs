//! Epoch loop over sampled relationship instances.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::optim::{adam_step, lr_schedule, AdamConfig, AdamState};
use crate::autodiff::Tape;
use crate::backbone::ImageCanvas;
use crate::data::{sample_training_pairs, Dataset, Mode, Split};
use crate::error::{Error, Result};
use crate::mask_attention::MaskLossKind;
use crate::model::{Model, Query, Scene, Variant};
use crate::seeding::{derive_seed, rng_for};
use crate::spatial::Fusion;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// `[train]` section of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub spatial: bool,
    pub mask_attention: bool,
    pub mask_loss: MaskLossKind,
    pub fusion: Fusion,
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup: 100,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            spatial: true,
            mask_attention: true,
            mask_loss: MaskLossKind::Mse,
            fusion: Fusion::Concat,
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a finite non-negative number, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        Variant {
            spatial: self.spatial,
            mask_attention: self.mask_attention,
            fusion: self.fusion,
            mask_loss: self.mask_loss,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_cls: f64,
    pub loss_mask: f64,
    pub loss_total: f64,
}

/// A relationship instance with its classification target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Instance {
    pub image_id: u64,
    pub subject: usize,
    pub object: usize,
    /// Predicate index in the manifest list (triplet mode only).
    pub predicate: Option<usize>,
    pub target: usize,
}

/// Training instances of one epoch. Images are visited in a seeded order
/// and each image's instances stay contiguous.
pub fn epoch_instances(dataset: &Dataset, seed: u64, epoch: usize) -> Result<Vec<Instance>> {
    let mut images = dataset.split(Split::Train);
    images.shuffle(&mut rng_for(seed, "order", epoch as u64));
    let preds = &dataset.manifest.predicates;
    let mut out = Vec::new();
    for r in images {
        match dataset.mode() {
            Mode::DoubletVrd => {
                let s = derive_seed(seed, &format!("sample/{epoch}"), r.image_id);
                for p in sample_training_pairs(r, preds, s)? {
                    out.push(Instance {
                        image_id: r.image_id,
                        subject: p.subject,
                        object: p.object,
                        predicate: None,
                        target: p.predicate,
                    });
                }
            }
            Mode::TripletBinary => {
                for rel in &r.relations {
                    out.push(Instance {
                        image_id: r.image_id,
                        subject: rel.s,
                        object: rel.o,
                        predicate: dataset.predicate_index(&rel.p),
                        target: usize::from(rel.truth.unwrap_or(false)),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Scenes and queries for a slice of instances; scenes in first-use order.
pub fn assemble<'a>(
    dataset: &'a Dataset,
    canvases: &'a HashMap<u64, ImageCanvas>,
    batch: &[Instance],
) -> Result<(Vec<Scene<'a>>, Vec<Query<'a>>)> {
    let mut scenes: Vec<Scene<'a>> = Vec::new();
    let mut slot: HashMap<u64, usize> = HashMap::new();
    let mut queries = Vec::with_capacity(batch.len());
    for inst in batch {
        let scene = match slot.get(&inst.image_id) {
            Some(&i) => i,
            None => {
                let record = dataset
                    .record(inst.image_id)
                    .ok_or_else(|| Error::invalid("assemble", format!("unknown image {}", inst.image_id)))?;
                let canvas = canvases
                    .get(&inst.image_id)
                    .ok_or_else(|| Error::invalid("assemble", format!("image {} was not rendered", inst.image_id)))?;
                scenes.push(Scene { record, canvas });
                slot.insert(inst.image_id, scenes.len() - 1);
                scenes.len() - 1
            }
        };
        queries.push(Query {
            scene,
            subject: inst.subject,
            object: inst.object,
            predicate: inst.predicate.map(|p| dataset.manifest.predicates[p].as_str()),
        });
    }
    Ok((scenes, queries))
}

/// Where `fit` writes its log and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct FitOutput {
    pub dir: Option<PathBuf>,
    /// Stored verbatim in every checkpoint.
    pub config_echo: serde_json::Value,
}

pub struct FitReport {
    pub log: Vec<StepRecord>,
    pub optimizer: AdamState<f32>,
}

fn check_compatible(model: &Model<f32>, dataset: &Dataset) -> Result<()> {
    if model.mode() != dataset.mode() {
        return Err(Error::Config(format!(
            "model is in {} mode but the dataset is {}",
            model.mode(),
            dataset.mode()
        )));
    }
    if model.mode() == Mode::DoubletVrd && model.arch.num_classes != dataset.manifest.predicates.len() {
        return Err(Error::Config(format!(
            "model has {} classes but the dataset has {} predicates",
            model.arch.num_classes,
            dataset.manifest.predicates.len()
        )));
    }
    Ok(())
}

/// Trains `model` in place. Writes the step log and a checkpoint after
/// every epoch when an output directory is given.
pub fn fit(
    model: &mut Model<f32>,
    dataset: &Dataset,
    canvases: &HashMap<u64, ImageCanvas>,
    cfg: &TrainConfig,
    output: &FitOutput,
) -> Result<FitReport> {
    cfg.validate()?;
    check_compatible(model, dataset)?;
    if cfg.freeze_backbone {
        model.freeze_backbone();
    }
    let mut log_file = match &output.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };
    let adam = cfg.adam();
    let mut state = AdamState::new(&model.store);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let instances = epoch_instances(dataset, cfg.seed, epoch)?;
        for batch in instances.chunks(cfg.batch_size) {
            let (scenes, queries) = assemble(dataset, canvases, batch)?;
            let targets: Vec<usize> = batch.iter().map(|i| i.target).collect();
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &scenes, &queries)?;
            let losses = model.loss(&mut tape, &scenes, &queries, &fwd, &targets)?;
            let grads = tape.backward(losses.total)?;
            tape.accumulate_param_grads(&grads, &mut model.store);
            let lr = lr_schedule(state.t + 1, cfg.lr, cfg.warmup);
            adam_step(&mut model.store, &mut state, lr, &adam)?;
            model.store.zero_grads();
            let scalar = |v| tape.value(v).item().into();
            let record = StepRecord {
                step: state.t,
                epoch,
                lr,
                loss_cls: scalar(losses.classification),
                loss_mask: losses.mask.map_or(0.0, scalar),
                loss_total: scalar(losses.total),
            };
            if let Some((path, f)) = log_file.as_mut() {
                let line = serde_json::to_string(&record).map_err(|e| Error::json(&*path, e))?;
                writeln!(f, "{line}").map_err(|e| Error::io(&*path, e))?;
            }
            log.push(record);
        }
        if let Some(dir) = &output.dir {
            save(dir, model, &state, dataset, &output.config_echo)?;
        }
    }
    Ok(FitReport { log, optimizer: state })
}

fn save(
    dir: &Path,
    model: &Model<f32>,
    state: &AdamState<f32>,
    dataset: &Dataset,
    echo: &serde_json::Value,
) -> Result<()> {
    save_checkpoint(
        &dir.join(CHECKPOINT_DIR),
        model,
        Some(state),
        &dataset.manifest.predicates,
        &dataset.manifest.classes,
        echo,
    )
}
