//! The full gradient-check suite: every differentiable op, each module and
//! the end-to-end loss.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_params, grad_check, CheckOptions, GradCheckReport};
use crate::autodiff::kernels::bilinear_plan;
use crate::autodiff::{AlgebraKind, ConvKind, Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, BoundingBox, ImageCanvas};
use crate::data::{ImageRecord, Mode, ObjectInstance};
use crate::encoder::Encoder;
use crate::error::Result;
use crate::mask_attention::{ground_truth_mask, mask_loss, term_word_embedding, MaskAttention, MaskLossKind};
use crate::model::{Architecture, Model, ModelDims, Query, Scene, Variant};
use crate::params::ParamStore;
use crate::seeding::{derive_seed, rng_for};
use crate::sequence::Vocabulary;
use crate::spatial::{fuse, Classifier, Fusion, SpatialModule};
use crate::tensor::Tensor;

/// Model widths used by the suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteDims {
    Small,
    Default,
}

impl std::str::FromStr for SuiteDims {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "small" => Ok(SuiteDims::Small),
            "default" => Ok(SuiteDims::Default),
            _ => Err(format!("unknown dims '{s}' (expected small or default)")),
        }
    }
}

impl SuiteDims {
    pub fn model(self) -> ModelDims {
        match self {
            SuiteDims::Small => ModelDims {
                d: 16,
                layers: 1,
                heads: 2,
                d_ff: 32,
                d_s: 8,
                d_c: 8,
                d_w: 5,
                d_h: 5,
                backbone_hidden: 4,
                p_max: 16,
                cls_hidden: 12,
            },
            SuiteDims::Default => ModelDims {
                d: 32,
                layers: 2,
                heads: 4,
                d_ff: 64,
                d_s: 16,
                d_c: 16,
                d_w: 7,
                d_h: 7,
                backbone_hidden: 8,
                p_max: 16,
                cls_hidden: 24,
            },
        }
    }
}

fn randn<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    Tensor::new(shape.to_vec(), v).expect("sized")
}

/// Values bounded away from zero, so kinks are never crossed.
fn away_from_zero<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    randn(rng, shape, 1.0).map(|x| if x.abs() < 0.1 { x.signum() * 0.1 + x } else { x })
}

/// `Σ out ∘ R` with a fixed random `R`, so every output entry matters.
fn weighted(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = randn(&mut rng_for(seed, "weights", 0), &shape, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

type OpCase = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
);

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = rng_for(seed, "op-inputs", 0);
    let r = &mut rng;
    let mut cases: Vec<OpCase> = Vec::new();
    let w = move |tape: &mut Tape<f64>, v: Var| weighted(tape, v, seed);

    cases.push((
        "matmul",
        vec![randn(r, &[3, 4], 1.0), randn(r, &[4, 5], 1.0)],
        Box::new(move |t, x| {
            let y = t.matmul(x[0], x[1])?;
            w(t, y)
        }),
    ));
    cases.push((
        "matmul_transposed",
        vec![randn(r, &[4, 3], 1.0), randn(r, &[5, 4], 1.0)],
        Box::new(move |t, x| {
            let y = t.matmul_t(x[0], x[1], true, true)?;
            w(t, y)
        }),
    ));
    cases.push((
        "add_broadcast",
        vec![randn(r, &[3, 4], 1.0), randn(r, &[4], 1.0)],
        Box::new(move |t, x| {
            let y = t.add(x[0], x[1])?;
            w(t, y)
        }),
    ));
    cases.push((
        "sub",
        vec![randn(r, &[2, 3, 2], 1.0), randn(r, &[2, 3, 2], 1.0)],
        Box::new(move |t, x| {
            let y = t.sub(x[0], x[1])?;
            w(t, y)
        }),
    ));
    cases.push((
        "hadamard_broadcast",
        vec![randn(r, &[3, 2, 2], 1.0), randn(r, &[3, 1, 1], 1.0)],
        Box::new(move |t, x| {
            let y = t.mul(x[0], x[1])?;
            w(t, y)
        }),
    ));
    cases.push((
        "scale_sum_mean",
        vec![randn(r, &[2, 5], 1.0)],
        Box::new(move |t, x| {
            let y = t.scale(x[0], 0.7);
            let s = t.sum(y);
            let z = t.mul(x[0], x[0])?;
            let m = t.mean(z);
            t.add(s, m)
        }),
    ));
    cases.push((
        "mean_pool",
        vec![randn(r, &[3, 2, 4], 1.0)],
        Box::new(move |t, x| {
            let y = t.mean_pool(x[0])?;
            w(t, y)
        }),
    ));
    cases.push((
        "sum_rows",
        vec![randn(r, &[4, 3], 1.0)],
        Box::new(move |t, x| {
            let y = t.sum_rows(x[0])?;
            w(t, y)
        }),
    ));
    cases.push((
        "concat",
        vec![randn(r, &[2, 3], 1.0), randn(r, &[2, 2], 1.0), randn(r, &[1, 5], 1.0)],
        Box::new(move |t, x| {
            let a = t.concat(&[x[0], x[1]], 1)?;
            let b = t.concat(&[a, x[2]], 0)?;
            w(t, b)
        }),
    ));
    cases.push((
        "reshape_transpose",
        vec![randn(r, &[2, 6], 1.0)],
        Box::new(move |t, x| {
            let a = t.reshape(x[0], &[3, 4])?;
            let b = t.transpose(a)?;
            w(t, b)
        }),
    ));
    cases.push((
        "gather_rows",
        vec![randn(r, &[4, 3], 1.0)],
        Box::new(move |t, x| {
            let y = t.gather_rows(x[0], &[2, 0, 2, 3])?;
            w(t, y)
        }),
    ));
    cases.push((
        "relu",
        vec![away_from_zero(r, &[3, 4])],
        Box::new(move |t, x| {
            let y = t.relu(x[0]);
            w(t, y)
        }),
    ));
    cases.push((
        "gelu",
        vec![randn(r, &[3, 4], 1.5)],
        Box::new(move |t, x| {
            let y = t.gelu(x[0]);
            w(t, y)
        }),
    ));
    cases.push((
        "softmax_rows",
        vec![randn(r, &[3, 5], 1.0)],
        Box::new(move |t, x| {
            let y = t.softmax(x[0], 1)?;
            w(t, y)
        }),
    ));
    cases.push((
        "softmax_columns",
        vec![randn(r, &[4, 3], 1.0)],
        Box::new(move |t, x| {
            let y = t.softmax(x[0], 0)?;
            w(t, y)
        }),
    ));
    cases.push((
        "layer_norm",
        vec![randn(r, &[3, 6], 1.0), randn(r, &[6], 1.0), randn(r, &[6], 1.0)],
        Box::new(move |t, x| {
            let y = t.layer_norm(x[0], x[1], x[2])?;
            w(t, y)
        }),
    ));
    cases.push((
        "conv1x1",
        vec![
            randn(r, &[3, 4, 4], 1.0),
            randn(r, &[2, 3, 1, 1], 1.0),
            randn(r, &[2], 1.0),
        ],
        Box::new(move |t, x| {
            let y = t.conv2d(x[0], x[1], x[2], ConvKind::OneByOne)?;
            w(t, y)
        }),
    ));
    cases.push((
        "conv3x3",
        vec![
            randn(r, &[2, 5, 4], 1.0),
            randn(r, &[3, 2, 3, 3], 1.0),
            randn(r, &[3], 1.0),
        ],
        Box::new(move |t, x| {
            let y = t.conv2d(x[0], x[1], x[2], ConvKind::ThreeByThreePad1)?;
            w(t, y)
        }),
    ));
    cases.push((
        "avg_pool2",
        vec![randn(r, &[2, 4, 6], 1.0)],
        Box::new(move |t, x| {
            let y = t.avg_pool2(x[0])?;
            w(t, y)
        }),
    ));
    cases.push((
        "bilinear",
        vec![randn(r, &[2, 6, 7], 1.0)],
        Box::new(move |t, x| {
            let plan = bilinear_plan(6, 7, [0.7, 1.3, 5.9, 4.2], 3, 4);
            let y = t.bilinear(x[0], Arc::new(plan), 3, 4)?;
            w(t, y)
        }),
    ));
    cases.push((
        "min_max_norm",
        vec![randn(r, &[1, 3, 4], 1.0)],
        Box::new(move |t, x| {
            let y = t.min_max_norm(x[0]);
            w(t, y)
        }),
    ));
    cases.push((
        "span_attention",
        vec![randn(r, &[7, 4], 1.0), randn(r, &[7, 4], 1.0), randn(r, &[7, 4], 1.0)],
        Box::new(move |t, x| {
            let y = t.span_attention(x[0], x[1], x[2], &[(0, 3), (3, 4)], 2)?;
            w(t, y)
        }),
    ));
    cases.push((
        "cross_entropy",
        vec![randn(r, &[3, 4], 1.0)],
        Box::new(move |t, x| t.cross_entropy(x[0], &[1, 3, 0])),
    ));
    let target_mse = randn(r, &[2, 3], 1.0).into_data();
    cases.push((
        "mse",
        vec![randn(r, &[2, 3], 1.0)],
        Box::new(move |t, x| t.mse(x[0], &target_mse)),
    ));
    let target_bce = vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
    cases.push((
        "bce",
        vec![Tensor::from_f64(&[2, 3], &[0.2, 0.7, 0.9, 0.4, 0.55, 0.1]).expect("sized")],
        Box::new(move |t, x| t.bce(x[0], &target_bce)),
    ));
    cases.push((
        "algebra_mean_pool",
        vec![randn(r, &[4, 3, 3], 1.0)],
        Box::new(move |t, x| {
            let y = t.algebra(x[0], None, AlgebraKind::MeanPool)?;
            w(t, y)
        }),
    ));
    cases
}

const KINK_MARGIN: f64 = 1e-4;
const MAX_ATTEMPTS: u64 = 64;

/// Draws setups from successive seeds until the evaluation point lies at
/// least [`KINK_MARGIN`] from every ReLU kink and min/max tie, then checks
/// it. Finite differences straddling a kink measure nothing useful.
fn check_conditioned<S, F>(name: &str, opts: &CheckOptions, setup: S) -> Result<GradCheckReport>
where
    S: Fn(u64) -> Result<(ParamStore<f64>, F)>,
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut attempt = 0;
    loop {
        let (mut store, f) = setup(derive_seed(opts.seed, name, attempt))?;
        let mut tape = Tape::new();
        f(&mut tape, &store)?;
        attempt += 1;
        if tape.kink_margin() >= KINK_MARGIN || attempt == MAX_ATTEMPTS {
            return check_params(name, &mut store, f, opts);
        }
    }
}

fn encoder_check(dims: &ModelDims, opts: &CheckOptions) -> Result<GradCheckReport> {
    let cfg = dims.encoder();
    check_conditioned("encoder", opts, |seed| {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "init", 0);
        let enc = Encoder::register(&mut store, &mut rng, cfg)?;
        condition_point(&mut store);
        let x = store.add("input", randn(&mut rng, &[9, cfg.d], 1.0), false)?;
        Ok((store, move |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
            let xv = tape.param(store, x);
            let out = enc.encode(tape, store, xv, Some(&[(0, 5), (5, 4)]))?;
            weighted(tape, out.output, seed)
        }))
    })
}

fn backbone_roi_check(dims: &ModelDims, opts: &CheckOptions) -> Result<GradCheckReport> {
    let cfg = BackboneConfig {
        hidden: dims.backbone_hidden,
        d_c: dims.d_c,
        d: dims.d,
        d_w: dims.d_w,
        d_h: dims.d_h,
    };
    let boxes = [
        BoundingBox::new(3.0, 5.0, 17.0, 20.0),
        BoundingBox::new(10.0, 2.5, 30.0, 29.0),
    ];
    check_conditioned("backbone_roi", opts, |seed| {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "init", 0);
        let bb = Backbone::register(&mut store, &mut rng, cfg)?;
        let image = store.add("image", randn(&mut rng, &[3, 32, 32], 0.5).map(|v| v + 0.5), false)?;
        Ok((store, move |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
            let im = tape.param(store, image);
            let map = bb.extract_feature_map(tape, store, im)?;
            let roi = bb.roi_feature(tape, store, map, &boxes[0], 32.0, 32.0)?;
            let pooled = bb.pooled_regions(tape, store, map, &boxes, 32.0, 32.0)?;
            let a = weighted(tape, roi.patch, seed)?;
            let b = weighted(tape, roi.pooled, seed + 1)?;
            let c = weighted(tape, pooled, seed + 2)?;
            let ab = tape.add(a, b)?;
            tape.add(ab, c)
        }))
    })
}

fn mask_attention_check(dims: &ModelDims, opts: &CheckOptions, kind: MaskLossKind) -> Result<GradCheckReport> {
    let d = *dims;
    let gt: Vec<f64> = ground_truth_mask(&BoundingBox::new(4.0, 2.0, 20.0, 14.0), 32.0, 32.0, d.d_w, d.d_h)?;
    let name = match kind {
        MaskLossKind::Mse => "mask_attention_mse",
        MaskLossKind::Bce => "mask_attention_bce",
    };
    check_conditioned(name, opts, |seed| {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "init", 0);
        let mam = MaskAttention::register(&mut store, &mut rng, d.d_c, d.d)?;
        let patch = store.add("patch", randn(&mut rng, &[d.d_c, d.d_h, d.d_w], 1.0), false)?;
        let table = store.add("token_table", randn(&mut rng, &[6, d.d], 0.5), false)?;
        let gt = gt.clone();
        Ok((store, move |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
            let p = tape.param(store, patch);
            let t = tape.param(store, table);
            let word = term_word_embedding(tape, t, &[2, 4])?;
            let m = mam.compute_attention_mask(tape, store, p, word)?;
            let flat = tape.reshape(m, &[1, d.d_h * d.d_w])?;
            mask_loss(tape, flat, &gt, kind)
        }))
    })
}

fn spatial_check(dims: &ModelDims, opts: &CheckOptions, fusion: Fusion) -> Result<GradCheckReport> {
    let d = *dims;
    let h_width = match fusion {
        Fusion::Concat => d.d,
        Fusion::Alpha(_) => d.d_s,
    };
    let cs = Tensor::from_f64(&[3, 4], &[0.1, 0.2, 0.4, 0.5, 0.0, 0.0, 1.0, 1.0, 0.3, 0.6, 0.5, 0.9])?;
    let co = Tensor::from_f64(
        &[3, 4],
        &[0.5, 0.1, 0.9, 0.3, 0.2, 0.2, 0.3, 0.35, 0.05, 0.1, 0.95, 0.5],
    )?;
    let name = match fusion {
        Fusion::Concat => "spatial_fusion_concat",
        Fusion::Alpha(_) => "spatial_fusion_alpha",
    };
    check_conditioned(name, opts, |seed| {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "init", 0);
        let sp = SpatialModule::register(&mut store, &mut rng, d.d_s)?;
        let cls = Classifier::register(
            &mut store,
            &mut rng,
            fusion.output_dim(h_width, d.d_s),
            d.classifier_hidden(),
            4,
        )?;
        let h = store.add("answer_state", randn(&mut rng, &[3, h_width], 1.0), false)?;
        let (cs, co) = (cs.clone(), co.clone());
        Ok((store, move |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
            let a = tape.constant(cs.clone());
            let b = tape.constant(co.clone());
            let c = sp.spatial_encode(tape, store, a, b)?;
            let hv = tape.param(store, h);
            let f = fuse(tape, c, hv, fusion)?;
            let logits = cls.classify(tape, store, f)?;
            tape.cross_entropy(logits, &[0, 3, 2])
        }))
    })
}

/// A tiny hand-placed scene with single-word labels.
fn e2e_scene(seed: u64) -> Result<(ImageRecord, ImageCanvas)> {
    let object = |cls: &str, b: [f64; 4], depth: f64| ObjectInstance {
        cls: cls.into(),
        bbox: BoundingBox::new(b[0], b[1], b[2], b[3]),
        depth,
    };
    let record = ImageRecord {
        image_id: 0,
        width: 32,
        height: 32,
        objects: vec![
            object("cup", [4.0, 3.0, 14.0, 12.0], 0.3),
            object("table", [2.0, 13.0, 30.0, 28.0], 0.6),
            object("lamp", [18.0, 2.0, 29.0, 11.0], 0.4),
        ],
        relations: Vec::new(),
    };
    let mut rng = rng_for(seed, "e2e-pixels", 0);
    let pixels: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.random::<f32>()).collect();
    Ok((record, ImageCanvas::new(32, 32, pixels)?))
}

/// Rescales embedding tables to unit entries and encoder matrices to
/// `1/sqrt(fan_in)`. At the small initial scale the first layer's attention
/// is almost uniform and its query/key gradients sink to the size of
/// finite-difference noise.
fn condition_point(store: &mut ParamStore<f64>) {
    for p in store.iter_mut() {
        let target = if p.name.starts_with("embeddings.") {
            1.0
        } else if p.name.starts_with("encoder.") && p.tensor.shape().len() == 2 {
            1.0 / (p.tensor.shape()[0] as f64).sqrt()
        } else {
            continue;
        };
        let data = p.tensor.data();
        let rms = (data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64).sqrt();
        if rms > 0.0 {
            p.tensor = p.tensor.map(|v| v * target / rms);
        }
    }
}

fn e2e_check(dims: &ModelDims, opts: &CheckOptions, mode: Mode) -> Result<GradCheckReport> {
    let d = *dims;
    let classes = match mode {
        Mode::DoubletVrd => 3,
        Mode::TripletBinary => 2,
    };
    let name = match mode {
        Mode::DoubletVrd => "end_to_end_doublet",
        Mode::TripletBinary => "end_to_end_triplet",
    };
    check_conditioned(name, opts, |seed| {
        let (record, canvas) = e2e_scene(seed)?;
        let vocab = Vocabulary::from_labels(["cup", "table", "lamp", "on", "under"])?;
        let arch = Architecture {
            dims: d,
            variant: Variant {
                spatial: true,
                mask_attention: true,
                fusion: Fusion::Concat,
                mask_loss: MaskLossKind::Mse,
            },
            mode,
            vocab_size: vocab.len(),
            num_classes: classes,
        };
        let mut model: Model<f64> = Model::new(arch, vocab, seed)?;
        condition_point(&mut model.store);
        let store = model.store.clone();
        Ok((store, move |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
            let scenes = [Scene {
                record: &record,
                canvas: &canvas,
            }];
            let predicate = (mode == Mode::TripletBinary).then_some("on");
            let queries = [
                Query {
                    scene: 0,
                    subject: 0,
                    object: 1,
                    predicate,
                },
                Query {
                    scene: 0,
                    subject: 2,
                    object: 0,
                    predicate,
                },
            ];
            let fwd = model.forward_with(store, tape, &scenes, &queries)?;
            Ok(model.loss(tape, &scenes, &queries, &fwd, &[1, 0])?.total)
        }))
    })
}

/// Runs every check. Module and end-to-end checks sample at most
/// `opts.max_entries` entries per parameter (all entries when `None`).
/// `fault` names one check whose analytic gradient is deliberately skewed,
/// a negative control for the suite itself.
pub fn run_suite(dims: SuiteDims, opts: &CheckOptions, fault: Option<&str>) -> Result<Vec<GradCheckReport>> {
    let for_check = |name: &str, base: &CheckOptions| {
        let mut o = base.clone();
        if fault == Some(name) {
            o.corrupt_analytic = Some(FAULT_SCALE);
        }
        o
    };
    let op_opts = CheckOptions {
        max_entries: None,
        ..opts.clone()
    };
    let mut reports = Vec::new();
    for (name, inputs, f) in op_cases(opts.seed) {
        reports.push(grad_check(name, f, &inputs, &for_check(name, &op_opts))?);
    }
    let d = dims.model();
    reports.push(encoder_check(&d, &for_check("encoder", opts))?);
    reports.push(backbone_roi_check(&d, &for_check("backbone_roi", opts))?);
    reports.push(mask_attention_check(
        &d,
        &for_check("mask_attention_mse", opts),
        MaskLossKind::Mse,
    )?);
    reports.push(mask_attention_check(
        &d,
        &for_check("mask_attention_bce", opts),
        MaskLossKind::Bce,
    )?);
    reports.push(spatial_check(
        &d,
        &for_check("spatial_fusion_concat", opts),
        Fusion::Concat,
    )?);
    reports.push(spatial_check(
        &d,
        &for_check("spatial_fusion_alpha", opts),
        Fusion::Alpha(0.3),
    )?);
    reports.push(e2e_check(&d, &for_check("end_to_end_doublet", opts), Mode::DoubletVrd)?);
    reports.push(e2e_check(
        &d,
        &for_check("end_to_end_triplet", opts),
        Mode::TripletBinary,
    )?);
    if let Some(f) = fault {
        if !reports.iter().any(|r| r.name == f) {
            return Err(crate::error::Error::invalid(
                "run_suite",
                format!("no check named '{f}'"),
            ));
        }
    }
    Ok(reports)
}

const FAULT_SCALE: f64 = 1.01;
