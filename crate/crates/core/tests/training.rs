mod common;

use std::collections::BTreeMap;

use common::{params_bits, quick_train, tiny_dataset, tiny_model};
use vrel_core::data::Mode;
use vrel_core::model::{frozen_backbone_counts, Architecture, ModelDims, Variant, BACKBONE_PREFIXES};
use vrel_core::train::trainer::{CHECKPOINT_DIR, LOG_FILE};
use vrel_core::train::{fit, lr_schedule, FitOutput, TrainConfig};

#[test]
fn frozen_parameters_are_bit_identical() {
    let (ds, canvases) = tiny_dataset(Mode::DoubletVrd, 6, 1);
    let mut model = tiny_model(&ds, Variant::default(), 0);
    let before = params_bits(&model);
    let cfg = TrainConfig {
        freeze_backbone: true,
        ..quick_train(2, 0)
    };
    fit(&mut model, &ds, &canvases, &cfg, &FitOutput::default()).unwrap();
    let after = params_bits(&model);
    let mut frozen = 0;
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        if BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p)) {
            assert_eq!(a, b, "{name} moved while frozen");
            frozen += 1;
        } else if name.ends_with("weight") || name.contains(".w") {
            assert_ne!(a, b, "{name} did not train");
        }
    }
    assert!(frozen > 10);
    assert!(model.store.trainable_count() < model.store.total_count());
}

#[test]
fn training_is_deterministic() {
    let (ds, canvases) = tiny_dataset(Mode::TripletBinary, 5, 2);
    let run = |seed| {
        let mut m = tiny_model(&ds, Variant::default(), seed);
        let report = fit(&mut m, &ds, &canvases, &quick_train(1, seed), &FitOutput::default()).unwrap();
        (
            params_bits(&m),
            report.log.iter().map(|r| r.loss_total.to_bits()).collect::<Vec<_>>(),
        )
    };
    let a = run(3);
    assert_eq!(a, run(3));
    assert_ne!(a.0, run(4).0);
}

#[test]
fn loss_decreases_on_a_tiny_set() {
    let (ds, canvases) = tiny_dataset(Mode::DoubletVrd, 4, 3);
    let mut model = tiny_model(&ds, Variant::default(), 1);
    let report = fit(&mut model, &ds, &canvases, &quick_train(12, 1), &FitOutput::default()).unwrap();
    let first: f64 = report.log[..3].iter().map(|r| r.loss_total).sum();
    let last: f64 = report.log[report.log.len() - 3..].iter().map(|r| r.loss_total).sum();
    assert!(last < first, "{first} -> {last}");
    assert!(report.log.iter().all(|r| r.loss_total.is_finite()));
}

#[test]
fn fit_writes_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, canvases) = tiny_dataset(Mode::DoubletVrd, 3, 4);
    let mut model = tiny_model(&ds, Variant::default(), 0);
    let report = fit(
        &mut model,
        &ds,
        &canvases,
        &quick_train(2, 0),
        &FitOutput {
            dir: Some(dir.path().to_path_buf()),
            config_echo: serde_json::json!({"note": "echo"}),
        },
    )
    .unwrap();
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), report.log.len());
    let steps: Vec<u64> = log
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps, (1..=report.log.len() as u64).collect::<Vec<_>>());
    assert!(dir.path().join(CHECKPOINT_DIR).join("manifest.json").exists());
    assert_eq!(report.log[0].lr, lr_schedule(1, 1e-3, 2));
}

#[test]
fn mode_mismatch_is_rejected() {
    let (doublet, _) = tiny_dataset(Mode::DoubletVrd, 2, 5);
    let (binary, canvases) = tiny_dataset(Mode::TripletBinary, 2, 5);
    let mut model = tiny_model(&doublet, Variant::default(), 0);
    assert!(fit(
        &mut model,
        &binary,
        &canvases,
        &quick_train(1, 0),
        &FitOutput::default()
    )
    .is_err());
}

#[test]
fn warmup_then_constant() {
    assert!((lr_schedule(1, 1e-3, 100) - 1e-5).abs() < 1e-15);
    assert!((lr_schedule(50, 1e-3, 100) - 5e-4).abs() < 1e-15);
    assert_eq!(lr_schedule(100, 1e-3, 100), 1e-3);
    assert_eq!(lr_schedule(5000, 1e-3, 100), 1e-3);
    assert_eq!(lr_schedule(1, 1e-3, 0), 1e-3);
}

#[test]
fn layout_matches_registered_parameters() {
    for mode in [Mode::DoubletVrd, Mode::TripletBinary] {
        let (ds, _) = tiny_dataset(mode, 2, 6);
        for variant in [
            Variant::default(),
            Variant {
                mask_attention: false,
                spatial: false,
                ..Variant::default()
            },
        ] {
            let m = tiny_model(&ds, variant, 0);
            let registered: BTreeMap<String, Vec<usize>> = m
                .store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.tensor.shape().to_vec()))
                .collect();
            let layout: BTreeMap<String, Vec<usize>> = m.arch.layout().into_iter().collect();
            assert_eq!(registered, layout);
            let (trainable, total) = frozen_backbone_counts(&m.arch.layout());
            let mut frozen_model = m.clone();
            frozen_model.freeze_backbone();
            assert_eq!(total, frozen_model.store.total_count());
            assert_eq!(trainable, frozen_model.store.trainable_count());
        }
    }
}

#[test]
fn reference_dims_freeze_most_parameters() {
    let arch = Architecture {
        dims: ModelDims::reference(),
        variant: Variant::default(),
        mode: Mode::DoubletVrd,
        vocab_size: 30,
        num_classes: 7,
    };
    let (trainable, total) = frozen_backbone_counts(&arch.layout());
    let fraction = trainable as f64 / total as f64;
    assert!(fraction < 0.10, "{fraction}");
    assert!(total > 80_000_000);
}
