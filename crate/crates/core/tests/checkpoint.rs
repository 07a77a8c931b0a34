mod common;

use std::fs;

use common::{params_bits, quick_train, tiny_dataset, tiny_dims, tiny_model};
use vrel_core::data::Mode;
use vrel_core::error::CheckpointError;
use vrel_core::model::{Model, Query, Scene, Variant};
use vrel_core::train::checkpoint::{MANIFEST_FILE, OPTIMIZER_FILE, PARAMS_FILE};
use vrel_core::train::{
    fit, load_checkpoint, load_model, restore_optimizer, restore_params, save_checkpoint, FitOutput,
};
use vrel_core::Error;

fn trained(dir: &std::path::Path) -> (Model<f32>, vrel_core::train::AdamState<f32>, vrel_core::data::Dataset) {
    let (ds, canvases) = tiny_dataset(Mode::TripletBinary, 4, 9);
    let mut model = tiny_model(&ds, Variant::default(), 2);
    let report = fit(&mut model, &ds, &canvases, &quick_train(1, 2), &FitOutput::default()).unwrap();
    save_checkpoint(
        dir,
        &model,
        Some(&report.optimizer),
        &ds.manifest.predicates,
        &ds.manifest.classes,
        &serde_json::json!({"lr": 0.001}),
    )
    .unwrap();
    (model, report.optimizer, ds)
}

fn kind(e: Error) -> CheckpointError {
    match e {
        Error::Checkpoint(c) => c,
        other => panic!("expected a checkpoint error, got {other}"),
    }
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (model, opt, ds) = trained(dir.path());
    let (loaded, ckpt) = load_model(dir.path()).unwrap();
    assert_eq!(params_bits(&model), params_bits(&loaded));
    assert_eq!(loaded.arch, model.arch);
    assert_eq!(loaded.vocab, model.vocab);
    assert_eq!(ckpt.manifest.predicates, ds.manifest.predicates);
    assert_eq!(ckpt.manifest.config["lr"], 0.001);
    let restored = restore_optimizer(&loaded.store, &ckpt).unwrap();
    assert_eq!(restored.t, opt.t);
    let bits = |m: &Vec<Vec<f32>>| {
        m.iter()
            .map(|t| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&restored.m), bits(&opt.m));
    assert_eq!(bits(&restored.v), bits(&opt.v));

    let r = &ds.records[0];
    let canvas = vrel_core::data::rasterize(r, &ds.manifest.classes, ds.manifest.seed.unwrap_or(0)).unwrap();
    let scenes = [Scene {
        record: r,
        canvas: &canvas,
    }];
    let q = [Query {
        scene: 0,
        subject: r.relations[0].s,
        object: r.relations[0].o,
        predicate: Some(&r.relations[0].p),
    }];
    assert_eq!(
        model.predict(&scenes, &q).unwrap(),
        loaded.predict(&scenes, &q).unwrap()
    );

    let again = tempfile::tempdir().unwrap();
    save_checkpoint(
        again.path(),
        &loaded,
        Some(&restored),
        &ckpt.manifest.predicates,
        &ckpt.manifest.classes,
        &ckpt.manifest.config,
    )
    .unwrap();
    for f in [PARAMS_FILE, OPTIMIZER_FILE, MANIFEST_FILE] {
        assert_eq!(
            fs::read(dir.path().join(f)).unwrap(),
            fs::read(again.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

fn edit_manifest(dir: &std::path::Path, f: impl FnOnce(&mut serde_json::Value)) {
    let path = dir.join(MANIFEST_FILE);
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    f(&mut v);
    fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
}

#[test]
fn version_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    edit_manifest(dir.path(), |v| v["version"] = 99.into());
    let e = kind(load_checkpoint(dir.path()).unwrap_err());
    assert!(matches!(e, CheckpointError::VersionMismatch { found: 99, expected: 1 }));
}

#[test]
fn truncated_params_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let path = dir.path().join(PARAMS_FILE);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(
        kind(load_checkpoint(dir.path()).unwrap_err()),
        CheckpointError::Truncated { .. }
    ));
}

#[test]
fn renamed_entry_is_unexpected() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    edit_manifest(dir.path(), |v| v["entries"][0]["name"] = "backbone.extra".into());
    let e = kind(load_model(dir.path()).unwrap_err());
    assert!(matches!(e, CheckpointError::UnexpectedParameter(n) if n == "backbone.extra"));
}

#[test]
fn unsupported_dtype_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    edit_manifest(dir.path(), |v| v["entries"][1]["dtype"] = "f16".into());
    assert!(matches!(
        kind(load_checkpoint(dir.path()).unwrap_err()),
        CheckpointError::Dtype(_)
    ));
}

#[test]
fn mismatched_architecture_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (model, _, _) = trained(dir.path());
    let ckpt = load_checkpoint(dir.path()).unwrap();

    let mut wider = model.arch;
    wider.dims.d_s *= 2;
    let mut other = Model::<f32>::new(wider, model.vocab.clone(), 0).unwrap();
    assert!(matches!(
        kind(restore_params(&mut other.store, &ckpt).unwrap_err()),
        CheckpointError::ShapeMismatch { .. }
    ));

    let mut partial = ckpt.clone();
    let last = partial.manifest.entries.len() - 1;
    partial.manifest.entries.remove(last);
    partial.tensors.remove(last);
    let mut same = Model::<f32>::new(model.arch, model.vocab.clone(), 0).unwrap();
    assert!(matches!(
        kind(restore_params(&mut same.store, &partial).unwrap_err()),
        CheckpointError::MissingParameter(_)
    ));
    assert_eq!(tiny_dims(), model.arch.dims);
}

#[test]
fn missing_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_checkpoint(&dir.path().join("nope")),
        Err(Error::Io { .. })
    ));
}
