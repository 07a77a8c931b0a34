use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use vrel::*;
use vrel_core::data::{generate_synthetic, render_dataset, save_dataset, Dataset, Mode, Split, SynthConfig};
use vrel_core::eval::evaluate_vrd;
use vrel_core::model::{Architecture, Model, ModelDims, Query, Scene, Variant};
use vrel_core::sequence::Vocabulary;
use vrel_core::train::{fit, save_checkpoint, FitOutput, TrainConfig};

fn dims() -> ModelDims {
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

/// Writes a small doublet dataset and a briefly trained checkpoint.
fn fixture(root: &Path) -> (PathBuf, PathBuf, Dataset, Model<f32>) {
    let mut cfg = SynthConfig::new(Mode::DoubletVrd, 6, 4);
    cfg.canvas = 64;
    cfg.min_side = 8;
    cfg.max_side = 24;
    cfg.max_objects = 4;
    let ds = generate_synthetic(&cfg).unwrap();
    let data = root.join("data");
    save_dataset(&data, &ds).unwrap();
    let vocab = Vocabulary::from_labels(ds.labels()).unwrap();
    let arch = Architecture::for_dataset(dims(), Variant::default(), &ds, vocab.len());
    let mut model = Model::<f32>::new(arch, vocab, 1).unwrap();
    let canvases = render_dataset(&ds).unwrap();
    let train = TrainConfig {
        epochs: 1,
        batch_size: 8,
        warmup: 2,
        ..TrainConfig::default()
    };
    fit(&mut model, &ds, &canvases, &train, &FitOutput::default()).unwrap();
    let ckpt = root.join("ckpt");
    save_checkpoint(
        &ckpt,
        &model,
        None,
        &ds.manifest.predicates,
        &ds.manifest.classes,
        &serde_json::Value::Null,
    )
    .unwrap();
    (data, ckpt, ds, model)
}

fn c(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = vrel_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_predict_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt, ds, model) = fixture(tmp.path());
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(vrel_model_load(c(&ckpt).as_ptr(), &mut m), VrelStatus::Ok);
        assert!(vrel_last_error().is_null());
        let mut d = ptr::null_mut();
        assert_eq!(vrel_dataset_load(c(&data).as_ptr(), &mut d), VrelStatus::Ok);
        assert_eq!(vrel_dataset_len(d), ds.records.len());

        let mut info = std::mem::zeroed::<VrelModelInfo>();
        assert_eq!(vrel_model_info(m, &mut info), VrelStatus::Ok);
        assert_eq!(info.mode, VrelMode::Doublet);
        assert_eq!(info.num_classes, ds.manifest.predicates.len());
        assert_eq!(info.total_params, model.store.total_count());
        assert_eq!((info.mask_width, info.mask_height), (5, 5));

        let record = ds.records.iter().find(|r| !r.relations.is_empty()).unwrap();
        let rel = &record.relations[0];
        let mut logits = vec![0.0; info.num_classes];
        let status = vrel_predict(
            m,
            d,
            record.image_id,
            rel.s,
            rel.o,
            ptr::null(),
            logits.as_mut_ptr(),
            logits.len(),
        );
        assert_eq!(status, VrelStatus::Ok);
        let canvas = vrel_core::data::rasterize(record, &ds.manifest.classes, ds.manifest.seed.unwrap_or(0)).unwrap();
        let want = model
            .predict(
                &[Scene {
                    record,
                    canvas: &canvas,
                }],
                &[Query {
                    scene: 0,
                    subject: rel.s,
                    object: rel.o,
                    predicate: None,
                }],
            )
            .unwrap();
        assert_eq!(logits, want[0]);

        let mut score = -1.0;
        assert_eq!(vrel_evaluate(m, d, 1, 50, &mut score), VrelStatus::Ok);
        let canvases = render_dataset(&ds).unwrap();
        let (r, _) = evaluate_vrd(&model, &ds, &canvases, Split::Test, &[50]).unwrap();
        assert_eq!(score, r[0].recall);

        vrel_dataset_free(d);
        vrel_model_free(m);
    }
}

#[test]
fn errors_set_status_and_message() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt, ds, _) = fixture(tmp.path());
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(vrel_model_load(ptr::null(), &mut m), VrelStatus::NullPointer);
        assert!(last_error().contains("path"));
        assert_eq!(
            vrel_model_load(c(&tmp.path().join("none")).as_ptr(), &mut m),
            VrelStatus::Io
        );
        assert!(m.is_null());

        std::fs::write(ckpt.join("manifest.json"), "{}").unwrap();
        assert_ne!(vrel_model_load(c(&ckpt).as_ptr(), &mut m), VrelStatus::Ok);

        let (_, ckpt, _, _) = fixture(&tmp.path().join("again"));
        assert_eq!(vrel_model_load(c(&ckpt).as_ptr(), &mut m), VrelStatus::Ok);
        let mut d = ptr::null_mut();
        assert_eq!(vrel_dataset_load(c(&data).as_ptr(), &mut d), VrelStatus::Ok);
        let mut one = [0.0f64];
        let id = ds.records[0].image_id;
        assert_eq!(
            vrel_predict(m, d, id, 0, 1, ptr::null(), one.as_mut_ptr(), 1),
            VrelStatus::BufferTooSmall
        );
        let mut buf = [0.0f64; 16];
        assert_eq!(
            vrel_predict(m, d, 987_654, 0, 1, ptr::null(), buf.as_mut_ptr(), buf.len()),
            VrelStatus::InvalidArgument
        );
        assert!(last_error().contains("987654"));
        assert_eq!(
            vrel_predict(m, d, id, 0, 99, ptr::null(), buf.as_mut_ptr(), buf.len()),
            VrelStatus::InvalidArgument
        );
        let mut score = 0.0;
        assert_eq!(vrel_evaluate(m, d, 7, 50, &mut score), VrelStatus::InvalidArgument);
        assert_eq!(
            vrel_evaluate(ptr::null(), d, 1, 50, &mut score),
            VrelStatus::NullPointer
        );
        assert_eq!(vrel_dataset_len(ptr::null()), 0);
        vrel_dataset_free(d);
        vrel_model_free(m);
        vrel_model_free(ptr::null_mut());
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(vrel_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/vrel.h")).unwrap();
    for f in [
        "vrel_last_error",
        "vrel_version",
        "vrel_model_load",
        "vrel_model_free",
        "vrel_model_info",
        "vrel_dataset_load",
        "vrel_dataset_free",
        "vrel_dataset_len",
        "vrel_predict",
        "vrel_evaluate",
        "typedef struct VrelModel VrelModel",
        "VREL_STATUS_BUFFER_TOO_SMALL = 8",
    ] {
        assert!(header.contains(f), "{f} missing from vrel.h");
    }
}

/// Compiles `tests/smoke.c` against the header and static library.
#[test]
fn c_program_links_and_runs() {
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    // target/<profile>/deps/<test binary>
    let profile_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = profile_dir.join("libvrel.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt, _, _) = fixture(tmp.path());
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = tmp.path().join("smoke");
    let out = Command::new(cc)
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).arg(&ckpt).arg(&data).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "{stdout}{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout.contains("recall@50"), "{stdout}");
}
