use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
d = 16
L = 1
M = 2
d_ff = 32
d_s = 8
d_c = 8
d_w = 5
d_h = 5
backbone_hidden = 4
cls_hidden = 16

[train]
epochs = 1
batch_size = 8
warmup = 2

[data]
images = 6
canvas = 64
max_objects = 4
"#;

fn vrel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vrel")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn doublet_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let o = vrel(&[
        "gen-data",
        "--out",
        s(&data),
        "--mode",
        "doublet",
        "--seed",
        "3",
        "--config",
        s(&cfg),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = vrel(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&run),
        "--freeze-backbone",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("trainable"), "{stdout}");
    let ckpt = run.join("checkpoint");

    let metrics = tmp.path().join("m.jsonl");
    for _ in 0..2 {
        let o = vrel(&[
            "eval",
            "--data",
            s(&data),
            "--ckpt",
            s(&ckpt),
            "--k",
            "5,50",
            "--metrics",
            s(&metrics),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("recall@50"));
    }
    let lines: Vec<serde_json::Value> = fs::read_to_string(&metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0]["recall@5"].is_number());

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let image = manifest["splits"]["test"][0].as_u64().unwrap().to_string();
    let o = vrel(&["predict", "--data", s(&data), "--ckpt", s(&ckpt), "--image", &image]);
    assert_eq!(code(&o), 0);
    for line in String::from_utf8_lossy(&o.stdout).lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["score"].is_number());
    }

    let dump = tmp.path().join("dump");
    let records = fs::read_to_string(data.join("records.jsonl")).unwrap();
    let with_rel = records
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|r| !r["relations"].as_array().unwrap().is_empty())
        .unwrap();
    let id = with_rel["image_id"].as_u64().unwrap().to_string();
    let o = vrel(&[
        "dump-attention",
        "--data",
        s(&data),
        "--ckpt",
        s(&ckpt),
        "--image",
        &id,
        "--out",
        s(&dump),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<String> = fs::read_dir(&dump)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(names.iter().any(|n| n.ends_with("_subject_pred.pgm")));
    assert!(names.iter().any(|n| n.ends_with("_object_gt.pgm")));
    let o = vrel(&["predict", "--data", s(&data), "--ckpt", s(&ckpt), "--image", "999999"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    assert_eq!(code(&vrel(&["gen-data", "--out", s(&out), "--images", "0"])), 2);
    assert_eq!(code(&vrel(&["gen-data", "--out", s(&out), "--mode", "quadruplet"])), 2);
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[model]\nwidth = 3\n").unwrap();
    assert_eq!(code(&vrel(&["gen-data", "--out", s(&out), "--config", s(&bad)])), 2);
    assert_eq!(
        code(&vrel(&[
            "train",
            "--data",
            s(&tmp.path().join("missing")),
            "--out",
            s(&out)
        ])),
        1
    );
    assert_eq!(code(&vrel(&["no-such-command"])), 2);
}

#[test]
fn gradcheck_exit_codes() {
    let o = vrel(&["gradcheck", "--dims", "small"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = vrel(&["gradcheck", "--dims", "small", "--inject-fault", "gelu"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gelu"));
}
